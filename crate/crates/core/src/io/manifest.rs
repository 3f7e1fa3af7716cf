use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::list_pngs;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub client_id: usize,
    pub image_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stain_csv: Option<PathBuf>,
}

/// Where each client's images live. Relative paths are resolved against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationManifest {
    pub clients: Vec<ClientEntry>,
    pub image_size: [usize; 2],
    pub seed: u64,
}

impl FederationManifest {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Client ids must be exactly `1..=K` in order.
    pub fn validate_ids(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::InvalidArgument("manifest lists no clients".into()));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.client_id != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "manifest client {i} has id {}, expected {}",
                    c.client_id,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Reads and checks a manifest: dense ids, every image directory exists
    /// and holds at least one PNG. Paths come back absolute-or-as-resolved.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: FederationManifest = serde_json::from_str(&text)?;
        m.validate_ids()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut m.clients {
            c.image_dir = base.join(&c.image_dir);
            if let Some(csv) = &mut c.stain_csv {
                *csv = base.join(&*csv);
            }
            if !c.image_dir.is_dir() {
                return Err(Error::InvalidArgument(format!(
                    "client {} image directory {} does not exist",
                    c.client_id,
                    c.image_dir.display()
                )));
            }
            if list_pngs(&c.image_dir)?.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "client {} image directory {} has no PNG files",
                    c.client_id,
                    c.image_dir.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
