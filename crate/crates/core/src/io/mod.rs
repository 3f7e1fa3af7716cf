//! Persistence and dataset plumbing: PNG images, stain CSVs, federation
//! manifests, config files, and the synthetic federation generator.

mod config;
mod manifest;
mod png;
mod stain_csv;
mod synth;

pub use config::{load_config, parse_config};
pub use manifest::{ClientEntry, FederationManifest, MANIFEST_FILE};
pub use png::{
    list_pngs, read_density_png, read_png, read_png_dir, write_density_png, write_png,
    DENSITY_PNG_SCALE,
};
pub use stain_csv::{
    read_stain_csv, write_stain_csv, write_stain_records, StainRecord, STAIN_CSV_HEADER,
};
pub use synth::{
    generate_synthetic_federation, render_intensity, sample_client_stains, synthesize,
    synthesize_density, SyntheticClient, SyntheticSpec,
};

use std::path::Path;

use crate::fedsim::RoundLog;
use crate::{Error, Result};

/// Writes `round,client,loss,fd,seconds`, one row per client per round.
/// Missing FD values are left empty.
pub fn write_round_log(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "client", "loss", "fd", "seconds"])?;
    for log in logs {
        for (i, client) in log.client_ids.iter().enumerate() {
            w.write_record([
                log.round.to_string(),
                client.to_string(),
                log.losses[i].to_string(),
                log.fd[i].map(|v| v.to_string()).unwrap_or_default(),
                log.seconds.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `create_dir_all` with the path in the error.
pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
