//! Synthetic H&E-like federations with known stain matrices.
//!
//! Every client has its own stain cluster. Each image draws `w` from the
//! client cluster and gets two smooth density fields: a sparse
//! hematoxylin field of round nuclei and a broad eosin field that thins
//! out inside nuclei and vanishes in a few gaps (white background).

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MANIFEST_FILE;
use super::{create_dir, write_png, write_stain_csv, ClientEntry, FederationManifest, StainRecord};
use crate::rng::{derive, Domain};
use crate::stain::{
    reconstruct_with_illuminant, DensityMap, RgbImage, StainMatrix, DEFAULT_ILLUMINANT,
};
use crate::{Error, Result};

// Two presets; intermediate clients interpolate between them.
const CLUSTER_A: [f64; 6] = [0.65, 0.70, 0.29, 0.07, 0.99, 0.11];
const CLUSTER_B: [f64; 6] = [0.50, 0.78, 0.37, 0.15, 0.90, 0.40];

// Stream ids under `Domain::Synthetic`: the stain draws and the density
// fields of a client use separate streams so either can be regenerated alone.
const STAIN_STREAM: u64 = 0;
const DENSITY_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Per-client cluster centers, column-major `[w11, w21, w31, w12, w22, w32]`.
    pub cluster_means: Vec<[f64; 6]>,
    /// Standard deviation of the Gaussian jitter added to each entry before
    /// projection onto valid stain matrices.
    pub cluster_std: f64,
    pub images_per_client: usize,
    pub width: usize,
    pub height: usize,
    /// Length scale of the density fields in pixels.
    pub smoothness: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::with_clients(2)
    }
}

impl SyntheticSpec {
    pub fn with_clients(k: usize) -> Self {
        let cluster_means = (0..k)
            .map(|i| {
                let t = if k > 1 {
                    i as f64 / (k - 1) as f64
                } else {
                    0.0
                };
                std::array::from_fn(|j| (1.0 - t) * CLUSTER_A[j] + t * CLUSTER_B[j])
            })
            .collect();
        SyntheticSpec {
            cluster_means,
            cluster_std: 0.03,
            images_per_client: 20,
            width: 64,
            height: 64,
            smoothness: 4.0,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.cluster_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.cluster_means.is_empty() {
            return bad("synthetic spec needs at least one client".into());
        }
        for (i, m) in self.cluster_means.iter().enumerate() {
            let w = StainMatrix::from_column_major(*m)
                .map_err(|e| Error::InvalidArgument(format!("cluster {}: {e}", i + 1)))?;
            // Canonical order must not swap the columns, or the cluster would
            // describe a different matrix than written.
            let normalized = |c: &[f64]| {
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.iter().map(|v| v / n).collect::<Vec<_>>()
            };
            if (w.column(0)[0] - normalized(&m[..3])[0]).abs() > 1e-12 {
                return bad(format!(
                    "cluster {} lists the eosin-like column first",
                    i + 1
                ));
            }
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return bad(format!(
                "cluster_std must be >= 0, got {}",
                self.cluster_std
            ));
        }
        if self.width == 0 || self.height == 0 || self.images_per_client == 0 {
            return bad("images must be non-empty".into());
        }
        if self.smoothness.is_nan() || self.smoothness <= 0.0 {
            return bad(format!("smoothness must be > 0, got {}", self.smoothness));
        }
        Ok(())
    }
}

/// `count` stain matrices from client `client_id`'s cluster (one-based).
pub fn sample_client_stains(
    spec: &SyntheticSpec,
    client_id: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<StainMatrix>> {
    spec.validate()?;
    let mean =
        spec.cluster_means
            .get(client_id.wrapping_sub(1))
            .ok_or(Error::ConditionOutOfRange {
                got: client_id,
                max: spec.num_clients(),
            })?;
    let mut rng = derive(seed, Domain::Synthetic, client_id as u64, STAIN_STREAM);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: [f64; 6] = std::array::from_fn(|j| {
            mean[j] + spec.cluster_std * rng.sample::<f64, _>(StandardNormal)
        });
        if let Some(w) = StainMatrix::project([[v[0], v[1], v[2]], [v[3], v[4], v[5]]]) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Smooth non-negative hematoxylin/eosin densities for one image.
pub fn synthesize_density(
    width: usize,
    height: usize,
    smoothness: f64,
    rng: &mut ChaCha8Rng,
) -> DensityMap {
    let n = width * height;
    let area = n as f64;
    let coords = |p: usize| ((p % width) as f64, (p / width) as f64);

    let nuclei = ((area / 150.0).round() as usize).max(1);
    let mut hema = vec![0.0; n];
    for _ in 0..nuclei {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = smoothness * rng.random_range(0.6..1.2);
        let amp = rng.random_range(0.6..1.4);
        for (p, v) in hema.iter_mut().enumerate() {
            let (x, y) = coords(p);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            *v += amp * (-d2 / (2.0 * r * r)).exp();
        }
    }

    let sigma = 2.0 * smoothness;
    let bumps = ((area / (sigma * sigma)).round() as usize).max(4);
    let mut field = vec![0.0; n];
    for _ in 0..bumps {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let amp: f64 = rng.sample(StandardNormal);
        for (p, v) in field.iter_mut().enumerate() {
            let (x, y) = coords(p);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let mean = field.iter().sum::<f64>() / area;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / area)
        .sqrt()
        .max(1e-12);
    let eosin: Vec<f64> = field
        .iter()
        .zip(&hema)
        .map(|(f, h)| {
            let base = (0.5 + 0.3 * (f - mean) / std).max(0.0);
            base * (1.0 - 0.8 * h.min(1.0))
        })
        .collect();

    let mut values = hema;
    values.extend(eosin);
    DensityMap::new(n, values).expect("densities are finite and non-negative")
}

/// Unquantized intensities `I0 exp(-w h)` per pixel.
pub fn render_intensity(w: &StainMatrix, h: &DensityMap, i0: f64) -> Vec<[f64; 3]> {
    crate::stain::model_optical_density(w, h)
        .into_iter()
        .map(|od| od.map(|v| i0 * (-v).exp()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticClient {
    pub client_id: usize,
    pub stains: Vec<StainMatrix>,
    pub densities: Vec<DensityMap>,
    pub images: Vec<RgbImage>,
}

/// Builds the whole federation in memory.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticClient>> {
    spec.validate()?;
    (1..=spec.num_clients())
        .map(|c| {
            let stains = sample_client_stains(spec, c, spec.images_per_client, seed)?;
            let mut rng = derive(seed, Domain::Synthetic, c as u64, DENSITY_STREAM);
            let densities: Vec<DensityMap> = (0..spec.images_per_client)
                .map(|_| synthesize_density(spec.width, spec.height, spec.smoothness, &mut rng))
                .collect();
            let images = stains
                .iter()
                .zip(&densities)
                .map(|(w, h)| {
                    reconstruct_with_illuminant(w, h, spec.width, spec.height, DEFAULT_ILLUMINANT)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SyntheticClient {
                client_id: c,
                stains,
                densities,
                images,
            })
        })
        .collect()
}

/// Writes `client_<k>/img_<i>.png`, `client_<k>/stains.csv` (ground truth)
/// and `manifest.json` under `out_dir`. The returned manifest is the one
/// written, with paths relative to `out_dir`; use [`FederationManifest::load`]
/// to get resolved paths.
pub fn generate_synthetic_federation(
    spec: &SyntheticSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<FederationManifest> {
    let clients = synthesize(spec, seed)?;
    create_dir(out_dir)?;
    let mut entries = Vec::with_capacity(clients.len());
    for client in &clients {
        let dir_name = format!("client_{}", client.client_id);
        let dir = out_dir.join(&dir_name);
        create_dir(&dir)?;
        let mut records = Vec::with_capacity(client.images.len());
        for (i, (img, w)) in client.images.iter().zip(&client.stains).enumerate() {
            let name = format!("img_{i:04}");
            write_png(&dir.join(format!("{name}.png")), img)?;
            records.push(StainRecord {
                image: name,
                stains: *w,
            });
        }
        write_stain_csv(&dir.join("stains.csv"), &records)?;
        entries.push(ClientEntry {
            client_id: client.client_id,
            image_dir: dir_name.clone().into(),
            stain_csv: Some(Path::new(&dir_name).join("stains.csv")),
        });
    }
    let manifest = FederationManifest {
        clients: entries,
        image_size: [spec.width, spec.height],
        seed,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
