//! End-to-end run over a federation manifest: separate every image, train
//! the conditional diffusion model across clients, align every client, and
//! report how far the client stain distributions moved together.
//!
//! Layout under the output directory:
//!
//! ```text
//! separation/client_<k>/stains.csv      fitted stain matrix per image
//! separation/client_<k>/<stem>_h{1,2}.png density maps (optional)
//! model.bin, rounds.csv                 trained model and per-round log
//! aligned/client_<k>/<stem>__c<j>.png   image re-rendered under condition j
//! aligned/client_<k>/alignment.csv      src,dst,target_condition,ssim
//! aligned/client_<k>/stains.csv         stain matrices refitted after alignment
//! summary.json, summary.csv             metrics before and after alignment
//! ```
//!
//! Summaries hold no timings, so two runs with the same inputs and seed
//! write identical bytes.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_client, StainGenerator};
use crate::diffusion::{save_model, DiffusionModel, VarianceSchedule};
use crate::fedsim::{run_federated_training, ClientShard, FedConfig, RoundLog};
use crate::io::{
    create_dir, read_png_dir, write_density_png, write_png, write_round_log, write_stain_csv,
    FederationManifest, StainRecord,
};
use crate::metrics::{pairwise_fd, ssim, wasserstein_1d};
use crate::nn::{Backbone, DenoiserArch};
use crate::stain::{separate, RgbImage, Separation, SeparationParams, StainMatrix, NUM_STAINS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fed: FedConfig,
    pub backbone: Backbone,
    pub schedule: ScheduleConfig,
    pub separation: SeparationParams,
    /// Also write density maps from the separation stage.
    pub write_densities: bool,
    /// Per-client stain CSVs, in client order; the training input of
    /// `train-diffusion`. Ignored by the pipeline.
    pub stain_csvs: Vec<PathBuf>,
}

impl PipelineConfig {
    pub fn arch(&self, num_conditions: usize) -> DenoiserArch {
        match self.backbone {
            Backbone::Transformer => DenoiserArch::transformer(num_conditions),
            Backbone::Mlp => DenoiserArch::mlp(num_conditions),
        }
    }
}

/// Separates images in parallel, keeping input order.
pub fn separate_images(
    images: &[(String, RgbImage)],
    params: &SeparationParams,
) -> Vec<Result<Separation>> {
    images
        .par_iter()
        .map(|(_, img)| separate(img, params))
        .collect()
}

/// Writes `stains.csv` (and density PNGs when asked) for the successful
/// separations; failures are logged and skipped. Returns the records written.
pub fn write_separations(
    dir: &Path,
    images: &[(String, RgbImage)],
    separations: &[Result<Separation>],
    densities: bool,
) -> Result<Vec<StainRecord>> {
    create_dir(dir)?;
    let mut records = Vec::with_capacity(images.len());
    for ((stem, img), sep) in images.iter().zip(separations) {
        match sep {
            Ok(sep) => {
                if densities {
                    for s in 0..NUM_STAINS {
                        let path = dir.join(format!("{stem}_h{}.png", s + 1));
                        write_density_png(&path, &sep.density, s, img.width(), img.height())?;
                    }
                }
                records.push(StainRecord {
                    image: stem.clone(),
                    stains: sep.stains,
                });
            }
            Err(e) => log::warn!("{stem}: separation failed ({e}); skipped"),
        }
    }
    write_stain_csv(&dir.join("stains.csv"), &records)?;
    Ok(records)
}

/// One row of `alignment.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub src: String,
    pub dst: String,
    pub target_condition: usize,
    pub ssim: f64,
}

/// Aligns one client and writes the re-rendered images plus `alignment.csv`
/// into `out_dir`. Returns the aligned images in input order with their records.
pub fn align_and_write<G: StainGenerator + ?Sized>(
    images: &[(String, RgbImage)],
    generator: &G,
    client_id: usize,
    k: usize,
    seed: u64,
    params: &SeparationParams,
    out_dir: &Path,
) -> Result<(Vec<RgbImage>, Vec<AlignRecord>)> {
    create_dir(out_dir)?;
    let plain: Vec<RgbImage> = images.iter().map(|(_, img)| img.clone()).collect();
    let aligned = align_client(&plain, generator, client_id, k, seed, params)?;
    let conditions = aligned.plan.target_conditions();
    let mut records = Vec::with_capacity(images.len());
    for (((stem, src), out), &c) in images.iter().zip(&aligned.images).zip(&conditions) {
        let dst = format!("{stem}__c{c}.png");
        write_png(&out_dir.join(&dst), out)?;
        records.push(AlignRecord {
            src: format!("{stem}.png"),
            dst,
            target_condition: c,
            ssim: ssim(src, out)?,
        });
    }
    let path = out_dir.join("alignment.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((aligned.images, records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFd {
    pub a: usize,
    pub b: usize,
    pub fd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdBlock {
    pub pairwise: Vec<PairFd>,
    pub mean_pairwise_fd: Option<f64>,
}

impl FdBlock {
    fn from_sets(sets: &[Vec<StainMatrix>]) -> Result<Self> {
        let pairwise: Vec<PairFd> = pairwise_fd(sets)?
            .into_iter()
            .map(|(a, b, fd)| PairFd { a, b, fd })
            .collect();
        let mean_pairwise_fd = (!pairwise.is_empty())
            .then(|| pairwise.iter().map(|p| p.fd).sum::<f64>() / pairwise.len() as f64);
        Ok(FdBlock {
            pairwise,
            mean_pairwise_fd,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientAlignment {
    pub client: usize,
    pub images: usize,
    /// Images whose separation failed before training or after alignment.
    pub separation_failures: usize,
    pub mean_ssim: f64,
    pub mean_wd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentBlock {
    pub per_client: Vec<ClientAlignment>,
    /// Over all images, original vs aligned.
    pub mean_ssim: f64,
    pub mean_wd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub losses: Vec<f64>,
    pub fd: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub clients: usize,
    pub seed: u64,
    pub backbone: Backbone,
    pub param_count: usize,
    pub training: Vec<RoundSummary>,
    pub before: FdBlock,
    pub after: FdBlock,
    pub alignment: AlignmentBlock,
}

impl Summary {
    /// Flat `metric,client_a,client_b,value` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "client_a", "client_b", "value"])?;
        let mut row =
            |m: &str, a: String, b: String, v: f64| w.write_record([m, &a, &b, &v.to_string()]);
        for (name, block) in [("fd_before", &self.before), ("fd_after", &self.after)] {
            for p in &block.pairwise {
                row(name, p.a.to_string(), p.b.to_string(), p.fd)?;
            }
            if let Some(m) = block.mean_pairwise_fd {
                row(&format!("mean_{name}"), String::new(), String::new(), m)?;
            }
        }
        for c in &self.alignment.per_client {
            row("ssim", c.client.to_string(), String::new(), c.mean_ssim)?;
            row("wd", c.client.to_string(), String::new(), c.mean_wd)?;
        }
        row(
            "mean_ssim",
            String::new(),
            String::new(),
            self.alignment.mean_ssim,
        )?;
        row(
            "mean_wd",
            String::new(),
            String::new(),
            self.alignment.mean_wd,
        )?;
        for r in &self.training {
            for (i, (loss, fd)) in r.losses.iter().zip(&r.fd).enumerate() {
                let client = (i + 1).to_string();
                row(
                    &format!("round{}_loss", r.round),
                    client.clone(),
                    String::new(),
                    *loss,
                )?;
                if let Some(fd) = fd {
                    row(&format!("round{}_fd", r.round), client, String::new(), *fd)?;
                }
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every stage; a failure is reported with the stage name and leaves
/// the outputs of earlier stages on disk.
pub fn run_pipeline(
    manifest: &FederationManifest,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<Summary> {
    manifest.validate_ids()?;
    config.separation.validate()?;
    let k = manifest.num_clients();
    let mut fed = config.fed.clone();
    if fed.clients != k {
        log::info!(
            "using {k} clients from the manifest (config said {})",
            fed.clients
        );
        fed.clients = k;
    }
    fed.validate()?;
    let schedule = config.schedule.build()?;
    let arch = config.arch(k);
    arch.validate()?;
    create_dir(out_dir)?;

    // Separation.
    let stage = Error::in_stage;
    let mut corpora = Vec::with_capacity(k);
    let mut before_sets = Vec::with_capacity(k);
    let mut failures = Vec::with_capacity(k);
    for entry in &manifest.clients {
        let c = entry.client_id;
        let images = read_png_dir(&entry.image_dir).map_err(stage("separate"))?;
        let seps = separate_images(&images, &config.separation);
        let dir = out_dir.join("separation").join(format!("client_{c}"));
        let records = write_separations(&dir, &images, &seps, config.write_densities)
            .map_err(stage("separate"))?;
        if records.is_empty() {
            return Err(stage("separate")(Error::InvalidArgument(format!(
                "no image of client {c} could be separated"
            ))));
        }
        log::info!(
            "client {c}: separated {}/{} images",
            records.len(),
            images.len()
        );
        failures.push(images.len() - records.len());
        before_sets.push(records.iter().map(|r| r.stains).collect::<Vec<_>>());
        corpora.push(images);
    }

    // Federated training.
    let shards: Vec<ClientShard> = before_sets
        .iter()
        .enumerate()
        .map(|(i, set)| ClientShard::new(i + 1, set))
        .collect();
    let (model, logs) =
        run_federated_training(&fed, &shards, arch, schedule).map_err(stage("train"))?;
    save_model(&model, &out_dir.join("model.bin")).map_err(stage("train"))?;
    write_round_log(&out_dir.join("rounds.csv"), &logs).map_err(stage("train"))?;

    // Alignment.
    let (after_sets, per_client, totals) =
        align_all(&model, &corpora, &config.separation, fed.seed, out_dir)
            .map_err(stage("align"))?;

    // Metrics.
    let summary = (|| -> Result<Summary> {
        let per_client: Vec<ClientAlignment> = per_client
            .into_iter()
            .zip(&failures)
            .map(|(mut c, &f)| {
                c.separation_failures += f;
                c
            })
            .collect();
        let n_images = totals.0 as f64;
        let summary = Summary {
            clients: k,
            seed: fed.seed,
            backbone: config.backbone,
            param_count: arch.param_count(),
            training: logs.iter().map(round_summary).collect(),
            before: FdBlock::from_sets(&before_sets)?,
            after: FdBlock::from_sets(&after_sets)?,
            alignment: AlignmentBlock {
                per_client,
                mean_ssim: totals.1 / n_images,
                mean_wd: totals.2 / n_images,
            },
        };
        write_text(
            &out_dir.join("summary.json"),
            &(serde_json::to_string_pretty(&summary)? + "\n"),
        )?;
        write_text(&out_dir.join("summary.csv"), &summary.to_csv()?)?;
        Ok(summary)
    })()
    .map_err(stage("metrics"))?;
    Ok(summary)
}

fn round_summary(log: &RoundLog) -> RoundSummary {
    RoundSummary {
        round: log.round,
        losses: log.losses.clone(),
        fd: log.fd.clone(),
    }
}

type AlignOutcome = (
    Vec<Vec<StainMatrix>>,
    Vec<ClientAlignment>,
    (usize, f64, f64),
);

fn align_all(
    model: &DiffusionModel,
    corpora: &[Vec<(String, RgbImage)>],
    params: &SeparationParams,
    seed: u64,
    out_dir: &Path,
) -> Result<AlignOutcome> {
    let k = corpora.len();
    let mut after_sets = Vec::with_capacity(k);
    let mut per_client = Vec::with_capacity(k);
    let (mut count, mut ssim_sum, mut wd_sum) = (0usize, 0.0, 0.0);
    for (i, images) in corpora.iter().enumerate() {
        let c = i + 1;
        let dir = out_dir.join("aligned").join(format!("client_{c}"));
        let (aligned, records) = align_and_write(images, model, c, k, seed, params, &dir)?;
        let named: Vec<(String, RgbImage)> = records
            .iter()
            .map(|r| r.dst.trim_end_matches(".png").to_string())
            .zip(aligned.iter().cloned())
            .collect();
        let refit = separate_images(&named, params);
        let kept = write_separations(&dir, &named, &refit, false)?;
        let wd: f64 = images
            .iter()
            .zip(&aligned)
            .map(|((_, a), b)| wasserstein_1d(a, b))
            .sum();
        let ss: f64 = records.iter().map(|r| r.ssim).sum();
        let n = images.len();
        per_client.push(ClientAlignment {
            client: c,
            images: n,
            separation_failures: n - kept.len(),
            mean_ssim: ss / n as f64,
            mean_wd: wd / n as f64,
        });
        count += n;
        ssim_sum += ss;
        wd_sum += wd;
        after_sets.push(kept.into_iter().map(|r| r.stains).collect());
    }
    Ok((after_sets, per_client, (count, ssim_sum, wd_sum)))
}
