//! Simulated federated training of the stain diffusion model.
//!
//! Each round every client copies the global weights, trains `E` local
//! epochs on its own stain vectors with a fresh optimizer, and uploads the
//! weights. The server replaces the global model with the size-weighted
//! mean of the uploads. Clients never see each other's data; the only
//! cross-client values are weights and the per-coordinate moments used for
//! standardization.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample_many, training_step, ClientMoments, DiffusionModel, StainSample, Standardizer,
    VarianceSchedule,
};
use crate::metrics::{frechet_distance, summarize_stain_set};
use crate::nn::{AdamW, DenoiserArch, ModelState};
use crate::rng::{derive, Domain};
use crate::stain::StainMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    #[serde(alias = "K")]
    pub clients: usize,
    #[serde(alias = "R")]
    pub rounds: usize,
    #[serde(alias = "E")]
    pub local_epochs: usize,
    #[serde(alias = "B")]
    pub batch_size: usize,
    #[serde(alias = "eta")]
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Samples drawn per condition after each round to log the Fréchet
    /// distance against that client's data; 0 disables the evaluation.
    pub eval_samples: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            clients: 2,
            rounds: 3,
            local_epochs: 300,
            batch_size: 65_536,
            lr: 2e-4,
            weight_decay: 3e-2,
            seed: 0,
            eval_samples: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("clients", self.clients),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "need lr > 0 and weight_decay >= 0, got {} and {}",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One client's training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    client_id: usize,
    samples: Vec<StainSample>,
}

impl ClientShard {
    pub fn new(client_id: usize, matrices: &[StainMatrix]) -> Self {
        ClientShard {
            client_id,
            samples: matrices
                .iter()
                .map(|m| StainSample::new(m, client_id))
                .collect(),
        }
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn samples(&self) -> &[StainSample] {
        &self.samples
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn matrices(&self) -> Vec<StainMatrix> {
        self.samples
            .iter()
            .map(|s| StainMatrix::from_row_major(s.vec).expect("shard holds valid stain matrices"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    /// One-based round index.
    pub round: usize,
    pub client_ids: Vec<usize>,
    /// Mean training loss over each client's last local epoch.
    pub losses: Vec<f64>,
    /// FD between samples of the aggregated model and each client's data,
    /// `None` when evaluation is disabled.
    pub fd: Vec<Option<f64>>,
    pub seconds: f64,
}

/// Weighted mean `sum_k (n_k / n) theta_k`.
pub fn aggregate(states: &[&ModelState], sizes: &[usize]) -> Result<ModelState> {
    if states.is_empty() || states.len() != sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} states with {} sizes",
            states.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "client sizes must be positive".into(),
        ));
    }
    if let Some(bad) = states.iter().find(|s| !s.same_layout(states[0])) {
        return Err(Error::Shape(format!(
            "cannot aggregate {:?} with {:?}",
            bad.arch, states[0].arch
        )));
    }
    let total: usize = sizes.iter().sum();
    let coef: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let mut out = states[0].clone();
    for (pi, param) in out.params_mut().iter_mut().enumerate() {
        let data = param.value.data_mut();
        // Start from the first term rather than zero so that a single state
        // is reproduced bit for bit.
        for (i, v) in data.iter_mut().enumerate() {
            let mut acc = coef[0] * states[0].params()[pi].value.data()[i];
            for k in 1..states.len() {
                acc += coef[k] * states[k].params()[pi].value.data()[i];
            }
            *v = acc;
        }
    }
    Ok(out)
}

/// Trains a copy of `global` on one shard for `cfg.local_epochs` epochs.
///
/// The result depends only on the global weights, the shard, the config and
/// the round: the random stream is derived from `(seed, client, round)`.
pub fn train_local(
    global: &DiffusionModel,
    shard: &ClientShard,
    cfg: &FedConfig,
    round: usize,
) -> Result<(ModelState, f64)> {
    if shard.size() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut model = global.clone();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = derive(
        cfg.seed,
        Domain::ClientTraining,
        shard.client_id as u64,
        round as u64,
    );
    let batch = cfg.batch_size.min(shard.size());
    let mut order: Vec<usize> = (0..shard.size()).collect();
    let mut buf = Vec::with_capacity(batch);
    let mut last_epoch_loss = 0.0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(batch) {
            buf.clear();
            buf.extend(chunk.iter().map(|&i| shard.samples[i]));
            let loss = training_step(&mut model, &mut opt, &buf, &mut rng)?;
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        last_epoch_loss = sum / seen as f64;
    }
    Ok((model.state, last_epoch_loss))
}

fn check_shards(cfg: &FedConfig, shards: &[ClientShard], arch: &DenoiserArch) -> Result<()> {
    if shards.is_empty() {
        return Err(Error::InvalidArgument("no client shards".into()));
    }
    if shards.len() != cfg.clients {
        return Err(Error::InvalidArgument(format!(
            "config declares {} clients but {} shards were given",
            cfg.clients,
            shards.len()
        )));
    }
    for (i, shard) in shards.iter().enumerate() {
        if shard.client_id != i + 1 {
            return Err(Error::InvalidArgument(format!(
                "shard {i} has client id {}, expected {}",
                shard.client_id,
                i + 1
            )));
        }
        if shard.size() == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} has no stain samples",
                shard.client_id
            )));
        }
    }
    if arch.num_conditions < shards.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} conditions for {} clients",
            arch.num_conditions,
            shards.len()
        )));
    }
    Ok(())
}

/// Runs the full federated schedule from a seeded initialization.
pub fn run_federated_training(
    cfg: &FedConfig,
    shards: &[ClientShard],
    arch: DenoiserArch,
    schedule: VarianceSchedule,
) -> Result<(DiffusionModel, Vec<RoundLog>)> {
    cfg.validate()?;
    check_shards(cfg, shards, &arch)?;
    let moments: Vec<ClientMoments> = shards
        .iter()
        .map(|s| ClientMoments::from_samples(&s.samples))
        .collect();
    let standardizer = Standardizer::from_moments(&moments)?;
    let mut rng = derive(cfg.seed, Domain::Init, 0, 0);
    let mut global = DiffusionModel::init(arch, schedule, standardizer, &mut rng)?;
    if let Some(s) = shards.iter().find(|s| s.size() < cfg.batch_size) {
        log::warn!(
            "batch size {} exceeds client {} shard of {}; using whole-shard batches where needed",
            cfg.batch_size,
            s.client_id,
            s.size()
        );
    }
    let sizes: Vec<usize> = shards.iter().map(ClientShard::size).collect();
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let updates: Vec<(ModelState, f64)> = shards
            .par_iter()
            .map(|shard| train_local(&global, shard, cfg, round))
            .collect::<Result<_>>()?;
        let states: Vec<&ModelState> = updates.iter().map(|(s, _)| s).collect();
        global.state = aggregate(&states, &sizes)?;
        let fd = evaluate_round(&global, shards, cfg, round)?;
        let log = RoundLog {
            round,
            client_ids: shards.iter().map(ClientShard::client_id).collect(),
            losses: updates.iter().map(|(_, l)| *l).collect(),
            fd,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}/{}: losses {:?} fd {:?} ({:.1}s)",
            cfg.rounds,
            log.losses,
            log.fd,
            log.seconds
        );
        logs.push(log);
    }
    Ok((global, logs))
}

fn evaluate_round(
    model: &DiffusionModel,
    shards: &[ClientShard],
    cfg: &FedConfig,
    round: usize,
) -> Result<Vec<Option<f64>>> {
    if cfg.eval_samples < 2 {
        return Ok(vec![None; shards.len()]);
    }
    shards
        .par_iter()
        .map(|shard| {
            if shard.size() < 2 {
                return Ok(None);
            }
            let c = shard.client_id;
            let mut rng = derive(cfg.seed, Domain::RoundEval, c as u64, round as u64);
            let generated = sample_many(model, c, cfg.eval_samples, &mut rng)?;
            let fd = frechet_distance(
                &summarize_stain_set(&generated)?,
                &summarize_stain_set(&shard.matrices())?,
            )?;
            Ok(Some(fd))
        })
        .collect()
}
