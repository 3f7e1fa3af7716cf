//! Conditional DDPM over flattened 3x2 stain matrices.
//!
//! Training minimizes `E ||eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t, c)||^2`
//! with `t` uniform over the schedule. Sampling runs the full ancestral chain
//! with reverse variance `beta_t` and no noise on the last step.
//!
//! Stain vectors live in a narrow range, so they are standardized per
//! coordinate with federation-wide moments before training and mapped back
//! after sampling. Sampled vectors are projected onto valid stain matrices
//! (negatives clamped, columns renormalized).

mod file;
mod schedule;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{predict_batch, AdamW, DenoiserArch, Graph, ModelState};
use crate::stain::{split_row_major, StainMatrix};
use crate::{Error, Result};

pub use file::{
    load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC,
};
pub use schedule::VarianceSchedule;

/// Length of a flattened stain matrix.
pub const STAIN_DIM: usize = 6;

/// Resampling budget for chains whose projection leaves an empty column.
pub const MAX_SAMPLE_ATTEMPTS: usize = 10;

/// One training vector: a row-major stain matrix and its client (condition).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainSample {
    pub vec: [f64; STAIN_DIM],
    pub client_id: usize,
}

impl StainSample {
    pub fn new(matrix: &StainMatrix, client_id: usize) -> Self {
        StainSample {
            vec: matrix.to_row_major(),
            client_id,
        }
    }
}

/// Per-client sufficient statistics; the only thing a client shares to
/// build the [`Standardizer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientMoments {
    pub count: usize,
    pub sum: [f64; STAIN_DIM],
    pub sum_sq: [f64; STAIN_DIM],
}

impl ClientMoments {
    pub fn from_samples(samples: &[StainSample]) -> Self {
        let mut m = ClientMoments {
            count: samples.len(),
            sum: [0.0; STAIN_DIM],
            sum_sq: [0.0; STAIN_DIM],
        };
        for s in samples {
            for i in 0..STAIN_DIM {
                m.sum[i] += s.vec[i];
                m.sum_sq[i] += s.vec[i] * s.vec[i];
            }
        }
        m
    }
}

/// Per-coordinate affine map to zero mean, unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; STAIN_DIM],
    pub std: [f64; STAIN_DIM],
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            mean: [0.0; STAIN_DIM],
            std: [1.0; STAIN_DIM],
        }
    }
}

impl Standardizer {
    pub fn from_moments(moments: &[ClientMoments]) -> Result<Self> {
        let n: usize = moments.iter().map(|m| m.count).sum();
        if n == 0 {
            return Err(Error::InvalidArgument("no samples to standardize".into()));
        }
        let nf = n as f64;
        let mut out = Standardizer::default();
        for i in 0..STAIN_DIM {
            let sum: f64 = moments.iter().map(|m| m.sum[i]).sum();
            let sum_sq: f64 = moments.iter().map(|m| m.sum_sq[i]).sum();
            let mean = sum / nf;
            let var = (sum_sq / nf - mean * mean).max(0.0);
            out.mean[i] = mean;
            out.std[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    pub fn apply(&self, v: &[f64; STAIN_DIM]) -> [f64; STAIN_DIM] {
        std::array::from_fn(|i| (v[i] - self.mean[i]) / self.std[i])
    }

    pub fn invert(&self, v: &[f64]) -> [f64; STAIN_DIM] {
        std::array::from_fn(|i| v[i] * self.std[i] + self.mean[i])
    }
}

/// Denoiser weights together with the schedule and data standardization
/// they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub state: ModelState,
    pub schedule: VarianceSchedule,
    pub standardizer: Standardizer,
}

impl DiffusionModel {
    pub fn init<R: Rng + ?Sized>(
        arch: DenoiserArch,
        schedule: VarianceSchedule,
        standardizer: Standardizer,
        rng: &mut R,
    ) -> Result<Self> {
        if arch.input_dim != STAIN_DIM {
            return Err(Error::InvalidArgument(format!(
                "stain denoiser needs input_dim {STAIN_DIM}, got {}",
                arch.input_dim
            )));
        }
        Ok(DiffusionModel {
            state: ModelState::init(arch, rng)?,
            schedule,
            standardizer,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.state.arch
    }

    pub fn num_conditions(&self) -> usize {
        self.state.arch.num_conditions
    }

    fn check_condition(&self, c: usize) -> Result<()> {
        if c == 0 || c > self.num_conditions() {
            return Err(Error::ConditionOutOfRange {
                got: c,
                max: self.num_conditions(),
            });
        }
        Ok(())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn forward_sample(
    schedule: &VarianceSchedule,
    x0: &[f64; STAIN_DIM],
    t: usize,
    noise: &[f64; STAIN_DIM],
) -> Result<[f64; STAIN_DIM]> {
    schedule.check(t)?;
    Ok(forward_unchecked(schedule.alpha_bar(t), x0, noise))
}

fn forward_unchecked(ab: f64, x0: &[f64; STAIN_DIM], noise: &[f64; STAIN_DIM]) -> [f64; STAIN_DIM] {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    std::array::from_fn(|i| a * x0[i] + b * noise[i])
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R) -> [f64; STAIN_DIM] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

struct LossGraph {
    graph: Graph,
    params: crate::nn::ParamVars,
    loss: crate::nn::Var,
}

fn build_loss<R: Rng + ?Sized>(
    model: &DiffusionModel,
    batch: &[StainSample],
    rng: &mut R,
    trainable: bool,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        model.check_condition(s.client_id)?;
        if s.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stain sample"));
        }
    }
    let big_t = model.schedule.timesteps();
    let mut noisy = Vec::with_capacity(batch.len() * STAIN_DIM);
    let mut target = Vec::with_capacity(batch.len() * STAIN_DIM);
    let mut timesteps = Vec::with_capacity(batch.len());
    for s in batch {
        let t = rng.random_range(1..=big_t);
        let eps = normal_vec(rng);
        let x0 = model.standardizer.apply(&s.vec);
        noisy.extend(forward_unchecked(model.schedule.alpha_bar(t), &x0, &eps));
        target.extend(eps);
        timesteps.push(t);
    }
    let conditions: Vec<usize> = batch.iter().map(|s| s.client_id).collect();

    let mut graph = Graph::new();
    let params = model.state.register(&mut graph, trainable)?;
    let pred = predict_batch(
        &mut graph,
        model.arch(),
        &params,
        &noisy,
        &timesteps,
        &conditions,
    )?;
    let target = graph.constant(crate::nn::Tensor::new(
        vec![batch.len(), STAIN_DIM],
        target,
    )?)?;
    let diff = graph.sub(pred, target)?;
    let sq = graph.square(diff);
    let total = graph.sum(sq);
    let loss = graph.scale(total, 1.0 / batch.len() as f64);
    Ok(LossGraph {
        graph,
        params,
        loss,
    })
}

/// Mean per-sample squared noise-prediction error on a fresh draw of
/// timesteps and noise, without updating the model.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &DiffusionModel,
    batch: &[StainSample],
    rng: &mut R,
) -> Result<f64> {
    let lg = build_loss(model, batch, rng, false)?;
    Ok(lg.graph.value(lg.loss).data()[0])
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn training_step<R: Rng + ?Sized>(
    model: &mut DiffusionModel,
    opt: &mut AdamW,
    batch: &[StainSample],
    rng: &mut R,
) -> Result<f64> {
    let mut lg = build_loss(model, batch, rng, true)?;
    lg.graph.backward(lg.loss)?;
    let grads = lg.params.gradients(&lg.graph);
    let loss = lg.graph.value(lg.loss).data()[0];
    opt.step(&mut model.state, &grads)?;
    Ok(loss)
}

/// Draws one stain matrix for condition `c`.
pub fn sample<R: Rng + ?Sized>(
    model: &DiffusionModel,
    c: usize,
    rng: &mut R,
) -> Result<StainMatrix> {
    Ok(sample_many(model, c, 1, rng)?.remove(0))
}

/// Draws `count` stain matrices for condition `c` with batched reverse chains.
pub fn sample_many<R: Rng + ?Sized>(
    model: &DiffusionModel,
    c: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<StainMatrix>> {
    model.check_condition(c)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let raw = reverse_chains(model, c, count, rng)?;
    let mut out = Vec::with_capacity(count);
    for chain in raw.chunks(STAIN_DIM) {
        let mut candidate = project(model, chain);
        let mut attempts = 1;
        while candidate.is_none() && attempts < MAX_SAMPLE_ATTEMPTS {
            candidate = project(model, &reverse_chains(model, c, 1, rng)?);
            attempts += 1;
        }
        out.push(candidate.ok_or(Error::SampleRejected(MAX_SAMPLE_ATTEMPTS))?);
    }
    Ok(out)
}

fn project(model: &DiffusionModel, standardized: &[f64]) -> Option<StainMatrix> {
    let raw = model.standardizer.invert(standardized);
    StainMatrix::project(split_row_major(raw))
}

/// Runs `count` ancestral chains from `x_T ~ N(0, I)` and returns the
/// standardized `x_0` rows.
fn reverse_chains<R: Rng + ?Sized>(
    model: &DiffusionModel,
    c: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let conditions = vec![c; count];
    ancestral_sample(&model.schedule, STAIN_DIM, count, rng, |x, t| {
        let mut graph = Graph::new();
        let params = model.state.register(&mut graph, false)?;
        let eps = predict_batch(
            &mut graph,
            model.arch(),
            &params,
            x,
            &vec![t; count],
            &conditions,
        )?;
        Ok(graph.value(eps).data().to_vec())
    })
}

/// The reverse process for any noise predictor.
///
/// `predict(x_t, t)` gets the row-major `[count, dim]` state and returns the
/// predicted noise in the same layout. Each step applies
/// `x <- (x - beta / sqrt(1 - ab) eps) / sqrt(alpha) + sqrt(beta) z`,
/// without `z` at `t = 1`.
pub fn ancestral_sample<R, F>(
    schedule: &VarianceSchedule,
    dim: usize,
    count: usize,
    rng: &mut R,
    mut predict: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut x: Vec<f64> = (0..count * dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    for t in (1..=schedule.timesteps()).rev() {
        let eps = predict(&x, t)?;
        if eps.len() != x.len() {
            return Err(Error::Shape(format!(
                "noise prediction has {} values for a state of {}",
                eps.len(),
                x.len()
            )));
        }
        let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        for (xi, ei) in x.iter_mut().zip(&eps) {
            *xi = (*xi - coef * ei) * inv_sqrt_alpha;
        }
        if t > 1 {
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sigma * z;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reverse diffusion chain"));
        }
    }
    Ok(x)
}
