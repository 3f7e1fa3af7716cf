use fedsda::diffusion::{
    batch_loss, forward_sample, sample_many, training_step, DiffusionModel, StainSample,
    Standardizer, VarianceSchedule, STAIN_DIM,
};
use fedsda::nn::{AdamW, DenoiserArch};
use fedsda::stain::StainMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Product of `1 - beta` over a linear ramp, accumulated in log space.
fn alpha_bar_oracle(big_t: usize, b0: f64, b1: f64, t: usize) -> f64 {
    (1..=t)
        .map(|s| {
            let beta = b0 + (b1 - b0) * (s - 1) as f64 / (big_t - 1) as f64;
            (-beta).ln_1p()
        })
        .sum::<f64>()
        .exp()
}

#[test]
fn alpha_bar_matches_log_space_product() {
    let s = VarianceSchedule::default();
    for t in [1, 2, 10, 500, 999, 1000] {
        let expect = alpha_bar_oracle(1000, 1e-4, 0.02, t);
        assert!(
            (s.alpha_bar(t) - expect).abs() < 1e-12 * expect.max(1e-6),
            "t={t}"
        );
    }
    assert!(s.alpha_bar(1000) < 1e-4);
}

#[test]
fn forward_moments_match_closed_form() {
    let s = VarianceSchedule::default();
    let x0 = [0.65, 0.70, 0.29, 0.07, 0.99, 0.11];
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 500, 1000] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0; STAIN_DIM];
        let mut sq = [0.0; STAIN_DIM];
        for _ in 0..n {
            let eps: [f64; STAIN_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let x = forward_sample(&s, &x0, t, &eps).unwrap();
            for i in 0..STAIN_DIM {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        let var_expect = 1.0 - ab;
        for i in 0..STAIN_DIM {
            let mean = sum[i] / n as f64;
            let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
            let se = (var_expect / n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0[i]).abs() < 3.0 * se, "t={t} i={i}");
            assert!((var / var_expect - 1.0).abs() < 0.02, "t={t} i={i}: {var}");
        }
    }
}

fn model(arch: DenoiserArch, seed: u64) -> DiffusionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiffusionModel::init(
        arch,
        VarianceSchedule::default(),
        Standardizer::default(),
        &mut rng,
    )
    .unwrap()
}

fn samples(n: usize, c: usize) -> Vec<StainSample> {
    (0..n)
        .map(|_| StainSample::new(&StainMatrix::reference(), c))
        .collect()
}

#[test]
fn untrained_loss_is_the_noise_energy() {
    // A fresh model predicts zero, so the loss is E||eps||^2 = 6.
    let m = model(DenoiserArch::transformer(2), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let loss = batch_loss(&m, &samples(4_000, 1), &mut rng).unwrap();
    assert!((loss / 6.0 - 1.0).abs() < 0.05, "{loss}");
}

#[test]
fn training_lowers_the_loss() {
    let mut m = model(DenoiserArch::mlp(1), 2);
    let data = samples(64, 1);
    let mut opt = AdamW::new(1e-2, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eval = |m: &DiffusionModel| {
        batch_loss(m, &samples(2_000, 1), &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
    };
    let before = eval(&m);
    for _ in 0..200 {
        training_step(&mut m, &mut opt, &data, &mut rng).unwrap();
    }
    let after = eval(&m);
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn samples_are_valid_stain_matrices() {
    let m = model(DenoiserArch::transformer(2), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = sample_many(&m, 2, 8, &mut rng).unwrap();
    assert_eq!(out.len(), 8);
    assert!(out.iter().all(StainMatrix::is_valid));
    assert!(sample_many(&m, 3, 1, &mut rng).is_err());
    assert!(sample_many(&m, 1, 0, &mut rng).unwrap().is_empty());
}

#[test]
fn model_rejects_wrong_input_dim() {
    let mut arch = DenoiserArch::mlp(2);
    arch.input_dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(DiffusionModel::init(
        arch,
        VarianceSchedule::default(),
        Standardizer::default(),
        &mut rng
    )
    .is_err());
}
