use fedsda::nn::{forward_denoiser, AdamW, Backbone, DenoiserArch, Graph, ModelState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(arch: DenoiserArch, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ModelState::init(arch, &mut rng).unwrap();
    let flat: Vec<f64> = (0..s.param_count())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    s.set_flat(&flat).unwrap();
    s
}

#[test]
fn transformer_size_is_close_to_thirteen_thousand() {
    for k in [2, 3, 4] {
        let n = DenoiserArch::transformer(k).param_count();
        assert!((11_200..=15_200).contains(&n), "K={k}: {n}");
    }
    assert_eq!(DenoiserArch::transformer(2).param_count(), 13_089);
    assert_eq!(DenoiserArch::transformer(2).num_tokens(), 8);
}

#[test]
fn mlp_is_comparable_in_width() {
    let t = DenoiserArch::transformer(2);
    let m = DenoiserArch::mlp(2);
    assert_eq!(m.backbone, Backbone::Mlp);
    assert_eq!(m.hidden_size, t.hidden_size);
    let ratio = m.param_count() as f64 / t.param_count() as f64;
    assert!((0.2..=2.0).contains(&ratio), "{ratio}");
}

#[test]
fn fresh_model_predicts_zero_noise() {
    for arch in [DenoiserArch::transformer(2), DenoiserArch::mlp(2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ModelState::init(arch, &mut rng).unwrap();
        let out = forward_denoiser(&s, &[0.3, -1.0, 2.0, 0.1, 0.0, 5.0], 17, 2).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }
}

#[test]
fn prediction_is_deterministic_and_depends_on_inputs() {
    for arch in [DenoiserArch::transformer(2), DenoiserArch::mlp(2)] {
        let s = random_state(arch, 9);
        let x = [0.3, -1.0, 2.0, 0.1, 0.0, 5.0];
        let a = forward_denoiser(&s, &x, 10, 1).unwrap();
        assert_eq!(a, forward_denoiser(&s, &x, 10, 1).unwrap());
        assert_ne!(a, forward_denoiser(&s, &x, 11, 1).unwrap());
        assert_ne!(a, forward_denoiser(&s, &x, 10, 2).unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn bad_condition_and_timestep_rejected() {
    let s = random_state(DenoiserArch::transformer(2), 1);
    let x = [0.0; 6];
    assert!(forward_denoiser(&s, &x, 1, 0).is_err());
    assert!(forward_denoiser(&s, &x, 1, 3).is_err());
    assert!(forward_denoiser(&s, &x, 0, 1).is_err());
    assert!(forward_denoiser(&s, &x[..5], 1, 1).is_err());
}

#[test]
fn arch_validation() {
    let mut a = DenoiserArch::transformer(2);
    a.num_heads = 5;
    assert!(a.validate().is_err());
    let mut a = DenoiserArch::transformer(2);
    a.num_conditions = 0;
    assert!(a.validate().is_err());
    let mut a = DenoiserArch::mlp(2);
    a.hidden_size = 7;
    assert!(a.validate().is_err());
    assert!(DenoiserArch::mlp(2).validate().is_ok());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..24).map(|_| rng.random_range(-30.0..30.0)).collect();
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::new(vec![2, 3, 4], data).unwrap())
        .unwrap();
    let y = g.softmax(x);
    for row in g.value(y).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap())
        .unwrap();
    let y = g.layer_norm(x, 0.0);
    for row in g.value(y).data().chunks(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}

fn zero_grads(s: &ModelState) -> Vec<Tensor> {
    s.params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape().to_vec()))
        .collect()
}

#[test]
fn adamw_without_decay_ignores_zero_gradients() {
    let mut s = random_state(DenoiserArch::mlp(2), 5);
    let before = s.flat();
    let mut opt = AdamW::new(1e-2, 0.0);
    let g = zero_grads(&s);
    for _ in 0..3 {
        opt.step(&mut s, &g).unwrap();
    }
    assert_eq!(s.flat(), before);
    assert_eq!(opt.steps(), 3);
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut s = random_state(DenoiserArch::mlp(2), 6);
    let before = s.flat();
    let (lr, wd) = (1e-2, 0.5);
    let mut opt = AdamW::new(lr, wd);
    let g = zero_grads(&s);
    opt.step(&mut s, &g).unwrap();
    for (a, b) in s.flat().iter().zip(&before) {
        assert_eq!(*a, b * (1.0 - lr * wd));
    }
}

#[test]
fn adamw_first_step_moves_by_lr() {
    // With bias correction the first update is lr * g / (|g| + eps).
    let mut s = random_state(DenoiserArch::mlp(2), 7);
    let before = s.flat();
    let grads: Vec<Tensor> = s
        .params()
        .iter()
        .map(|p| Tensor::full(p.value.shape().to_vec(), -3.0))
        .collect();
    let mut opt = AdamW::new(1e-3, 0.0);
    opt.step(&mut s, &grads).unwrap();
    for (a, b) in s.flat().iter().zip(&before) {
        let expect = b + 1e-3 * 3.0 / (3.0 + 1e-8);
        assert!((a - expect).abs() < 1e-15);
    }
}

#[test]
fn adamw_minimizes_a_quadratic() {
    // f(w) = 0.5 * sum (w - c)^2, gradient w - c; optimum is c.
    let mut s = random_state(DenoiserArch::mlp(2), 8);
    let target: Vec<f64> = (0..s.param_count())
        .map(|i| (i % 7) as f64 * 0.1 - 0.3)
        .collect();
    let mut opt = AdamW::new(1e-2, 0.0);
    for step in 0..4_000 {
        if step == 3_000 {
            opt.lr = 1e-4;
        }
        let flat = s.flat();
        let mut grads = Vec::new();
        let mut off = 0;
        for p in s.params() {
            let n = p.value.numel();
            let g: Vec<f64> = (0..n).map(|i| flat[off + i] - target[off + i]).collect();
            grads.push(Tensor::new(p.value.shape().to_vec(), g).unwrap());
            off += n;
        }
        opt.step(&mut s, &grads).unwrap();
    }
    let err = s
        .flat()
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn adamw_rejects_mismatched_gradients() {
    let mut s = random_state(DenoiserArch::mlp(2), 1);
    let mut opt = AdamW::default();
    assert!(opt.step(&mut s, &[]).is_err());
}
