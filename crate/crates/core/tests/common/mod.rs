//! Central-difference gradient checks shared by the unit suite and the
//! acceptance runner, in f64 with step 1e-5.

#![allow(dead_code)]

use fedsda::nn::{predict_batch, DenoiserArch, Graph, ModelState, Tensor, Var};
use fedsda::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Scalar `sum(f(inputs) * weights)` with fixed random weights, so every
/// output element contributes with a distinct sensitivity.
fn scalar_loss<F>(f: &F, inputs: &[Tensor], weights_seed: u64) -> (Graph, Vec<Var>, Var)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = random(g.shape(out), &mut rng);
    let w = g.constant(w).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    (g, vars, loss)
}

/// Largest relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// over the inputs.
pub fn gradient_error<F>(f: F, inputs: Vec<Tensor>) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = scalar_loss(&f, &inputs, 99);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("input reached by loss").data().to_vec();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[k].data_mut()[i] += delta;
                    let (g, _, loss) = scalar_loss(&f, &shifted, 99);
                    g.value(loss).data()[0]
                };
                (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        };
        worst = worst.max(err);
    }
    worst
}

/// Relative gradient error of one op on random inputs of the given shapes.
pub fn op_error<F>(name: &str, f: F, shapes: &[&[usize]]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let inputs = shapes.iter().map(|s| random(s, &mut rng)).collect();
    gradient_error(f, inputs)
}

/// Relative gradient error of the full denoiser with respect to every
/// parameter, with the zero-initialized head perturbed away from zero.
pub fn denoiser_error(arch: DenoiserArch) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = ModelState::init(arch, &mut rng).unwrap();
    let params: Vec<Tensor> = state
        .params()
        .iter()
        .map(|p| {
            let mut t = p.value.clone();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
            t
        })
        .collect();
    let names: Vec<String> = state.params().iter().map(|p| p.name.clone()).collect();
    let noisy: Vec<f64> = (0..3 * arch.input_dim)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let timesteps = [1, 500, 1000];
    let conditions = [1, 2, 1];
    let f = |g: &mut Graph, vars: &[Var]| {
        let mut st = state.clone();
        for (p, v) in st.params_mut().iter_mut().zip(vars) {
            p.value = g.value(*v).clone();
        }
        let pv = fedsda::nn::ParamVars::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        predict_batch(g, &arch, &pv, &noisy, &timesteps, &conditions)
    };
    gradient_error(f, params)
}

/// Every differentiable graph op with its relative gradient error.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    vec![
        (
            "add",
            op_error("add", |g, v| g.add(v[0], v[1]), &[&[3, 4], &[3, 4]]),
        ),
        (
            "sub",
            op_error("sub", |g, v| g.sub(v[0], v[1]), &[&[3, 4], &[3, 4]]),
        ),
        (
            "mul",
            op_error("mul", |g, v| g.mul(v[0], v[1]), &[&[3, 4], &[3, 4]]),
        ),
        (
            "mul_self",
            op_error("mul_self", |g, v| g.mul(v[0], v[0]), &[&[5]]),
        ),
        (
            "scale",
            op_error("scale", |g, v| Ok(g.scale(v[0], -1.7)), &[&[2, 3]]),
        ),
        (
            "square",
            op_error("square", |g, v| Ok(g.square(v[0])), &[&[2, 3]]),
        ),
        (
            "gelu",
            op_error("gelu", |g, v| Ok(g.gelu(v[0])), &[&[4, 5]]),
        ),
        (
            "add_broadcast",
            op_error(
                "add_broadcast",
                |g, v| g.add_broadcast(v[0], v[1]),
                &[&[2, 3, 4], &[4]],
            ),
        ),
        (
            "add_broadcast_2d",
            op_error(
                "add_broadcast_2d",
                |g, v| g.add_broadcast(v[0], v[1]),
                &[&[2, 3, 4], &[3, 4]],
            ),
        ),
        (
            "mul_broadcast",
            op_error(
                "mul_broadcast",
                |g, v| g.mul_broadcast(v[0], v[1]),
                &[&[2, 3, 4], &[4]],
            ),
        ),
        (
            "matmul",
            op_error("matmul", |g, v| g.matmul(v[0], v[1]), &[&[3, 4], &[4, 5]]),
        ),
        (
            "matmul_3d",
            op_error(
                "matmul_3d",
                |g, v| g.matmul(v[0], v[1]),
                &[&[2, 3, 4], &[4, 2]],
            ),
        ),
        (
            "batch_matmul",
            op_error(
                "batch_matmul",
                |g, v| g.batch_matmul(v[0], v[1], false),
                &[&[2, 3, 4], &[2, 4, 5]],
            ),
        ),
        (
            "batch_matmul_t",
            op_error(
                "batch_matmul_t",
                |g, v| g.batch_matmul(v[0], v[1], true),
                &[&[2, 3, 4], &[2, 5, 4]],
            ),
        ),
        (
            "softmax",
            op_error("softmax", |g, v| Ok(g.softmax(v[0])), &[&[3, 5]]),
        ),
        (
            "layer_norm",
            op_error(
                "layer_norm",
                |g, v| Ok(g.layer_norm(v[0], 1e-5)),
                &[&[3, 6]],
            ),
        ),
        (
            "reshape",
            op_error("reshape", |g, v| g.reshape(v[0], &[6, 2]), &[&[3, 4]]),
        ),
        (
            "permute",
            op_error("permute", |g, v| g.permute(v[0], &[2, 0, 1]), &[&[2, 3, 4]]),
        ),
        (
            "gather",
            op_error("gather", |g, v| g.gather(v[0], &[2, 0, 2, 1]), &[&[3, 4]]),
        ),
        (
            "concat_0",
            op_error(
                "concat_0",
                |g, v| g.concat(&[v[0], v[1]], 0),
                &[&[2, 3], &[1, 3]],
            ),
        ),
        (
            "concat_1",
            op_error(
                "concat_1",
                |g, v| g.concat(&[v[0], v[1], v[0]], 1),
                &[&[2, 2, 3], &[2, 1, 3]],
            ),
        ),
        (
            "slice",
            op_error("slice", |g, v| g.slice(v[0], 1, 1, 3), &[&[2, 4, 3]]),
        ),
        ("sum", op_error("sum", |g, v| Ok(g.sum(v[0])), &[&[3, 4]])),
        (
            "mean",
            op_error("mean", |g, v| Ok(g.mean(v[0])), &[&[3, 4]]),
        ),
    ]
}
