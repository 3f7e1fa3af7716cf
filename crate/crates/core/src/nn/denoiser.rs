//! Noise-prediction network for flattened stain matrices.
//!
//! The transformer backbone treats every scalar of the noisy input as its
//! own token (a shared affine map from the scalar to the hidden size),
//! appends a sinusoidal timestep token and a learned condition token, adds
//! position embeddings, and runs a single pre-norm transformer block. A
//! shared linear decoder maps each stain token back to a scalar. This is
//! the all-inputs-as-tokens layout of U-ViT reduced to one block.
//!
//! The MLP backbone is the ablation baseline: input, timestep and condition
//! embeddings are summed and passed through one hidden layer.

use serde::{Deserialize, Serialize};

use crate::nn::{Graph, Init, ModelState, ParamVars, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserArch {
    pub backbone: Backbone,
    pub hidden_size: usize,
    pub num_heads: usize,
    /// Scalars per input vector (3 x r = 6 for H&E).
    pub input_dim: usize,
    pub num_conditions: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
}

/// Transformer feed-forward expansion.
const TRANSFORMER_FFN_MULT: usize = 4;
/// MLP hidden-layer expansion.
const MLP_FFN_MULT: usize = 2;

impl DenoiserArch {
    pub fn transformer(num_conditions: usize) -> Self {
        DenoiserArch {
            backbone: Backbone::Transformer,
            hidden_size: 32,
            num_heads: 8,
            input_dim: 6,
            num_conditions,
            ffn_mult: TRANSFORMER_FFN_MULT,
        }
    }

    pub fn mlp(num_conditions: usize) -> Self {
        DenoiserArch {
            backbone: Backbone::Mlp,
            num_heads: 0,
            ffn_mult: MLP_FFN_MULT,
            ..DenoiserArch::transformer(num_conditions)
        }
    }

    /// Sequence length seen by the transformer: input tokens + timestep + condition.
    pub fn num_tokens(&self) -> usize {
        self.input_dim + 2
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hidden_size == 0 || self.input_dim == 0 || self.ffn_mult == 0 {
            return bad(format!("degenerate architecture {self:?}"));
        }
        if !self.hidden_size.is_multiple_of(2) {
            return bad(format!("hidden_size {} must be even", self.hidden_size));
        }
        if self.num_conditions == 0 {
            return bad("num_conditions must be at least 1".into());
        }
        if self.backbone == Backbone::Transformer
            && (self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads))
        {
            return bad(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        Ok(())
    }

    /// Parameter names, shapes and initializers, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        use Init::*;
        let (d, p, k, f) = (
            self.hidden_size,
            self.input_dim,
            self.num_conditions,
            self.ffn_mult * self.hidden_size,
        );
        let specs: Vec<(&str, Vec<usize>, Init)> = match self.backbone {
            Backbone::Transformer => vec![
                ("tok.weight", vec![1, d], TruncNormal),
                ("tok.bias", vec![d], Zeros),
                ("cond.table", vec![k, d], Normal),
                ("pos", vec![self.num_tokens(), d], TruncNormal),
                ("block.ln1.gain", vec![d], Ones),
                ("block.ln1.bias", vec![d], Zeros),
                ("block.attn.qkv.weight", vec![d, 3 * d], TruncNormal),
                ("block.attn.out.weight", vec![d, d], TruncNormal),
                ("block.attn.out.bias", vec![d], Zeros),
                ("block.ln2.gain", vec![d], Ones),
                ("block.ln2.bias", vec![d], Zeros),
                ("block.ffn.fc1.weight", vec![d, f], TruncNormal),
                ("block.ffn.fc1.bias", vec![f], Zeros),
                ("block.ffn.fc2.weight", vec![f, d], TruncNormal),
                ("block.ffn.fc2.bias", vec![d], Zeros),
                ("final_ln.gain", vec![d], Ones),
                ("final_ln.bias", vec![d], Zeros),
                ("head.weight", vec![d, 1], Zeros),
                ("head.bias", vec![1], Zeros),
            ],
            Backbone::Mlp => vec![
                ("in.weight", vec![p, d], TruncNormal),
                ("in.bias", vec![d], Zeros),
                ("time.weight", vec![d, d], TruncNormal),
                ("time.bias", vec![d], Zeros),
                ("cond.table", vec![k, d], Normal),
                ("hidden.weight", vec![d, f], TruncNormal),
                ("hidden.bias", vec![f], Zeros),
                ("head.weight", vec![f, p], Zeros),
                ("head.bias", vec![p], Zeros),
            ],
        };
        specs
            .into_iter()
            .map(|(n, s, i)| (n.to_string(), s, i))
            .collect()
    }
}

/// Sinusoidal features of the timestep, `[sin(t f_0..), cos(t f_0..)]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Records the batched forward pass on `graph` and returns the `[batch, input_dim]`
/// noise prediction.
///
/// `noisy` is row-major `[batch, input_dim]`; `timesteps` and `conditions`
/// are one-based and have one entry per row.
pub fn predict_batch(
    graph: &mut Graph,
    arch: &DenoiserArch,
    params: &ParamVars,
    noisy: &[f64],
    timesteps: &[usize],
    conditions: &[usize],
) -> Result<Var> {
    let batch = timesteps.len();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if conditions.len() != batch || noisy.len() != batch * arch.input_dim {
        return Err(Error::Shape(format!(
            "batch of {batch}: {} conditions, {} input values",
            conditions.len(),
            noisy.len()
        )));
    }
    if let Some(&c) = conditions
        .iter()
        .find(|&&c| c == 0 || c > arch.num_conditions)
    {
        return Err(Error::ConditionOutOfRange {
            got: c,
            max: arch.num_conditions,
        });
    }
    if timesteps.contains(&0) {
        return Err(Error::InvalidArgument("timesteps are one-based".into()));
    }
    let d = arch.hidden_size;
    let x = graph.constant(Tensor::new(vec![batch, arch.input_dim], noisy.to_vec())?)?;
    let tfeat: Vec<f64> = timesteps
        .iter()
        .flat_map(|&t| timestep_features(t, d))
        .collect();
    let tfeat = graph.constant(Tensor::new(vec![batch, d], tfeat)?)?;
    let rows: Vec<usize> = conditions.iter().map(|c| c - 1).collect();
    match arch.backbone {
        Backbone::Transformer => transformer(graph, arch, params, x, tfeat, &rows),
        Backbone::Mlp => mlp(graph, arch, params, x, tfeat, &rows),
    }
}

fn linear(g: &mut Graph, p: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.weight"))?)?;
    g.add_broadcast(y, p.get(&format!("{name}.bias"))?)
}

fn norm(g: &mut Graph, p: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let y = g.layer_norm(x, LN_EPS);
    let y = g.mul_broadcast(y, p.get(&format!("{name}.gain"))?)?;
    g.add_broadcast(y, p.get(&format!("{name}.bias"))?)
}

fn transformer(
    g: &mut Graph,
    arch: &DenoiserArch,
    p: &ParamVars,
    x: Var,
    tfeat: Var,
    cond_rows: &[usize],
) -> Result<Var> {
    let (b, n, d, h) = (
        cond_rows.len(),
        arch.input_dim,
        arch.hidden_size,
        arch.num_heads,
    );
    let s = arch.num_tokens();
    let dh = d / h;

    let tokens = g.reshape(x, &[b, n, 1])?;
    let tokens = linear(g, p, tokens, "tok")?;
    let temb = g.reshape(tfeat, &[b, 1, d])?;

    let cemb = g.gather(p.get("cond.table")?, cond_rows)?;
    let cemb = g.reshape(cemb, &[b, 1, d])?;

    let seq = g.concat(&[tokens, temb, cemb], 1)?;
    let seq = g.add_broadcast(seq, p.get("pos")?)?;

    // Multi-head self-attention.
    let hn = norm(g, p, seq, "block.ln1")?;
    let qkv = g.matmul(hn, p.get("block.attn.qkv.weight")?)?;
    let mut heads = Vec::with_capacity(3);
    for part in 0..3 {
        let t = g.slice(qkv, 2, part * d, (part + 1) * d)?;
        let t = g.reshape(t, &[b, s, h, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        heads.push(g.reshape(t, &[b * h, s, dh])?);
    }
    let scores = g.batch_matmul(heads[0], heads[1], true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.batch_matmul(attn, heads[2], false)?;
    let ctx = g.reshape(ctx, &[b, h, s, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, s, d])?;
    let ctx = linear(g, p, ctx, "block.attn.out")?;
    let seq = g.add(seq, ctx)?;

    // Feed-forward.
    let hn = norm(g, p, seq, "block.ln2")?;
    let ff = linear(g, p, hn, "block.ffn.fc1")?;
    let ff = g.gelu(ff);
    let ff = linear(g, p, ff, "block.ffn.fc2")?;
    let seq = g.add(seq, ff)?;

    let out = norm(g, p, seq, "final_ln")?;
    let out = g.slice(out, 1, 0, n)?;
    let out = linear(g, p, out, "head")?;
    g.reshape(out, &[b, n])
}

fn mlp(
    g: &mut Graph,
    _arch: &DenoiserArch,
    p: &ParamVars,
    x: Var,
    tfeat: Var,
    cond_rows: &[usize],
) -> Result<Var> {
    let hx = linear(g, p, x, "in")?;
    let ht = linear(g, p, tfeat, "time")?;
    let hc = g.gather(p.get("cond.table")?, cond_rows)?;
    let h = g.add(hx, ht)?;
    let h = g.add(h, hc)?;
    let h = g.gelu(h);
    let h = linear(g, p, h, "hidden")?;
    let h = g.gelu(h);
    linear(g, p, h, "head")
}

/// Single-sample noise prediction.
pub fn forward_denoiser(
    state: &ModelState,
    noisy: &[f64],
    timestep: usize,
    condition: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let params = state.register(&mut g, false)?;
    let out = predict_batch(
        &mut g,
        &state.arch,
        &params,
        noisy,
        &[timestep],
        &[condition],
    )?;
    Ok(g.value(out).data().to_vec())
}
