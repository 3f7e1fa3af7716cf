use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{DenoiserArch, Graph, Tensor, Var};
use crate::{Error, Result};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with std 0.02, resampled outside two standard deviations.
    TruncNormal,
    /// Standard normal, used for the condition embedding table.
    Normal,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Denoiser weights: an architecture plus its named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: DenoiserArch,
    params: Vec<Param>,
}

impl ModelState {
    pub fn init<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape, init)| {
                let mut value = Tensor::zeros(shape);
                match init {
                    Init::Zeros => {}
                    Init::Ones => value.data_mut().fill(1.0),
                    Init::Normal => value
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.sample(StandardNormal)),
                    Init::TruncNormal => value
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = trunc_normal(rng) * INIT_STD),
                }
                Param { name, value }
            })
            .collect();
        Ok(ModelState { arch, params })
    }

    /// Rebuilds a state from deserialized parameters, checking them against the arch.
    pub fn from_params(arch: DenoiserArch, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture declares {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.value.shape() {
                return Err(Error::Shape(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            p.value.check_finite("model parameter")?;
        }
        Ok(ModelState { arch, params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// All parameter values concatenated in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ModelState) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Adds every parameter to `graph`, as differentiable leaves when `trainable`.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> Result<ParamVars> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let v = if trainable {
                    graph.leaf(p.value.clone())?
                } else {
                    graph.constant(p.value.clone())?
                };
                Ok((p.name.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(ParamVars { vars })
    }
}

/// Graph handles for a registered [`ModelState`], in parameter order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    /// Pairs names with existing graph handles, e.g. to drive a forward pass
    /// from leaves that were created outside [`ModelState::register`].
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    /// Gradients in parameter order, zero-filled for parameters the loss did not reach.
    pub fn gradients(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars()
            .map(|v| {
                graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
            })
            .collect()
    }
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
