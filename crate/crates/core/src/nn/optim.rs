use crate::nn::{ModelState, Tensor};
use crate::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(2e-4, 3e-2)
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `state` given gradients in parameter order.
    pub fn step(&mut self, state: &mut ModelState, grads: &[Tensor]) -> Result<()> {
        let params = state.params_mut();
        if grads.len() != params.len()
            || params
                .iter()
                .zip(grads)
                .any(|(p, g)| p.value.shape() != g.shape())
        {
            return Err(Error::Shape(
                "gradients do not match the parameter layout".into(),
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.value.numel())
        {
            return Err(Error::Shape(
                "optimizer moments do not match the parameter layout".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = *w * decay - self.lr * update;
            }
        }
        Ok(())
    }
}
