use crate::{Error, Result};

/// Linear beta schedule with its cumulative products. Timesteps are one-based.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }
}

impl VarianceSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) || beta_end < beta_start {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(VarianceSchedule {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                got: t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas through `t`; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}
