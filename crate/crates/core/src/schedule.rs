//! Variance schedules and closed-form diffusion quantities.
//!
//! Timesteps are 1-based (`1..=N`); `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Posterior noise level used by ancestral sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `σ_n² = (1 − ᾱ_{n−1}) / (1 − ᾱ_n) · β_n`.
    #[default]
    Posterior,
    /// `σ_n² = β_n`.
    Beta,
}

/// Everything needed to rebuild the tables; stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleSpec {
    /// Linear schedule whose β range is the usual `1e-4 → 0.02` rescaled by
    /// `1000 / N`, so the terminal ᾱ stays near zero for short chains.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            steps,
            beta_min: (1e-4 * scale).min(0.5),
            beta_max: (0.02 * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::scaled_linear(100)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    lambdas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return config("schedule needs at least one timestep");
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return config(format!(
                "schedule needs 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            ));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps)
                    .map(|n| (1.0 - f(n as f64) / f(n as f64 - 1.0)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let lambdas: Vec<f64> = alpha_bars
            .iter()
            .map(|&ab| 0.5 * (ab.ln() - (1.0 - ab).ln()))
            .collect();
        for w in alpha_bars.windows(2) {
            if !(w[1] < w[0]) {
                return config("alpha_bar must be strictly decreasing");
            }
        }
        for w in lambdas.windows(2) {
            if !(w[1] < w[0]) {
                return config("half-log-SNR must be strictly decreasing");
            }
        }
        Ok(DiffusionSchedule {
            spec: ScheduleSpec {
                kind,
                steps,
                beta_min,
                beta_max,
            },
            betas,
            alphas,
            alpha_bars,
            lambdas,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bars[n - 1]
        }
    }

    /// Half-log-SNR; `+∞` at `n = 0`.
    pub fn lambda(&self, n: usize) -> f64 {
        if n == 0 {
            f64::INFINITY
        } else {
            self.lambdas[n - 1]
        }
    }

    /// Signal coefficient `sqrt(ᾱ_n)`.
    pub fn signal(&self, n: usize) -> f64 {
        self.alpha_bar(n).sqrt()
    }

    /// Noise coefficient `sqrt(1 − ᾱ_n)`.
    pub fn noise(&self, n: usize) -> f64 {
        (1.0 - self.alpha_bar(n)).sqrt()
    }

    /// Ancestral noise level; zero at `n = 1`.
    pub fn sigma(&self, n: usize, kind: SigmaKind) -> f64 {
        if n <= 1 {
            return 0.0;
        }
        let var = match kind {
            SigmaKind::Posterior => {
                (1.0 - self.alpha_bar(n - 1)) / (1.0 - self.alpha_bar(n)) * self.beta(n)
            }
            SigmaKind::Beta => self.beta(n),
        };
        var.sqrt()
    }

    pub fn check_timestep(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return input(format!("timestep {n} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// `z_n = sqrt(ᾱ_n)·z0 + sqrt(1−ᾱ_n)·eps`.
    pub fn forward_noise(&self, z0: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_timestep(n)?;
        if z0.len() != eps.len() {
            return input("noise and signal lengths differ");
        }
        let (a, s) = (self.signal(n), self.noise(n));
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }

    /// Inverse of [`forward_noise`](Self::forward_noise) for a given noise estimate.
    pub fn predict_x0(&self, zn: &[f64], n: usize, eps_hat: &[f64]) -> Vec<f64> {
        let (a, s) = (self.signal(n), self.noise(n));
        zn.iter().zip(eps_hat).map(|(z, e)| (z - s * e) / a).collect()
    }
}
