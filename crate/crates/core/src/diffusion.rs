//! Variance schedules and closed-form forward diffusion of inputs and targets.

use serde::{Deserialize, Serialize};

use crate::error::{DvaError, Result};
use crate::tensor::Tensor;

/// Which cumulative product the target diffusion uses. `Prime` is the
/// coupled target schedule; `Unprime` reuses the input schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetAlpha {
    #[default]
    Prime,
    Unprime,
}

/// Linear input schedule `beta_n` and the coupled target schedule
/// `beta'_n = gamma_scale * beta_n`. Index `n` runs over `1..=N`; cumulative
/// products are also defined at `n = 0` where they equal 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub gamma_scale: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_prime: Vec<f64>,
    alpha_bar_prime: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(n_steps: usize, beta_min: f64, beta_max: f64, gamma_scale: f64) -> Result<Self> {
        make_schedule(n_steps, beta_min, beta_max, gamma_scale)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(DvaError::contract(format!(
                "diffusion step {n} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        1.0 - self.beta[n - 1]
    }

    pub fn beta_prime(&self, n: usize) -> f64 {
        self.beta_prime[n - 1]
    }

    /// `prod_{i <= n} (1 - beta_i)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    pub fn alpha_bar_prime(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar_prime[n - 1]
        }
    }

    pub fn target_alpha_bar(&self, n: usize, source: TargetAlpha) -> f64 {
        match source {
            TargetAlpha::Prime => self.alpha_bar_prime(n),
            TargetAlpha::Unprime => self.alpha_bar(n),
        }
    }

    /// Denoising score-matching weight, `sqrt(1 - alpha_bar'_n)`.
    pub fn sigma(&self, n: usize) -> f64 {
        (1.0 - self.alpha_bar_prime(n)).max(0.0).sqrt()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bars_prime(&self) -> &[f64] {
        &self.alpha_bar_prime
    }
}

/// Linear `beta` from `beta_min` to `beta_max` over `n_steps`.
pub fn make_schedule(
    n_steps: usize,
    beta_min: f64,
    beta_max: f64,
    gamma_scale: f64,
) -> Result<DiffusionSchedule> {
    if n_steps == 0 {
        return Err(DvaError::config("diffusion needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DvaError::config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    if !(gamma_scale >= 0.0 && gamma_scale.is_finite()) {
        return Err(DvaError::config(format!("gamma_scale {gamma_scale} must be >= 0")));
    }
    if gamma_scale * beta_max >= 1.0 {
        return Err(DvaError::config(format!(
            "target noise exceeds unit variance: gamma_scale * beta_max = {}",
            gamma_scale * beta_max
        )));
    }
    let beta: Vec<f64> = (0..n_steps)
        .map(|i| {
            if n_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (n_steps - 1) as f64
            }
        })
        .collect();
    let beta_prime: Vec<f64> = beta.iter().map(|b| gamma_scale * b).collect();
    let cumprod = |betas: &[f64]| {
        betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect::<Vec<f64>>()
    };
    Ok(DiffusionSchedule {
        gamma_scale,
        alpha_bar: cumprod(&beta),
        alpha_bar_prime: cumprod(&beta_prime),
        beta,
        beta_prime,
    })
}

/// `sqrt(alpha_bar) * x + sqrt(1 - alpha_bar) * eps`.
pub fn diffuse_with(x: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(DvaError::contract(format!(
            "noise shape {:?} does not match {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).max(0.0).sqrt();
    Ok(x.zip_map(eps, |v, e| signal * v + noise * e))
}

/// Sample `X_n ~ q(X_n | X)` with caller-supplied standard-normal noise.
pub fn diffuse_input(x: &Tensor, schedule: &DiffusionSchedule, n: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(n)?;
    diffuse_with(x, schedule.alpha_bar(n), eps)
}

/// Sample `y_n ~ q(y_n | y)` on the coupled target schedule.
pub fn diffuse_target(y: &Tensor, schedule: &DiffusionSchedule, n: usize, eps: &Tensor) -> Result<Tensor> {
    diffuse_target_with(y, schedule, n, eps, TargetAlpha::Prime)
}

pub fn diffuse_target_with(
    y: &Tensor,
    schedule: &DiffusionSchedule,
    n: usize,
    eps: &Tensor,
    source: TargetAlpha,
) -> Result<Tensor> {
    schedule.check(n)?;
    diffuse_with(y, schedule.target_alpha_bar(n, source), eps)
}
