use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule of the forward noising process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Variance of the reverse-step posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }
}

/// Betas evenly spaced from `beta_start` to `beta_end` over `steps` values.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar[steps - 1] <= 0.0 {
        return Err(Error::Invalid(format!(
            "cumulative alpha underflows over {steps} steps with betas up to {beta_end}"
        )));
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape {
            expected: vec![x0.len()],
            actual: vec![eps.len()],
        });
    }
    if t >= schedule.steps() {
        return Err(Error::Invalid(format!("step {t} outside [0, {})", schedule.steps())));
    }
    let a = schedule.alpha_bar[t].sqrt();
    let s = (1.0 - schedule.alpha_bar[t]).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_pred: &[f64], eps_true: &[f64]) -> Result<f64> {
    if eps_pred.len() != eps_true.len() {
        return Err(Error::Shape {
            expected: vec![eps_true.len()],
            actual: vec![eps_pred.len()],
        });
    }
    if eps_pred.is_empty() {
        return Err(Error::Empty("noise tensor"));
    }
    Ok(eps_pred.iter().zip(eps_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps_pred.len() as f64)
}

/// Gradient of [`diffusion_loss`] with respect to `eps_pred`.
pub fn diffusion_loss_grad(eps_pred: &[f64], eps_true: &[f64]) -> Result<Vec<f64>> {
    if eps_pred.len() != eps_true.len() {
        return Err(Error::Shape {
            expected: vec![eps_true.len()],
            actual: vec![eps_pred.len()],
        });
    }
    let n = eps_pred.len() as f64;
    Ok(eps_pred.iter().zip(eps_true).map(|(a, b)| 2.0 * (a - b) / n).collect())
}
