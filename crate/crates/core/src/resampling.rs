//! Effective sample size, multinomial resampling and adaptive selection of
//! the next inverse temperature.

use rand::Rng;

use crate::error::{Result, SmcError};
use crate::numerics::log_sum_exp;
use crate::rng::StreamRng;

/// Log-weights with cached normalization.
#[derive(Debug, Clone)]
pub struct WeightVector {
    log_weights: Vec<f64>,
    log_total: f64,
    normalized: Vec<f64>,
    ess: f64,
}

impl WeightVector {
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        let log_total = log_sum_exp(&log_weights);
        if log_total == f64::NEG_INFINITY || log_total.is_nan() {
            return Err(SmcError::TotalParticleDeath);
        }
        let normalized: Vec<f64> = log_weights.iter().map(|w| (w - log_total).exp()).collect();
        let ess = 1.0 / normalized.iter().map(|w| w * w).sum::<f64>();
        Ok(Self {
            log_weights,
            log_total,
            normalized,
            ess,
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_log_weights(vec![0.0; n]).expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `log Σ exp(log w)`.
    pub fn log_total(&self) -> f64 {
        self.log_total
    }

    /// Normalized log-weights, `log W_n`.
    pub fn normalized_log_weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w - self.log_total).collect()
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn ess(&self) -> f64 {
        self.ess
    }

    pub fn ess_fraction(&self) -> f64 {
        self.ess / self.len() as f64
    }
}

/// `(Σw)² / Σw²` from log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    Ok(WeightVector::from_log_weights(log_weights.to_vec())?.ess())
}

/// I.i.d. categorical draws from `weights` (which must sum to one).
pub fn multinomial_ancestors(weights: &[f64], n_out: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let last_positive = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    (0..n_out)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let i = cumulative.partition_point(|c| *c <= u);
            i.min(last_positive)
        })
        .collect()
}

/// `ϱ̂(λ)`: the fraction `ESS/N` after reweighting uniformly weighted
/// particles by `exp((λ − λ_prev)·ℓ)`.
pub fn ess_fraction_at(lambda_prev: f64, lambda: f64, log_ratios: &[f64]) -> f64 {
    let uniform = vec![-(log_ratios.len() as f64).ln(); log_ratios.len()];
    conditional_ess(lambda - lambda_prev, log_ratios, &uniform)
}

/// Conditional ESS fraction `(Σ W u)² / Σ W u²` with `u = exp(Δ·ℓ)`; equals
/// the plain `ESS/N` when the base weights `W` are uniform.
fn conditional_ess(delta: f64, log_ratios: &[f64], log_base: &[f64]) -> f64 {
    let a: Vec<f64> = log_ratios
        .iter()
        .zip(log_base)
        .map(|(r, b)| if *r == f64::NEG_INFINITY { f64::NEG_INFINITY } else { b + delta * r })
        .collect();
    let b: Vec<f64> = log_ratios
        .iter()
        .zip(log_base)
        .map(|(r, b)| if *r == f64::NEG_INFINITY { f64::NEG_INFINITY } else { b + 2.0 * delta * r })
        .collect();
    (2.0 * log_sum_exp(&a) - log_sum_exp(&b)).exp()
}

/// Next inverse temperature: 1 if `ϱ̂(1) ≥ κ`, otherwise the bisection
/// solution of `ϱ̂(λ) = κ` on `(λ_prev, 1)`.
pub fn next_lambda(lambda_prev: f64, log_ratios: &[f64], kappa: f64, tol: f64) -> Result<f64> {
    let uniform = vec![-(log_ratios.len() as f64).ln(); log_ratios.len()];
    next_lambda_weighted(lambda_prev, log_ratios, &uniform, kappa, tol)
}

/// As [`next_lambda`], for a population carrying normalized log-weights.
///
/// The returned value is the upper end of the final bracket, so the fraction
/// at the returned `λ` is at most `κ`.
pub fn next_lambda_weighted(
    lambda_prev: f64,
    log_ratios: &[f64],
    log_base: &[f64],
    kappa: f64,
    tol: f64,
) -> Result<f64> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(SmcError::config(format!("kappa {kappa} outside (0, 1)")));
    }
    if !log_ratios.iter().zip(log_base).any(|(r, b)| r.is_finite() && b.is_finite()) {
        return Err(SmcError::TotalParticleDeath);
    }
    if log_ratios.iter().any(|r| r.is_nan() || *r == f64::INFINITY) {
        return Err(SmcError::config("non-finite log-ratio"));
    }
    let rho = |lambda: f64| conditional_ess(lambda - lambda_prev, log_ratios, log_base);
    if rho(1.0) >= kappa {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (lambda_prev, 1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rho(mid) >= kappa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// True iff `ESS/N < threshold`.
pub fn should_resample(weights: &WeightVector, threshold: f64) -> bool {
    weights.ess_fraction() < threshold
}

/// Tempering policy and accepted temperatures.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    pub kappa: f64,
    pub resample_threshold: f64,
    pub history: Vec<f64>,
}

impl ScheduleState {
    pub fn new(kappa: f64, resample_threshold: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(SmcError::config(format!("kappa {kappa} outside (0, 1)")));
        }
        if !(resample_threshold > 0.0 && resample_threshold <= 1.0) {
            return Err(SmcError::config(format!(
                "resample threshold {resample_threshold} outside (0, 1]"
            )));
        }
        Ok(Self {
            kappa,
            resample_threshold,
            history: vec![0.0],
        })
    }

    pub fn current_lambda(&self) -> f64 {
        *self.history.last().unwrap()
    }

    pub fn push(&mut self, lambda: f64) -> Result<()> {
        if lambda <= self.current_lambda() || lambda > 1.0 {
            return Err(SmcError::InvalidPathParameter(format!(
                "lambda {lambda} does not extend schedule ending at {}",
                self.current_lambda()
            )));
        }
        self.history.push(lambda);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.current_lambda() == 1.0
    }

    /// A fixed temperature list must run strictly increasing from 0 to 1.
    pub fn check_fixed(values: &[f64]) -> Result<()> {
        if values.len() < 2 || values[0] != 0.0 || *values.last().unwrap() != 1.0 {
            return Err(SmcError::config("fixed schedule must start at 0 and end at 1"));
        }
        if !values.windows(2).all(|w| w[0] < w[1]) {
            return Err(SmcError::config("fixed schedule must be strictly increasing"));
        }
        Ok(())
    }
}
