//! Error quantification: genealogy-based variance estimators, root counts,
//! combination of independent runs, particle independent Metropolis–Hastings,
//! and closed-form Gaussian reference values.

use std::collections::BTreeMap;

use rand::Rng;

use crate::engine::{run, ParticleSystem, SamplerConfig, ScheduleSpec};
use crate::error::{Result, SmcError};
use crate::numerics::{log_sum_exp, normal_quantile};
use crate::paths::Path;
use crate::resampling::multinomial_ancestors;
use crate::rng::{self, derive_seed, Purpose};

/// Number of distinct root labels.
pub fn count_roots(roots: &[usize]) -> usize {
    let mut sorted = roots.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

/// Particles grouped by time-zero ancestor.
#[derive(Debug, Clone, PartialEq)]
pub struct GenealogySummary {
    pub n: usize,
    /// Resampling events behind the current weights.
    pub events: usize,
    pub class_sizes: BTreeMap<usize, usize>,
    /// Total normalized weight per root.
    pub class_weights: BTreeMap<usize, f64>,
}

impl GenealogySummary {
    pub fn from_system(system: &ParticleSystem) -> Self {
        let mut class_sizes = BTreeMap::new();
        let mut class_weights = BTreeMap::new();
        for (root, lw) in system.roots.iter().zip(&system.log_weights) {
            *class_sizes.entry(*root).or_insert(0) += 1;
            *class_weights.entry(*root).or_insert(0.0) += lw.exp();
        }
        Self {
            n: system.len(),
            events: system.resample_events,
            class_sizes,
            class_weights,
        }
    }

    /// Equal weights, e.g. straight after resampling.
    pub fn from_roots(roots: &[usize], events: usize) -> Self {
        let n = roots.len();
        let mut class_sizes = BTreeMap::new();
        for r in roots {
            *class_sizes.entry(*r).or_insert(0) += 1;
        }
        let class_weights = class_sizes.iter().map(|(r, c)| (*r, *c as f64 / n as f64)).collect();
        Self {
            n,
            events,
            class_sizes,
            class_weights,
        }
    }

    pub fn root_count(&self) -> usize {
        self.class_sizes.len()
    }

    fn lineage_factor(&self) -> f64 {
        let n = self.n as f64;
        (n / (n - 1.0)).powi(self.events as i32 + 1)
    }
}

fn require_two(n: usize) -> Result<()> {
    if n < 2 {
        return Err(SmcError::TooFewParticles { required: 2, got: n });
    }
    Ok(())
}

/// True when every step so far resampled, the setting the genealogy
/// estimators are derived for.
pub fn estimator_is_valid(system: &ParticleSystem) -> bool {
    system.resample_events + 1 >= system.step
}

fn warn_if_invalid(system: &ParticleSystem) {
    if !estimator_is_valid(system) {
        log::warn!(
            "variance estimate after {} steps with only {} resampling events",
            system.step,
            system.resample_events
        );
    }
}

/// `N · V(φ − π^N(φ))`, the genealogy estimate of the asymptotic variance of
/// `π^N(φ)`. Uses per-root aggregates, `O(N)`.
pub fn variance_estimator_phi(system: &ParticleSystem, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
    require_two(system.len())?;
    warn_if_invalid(system);
    let summary = GenealogySummary::from_system(system);
    let w = system.weights();
    let values: Vec<f64> = (0..system.len()).map(|n| phi(system.particle(n))).collect();
    let estimate: f64 = w.iter().zip(&values).map(|(a, b)| a * b).sum();
    let mut class_sums: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total = 0.0;
    for n in 0..system.len() {
        let term = w[n] * (values[n] - estimate);
        total += term;
        *class_sums.entry(system.roots[n]).or_insert(0.0) += term;
    }
    let same_root: f64 = class_sums.values().map(|s| s * s).sum();
    let distinct_pairs = total * total - same_root;
    let v = total * total - summary.lineage_factor() * distinct_pairs;
    Ok(system.len() as f64 * v)
}

/// `N · V(1)`, the genealogy estimate of the relative variance of `Z^N` times `N`.
pub fn variance_estimator_z(summary: &GenealogySummary) -> Result<f64> {
    require_two(summary.n)?;
    let same_root: f64 = summary.class_weights.values().map(|w| w * w).sum();
    let v = 1.0 - summary.lineage_factor() * (1.0 - same_root);
    Ok(summary.n as f64 * v)
}

/// Stable 64-bit FNV-1a hash of a configuration description.
pub fn config_hash(description: &str) -> u64 {
    description.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub log_z: f64,
    pub estimates: Vec<f64>,
}

/// Independent runs of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRunSet {
    pub config_hash: u64,
    pub runs: Vec<RunSummary>,
}

impl MultiRunSet {
    pub fn new(config_hash: u64) -> Self {
        Self {
            config_hash,
            runs: Vec::new(),
        }
    }

    pub fn push(&mut self, config_hash: u64, log_z: f64, estimates: Vec<f64>) -> Result<()> {
        if config_hash != self.config_hash {
            return Err(SmcError::ConfigMismatch);
        }
        self.runs.push(RunSummary { log_z, estimates });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    fn normalized_z(&self) -> Result<Vec<f64>> {
        let log_z: Vec<f64> = self.runs.iter().map(|r| r.log_z).collect();
        let total = log_sum_exp(&log_z);
        if total == f64::NEG_INFINITY {
            return Err(SmcError::AllZero);
        }
        Ok(log_z.iter().map(|l| (l - total).exp()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combined {
    /// `Σ_r Z_r π_r(φ) / Σ_r Z_r`.
    pub estimate: f64,
    /// `log` of the plain average of the `Z_r`.
    pub log_z: f64,
}

/// Z-weighted combination of the `index`-th estimate across runs.
pub fn combine_runs(set: &MultiRunSet, index: usize) -> Result<Combined> {
    if set.is_empty() {
        return Err(SmcError::config("no runs to combine"));
    }
    let w = set.normalized_z()?;
    let estimate = set.runs.iter().zip(&w).map(|(r, wr)| wr * r.estimates[index]).sum();
    let log_z: Vec<f64> = set.runs.iter().map(|r| r.log_z).collect();
    Ok(Combined {
        estimate,
        log_z: log_sum_exp(&log_z) - (set.len() as f64).ln(),
    })
}

/// Normal-approximation interval for the combined estimate, with the
/// self-normalized (ratio) variance `Σ_r w̄_r² (π_r(φ) − π̄(φ))²`.
pub fn combined_ci(set: &MultiRunSet, index: usize, level: f64) -> Result<(f64, f64)> {
    if set.len() < 2 {
        return Err(SmcError::config("a combined interval needs at least two runs"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(SmcError::config(format!("level {level} outside (0, 1)")));
    }
    let w = set.normalized_z()?;
    let centre = combine_runs(set, index)?.estimate;
    let var: f64 = set
        .runs
        .iter()
        .zip(&w)
        .map(|(r, wr)| wr * wr * (r.estimates[index] - centre).powi(2))
        .sum();
    let half = normal_quantile(0.5 + level / 2.0) * var.sqrt();
    Ok((centre - half, centre + half))
}

/// `min(1, Z_new / Z_current)`.
pub fn pimh_acceptance_probability(log_z_current: f64, log_z_new: f64) -> f64 {
    (log_z_new - log_z_current).exp().min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PimhState {
    pub log_z: f64,
    pub particle: Vec<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PimhChain {
    pub states: Vec<PimhState>,
}

impl PimhChain {
    /// Fraction of accepted proposals after the initial state.
    pub fn acceptance_rate(&self) -> f64 {
        let moves = self.states.len().saturating_sub(1);
        if moves == 0 {
            return 0.0;
        }
        self.states[1..].iter().filter(|s| s.accepted).count() as f64 / moves as f64
    }
}

/// Particle independent Metropolis–Hastings: each iteration runs a fresh
/// sampler, picks one terminal particle by weight and accepts the pair with
/// probability `min(1, Z_new / Z_current)`.
pub fn pimh_chain(path: &Path, config: &SamplerConfig, iterations: usize, seed: u64) -> Result<PimhChain> {
    if config.adapt || matches!(config.schedule, ScheduleSpec::Adaptive(_)) {
        return Err(SmcError::config(
            "particle MCMC needs a frozen, non-adaptive sampler configuration",
        ));
    }
    let mut states: Vec<PimhState> = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(seed, it as u64);
        let out = run(path, &cfg)?;
        let weights = out.system.weights();
        let k = multinomial_ancestors(&weights, 1, &mut rng::stream(seed, Purpose::Select, it as u64, 0))[0];
        let proposal = out.system.particle(k).to_vec();
        let log_z = out.log_z();
        let state = match states.last() {
            None => PimhState {
                log_z,
                particle: proposal,
                accepted: true,
            },
            Some(current) => {
                let alpha = pimh_acceptance_probability(current.log_z, log_z);
                let u: f64 = rng::stream(seed, Purpose::Accept, it as u64, 0).random();
                if u < alpha {
                    PimhState {
                        log_z,
                        particle: proposal,
                        accepted: true,
                    }
                } else {
                    PimhState {
                        accepted: false,
                        ..current.clone()
                    }
                }
            }
        };
        states.push(state);
    }
    Ok(PimhChain { states })
}

/// `χ²(π_t ‖ π_{t−1})` on the geometric path between `N(μ_0, Σ)` and
/// `N(μ, Σ)` with diagonal `Σ`: `exp((λ_t − λ_{t−1})² |μ − μ_0|²_{Σ⁻¹}) − 1`.
pub fn gaussian_chi2(mu0: &[f64], mu: &[f64], sigma_diag: &[f64], lambda_prev: f64, lambda_t: f64) -> f64 {
    let dist2: f64 = mu0
        .iter()
        .zip(mu)
        .zip(sigma_diag)
        .map(|((a, b), s)| (a - b).powi(2) / s)
        .sum();
    ((lambda_t - lambda_prev).powi(2) * dist2).exp_m1()
}

/// Equally spaced temperatures for the matched-covariance Gaussian pair at
/// Mahalanobis distance `distance`, each step with `χ² = κ⁻¹ − 1`.
pub fn gaussian_closed_form_schedule(distance: f64, kappa: f64) -> Vec<f64> {
    let delta = 1.0 / kappa - 1.0;
    let step = delta.ln_1p().sqrt() / distance;
    let steps = (distance / delta.ln_1p().sqrt()).ceil() as usize;
    (1..=steps.max(1)).map(|t| (t as f64 * step).min(1.0)).collect()
}

/// `Var[Z^N / Z] = Π_t (1 + χ²_t / N) − 1` for a perfect forward kernel.
pub fn perfect_kernel_variance(chis: &[f64], n: usize) -> f64 {
    chis.iter().map(|c| 1.0 + c / n as f64).product::<f64>() - 1.0
}
