//! The sampler loop: initialization, reweighting, resampling, moves, lineage
//! and normalizing-constant bookkeeping.
//!
//! Exact kernels reweight, resample and then move, since their weights only
//! depend on the pre-move positions. Unadjusted kernels resample (when the
//! previous ESS is low), move, and then weight with the kernel increments.
//!
//! When resampling is skipped the particles keep their normalized
//! log-weights, and the next incremental estimate is `log Σ_n W_n w_n`. The
//! product of these estimates is the usual adaptive-resampling estimator of
//! `Z`; it reduces to the product of plain averages when every step resamples.
//!
//! The final step never resamples, so the terminal system is a weighted
//! sample whose roots still describe the genealogy behind the final weights.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::kernels::{adapt_preconditioner, apply_kernel, KernelSpec};
use crate::numerics::{log_sum_exp, par_map};
use crate::paths::{AdaptiveRule, Path, PathParam};
use crate::resampling::{multinomial_ancestors, WeightVector};
use crate::rng::{self, Purpose};
use crate::targets::TargetDensity;

/// One row of the per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub t: usize,
    pub lambda: f64,
    pub ess_fraction: f64,
    pub resampled: bool,
    pub log_inc_z: f64,
    pub root_count: usize,
    /// Mean acceptance rate for exact kernels, mean `|log-weight increment|` otherwise.
    pub accept: f64,
    pub wall_time: f64,
}

/// Weighted particles with their lineage.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub dim: usize,
    /// Row-major `N × dim`.
    pub positions: Vec<f64>,
    /// Normalized log-weights.
    pub log_weights: Vec<f64>,
    /// Index of each particle's time-zero ancestor (0-based).
    pub roots: Vec<usize>,
    pub step: usize,
    pub param: PathParam,
    pub log_z: f64,
    pub resample_events: usize,
    pub seed: u64,
}

impl ParticleSystem {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn particle(&self, n: usize) -> &[f64] {
        &self.positions[n * self.dim..(n + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn ess_fraction(&self) -> f64 {
        let sum_sq: f64 = self.log_weights.iter().map(|w| (2.0 * w).exp()).sum();
        1.0 / sum_sq / self.len() as f64
    }

    pub fn root_count(&self) -> usize {
        crate::diagnostics::count_roots(&self.roots)
    }

    /// Multinomial resampling with root relabeling.
    pub fn resample(&mut self, ancestors: &[usize]) {
        let d = self.dim;
        let mut positions = Vec::with_capacity(self.positions.len());
        for &a in ancestors {
            positions.extend_from_slice(&self.positions[a * d..(a + 1) * d]);
        }
        self.positions = positions;
        self.roots = ancestors.iter().map(|&a| self.roots[a]).collect();
        let uniform = -(ancestors.len() as f64).ln();
        self.log_weights = vec![uniform; ancestors.len()];
        self.resample_events += 1;
    }
}

/// Draws `n` particles from `pi0` with equal weights and identity roots.
pub fn initialize(pi0: &dyn TargetDensity, initial_param: PathParam, n: usize, seed: u64) -> Result<ParticleSystem> {
    if n == 0 {
        return Err(SmcError::TooFewParticles { required: 1, got: 0 });
    }
    let draws = par_map(n, |i| pi0.sample(&mut rng::stream(seed, Purpose::Initialize, 0, i as u64)));
    let mut positions = Vec::with_capacity(n * pi0.dim());
    for draw in draws {
        positions.extend(draw.ok_or_else(|| SmcError::config("initial distribution cannot be sampled exactly"))?);
    }
    Ok(ParticleSystem {
        dim: pi0.dim(),
        positions,
        log_weights: vec![-(n as f64).ln(); n],
        roots: (0..n).collect(),
        step: 0,
        param: initial_param,
        log_z: 0.0,
        resample_events: 0,
        seed,
    })
}

/// Self-normalized weighted average of a vector-valued test function.
pub fn weighted_estimate(system: &ParticleSystem, phi: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for n in 0..system.len() {
        let w = system.log_weights[n].exp();
        if w == 0.0 {
            continue;
        }
        let v = phi(system.particle(n));
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, vi) in acc.iter_mut().zip(v) {
            *a += w * vi;
        }
    }
    let total: f64 = system.weights().iter().sum();
    acc.iter().map(|a| a / total).collect()
}

/// Weighted mean and variance of each coordinate.
pub fn weighted_moments(system: &ParticleSystem) -> (Vec<f64>, Vec<f64>) {
    let d = system.dim;
    let w = system.weights();
    let mut mean = vec![0.0; d];
    for (n, wn) in w.iter().enumerate() {
        for i in 0..d {
            mean[i] += wn * system.positions[n * d + i];
        }
    }
    let mut var = vec![0.0; d];
    for (n, wn) in w.iter().enumerate() {
        for i in 0..d {
            var[i] += wn * (system.positions[n * d + i] - mean[i]).powi(2);
        }
    }
    (mean, var)
}

#[derive(Debug, Clone)]
pub enum ScheduleSpec {
    Adaptive(AdaptiveRule),
    /// Parameters visited after the initial one.
    Fixed(Vec<PathParam>),
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n: usize,
    pub seed: u64,
    pub kernel: KernelSpec,
    /// Re-estimate the preconditioner from the population at every step.
    pub adapt: bool,
    pub schedule: ScheduleSpec,
    pub resample_threshold: f64,
    /// Record elapsed seconds per step; off by default so traces are reproducible.
    pub timing: bool,
    /// Preconditioner per step, replayed instead of adapting.
    pub frozen_preconditioners: Option<Vec<Vec<f64>>>,
    pub max_steps: usize,
}

impl SamplerConfig {
    pub fn new(n: usize, seed: u64, kernel: KernelSpec, schedule: ScheduleSpec) -> Self {
        Self {
            n,
            seed,
            kernel,
            adapt: false,
            schedule,
            resample_threshold: 0.5,
            timing: false,
            frozen_preconditioners: None,
            max_steps: 100_000,
        }
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.n == 0 {
            return Err(SmcError::TooFewParticles { required: 1, got: 0 });
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(SmcError::config(format!(
                "resample threshold {} outside (0, 1]",
                self.resample_threshold
            )));
        }
        self.kernel.validate(path.dim())?;
        match &self.schedule {
            ScheduleSpec::Adaptive(rule) => {
                if !(rule.kappa > 0.0 && rule.kappa < 1.0) {
                    return Err(SmcError::config(format!("kappa {} outside (0, 1)", rule.kappa)));
                }
            }
            ScheduleSpec::Fixed(params) => {
                if params.last() != Some(&path.terminal_param()) {
                    return Err(SmcError::config("fixed schedule must end at the terminal parameter"));
                }
                for p in params {
                    path.at(*p)?;
                }
                if let Some(pre) = &self.frozen_preconditioners {
                    if pre.len() != params.len() {
                        return Err(SmcError::config("frozen preconditioners do not match the schedule length"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything an adaptive run decided, for a non-adaptive replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenSchedule {
    pub params: Vec<PathParam>,
    pub preconditioners: Vec<Vec<f64>>,
}

impl FrozenSchedule {
    /// A copy of `base` that replays this schedule without adaptation.
    pub fn replay_config(&self, base: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            schedule: ScheduleSpec::Fixed(self.params.clone()),
            frozen_preconditioners: Some(self.preconditioners.clone()),
            adapt: false,
            ..base.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SmcError::config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SmcError::config(format!("invalid frozen schedule: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub system: ParticleSystem,
    pub trace: Vec<RunRecord>,
    pub frozen: FrozenSchedule,
}

impl RunOutput {
    pub fn log_z(&self) -> f64 {
        self.system.log_z
    }

    pub fn steps(&self) -> usize {
        self.trace.len()
    }
}

pub fn run(path: &Path, config: &SamplerConfig) -> Result<RunOutput> {
    run_with_observer(path, config, |_, _| {})
}

/// Runs to the terminal parameter, calling `observer` after every step.
pub fn run_with_observer(
    path: &Path,
    config: &SamplerConfig,
    mut observer: impl FnMut(&ParticleSystem, &RunRecord),
) -> Result<RunOutput> {
    config.validate(path)?;
    let mut system = initialize(path.initial_distribution(), path.initial_param(), config.n, config.seed)?;
    let mut kernel = config.kernel.clone();
    let mut trace = Vec::new();
    let mut frozen = FrozenSchedule {
        params: Vec::new(),
        preconditioners: Vec::new(),
    };
    while !path.is_terminal(&system.param) {
        if system.step >= config.max_steps {
            return Err(SmcError::config(format!(
                "schedule did not reach the terminal parameter within {} steps",
                config.max_steps
            )));
        }
        let record = match smcs_step(&mut system, path, &mut kernel, config) {
            Ok(record) => record,
            Err(e) if e.is_particle_death() => {
                return Err(SmcError::ParticleDeath {
                    step: system.step + 1,
                    trace,
                })
            }
            Err(e) => return Err(e),
        };
        frozen.params.push(system.param);
        frozen.preconditioners.push(kernel.preconditioner.clone());
        observer(&system, &record);
        trace.push(record);
    }
    Ok(RunOutput { system, trace, frozen })
}

/// One step of the sampler, advancing `system` to the next path parameter.
pub fn smcs_step(
    system: &mut ParticleSystem,
    path: &Path,
    kernel: &mut KernelSpec,
    config: &SamplerConfig,
) -> Result<RunRecord> {
    let started = config.timing.then(Instant::now);
    let t = system.step + 1;
    let n = system.len();
    let mut resampled = false;

    if !kernel.kind.is_exact() && system.ess_fraction() < config.resample_threshold {
        resample(system, t);
        resampled = true;
    }

    let prev = system.param;
    let next = match &config.schedule {
        ScheduleSpec::Adaptive(rule) => path.next_param(&prev, &system.positions, &system.log_weights, *rule)?,
        ScheduleSpec::Fixed(params) => params[t - 1],
    };
    let pi_prev = path.at(prev)?;
    let pi_t = path.at(next)?;

    let log_inc_z;
    let accept;
    let ess_fraction;
    if kernel.kind.is_exact() {
        let inc = par_map(n, |i| {
            if system.log_weights[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                system.log_weights[i] + path.log_weight(&prev, &next, system.particle(i))
            }
        });
        log_inc_z = reweight(system, inc)?;
        ess_fraction = system.ess_fraction();
        system.param = next;
        if !path.is_terminal(&next) && ess_fraction < config.resample_threshold {
            resample(system, t);
            resampled = true;
        }
        adapt(system, kernel, config, t);
        let moved = move_particles(system, &pi_t, &pi_prev, kernel, t)?;
        let alive = system.log_weights.iter().filter(|w| **w > f64::NEG_INFINITY).count();
        let accepted: usize = moved.iter().map(|m| m.1).sum();
        accept = accepted as f64 / (alive * kernel.iterations) as f64;
    } else {
        adapt(system, kernel, config, t);
        let moved = move_particles(system, &pi_t, &pi_prev, kernel, t)?;
        let inc: Vec<f64> = moved
            .iter()
            .zip(&system.log_weights)
            .map(|((_, _, w), lw)| lw + w)
            .collect();
        let finite: Vec<f64> = moved.iter().map(|m| m.2).filter(|w| w.is_finite()).collect();
        accept = finite.iter().map(|w| w.abs()).sum::<f64>() / finite.len().max(1) as f64;
        log_inc_z = reweight(system, inc)?;
        ess_fraction = system.ess_fraction();
        system.param = next;
    }

    system.step = t;
    Ok(RunRecord {
        t,
        lambda: next.trace_value(),
        ess_fraction,
        resampled,
        log_inc_z,
        root_count: system.root_count(),
        accept,
        wall_time: started.map_or(0.0, |s| s.elapsed().as_secs_f64()),
    })
}

/// Replaces the log-weights by normalized `new`, accumulating `log Z`.
fn reweight(system: &mut ParticleSystem, new: Vec<f64>) -> Result<f64> {
    if new.iter().any(|w| w.is_nan()) {
        return Err(SmcError::TotalParticleDeath);
    }
    let log_inc_z = log_sum_exp(&new);
    if log_inc_z == f64::NEG_INFINITY || !log_inc_z.is_finite() {
        return Err(SmcError::TotalParticleDeath);
    }
    system.log_weights = new.into_iter().map(|w| w - log_inc_z).collect();
    system.log_z += log_inc_z;
    Ok(log_inc_z)
}

fn resample(system: &mut ParticleSystem, t: usize) {
    let weights = WeightVector::from_log_weights(system.log_weights.clone()).expect("finite weights");
    let mut r = rng::stream(system.seed, Purpose::Resample, t as u64, 0);
    let ancestors = multinomial_ancestors(weights.normalized(), system.len(), &mut r);
    system.resample(&ancestors);
}

fn adapt(system: &ParticleSystem, kernel: &mut KernelSpec, config: &SamplerConfig, t: usize) {
    if let Some(pre) = &config.frozen_preconditioners {
        kernel.preconditioner = pre[t - 1].clone();
        return;
    }
    if !config.adapt {
        return;
    }
    let est = adapt_preconditioner(&system.positions, system.dim, &system.weights());
    if est.is_degenerate() {
        log::warn!("step {t}: degenerate weights (ESS {:.3}), keeping previous preconditioner", est.ess);
        return;
    }
    kernel.set_from_variances(&est.variances);
}

/// Moves every live particle; returns `(index, accepted, increment)`.
fn move_particles(
    system: &mut ParticleSystem,
    pi_t: &dyn TargetDensity,
    pi_prev: &dyn TargetDensity,
    kernel: &KernelSpec,
    t: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    let d = system.dim;
    let seed = system.seed;
    let outcomes = par_map(system.len(), |i| {
        if system.log_weights[i] == f64::NEG_INFINITY {
            return Ok(None);
        }
        let mut r = rng::stream(seed, Purpose::Move, t as u64, i as u64);
        apply_kernel(system.particle(i), pi_t, pi_prev, kernel, &mut r).map(Some)
    });
    let mut summary = Vec::with_capacity(outcomes.len());
    for (i, out) in outcomes.into_iter().enumerate() {
        match out? {
            Some(m) => {
                system.positions[i * d..(i + 1) * d].copy_from_slice(&m.new_position);
                summary.push((i, m.accepted, m.log_weight_increment));
            }
            None => summary.push((i, 0, f64::NEG_INFINITY)),
        }
    }
    Ok(summary)
}

pub const TRACE_HEADER: [&str; 8] = [
    "t",
    "lambda",
    "ess_fraction",
    "resampled",
    "log_inc_z",
    "root_count",
    "accept",
    "wall_time",
];

/// Writes the trace as CSV under [`TRACE_HEADER`].
pub fn write_trace<W: Write>(writer: W, trace: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        w.write_record([
            r.t.to_string(),
            r.lambda.to_string(),
            r.ess_fraction.to_string(),
            (r.resampled as u8).to_string(),
            r.log_inc_z.to_string(),
            r.root_count.to_string(),
            r.accept.to_string(),
            r.wall_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the one-line run summary `log_z,T,N,seed`.
pub fn write_summary<W: Write>(writer: W, output: &RunOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["log_z", "T", "N", "seed"])?;
    w.write_record([
        output.log_z().to_string(),
        output.steps().to_string(),
        output.system.len().to_string(),
        output.system.seed.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
