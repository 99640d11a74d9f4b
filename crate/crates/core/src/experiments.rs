//! Experiment drivers behind the command-line tool: single runs, the Gaussian
//! scaling study, sequential logistic regression, path comparison, particle
//! MCMC and multi-run combination. Each returns plain rows and has a CSV
//! writer, so the same code feeds the CLI and the tests.

use std::fs;
use std::io::Write;
use std::path::Path as FsPath;
use std::sync::Arc;

use serde::Serialize;

use crate::config::{BuiltTarget, PathKind, Regime, RunConfig, RunMode, ScalingConfig};
use crate::diagnostics::{combine_runs, combined_ci, config_hash, pimh_chain, Combined, MultiRunSet, PimhChain};
use crate::engine::{
    initialize, run, run_with_observer, weighted_moments, write_summary, write_trace, FrozenSchedule, RunOutput,
    SamplerConfig, ScheduleSpec,
};
use crate::error::{Result, SmcError};
use crate::kernels::KernelSpec;
use crate::numerics::{log_sum_exp, mean, par_map, sample_variance, MonotoneCubic};
use crate::paths::{AdaptiveRule, Path, PathParam};
use crate::resampling::WeightVector;
use crate::rng::derive_seed;
use crate::targets::{laplace_initializer, GaussianTarget, LogisticRegressionTarget, SequentialModel, TargetDensity};

/// Seed offset for pilot runs, kept apart from the seeds of reported runs.
const PILOT_STREAM: u64 = 1 << 40;

fn create(dir: &FsPath, name: &str) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    Ok(fs::File::create(dir.join(name))?)
}

fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured sampler once; in `frozen-replay` mode an adaptive
/// pilot fixes the schedule and kernels first.
pub fn run_single(cfg: &RunConfig) -> Result<RunOutput> {
    let target = cfg.build_target()?;
    let path = cfg.build_path(&target)?;
    let sampler = cfg.sampler_config(&path)?;
    match cfg.run.mode {
        RunMode::Adaptive | RunMode::FixedSchedule => run(&path, &sampler),
        RunMode::FrozenReplay => {
            let frozen = pilot_freeze(&path, &sampler)?;
            run(&path, &frozen.replay_config(&sampler))
        }
    }
}

/// Writes `trace.csv`, `summary.csv` and `frozen.json` for one run.
pub fn write_single(dir: &FsPath, output: &RunOutput) -> Result<()> {
    write_trace(create(dir, "trace.csv")?, &output.trace)?;
    write_summary(create(dir, "summary.csv")?, output)?;
    create(dir, "frozen.json")?.write_all(output.frozen.to_json()?.as_bytes())?;
    Ok(())
}

fn pilot_freeze(path: &Path, sampler: &SamplerConfig) -> Result<FrozenSchedule> {
    let mut pilot = sampler.clone();
    pilot.seed = derive_seed(sampler.seed, PILOT_STREAM);
    Ok(run(path, &pilot)?.frozen)
}

/// One row of the scaling study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub d: usize,
    pub regime: &'static str,
    pub repeat: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub roots: usize,
    pub mse_mean: f64,
    pub log_z: f64,
}

/// Aggregates over repeats for one `(d, regime)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSummary {
    pub d: usize,
    pub regime: &'static str,
    pub repeats: usize,
    #[serde(rename = "T_mean")]
    pub t_mean: f64,
    pub roots_mean: f64,
    pub mse_mean: f64,
    pub var_log_z: f64,
}

/// `N(1, 0.5 I_d)` to `N(0, I_d)`, both normalized.
pub fn scaling_path(d: usize) -> Path {
    let initial = GaussianTarget::isotropic(vec![1.0; d], 0.5).expect("valid").normalized();
    let terminal = GaussianTarget::isotropic(vec![0.0; d], 1.0).expect("valid").normalized();
    Path::geometric(Arc::new(initial), Arc::new(terminal)).expect("matching dimensions")
}

fn scaling_sampler(d: usize, n: usize, seed: u64, schedule: ScheduleSpec) -> SamplerConfig {
    let mut cfg = SamplerConfig::new(n, seed, KernelSpec::scaling_study_hmc(d), schedule);
    cfg.adapt = true;
    cfg.resample_threshold = 0.5;
    cfg
}

fn adaptive_half() -> ScheduleSpec {
    ScheduleSpec::Adaptive(AdaptiveRule { kappa: 0.5, tol: 1e-10 })
}

/// `d` temperatures obtained by monotone interpolation of an adaptive
/// schedule `λ_1 < … < λ_T = 1`, read at `t / d`.
pub fn interpolate_schedule(adaptive: &[f64], d: usize) -> Vec<f64> {
    let t_adapt = adaptive.len();
    let xs: Vec<f64> = (0..=t_adapt).map(|t| t as f64 / t_adapt as f64).collect();
    let ys: Vec<f64> = std::iter::once(0.0).chain(adaptive.iter().copied()).collect();
    let curve = MonotoneCubic::new(xs, ys);
    (1..=d).map(|t| if t == d { 1.0 } else { curve.eval(t as f64 / d as f64) }).collect()
}

/// The `fixed_N_d_steps` temperature schedule for dimension `d`.
pub fn scaling_fixed_schedule(d: usize, seed: u64) -> Result<Vec<f64>> {
    let path = scaling_path(d);
    let pilot = run(&path, &scaling_sampler(d, 256, derive_seed(seed, PILOT_STREAM + d as u64), adaptive_half()))?;
    let lambdas: Vec<f64> = pilot.frozen.params.iter().map(|p| p.trace_value()).collect();
    Ok(interpolate_schedule(&lambdas, d))
}

fn scaling_seed(seed: u64, d: usize, regime: Regime, repeat: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, d as u64), regime as u64), repeat as u64)
}

/// One repeat of one regime. `fixed_schedule` is required for `fixed_N_d_steps`.
pub fn scaling_run(d: usize, regime: Regime, repeat: usize, seed: u64, fixed_schedule: Option<&[f64]>) -> Result<ScalingRow> {
    let path = scaling_path(d);
    let run_seed = scaling_seed(seed, d, regime, repeat);
    let n = regime.particles(d);
    let output = match regime {
        Regime::FixedN | Regime::LinearN => run(&path, &scaling_sampler(d, n, run_seed, adaptive_half()))?,
        Regime::FixedNDSteps => {
            let lambdas = fixed_schedule.ok_or_else(|| SmcError::config("fixed_N_d_steps needs a schedule"))?;
            let params = path.fixed_schedule(&[&[0.0][..], lambdas].concat())?;
            let tuning = scaling_sampler(d, n, derive_seed(run_seed, PILOT_STREAM), ScheduleSpec::Fixed(params));
            let frozen = run(&path, &tuning)?.frozen;
            let replay = SamplerConfig {
                seed: run_seed,
                ..tuning.clone()
            };
            run(&path, &frozen.replay_config(&replay))?
        }
    };
    let (m, _) = weighted_moments(&output.system);
    Ok(ScalingRow {
        d,
        regime: regime.name(),
        repeat,
        t: output.steps(),
        roots: output.system.root_count(),
        mse_mean: m.iter().map(|v| v * v).sum::<f64>() / d as f64,
        log_z: output.log_z(),
    })
}

pub fn run_scaling_study(spec: &ScalingConfig, seed: u64) -> Result<Vec<ScalingRow>> {
    let mut jobs = Vec::new();
    for &d in &spec.dims {
        for &regime in &spec.regimes {
            for repeat in 0..spec.repeats {
                jobs.push((d, regime, repeat));
            }
        }
    }
    let mut schedules = std::collections::BTreeMap::new();
    if spec.regimes.contains(&Regime::FixedNDSteps) {
        for &d in &spec.dims {
            schedules.insert(d, scaling_fixed_schedule(d, seed)?);
        }
    }
    par_map(jobs.len(), |k| {
        let (d, regime, repeat) = jobs[k];
        scaling_run(d, regime, repeat, seed, schedules.get(&d).map(|s| s.as_slice()))
    })
    .into_iter()
    .collect()
}

pub fn summarize_scaling(rows: &[ScalingRow]) -> Vec<ScalingSummary> {
    let mut groups: Vec<((usize, &'static str), Vec<&ScalingRow>)> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|(k, _)| *k == (row.d, row.regime)) {
            Some((_, g)) => g.push(row),
            None => groups.push(((row.d, row.regime), vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|((d, regime), g)| {
            let col = |f: fn(&ScalingRow) -> f64| -> Vec<f64> { g.iter().map(|r| f(r)).collect() };
            let log_z = col(|r| r.log_z);
            ScalingSummary {
                d,
                regime,
                repeats: g.len(),
                t_mean: mean(&col(|r| r.t as f64)),
                roots_mean: mean(&col(|r| r.roots as f64)),
                mse_mean: mean(&col(|r| r.mse_mean)),
                var_log_z: if log_z.len() > 1 { sample_variance(&log_z) } else { f64::NAN },
            }
        })
        .collect()
}

/// Writes `scaling.csv` and `scaling_summary.csv`.
pub fn write_scaling(dir: &FsPath, rows: &[ScalingRow]) -> Result<()> {
    write_rows(create(dir, "scaling.csv")?, rows)?;
    write_rows(create(dir, "scaling_summary.csv")?, &summarize_scaling(rows))
}

/// Posterior summary after a batch of observations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticRow {
    pub observations: usize,
    pub coordinate: usize,
    pub mean: f64,
    pub variance: f64,
    pub log_z: f64,
    /// Mean held-out log predictive probability; `NaN` without held-out rows.
    pub log_score: f64,
}

fn log_score(system: &crate::engine::ParticleSystem, test: Option<&LogisticRegressionTarget>) -> f64 {
    let Some(test) = test else { return f64::NAN };
    let m = test.n_observations();
    let total: f64 = (0..m)
        .map(|i| {
            let terms: Vec<f64> = (0..system.len())
                .map(|n| system.log_weights[n] + test.predictive_probability(i, system.particle(n)).ln())
                .collect();
            log_sum_exp(&terms)
        })
        .sum();
    total / m as f64
}

fn logistic_rows(system: &crate::engine::ParticleSystem, observations: usize, test: Option<&LogisticRegressionTarget>) -> Vec<LogisticRow> {
    let (m, v) = weighted_moments(system);
    let score = log_score(system, test);
    (0..m.len())
        .map(|i| LogisticRow {
            observations,
            coordinate: i,
            mean: m[i],
            variance: v[i],
            log_z: system.log_z,
            log_score: score,
        })
        .collect()
}

/// Assimilates the data in batches along partial posteriors (bridged unless
/// `path.kind = "partial_posterior"`), reporting every batch boundary.
pub fn run_logistic_sequence(cfg: &RunConfig) -> Result<Vec<LogisticRow>> {
    let target = cfg.build_target()?;
    let BuiltTarget::Logistic { model, test } = &target else {
        return Err(SmcError::config("the logistic experiment needs target.kind = \"logistic\""));
    };
    let kind = if cfg.path.kind == PathKind::PartialPosterior {
        PathKind::PartialPosterior
    } else {
        PathKind::PartialWithBridges
    };
    let path = cfg.build_path_of(&target, kind)?;
    let sampler = cfg.sampler_config(&path)?;
    let Path::Partial { boundaries, .. } = &path else { unreachable!() };
    let initial = initialize(path.initial_distribution(), path.initial_param(), sampler.n, sampler.seed)?;
    let mut rows = logistic_rows(&initial, 0, test.as_ref());
    let _ = model;
    run_with_observer(&path, &sampler, |system, _| {
        if let PathParam::Bridge { stage, lambda } = system.param {
            if lambda == 1.0 {
                rows.extend(logistic_rows(system, boundaries[stage], test.as_ref()));
            }
        }
    })?;
    Ok(rows)
}

pub fn write_logistic(dir: &FsPath, rows: &[LogisticRow]) -> Result<()> {
    write_rows(create(dir, "logistic.csv")?, rows)
}

/// One-step importance sampling from the Laplace approximation to the full
/// posterior: returns `(ESS / N, log Z estimate)`.
pub fn laplace_importance_sampling(model: &LogisticRegressionTarget, n: usize, seed: u64) -> Result<(f64, f64)> {
    let approx = laplace_initializer(model, 100, 1e-8)?;
    let system = initialize(&approx, PathParam::Lambda(0.0), n, seed)?;
    let logw = par_map(n, |k| {
        let x = system.particle(k);
        model.log_density(x) - approx.log_density(x)
    });
    let wv = WeightVector::from_log_weights(logw)?;
    Ok((wv.ess_fraction(), wv.log_total() - (n as f64).ln()))
}

/// Moments of one intermediate distribution along a path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub path: &'static str,
    pub step: usize,
    pub lambda: f64,
    pub coordinate: usize,
    pub mean: f64,
    pub variance: f64,
}

fn comparison_rows(name: &'static str, system: &crate::engine::ParticleSystem) -> Vec<ComparisonRow> {
    let (m, v) = weighted_moments(system);
    (0..m.len())
        .map(|i| ComparisonRow {
            path: name,
            step: system.step,
            lambda: system.param.trace_value(),
            coordinate: i,
            mean: m[i],
            variance: v[i],
        })
        .collect()
}

/// Geometric tempering from the prior versus bridged partial posteriors on the
/// same logistic target; one row per coordinate and intermediate distribution.
pub fn run_path_comparison(cfg: &RunConfig) -> Result<Vec<ComparisonRow>> {
    let target = cfg.build_target()?;
    if !matches!(target, BuiltTarget::Logistic { .. }) {
        return Err(SmcError::config("path comparison needs target.kind = \"logistic\""));
    }
    let mut rows = Vec::new();
    for (name, kind) in [("geometric", PathKind::Geometric), ("partial_posterior", PathKind::PartialWithBridges)] {
        let path = cfg.build_path_of(&target, kind)?;
        let mut sampler = cfg.sampler_config(&path)?;
        if let ScheduleSpec::Fixed(_) = sampler.schedule {
            sampler.schedule = ScheduleSpec::Adaptive(AdaptiveRule {
                kappa: cfg.schedule.kappa,
                tol: cfg.schedule.tol,
            });
        }
        let initial = initialize(path.initial_distribution(), path.initial_param(), sampler.n, sampler.seed)?;
        rows.extend(comparison_rows(name, &initial));
        run_with_observer(&path, &sampler, |system, _| rows.extend(comparison_rows(name, system)))?;
    }
    Ok(rows)
}

pub fn write_comparison(dir: &FsPath, rows: &[ComparisonRow]) -> Result<()> {
    write_rows(create(dir, "path_comparison.csv")?, rows)
}

/// Particle MCMC on the configured problem. Without a frozen schedule an
/// adaptive pilot run provides one.
pub fn run_pimh(cfg: &RunConfig, frozen: Option<FrozenSchedule>) -> Result<(PimhChain, FrozenSchedule)> {
    let target = cfg.build_target()?;
    let path = cfg.build_path(&target)?;
    let sampler = cfg.sampler_config(&path)?;
    let frozen = match frozen {
        Some(f) => f,
        None => pilot_freeze(&path, &sampler)?,
    };
    let chain = pimh_chain(&path, &frozen.replay_config(&sampler), cfg.run.pimh_iterations, cfg.run.seed)?;
    Ok((chain, frozen))
}

pub fn write_pimh(dir: &FsPath, chain: &PimhChain, frozen: &FrozenSchedule) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "pimh.csv")?);
    let d = chain.states.first().map_or(0, |s| s.particle.len());
    let mut header = vec!["iteration".to_string(), "log_z".into(), "accepted".into()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (it, s) in chain.states.iter().enumerate() {
        let mut rec = vec![it.to_string(), s.log_z.to_string(), (s.accepted as u8).to_string()];
        rec.extend(s.particle.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    create(dir, "pimh.frozen.json")?.write_all(frozen.to_json()?.as_bytes())?;
    Ok(())
}

/// Independent runs and their combination, one estimate per coordinate mean.
pub struct CombineResult {
    pub runs: MultiRunSet,
    pub combined: Vec<Combined>,
    pub intervals: Vec<(f64, f64)>,
}

pub fn run_combine(cfg: &RunConfig) -> Result<CombineResult> {
    let target = cfg.build_target()?;
    let path = cfg.build_path(&target)?;
    let sampler = cfg.sampler_config(&path)?;
    let hash = config_hash(&format!("{:?}", RunConfig { run: Default::default(), ..cfg.clone() }));
    let repeats = cfg.run.repeats;
    let outputs = par_map(repeats, |r| {
        let mut s = sampler.clone();
        s.seed = derive_seed(cfg.run.seed, r as u64);
        run(&path, &s).map(|o| (o.log_z(), weighted_moments(&o.system).0))
    });
    let mut set = MultiRunSet::new(hash);
    for out in outputs {
        let (log_z, means) = out?;
        set.push(hash, log_z, means)?;
    }
    let d = path.dim();
    let combined = (0..d).map(|i| combine_runs(&set, i)).collect::<Result<Vec<_>>>()?;
    let intervals = if repeats >= 2 {
        (0..d).map(|i| combined_ci(&set, i, 0.95)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(CombineResult {
        runs: set,
        combined,
        intervals,
    })
}

/// Writes `runs.csv` (`run,log_z,estimate_0,…`) and `combined.txt` (`key=value`).
pub fn write_combine(dir: &FsPath, result: &CombineResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "runs.csv")?);
    let d = result.combined.len();
    let mut header = vec!["run".to_string(), "log_z".into()];
    header.extend((0..d).map(|i| format!("estimate_{i}")));
    w.write_record(&header)?;
    for (r, run) in result.runs.runs.iter().enumerate() {
        let mut rec = vec![r.to_string(), run.log_z.to_string()];
        rec.extend(run.estimates.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut f = create(dir, "combined.txt")?;
    writeln!(f, "runs={}", result.runs.len())?;
    writeln!(f, "log_z={}", result.combined.first().map_or(f64::NAN, |c| c.log_z))?;
    for (i, c) in result.combined.iter().enumerate() {
        writeln!(f, "estimate_{i}={}", c.estimate)?;
        if let Some((lo, hi)) = result.intervals.get(i) {
            writeln!(f, "ci95_low_{i}={lo}")?;
            writeln!(f, "ci95_high_{i}={hi}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::synthetic_logistic_data;

    #[test]
    fn interpolated_schedule_is_increasing_and_ends_at_one() {
        let adaptive = [0.2, 0.45, 0.8, 1.0];
        for d in [2, 4, 16, 64] {
            let s = interpolate_schedule(&adaptive, d);
            assert_eq!(s.len(), d);
            assert_eq!(*s.last().unwrap(), 1.0);
            assert!(s[0] > 0.0);
            assert!(s.windows(2).all(|w| w[0] < w[1]), "{s:?}");
        }
    }

    #[test]
    fn small_dimension_fixed_n_uses_few_steps() {
        let row = scaling_run(2, Regime::FixedN, 0, 3, None).unwrap();
        assert!(row.t >= 1 && row.t <= 10, "T = {}", row.t);
        assert!(row.roots >= 1 && row.roots <= 256);
    }

    #[test]
    fn scaling_rows_serialize_with_contract_header() {
        let row = ScalingRow {
            d: 4,
            regime: "fixed_N",
            repeat: 0,
            t: 3,
            roots: 40,
            mse_mean: 0.01,
            log_z: -0.1,
        };
        let mut buf = Vec::new();
        write_rows(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("d,regime,repeat,T,roots,mse_mean,log_z\n"));
    }

    #[test]
    fn scaling_summary_variance_matches_direct_computation() {
        let rows: Vec<ScalingRow> = [0.1, -0.2, 0.4]
            .iter()
            .enumerate()
            .map(|(k, z)| ScalingRow {
                d: 2,
                regime: "linear_N",
                repeat: k,
                t: 3,
                roots: 10 + k,
                mse_mean: 0.0,
                log_z: *z,
            })
            .collect();
        let s = summarize_scaling(&rows);
        assert_eq!(s.len(), 1);
        let m = 0.1f64;
        let direct = ((0.1 - m).powi(2) + (-0.2 - m).powi(2) + (0.4 - m).powi(2)) / 2.0;
        assert!((s[0].var_log_z - direct).abs() < 1e-12);
        assert_eq!(s[0].roots_mean, 11.0);
    }

    fn logistic_config(rows: usize, extra: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            "target.kind = \"logistic\"\ntarget.true_beta = [0.5, -1.0]\ntarget.rows = {rows}\nrun.n = 256\nrun.seed = 4\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn logistic_sequence_starts_at_prior() {
        let cfg = logistic_config(40, "target.test_rows = 10\npath.batch_size = 10\nkernel.step_size = 0.3");
        let rows = run_logistic_sequence(&cfg).unwrap();
        let first: Vec<&LogisticRow> = rows.iter().filter(|r| r.observations == 0).collect();
        assert_eq!(first.len(), 2);
        for r in first {
            assert!(r.mean.abs() < 3.0 * (10.0f64 / 256.0).sqrt());
            assert_eq!(r.log_z, 0.0);
        }
        let boundaries: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.observations).collect();
        assert_eq!(boundaries.into_iter().collect::<Vec<_>>(), vec![0, 10, 20, 30]);
        assert!(rows.iter().all(|r| r.log_score.is_finite()));
    }

    #[test]
    fn path_comparison_has_one_row_per_distribution() {
        let cfg = logistic_config(30, "path.batch_size = 10\nkernel.step_size = 0.3");
        let rows = run_path_comparison(&cfg).unwrap();
        for name in ["geometric", "partial_posterior"] {
            let steps: Vec<usize> = rows.iter().filter(|r| r.path == name && r.coordinate == 0).map(|r| r.step).collect();
            assert_eq!(steps, (0..steps.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn laplace_weights_are_exact_for_gaussian_posterior_limit() {
        let (x, y) = synthetic_logistic_data(&[0.2, 0.5], 2000, 3);
        let model = LogisticRegressionTarget::new(x, y, vec![0.0; 2], vec![10.0; 2]).unwrap();
        let (ess, _) = laplace_importance_sampling(&model, 512, 1).unwrap();
        assert!(ess > 0.9, "ESS/N = {ess}");
    }
}
