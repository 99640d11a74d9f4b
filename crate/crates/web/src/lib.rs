//! Browser bindings for the sampler demo. Every export returns a JSON string;
//! errors come back as `{"error": "..."}`.

use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use smcs::diagnostics::{
    gaussian_chi2, gaussian_closed_form_schedule, perfect_kernel_variance, variance_estimator_z,
    GenealogySummary,
};
use smcs::engine::{run, weighted_moments, RunRecord, SamplerConfig, ScheduleSpec};
use smcs::error::Result;
use smcs::kernels::{leapfrog, KernelKind, KernelSpec};
use smcs::paths::{AdaptiveRule, Path};
use smcs::targets::{GaussianTarget, TargetDensity};

fn respond<T: Serialize>(result: Result<T>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string()),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn kernel_kind(name: &str) -> Option<KernelKind> {
    Some(match name {
        "rwmh" => KernelKind::Rwmh,
        "mala" => KernelKind::Mala,
        "hmc" => KernelKind::Hmc,
        "ula" => KernelKind::Ula,
        "uhmc" => KernelKind::Uhmc,
        _ => return None,
    })
}

/// `N(shift·1, I_d)` to `N(0, I_d)`.
fn shifted_pair(d: usize, shift: f64) -> Result<Path> {
    let initial = GaussianTarget::isotropic(vec![shift; d], 1.0)?.normalized();
    let terminal = GaussianTarget::isotropic(vec![0.0; d], 1.0)?.normalized();
    Path::geometric(Arc::new(initial), Arc::new(terminal))
}

#[derive(Serialize)]
struct TemperingRun {
    trace: Vec<RunRecord>,
    log_z: f64,
    means: Vec<f64>,
    variances: Vec<f64>,
    /// Terminal particles, first two coordinates.
    particles: Vec<[f64; 2]>,
}

/// Adaptive tempering between two Gaussians whose means differ by `shift` in
/// every coordinate. The exact `log Z` is 0.
#[wasm_bindgen]
pub fn tempering_run(d: usize, n: usize, kappa: f64, kernel: &str, shift: f64, seed: u64) -> String {
    respond((|| {
        let kind = kernel_kind(kernel).ok_or_else(|| smcs::error::SmcError::config(format!("unknown kernel {kernel}")))?;
        let path = shifted_pair(d.max(1), shift)?;
        let mut cfg = SamplerConfig::new(
            n,
            seed,
            KernelSpec::default_for(kind, d.max(1)),
            ScheduleSpec::Adaptive(AdaptiveRule { kappa, tol: 1e-10 }),
        );
        cfg.adapt = true;
        cfg.validate(&path)?;
        let out = run(&path, &cfg)?;
        let (means, variances) = weighted_moments(&out.system);
        let particles = (0..out.system.len())
            .map(|k| {
                let x = out.system.particle(k);
                [x[0], x.get(1).copied().unwrap_or(0.0)]
            })
            .collect();
        Ok(TemperingRun {
            log_z: out.log_z(),
            trace: out.trace,
            means,
            variances,
            particles,
        })
    })())
}

#[derive(Serialize)]
struct VariancePoint {
    n: usize,
    closed_form: f64,
    /// Mean of the genealogy estimate of `N · Var[Z^N/Z]`, divided by `N`.
    genealogy: f64,
}

/// Relative variance of `Z^N` against `N` for the one-dimensional pair
/// `N(distance, 1) → N(0, 1)` on its equal-χ² schedule: the perfect-kernel
/// formula next to the genealogy estimate from HMC runs.
#[wasm_bindgen]
pub fn variance_curve(distance: f64, kappa: f64, runs: usize, seed: u64) -> String {
    respond((|| {
        let schedule = gaussian_closed_form_schedule(distance, kappa);
        let mut prev = 0.0;
        let chis: Vec<f64> = schedule
            .iter()
            .map(|&l| {
                let c = gaussian_chi2(&[distance], &[0.0], &[1.0], prev, l);
                prev = l;
                c
            })
            .collect();
        let path = shifted_pair(1, distance)?;
        let params = path.fixed_schedule(&[&[0.0][..], &schedule].concat())?;
        let mut points = Vec::new();
        for n in [16usize, 32, 64, 128, 256, 512] {
            let mut total = 0.0;
            for r in 0..runs.max(1) {
                let mut cfg = SamplerConfig::new(
                    n,
                    smcs::rng::derive_seed(seed, (n * 10_000 + r) as u64),
                    KernelSpec::default_for(KernelKind::Hmc, 1),
                    ScheduleSpec::Fixed(params.clone()),
                );
                cfg.resample_threshold = 1.0;
                let out = run(&path, &cfg)?;
                total += variance_estimator_z(&GenealogySummary::from_system(&out.system))? / n as f64;
            }
            points.push(VariancePoint {
                n,
                closed_form: perfect_kernel_variance(&chis, n),
                genealogy: total / runs.max(1) as f64,
            });
        }
        Ok(json!({ "schedule": schedule, "chi2": chis, "points": points }))
    })())
}

/// Leapfrog trajectory on `N(0, diag(1, spread²))` with unit mass, with the
/// Hamiltonian along the orbit.
#[wasm_bindgen]
pub fn leapfrog_orbit(eps: f64, steps: usize, spread: f64, q0: f64, q1: f64, p0: f64, p1: f64) -> String {
    respond((|| {
        let target = GaussianTarget::diagonal(vec![0.0, 0.0], vec![1.0, spread * spread])?;
        let mass = [1.0, 1.0];
        let energy = |q: &[f64], p: &[f64]| -target.log_density(q) + 0.5 * (p[0] * p[0] + p[1] * p[1]);
        let mut q = vec![q0, q1];
        let mut p = vec![p0, p1];
        let mut orbit = vec![json!({ "q": q, "h": energy(&q, &p) })];
        for _ in 0..steps {
            let (nq, np) = leapfrog(&q, &p, &target, eps, 1, &mass)?;
            q = nq;
            p = np;
            orbit.push(json!({ "q": q, "h": energy(&q, &p) }));
        }
        Ok(json!({ "orbit": orbit }))
    })())
}
