//! Bridging sequences between an initial distribution and the target:
//! geometric tempering, partial posteriors (optionally bridged) and
//! truncation paths.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::numerics::par_map;
use crate::resampling::{next_lambda_weighted, ScheduleState};
use crate::rng::StreamRng;
use crate::targets::{GaussianTarget, SequentialModel, TargetDensity};

/// A real-valued score whose super-level sets define a truncation path.
pub type ScoreFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Position along a path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathParam {
    /// Inverse temperature of a geometric path.
    Lambda(f64),
    /// Partial posteriors: stage `s` with `lambda = 1` conditions on the first
    /// `s` batches; `lambda < 1` is a point on the geometric bridge from stage
    /// `s - 1` to stage `s`.
    Bridge { stage: usize, lambda: f64 },
    /// Truncation threshold.
    Level(f64),
}

impl PathParam {
    /// Scalar used in traces: `λ`, `stage - 1 + λ` or the level.
    pub fn trace_value(&self) -> f64 {
        match *self {
            PathParam::Lambda(l) => l,
            PathParam::Bridge { stage, lambda } => {
                if stage == 0 {
                    0.0
                } else {
                    (stage - 1) as f64 + lambda
                }
            }
            PathParam::Level(l) => l,
        }
    }
}

pub enum Path {
    Geometric {
        initial: Arc<dyn TargetDensity>,
        terminal: Arc<dyn TargetDensity>,
    },
    Partial {
        model: Arc<dyn SequentialModel>,
        /// Observation counts at batch ends: `0 = b_0 < b_1 < … < b_S = m`.
        boundaries: Vec<usize>,
        bridged: bool,
    },
    Truncated {
        base: Arc<dyn TargetDensity>,
        score: ScoreFn,
        level: f64,
    },
}

impl fmt::Debug for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Path::Geometric { .. } => f.write_str("Path::Geometric"),
            Path::Partial { boundaries, bridged, .. } => f
                .debug_struct("Path::Partial")
                .field("batches", &(boundaries.len() - 1))
                .field("bridged", bridged)
                .finish(),
            Path::Truncated { level, .. } => f.debug_struct("Path::Truncated").field("level", level).finish(),
        }
    }
}

/// Strategy for the next path parameter.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveRule {
    pub kappa: f64,
    pub tol: f64,
}

impl Path {
    pub fn geometric(initial: Arc<dyn TargetDensity>, terminal: Arc<dyn TargetDensity>) -> Result<Self> {
        if initial.dim() != terminal.dim() {
            return Err(SmcError::DimensionMismatch {
                expected: initial.dim(),
                got: terminal.dim(),
            });
        }
        Ok(Path::Geometric { initial, terminal })
    }

    /// Partial posteriors assimilating `batch_size` observations per stage.
    pub fn partial(model: Arc<dyn SequentialModel>, batch_size: usize, bridged: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(SmcError::config("batch size must be positive"));
        }
        let m = model.n_observations();
        let mut boundaries: Vec<usize> = (0..m).step_by(batch_size).collect();
        boundaries.push(m);
        if m == 0 {
            boundaries = vec![0, 0];
        }
        Ok(Path::Partial {
            model,
            boundaries,
            bridged,
        })
    }

    pub fn truncated(base: Arc<dyn TargetDensity>, score: ScoreFn, level: f64) -> Result<Self> {
        if !level.is_finite() {
            return Err(SmcError::InvalidPathParameter(format!("terminal level {level} must be finite")));
        }
        Ok(Path::Truncated { base, score, level })
    }

    pub fn dim(&self) -> usize {
        match self {
            Path::Geometric { initial, .. } => initial.dim(),
            Path::Partial { model, .. } => model.dim(),
            Path::Truncated { base, .. } => base.dim(),
        }
    }

    pub fn initial_param(&self) -> PathParam {
        match self {
            Path::Geometric { .. } => PathParam::Lambda(0.0),
            Path::Partial { .. } => PathParam::Bridge { stage: 0, lambda: 1.0 },
            Path::Truncated { .. } => PathParam::Level(f64::NEG_INFINITY),
        }
    }

    pub fn terminal_param(&self) -> PathParam {
        match self {
            Path::Geometric { .. } => PathParam::Lambda(1.0),
            Path::Partial { boundaries, .. } => PathParam::Bridge {
                stage: boundaries.len() - 1,
                lambda: 1.0,
            },
            Path::Truncated { level, .. } => PathParam::Level(*level),
        }
    }

    pub fn is_terminal(&self, param: &PathParam) -> bool {
        *param == self.terminal_param()
    }

    /// The distribution particles are drawn from at the start.
    pub fn initial_distribution(&self) -> &dyn TargetDensity {
        match self {
            Path::Geometric { initial, .. } => initial.as_ref(),
            Path::Partial { model, .. } => model.prior(),
            Path::Truncated { base, .. } => base.as_ref(),
        }
    }

    pub fn at(&self, param: PathParam) -> Result<PathPoint<'_>> {
        self.validate(&param)?;
        Ok(PathPoint { path: self, param })
    }

    fn validate(&self, param: &PathParam) -> Result<()> {
        let bad = |msg: String| Err(SmcError::InvalidPathParameter(msg));
        match (self, param) {
            (Path::Geometric { .. }, PathParam::Lambda(l)) => {
                if !(0.0..=1.0).contains(l) {
                    return bad(format!("lambda {l} outside [0, 1]"));
                }
            }
            (Path::Partial { boundaries, .. }, PathParam::Bridge { stage, lambda }) => {
                if *stage >= boundaries.len() {
                    return bad(format!("stage {stage} beyond {} batches", boundaries.len() - 1));
                }
                if !(0.0..=1.0).contains(lambda) {
                    return bad(format!("lambda {lambda} outside [0, 1]"));
                }
            }
            (Path::Truncated { level: terminal, .. }, PathParam::Level(l)) => {
                if l.is_nan() || *l > *terminal {
                    return bad(format!("level {l} beyond terminal level {terminal}"));
                }
            }
            _ => return bad(format!("{param:?} does not belong to {self:?}")),
        }
        Ok(())
    }

    fn log_density_unchecked(&self, param: &PathParam, x: &[f64]) -> f64 {
        match (self, param) {
            (Path::Geometric { initial, terminal }, PathParam::Lambda(l)) => {
                if *l == 0.0 {
                    initial.log_density(x)
                } else if *l == 1.0 {
                    terminal.log_density(x)
                } else {
                    (1.0 - l) * initial.log_density(x) + l * terminal.log_density(x)
                }
            }
            (Path::Partial { model, boundaries, .. }, PathParam::Bridge { stage, lambda }) => {
                let prior = model.prior().log_density(x);
                if *stage == 0 {
                    return prior;
                }
                let done = model.log_likelihood(x, 0..boundaries[stage - 1]);
                let batch = model.log_likelihood(x, boundaries[stage - 1]..boundaries[*stage]);
                if *lambda == 1.0 {
                    prior + done + batch
                } else {
                    prior + done + lambda * batch
                }
            }
            (Path::Truncated { base, score, .. }, PathParam::Level(l)) => {
                if score(x) >= *l {
                    base.log_density(x)
                } else {
                    f64::NEG_INFINITY
                }
            }
            _ => f64::NAN,
        }
    }

    fn grad_unchecked(&self, param: &PathParam, x: &[f64], grad: &mut [f64]) {
        match (self, param) {
            (Path::Geometric { initial, terminal }, PathParam::Lambda(l)) => {
                initial.grad_log_density(x, grad);
                let mut g1 = vec![0.0; x.len()];
                terminal.grad_log_density(x, &mut g1);
                for (g, t) in grad.iter_mut().zip(&g1) {
                    *g = (1.0 - l) * *g + l * t;
                }
            }
            (Path::Partial { model, boundaries, .. }, PathParam::Bridge { stage, lambda }) => {
                model.prior().grad_log_density(x, grad);
                if *stage > 0 {
                    model.add_grad_log_likelihood(x, 0..boundaries[stage - 1], 1.0, grad);
                    model.add_grad_log_likelihood(x, boundaries[stage - 1]..boundaries[*stage], *lambda, grad);
                }
            }
            (Path::Truncated { base, .. }, PathParam::Level(_)) => base.grad_log_density(x, grad),
            _ => grad.iter_mut().for_each(|g| *g = f64::NAN),
        }
    }

    /// The geometric segment a step from `prev` moves along: the start
    /// parameter within the segment and the log-ratio `x ↦ ℓ(x)` whose
    /// multiples are the incremental weights.
    fn segment(&self, prev: &PathParam) -> Option<Segment<'_>> {
        match (self, prev) {
            (Path::Geometric { initial, terminal }, PathParam::Lambda(l)) if *l < 1.0 => Some(Segment {
                start: *l,
                stage: 0,
                ratio: SegmentRatio::Geometric(initial.as_ref(), terminal.as_ref()),
            }),
            (Path::Partial { model, boundaries, .. }, PathParam::Bridge { stage, lambda }) => {
                let (stage, start) = if *lambda == 1.0 { (stage + 1, 0.0) } else { (*stage, *lambda) };
                if stage >= boundaries.len() {
                    return None;
                }
                Some(Segment {
                    start,
                    stage,
                    ratio: SegmentRatio::Batch(model.as_ref(), boundaries[stage - 1], boundaries[stage]),
                })
            }
            _ => None,
        }
    }

    /// Incremental log-weight `log γ_next(x) − log γ_prev(x)`.
    pub fn log_weight(&self, prev: &PathParam, next: &PathParam, x: &[f64]) -> f64 {
        if prev == next {
            return 0.0;
        }
        if let Path::Truncated { score, .. } = self {
            let PathParam::Level(l) = next else { return f64::NAN };
            return if score(x) >= *l { 0.0 } else { f64::NEG_INFINITY };
        }
        if let Some(seg) = self.segment(prev) {
            let within = match (next, seg.stage) {
                (PathParam::Lambda(l), _) => Some(*l),
                (PathParam::Bridge { stage, lambda }, s) if *stage == s => Some(*lambda),
                _ => None,
            };
            if let Some(l) = within {
                return (l - seg.start) * seg.ratio.eval(x);
            }
        }
        self.log_density_unchecked(next, x) - self.log_density_unchecked(prev, x)
    }

    /// Chooses the next parameter from the current weighted population.
    /// `positions` is row-major `N × d`, `log_weights` are normalized.
    pub fn next_param(
        &self,
        current: &PathParam,
        positions: &[f64],
        log_weights: &[f64],
        rule: AdaptiveRule,
    ) -> Result<PathParam> {
        let d = self.dim();
        let n = log_weights.len();
        if let Path::Truncated { score, level, .. } = self {
            let scores = par_map(n, |i| score(&positions[i * d..(i + 1) * d]));
            return Ok(PathParam::Level(adaptive_level(&scores, log_weights, rule.kappa, *level)));
        }
        if let Path::Partial { bridged: false, .. } = self {
            let PathParam::Bridge { stage, .. } = current else {
                return Err(SmcError::InvalidPathParameter(format!("{current:?}")));
            };
            return Ok(PathParam::Bridge { stage: stage + 1, lambda: 1.0 });
        }
        let seg = self
            .segment(current)
            .ok_or_else(|| SmcError::InvalidPathParameter(format!("no step beyond {current:?}")))?;
        let ratios = par_map(n, |i| seg.ratio.eval(&positions[i * d..(i + 1) * d]));
        let lambda = next_lambda_weighted(seg.start, &ratios, log_weights, rule.kappa, rule.tol)?;
        Ok(match self {
            Path::Geometric { .. } => PathParam::Lambda(lambda),
            _ => PathParam::Bridge {
                stage: seg.stage,
                lambda,
            },
        })
    }

    /// Expands a configured list of values into the parameter sequence after
    /// the initial one. Geometric paths take `λ` values starting at 0 and
    /// ending at 1; bridged partial paths reuse the list inside every bridge;
    /// truncated paths take levels ending at the terminal level.
    pub fn fixed_schedule(&self, values: &[f64]) -> Result<Vec<PathParam>> {
        let increasing = values.windows(2).all(|w| w[0] < w[1]);
        if !increasing {
            return Err(SmcError::config("fixed schedule must be strictly increasing"));
        }
        match self {
            Path::Geometric { .. } => {
                ScheduleState::check_fixed(values)?;
                Ok(values[1..].iter().map(|l| PathParam::Lambda(*l)).collect())
            }
            Path::Partial { boundaries, bridged, .. } => {
                let stages = boundaries.len() - 1;
                if !bridged {
                    return Ok((1..=stages).map(|s| PathParam::Bridge { stage: s, lambda: 1.0 }).collect());
                }
                ScheduleState::check_fixed(values)?;
                Ok((1..=stages)
                    .flat_map(|s| values[1..].iter().map(move |l| PathParam::Bridge { stage: s, lambda: *l }))
                    .collect())
            }
            Path::Truncated { level, .. } => {
                if values.last() != Some(level) {
                    return Err(SmcError::config("fixed levels must end at the terminal level"));
                }
                Ok(values.iter().map(|l| PathParam::Level(*l)).collect())
            }
        }
    }

    /// Exact Gaussian `π_t` for geometric paths between two Gaussians.
    pub fn gaussian_at(&self, param: &PathParam) -> Option<GaussianTarget> {
        match (self, param) {
            (Path::Geometric { initial, terminal }, PathParam::Lambda(l)) => {
                let a = initial.as_gaussian()?;
                let b = terminal.as_gaussian()?;
                GaussianTarget::geometric_interpolation(a, b, *l).ok()
            }
            _ => None,
        }
    }
}

enum SegmentRatio<'a> {
    Geometric(&'a dyn TargetDensity, &'a dyn TargetDensity),
    Batch(&'a dyn SequentialModel, usize, usize),
}

impl SegmentRatio<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            SegmentRatio::Geometric(a, b) => b.log_density(x) - a.log_density(x),
            SegmentRatio::Batch(model, lo, hi) => model.log_likelihood(x, *lo..*hi),
        }
    }
}

struct Segment<'a> {
    start: f64,
    stage: usize,
    ratio: SegmentRatio<'a>,
}

/// The largest level whose super-level set keeps a weighted fraction `kappa`
/// of the population, capped at the terminal level.
fn adaptive_level(scores: &[f64], log_weights: &[f64], kappa: f64, terminal: f64) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| log_weights[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    for &i in &order {
        mass += log_weights[i].exp();
        if mass >= kappa - 1e-12 {
            return scores[i].min(terminal);
        }
    }
    terminal
}

/// A path evaluated at one parameter, usable as a target density.
#[derive(Clone, Copy)]
pub struct PathPoint<'a> {
    path: &'a Path,
    param: PathParam,
}

impl fmt::Debug for PathPoint<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PathPoint({:?})", self.param)
    }
}

impl<'a> PathPoint<'a> {
    pub fn param(&self) -> PathParam {
        self.param
    }

    pub fn path(&self) -> &'a Path {
        self.path
    }
}

impl TargetDensity for PathPoint<'_> {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.path.log_density_unchecked(&self.param, x)
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) {
        self.path.grad_unchecked(&self.param, x, grad)
    }

    fn sample(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        if self.param == self.path.initial_param() {
            return self.path.initial_distribution().sample(rng);
        }
        self.path.gaussian_at(&self.param)?.sample(rng)
    }
}

/// `(1 − λ) log γ_0(x) + λ log γ(x)`.
pub fn geometric_log_density(path: &Path, lambda: f64, x: &[f64]) -> Result<f64> {
    let point = path.at(PathParam::Lambda(lambda))?;
    crate::targets::eval_log_density(&point, x)
}

/// Log prior plus the log-likelihood of the first `t` observations.
pub fn partial_posterior_log_density(model: &dyn SequentialModel, t: usize, x: &[f64]) -> Result<f64> {
    if t > model.n_observations() {
        return Err(SmcError::InvalidPathParameter(format!(
            "{t} observations requested, {} available",
            model.n_observations()
        )));
    }
    if x.len() != model.dim() {
        return Err(SmcError::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    Ok(model.prior().log_density(x) + model.log_likelihood(x, 0..t))
}

/// `log μ(x)` on `{score ≥ level}`, `-inf` elsewhere.
pub fn truncated_log_density(base: &dyn TargetDensity, score: &dyn Fn(&[f64]) -> f64, level: f64, x: &[f64]) -> f64 {
    if score(x) >= level {
        base.log_density(x)
    } else {
        f64::NEG_INFINITY
    }
}

/// The geometric bridge between partial posteriors after `t − 1` and `t`
/// observations, as a two-batch partial path.
pub fn sub_bridge_schedule(model: Arc<dyn SequentialModel>, t: usize) -> Result<BridgeSegment> {
    if t == 0 {
        return Err(SmcError::InvalidPathParameter("bridge at t = 0 has no predecessor".into()));
    }
    if t > model.n_observations() {
        return Err(SmcError::InvalidPathParameter(format!("bridge at t = {t} beyond data")));
    }
    Ok(BridgeSegment { model, t })
}

/// Geometric bridge between consecutive partial posteriors.
pub struct BridgeSegment {
    model: Arc<dyn SequentialModel>,
    t: usize,
}

impl BridgeSegment {
    pub fn log_density(&self, lambda: f64, x: &[f64]) -> Result<f64> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(SmcError::InvalidPathParameter(format!("lambda {lambda} outside [0, 1]")));
        }
        let before = partial_posterior_log_density(self.model.as_ref(), self.t - 1, x)?;
        Ok(before + lambda * self.model.log_likelihood(x, self.t - 1..self.t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{synthetic_logistic_data, LogisticRegressionTarget};
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn gaussian_pair() -> Path {
        let initial = GaussianTarget::isotropic(vec![1.0], 0.5).unwrap();
        let terminal = GaussianTarget::isotropic(vec![0.0], 1.0).unwrap();
        Path::geometric(Arc::new(initial), Arc::new(terminal)).unwrap()
    }

    fn logistic_model(m: usize) -> Arc<LogisticRegressionTarget> {
        let (x, y) = synthetic_logistic_data(&[0.5, -1.0], m, 9);
        Arc::new(LogisticRegressionTarget::new(x, y, vec![0.0; 2], vec![10.0; 2]).unwrap())
    }

    #[test]
    fn geometric_endpoints_and_midpoint() {
        let p = gaussian_pair();
        let x = [0.5];
        let g0 = -(0.5f64 - 1.0).powi(2) / (2.0 * 0.5);
        let g1 = -(0.5f64).powi(2) / 2.0;
        assert_eq!(geometric_log_density(&p, 0.0, &x).unwrap(), g0);
        assert_eq!(geometric_log_density(&p, 1.0, &x).unwrap(), g1);
        assert!((geometric_log_density(&p, 0.5, &x).unwrap() + 0.1875).abs() < 1e-15);
        assert!(geometric_log_density(&p, 1.5, &x).is_err());
    }

    #[test]
    fn geometric_gradient_is_convex_combination() {
        let initial = GaussianTarget::diagonal(vec![1.0, -1.0], vec![0.5, 2.0]).unwrap();
        let terminal = GaussianTarget::isotropic(vec![0.0, 0.5], 1.0).unwrap();
        let p = Path::geometric(Arc::new(initial), Arc::new(terminal)).unwrap();
        let mut rng = StreamRng::seed_from_u64(5);
        for _ in 0..20 {
            let lambda: f64 = rng.random();
            let x: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let point = p.at(PathParam::Lambda(lambda)).unwrap();
            let mut grad = vec![0.0; 2];
            point.grad_log_density(&x, &mut grad);
            for i in 0..2 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (point.log_density(&xp) - point.log_density(&xm)) / (2.0 * h);
                assert!((fd - grad[i]).abs() / grad[i].abs().max(1.0) < 1e-4);
            }
        }
    }

    #[test]
    fn partial_posterior_is_additive() {
        let model = logistic_model(12);
        let x = [0.3, 0.7];
        assert_eq!(
            partial_posterior_log_density(model.as_ref(), 0, &x).unwrap(),
            model.prior().log_density(&x)
        );
        for t in 1..=12 {
            let diff = partial_posterior_log_density(model.as_ref(), t, &x).unwrap()
                - partial_posterior_log_density(model.as_ref(), t - 1, &x).unwrap();
            assert!((diff - model.observation_log_likelihood(t - 1, &x)).abs() < 1e-12);
        }
        let full = partial_posterior_log_density(model.as_ref(), 12, &x).unwrap();
        assert!((full - model.log_density(&x)).abs() < 1e-12);
        assert!(partial_posterior_log_density(model.as_ref(), 13, &x).is_err());
    }

    #[test]
    fn truncated_density_is_an_indicator() {
        let base = GaussianTarget::isotropic(vec![0.0], 1.0).unwrap();
        let score = |x: &[f64]| x[0];
        assert_eq!(truncated_log_density(&base, &score, f64::NEG_INFINITY, &[-3.0]), -4.5);
        assert_eq!(truncated_log_density(&base, &score, 0.0, &[-0.1]), f64::NEG_INFINITY);
        assert_eq!(truncated_log_density(&base, &score, 0.0, &[0.1]), base.log_density(&[0.1]));
    }

    #[test]
    fn sub_bridge_endpoints() {
        let model: Arc<dyn SequentialModel> = logistic_model(6);
        let x = [-0.2, 0.4];
        let bridge = sub_bridge_schedule(model.clone(), 3).unwrap();
        let p2 = partial_posterior_log_density(model.as_ref(), 2, &x).unwrap();
        let p3 = partial_posterior_log_density(model.as_ref(), 3, &x).unwrap();
        assert_eq!(bridge.log_density(0.0, &x).unwrap(), p2);
        assert!((bridge.log_density(1.0, &x).unwrap() - p3).abs() < 1e-12);
        let half = p2 + 0.5 * model.log_likelihood(&x, 2..3);
        assert!((bridge.log_density(0.5, &x).unwrap() - half).abs() < 1e-12);
        assert!(sub_bridge_schedule(model, 0).is_err());
    }

    #[test]
    fn partial_path_terminal_is_full_posterior() {
        let model = logistic_model(25);
        let path = Path::partial(model.clone(), 10, true).unwrap();
        assert_eq!(path.terminal_param(), PathParam::Bridge { stage: 3, lambda: 1.0 });
        let x = [0.1, -0.3];
        let end = path.at(path.terminal_param()).unwrap();
        assert!((end.log_density(&x) - model.log_density(&x)).abs() < 1e-12);
        let mid = path.at(PathParam::Bridge { stage: 2, lambda: 0.25 }).unwrap();
        let oracle = model.prior().log_density(&x) + model.log_likelihood(&x, 0..10) + 0.25 * model.log_likelihood(&x, 10..20);
        assert!((mid.log_density(&x) - oracle).abs() < 1e-12);
    }

    #[test]
    fn log_weight_matches_density_differences() {
        let model = logistic_model(25);
        let partial = Path::partial(model, 10, true).unwrap();
        let geo = gaussian_pair();
        let cases = [
            (&geo, PathParam::Lambda(0.0), PathParam::Lambda(0.3)),
            (&geo, PathParam::Lambda(0.3), PathParam::Lambda(1.0)),
            (&partial, PathParam::Bridge { stage: 0, lambda: 1.0 }, PathParam::Bridge { stage: 1, lambda: 0.4 }),
            (&partial, PathParam::Bridge { stage: 1, lambda: 0.4 }, PathParam::Bridge { stage: 1, lambda: 1.0 }),
            (&partial, PathParam::Bridge { stage: 1, lambda: 1.0 }, PathParam::Bridge { stage: 2, lambda: 1.0 }),
        ];
        for (path, a, b) in cases {
            let x: Vec<f64> = vec![0.4; path.dim()];
            let diff = path.at(b).unwrap().log_density(&x) - path.at(a).unwrap().log_density(&x);
            let w = path.log_weight(&a, &b, &x);
            assert!((diff - w).abs() < 1e-10 * diff.abs().max(1.0), "{a:?} -> {b:?}: {diff} vs {w}");
        }
        assert_eq!(geo.log_weight(&PathParam::Lambda(0.2), &PathParam::Lambda(0.2), &[3.0]), 0.0);
    }

    #[test]
    fn fixed_schedules_are_validated() {
        let geo = gaussian_pair();
        assert_eq!(
            geo.fixed_schedule(&[0.0, 0.5, 1.0]).unwrap(),
            vec![PathParam::Lambda(0.5), PathParam::Lambda(1.0)]
        );
        assert!(geo.fixed_schedule(&[0.0, 0.7, 0.5, 1.0]).is_err());
        assert!(geo.fixed_schedule(&[0.1, 1.0]).is_err());
        assert!(geo.fixed_schedule(&[0.0, 0.9]).is_err());
    }

    #[test]
    fn unbridged_partial_path_steps_through_batches() {
        let path = Path::partial(logistic_model(25), 10, false).unwrap();
        let next = path
            .next_param(&path.initial_param(), &[0.0; 2], &[0.0], AdaptiveRule { kappa: 0.5, tol: 1e-10 })
            .unwrap();
        assert_eq!(next, PathParam::Bridge { stage: 1, lambda: 1.0 });
    }

    #[test]
    fn adaptive_level_keeps_kappa_fraction() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let logw = vec![-(10f64.ln()); 10];
        assert_eq!(adaptive_level(&scores, &logw, 0.5, 100.0), 5.0);
        assert_eq!(adaptive_level(&scores, &logw, 0.5, 2.0), 2.0);
    }

    #[test]
    fn trace_values() {
        assert_eq!(PathParam::Bridge { stage: 3, lambda: 0.5 }.trace_value(), 2.5);
        assert_eq!(PathParam::Bridge { stage: 0, lambda: 1.0 }.trace_value(), 0.0);
        assert_eq!(PathParam::Lambda(0.25).trace_value(), 0.25);
    }
}
