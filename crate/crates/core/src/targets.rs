//! Target densities: the evaluation trait, Gaussian targets and Bayesian
//! logistic regression with partial likelihoods and a Laplace initializer.
//!
//! All densities are unnormalized log-kernels `log γ`; normalizers are
//! optional metadata.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmcError};
use crate::numerics::{log1p_exp, sigmoid};
use crate::rng::{self, Purpose, StreamRng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// An unnormalized density on `R^dim`, safe to evaluate concurrently.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    /// `log γ(x)`; `-inf` outside the support.
    fn log_density(&self, x: &[f64]) -> f64;

    /// Writes `∇ log γ(x)` into `grad`.
    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]);

    /// `log Z`, when known in closed form.
    fn exact_log_normalizer(&self) -> Option<f64> {
        None
    }

    /// An exact draw, for distributions that can initialize a sampler.
    fn sample(&self, _rng: &mut StreamRng) -> Option<Vec<f64>> {
        None
    }

    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        None
    }
}

/// Checked evaluation of `log γ(x)`.
pub fn eval_log_density<T: TargetDensity + ?Sized>(target: &T, x: &[f64]) -> Result<f64> {
    check_dim(target.dim(), x.len())?;
    Ok(target.log_density(x))
}

/// Checked evaluation of `∇ log γ(x)`; fails outside the support.
pub fn eval_grad<T: TargetDensity + ?Sized>(target: &T, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(target.dim(), x.len())?;
    if target.log_density(x) == f64::NEG_INFINITY {
        return Err(SmcError::OutsideSupport);
    }
    let mut grad = vec![0.0; x.len()];
    target.grad_log_density(x, &mut grad);
    Ok(grad)
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SmcError::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Covariance {
    Diagonal(Vec<f64>),
    Dense {
        cov: DMatrix<f64>,
        chol_lower: DMatrix<f64>,
        precision: DMatrix<f64>,
    },
}

/// Multivariate Normal. With `normalized` the log-density is the full
/// log-pdf (so `Z = 1`), otherwise it is the log-kernel.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: Vec<f64>,
    cov: Covariance,
    log_det: f64,
    normalized: bool,
}

impl GaussianTarget {
    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), variances.len())?;
        if mean.is_empty() {
            return Err(SmcError::config("Gaussian target needs dim >= 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SmcError::NotPositiveDefinite);
        }
        let log_det = variances.iter().map(|v| v.ln()).sum();
        Ok(Self {
            mean,
            cov: Covariance::Diagonal(variances),
            log_det,
            normalized: false,
        })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, vec![variance; d])
    }

    pub fn dense(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(SmcError::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).abs().max() > 1e-10 * cov.abs().max().max(1.0) {
            return Err(SmcError::config("covariance matrix must be symmetric"));
        }
        let chol = cov.clone().cholesky().ok_or(SmcError::NotPositiveDefinite)?;
        let chol_lower = chol.l();
        if chol_lower.diagonal().iter().any(|p| !(*p > 0.0)) {
            return Err(SmcError::NotPositiveDefinite);
        }
        let log_det = 2.0 * chol_lower.diagonal().iter().map(|p| p.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            mean,
            cov: Covariance::Dense {
                cov,
                chol_lower,
                precision,
            },
            log_det,
            normalized: false,
        })
    }

    /// Include the normalizer so that the density integrates to one.
    pub fn normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `(d/2) log 2π + (1/2) log det Σ`, the normalizer of the log-kernel.
    pub fn kernel_log_normalizer(&self) -> f64 {
        0.5 * self.mean.len() as f64 * LN_2PI + 0.5 * self.log_det
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Dense { cov, .. } => cov.diagonal().iter().copied().collect(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Covariance::Dense { cov, .. } => cov.clone(),
        }
    }

    pub fn precision(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => {
                DMatrix::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|s| 1.0 / s)))
            }
            Covariance::Dense { precision, .. } => precision.clone(),
        }
    }

    fn quadratic_form(&self, x: &[f64]) -> f64 {
        match &self.cov {
            Covariance::Diagonal(v) => x
                .iter()
                .zip(&self.mean)
                .zip(v)
                .map(|((xi, mi), vi)| (xi - mi).powi(2) / vi)
                .sum(),
            Covariance::Dense { precision, .. } => {
                let r = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
                r.dot(&(precision * &r))
            }
        }
    }

    /// The normalized member `∝ γ_a^{1-λ} γ_b^λ` of the geometric path between
    /// two Gaussians (itself Gaussian).
    pub fn geometric_interpolation(a: &GaussianTarget, b: &GaussianTarget, lambda: f64) -> Result<GaussianTarget> {
        check_dim(a.mean.len(), b.mean.len())?;
        if let (Covariance::Diagonal(va), Covariance::Diagonal(vb)) = (&a.cov, &b.cov) {
            let mut mean = Vec::with_capacity(va.len());
            let mut var = Vec::with_capacity(va.len());
            for i in 0..va.len() {
                let p = (1.0 - lambda) / va[i] + lambda / vb[i];
                var.push(1.0 / p);
                mean.push(((1.0 - lambda) * a.mean[i] / va[i] + lambda * b.mean[i] / vb[i]) / p);
            }
            return Ok(GaussianTarget::diagonal(mean, var)?.normalized());
        }
        let pa = a.precision();
        let pb = b.precision();
        let p = &pa * (1.0 - lambda) + &pb * lambda;
        let rhs = &pa * DVector::from_column_slice(&a.mean) * (1.0 - lambda)
            + &pb * DVector::from_column_slice(&b.mean) * lambda;
        let chol = p.cholesky().ok_or(SmcError::NotPositiveDefinite)?;
        let mean = chol.solve(&rhs);
        let cov = chol.inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianTarget::dense(mean.iter().copied().collect(), cov)?.normalized())
    }
}

impl TargetDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let kernel = -0.5 * self.quadratic_form(x);
        if self.normalized {
            kernel - self.kernel_log_normalizer()
        } else {
            kernel
        }
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) {
        match &self.cov {
            Covariance::Diagonal(v) => {
                for i in 0..x.len() {
                    grad[i] = -(x[i] - self.mean[i]) / v[i];
                }
            }
            Covariance::Dense { precision, .. } => {
                let r = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
                let g = precision * r;
                for (gi, v) in grad.iter_mut().zip(g.iter()) {
                    *gi = -v;
                }
            }
        }
    }

    fn exact_log_normalizer(&self) -> Option<f64> {
        Some(if self.normalized { 0.0 } else { self.kernel_log_normalizer() })
    }

    fn sample(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Some(match &self.cov {
            Covariance::Diagonal(v) => (0..d).map(|i| self.mean[i] + v[i].sqrt() * z[i]).collect(),
            Covariance::Dense { chol_lower, .. } => {
                let lz = chol_lower * DVector::from_vec(z);
                (0..d).map(|i| self.mean[i] + lz[i]).collect()
            }
        })
    }

    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        Some(self)
    }
}

/// A posterior assembled from a sampleable prior and observations that can be
/// assimilated in order.
pub trait SequentialModel: Send + Sync {
    fn dim(&self) -> usize;
    fn n_observations(&self) -> usize;
    fn prior(&self) -> &GaussianTarget;
    /// Sum of log-likelihood terms of observations in `range`.
    fn log_likelihood(&self, x: &[f64], range: Range<usize>) -> f64;
    /// Adds `scale · ∇` of the log-likelihood over `range` to `grad`.
    fn add_grad_log_likelihood(&self, x: &[f64], range: Range<usize>, scale: f64, grad: &mut [f64]);
}

/// Bayesian logistic regression with independent Normal priors.
///
/// The prior term is the normalized Normal log-pdf, so the normalizing
/// constant of the posterior kernel is the marginal likelihood.
#[derive(Debug, Clone)]
pub struct LogisticRegressionTarget {
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
    n_obs: usize,
    dim: usize,
    prior: GaussianTarget,
    active_count: usize,
}

impl LogisticRegressionTarget {
    /// `covariates` is row-major `m × d`; outcomes must be 0 or 1.
    pub fn new(
        covariates: Vec<f64>,
        outcomes: Vec<f64>,
        prior_mean: Vec<f64>,
        prior_variance: Vec<f64>,
    ) -> Result<Self> {
        let dim = prior_mean.len();
        let n_obs = outcomes.len();
        if dim == 0 || covariates.len() != n_obs * dim {
            return Err(SmcError::config(format!(
                "covariate matrix has {} entries, expected {} x {}",
                covariates.len(),
                n_obs,
                dim
            )));
        }
        if outcomes.iter().any(|y| *y != 0.0 && *y != 1.0) {
            return Err(SmcError::config("outcomes must be 0 or 1"));
        }
        let prior = GaussianTarget::diagonal(prior_mean, prior_variance)?.normalized();
        Ok(Self {
            covariates,
            outcomes,
            n_obs,
            dim,
            prior,
            active_count: n_obs,
        })
    }

    pub fn with_active_count(mut self, active_count: usize) -> Result<Self> {
        self.set_active_count(active_count)?;
        Ok(self)
    }

    pub fn set_active_count(&mut self, active_count: usize) -> Result<()> {
        if active_count > self.n_obs {
            return Err(SmcError::config(format!(
                "active count {active_count} exceeds {} observations",
                self.n_obs
            )));
        }
        self.active_count = active_count;
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn linear_predictor(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    /// `y η − log(1 + e^η)` for observation `i`.
    pub fn observation_log_likelihood(&self, i: usize, beta: &[f64]) -> f64 {
        let eta = self.linear_predictor(i, beta);
        self.outcomes[i] * eta - log1p_exp(eta)
    }

    /// `log p(y_i = 1 | β)` style predictive log-probability of the stored outcome.
    pub fn predictive_probability(&self, i: usize, beta: &[f64]) -> f64 {
        let p = sigmoid(self.linear_predictor(i, beta));
        if self.outcomes[i] == 1.0 {
            p
        } else {
            1.0 - p
        }
    }

    /// A copy restricted to the rows in `range` (e.g. to hold out test data).
    pub fn subset(&self, range: Range<usize>) -> Result<Self> {
        let covariates = self.covariates[range.start * self.dim..range.end * self.dim].to_vec();
        let outcomes = self.outcomes[range].to_vec();
        LogisticRegressionTarget::new(
            covariates,
            outcomes,
            self.prior.mean().to_vec(),
            self.prior.marginal_variances(),
        )
    }

    pub fn with_prior(&self, prior_mean: Vec<f64>, prior_variance: Vec<f64>) -> Result<Self> {
        let mut out = LogisticRegressionTarget::new(self.covariates.clone(), self.outcomes.clone(), prior_mean, prior_variance)?;
        out.active_count = self.active_count;
        Ok(out)
    }

    fn neg_hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut h = DMatrix::<f64>::zeros(d, d);
        for (j, v) in self.prior.marginal_variances().iter().enumerate() {
            h[(j, j)] = 1.0 / v;
        }
        for i in 0..self.active_count {
            let p = sigmoid(self.linear_predictor(i, beta));
            let w = p * (1.0 - p);
            let row = self.row(i);
            for a in 0..d {
                let wa = w * row[a];
                for b in a..d {
                    h[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h
    }
}

impl SequentialModel for LogisticRegressionTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_observations(&self) -> usize {
        self.n_obs
    }

    fn prior(&self) -> &GaussianTarget {
        &self.prior
    }

    fn log_likelihood(&self, x: &[f64], range: Range<usize>) -> f64 {
        range.map(|i| self.observation_log_likelihood(i, x)).sum()
    }

    fn add_grad_log_likelihood(&self, x: &[f64], range: Range<usize>, scale: f64, grad: &mut [f64]) {
        for i in range {
            let resid = self.outcomes[i] - sigmoid(self.linear_predictor(i, x));
            for (g, xi) in grad.iter_mut().zip(self.row(i)) {
                *g += scale * resid * xi;
            }
        }
    }
}

impl TargetDensity for LogisticRegressionTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.prior.log_density(x) + self.log_likelihood(x, 0..self.active_count)
    }

    fn grad_log_density(&self, x: &[f64], grad: &mut [f64]) {
        self.prior.grad_log_density(x, grad);
        self.add_grad_log_likelihood(x, 0..self.active_count, 1.0, grad);
    }
}

/// Normal approximation at the posterior mode, with covariance equal to the
/// inverse negative Hessian there. Newton ascent with step halving.
pub fn laplace_initializer(target: &LogisticRegressionTarget, max_iter: usize, tol: f64) -> Result<GaussianTarget> {
    if target.active_count() == 0 {
        return Err(SmcError::config("Laplace initialization needs at least one active observation"));
    }
    let d = target.dim;
    let mut beta = target.prior.mean().to_vec();
    let mut grad = vec![0.0; d];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        target.grad_log_density(&beta, &mut grad);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < tol {
            let cov = target
                .neg_hessian(&beta)
                .cholesky()
                .ok_or(SmcError::SingularHessian)?
                .inverse();
            let cov = (&cov + cov.transpose()) * 0.5;
            return Ok(GaussianTarget::dense(beta, cov)?.normalized());
        }
        let chol = target.neg_hessian(&beta).cholesky().ok_or(SmcError::SingularHessian)?;
        let step = chol.solve(&DVector::from_column_slice(&grad));
        let current = target.log_density(&beta);
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            if target.log_density(&trial) >= current || scale < 1e-10 {
                beta = trial;
                break;
            }
            scale *= 0.5;
        }
    }
    Err(SmcError::NewtonDivergence {
        iterations: max_iter,
        grad_norm,
        last: beta,
    })
}

/// Synthetic well-specified logistic data: an intercept column of ones
/// followed by standard Normal covariates, `y ~ Bernoulli(σ(x·β))`.
///
/// Returns the row-major `m × β.len()` covariates and the outcomes.
pub fn synthetic_logistic_data(true_beta: &[f64], m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let d = true_beta.len();
    let mut covariates = Vec::with_capacity(m * d);
    let mut outcomes = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = rng::stream(seed, Purpose::Data, 0, i as u64);
        let start = covariates.len();
        covariates.push(1.0);
        for _ in 1..d {
            covariates.push(rng.sample::<f64, _>(StandardNormal));
        }
        let eta: f64 = covariates[start..].iter().zip(true_beta).map(|(a, b)| a * b).sum();
        let u: f64 = rng.random();
        outcomes.push(if u < sigmoid(eta) { 1.0 } else { 0.0 });
    }
    (covariates, outcomes)
}

/// A dataset parsed from CSV: header row, outcome column `y`, every other
/// column a numeric covariate. An intercept column of ones is prepended unless
/// a column named `intercept` exists.
#[derive(Debug, Clone)]
pub struct LogisticDataset {
    pub columns: Vec<String>,
    pub covariates: Vec<f64>,
    pub outcomes: Vec<f64>,
}

impl LogisticDataset {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SmcError::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let y_col = headers
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| SmcError::config("dataset has no `y` column"))?;
        let has_intercept = headers.iter().any(|h| h == "intercept");
        let mut columns = Vec::new();
        if !has_intercept {
            columns.push("intercept".to_string());
        }
        columns.extend(headers.iter().enumerate().filter(|(j, _)| *j != y_col).map(|(_, h)| h.clone()));

        let mut covariates = Vec::new();
        let mut outcomes = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |j: usize| -> Result<f64> {
                record[j].parse::<f64>().map_err(|_| {
                    SmcError::config(format!("row {}: column `{}` is not numeric", line + 2, headers[j]))
                })
            };
            if !has_intercept {
                covariates.push(1.0);
            }
            for j in (0..headers.len()).filter(|j| *j != y_col) {
                covariates.push(parse(j)?);
            }
            outcomes.push(parse(y_col)?);
        }
        Ok(Self {
            columns,
            covariates,
            outcomes,
        })
    }
}
