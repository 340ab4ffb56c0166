//! Numeric kernel: weighted logistic and linear regression, approximate
//! posterior parameter draws for proper imputation, and a small nonlinear
//! root finder.
//!
//! Multinomial responses use the reference-level logit parameterization with
//! the last level as reference, so a binary fit carries one coefficient row.
//! Response values are 0-based level indices; callers translate survey codes
//! `1..=m` down by one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{MdamError, Result};

/// IRLS convergence tolerance on the max-norm of the score.
pub const GRADIENT_TOL: f64 = 1e-8;
/// Iteration cap for IRLS.
pub const MAX_IRLS_ITER: usize = 100;
/// Ridge applied when separation or rank deficiency is detected.
pub const RIDGE_FALLBACK: f64 = 1e-4;
/// Coefficient norm that triggers the separation fallback under ridge 0.
const SEPARATION_NORM: f64 = 30.0;

/// Fitted (multinomial) logistic regression.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Number of response levels `m`.
    pub n_levels: usize,
    /// Coefficients, one row per non-reference level (`m-1` rows, `p` columns).
    pub coefficients: DMatrix<f64>,
    /// Observed information of the (possibly ridge-penalized) objective,
    /// blocked by level: dimension `(m-1)p x (m-1)p`.
    pub information: DMatrix<f64>,
    pub converged: bool,
    /// Set when the separation fallback fired.
    pub separated: bool,
    pub ridge: f64,
    pub iterations: usize,
    /// Max-norm of the score at the returned coefficients.
    pub gradient_norm: f64,
}

/// Fitted weighted linear regression.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coefficients: DVector<f64>,
    /// Weighted RSS over (sum of weights − p).
    pub residual_variance: f64,
    /// `(X'WX)^{-1}` (ridge-adjusted when the fallback fired); multiply by a
    /// residual variance to get a coefficient covariance.
    pub unit_covariance: DMatrix<f64>,
    /// Effective degrees of freedom, `sum(w) − p`.
    pub degrees_of_freedom: f64,
    pub ridge: f64,
}

/// One draw from a logistic fit's large-sample coefficient distribution.
#[derive(Debug, Clone)]
pub struct LogisticDraw {
    pub coefficients: DMatrix<f64>,
}

/// One draw from a linear fit: residual variance first, coefficients
/// conditional on it.
#[derive(Debug, Clone)]
pub struct LinearDraw {
    pub coefficients: DVector<f64>,
    pub residual_variance: f64,
}

impl LinearDraw {
    pub fn predict(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(self.coefficients.iter())
            .map(|(x, b)| x * b)
            .sum()
    }
}

/// Fit a case-weighted (multinomial) logistic regression by IRLS.
///
/// `response[i]` is the 0-based level index of observation `i`; every level
/// in `0..n_levels` must appear with positive weight. Perfect separation is
/// detected by coefficient blow-up and refit with a small ridge.
pub fn fit_logistic(
    design: &DMatrix<f64>,
    response: &[usize],
    n_levels: usize,
    weights: &[f64],
) -> Result<LogisticFit> {
    assert_eq!(design.nrows(), response.len(), "design/response length mismatch");
    assert_eq!(design.nrows(), weights.len(), "design/weights length mismatch");
    assert!(n_levels >= 2, "need at least two response levels");

    let mut level_weight = vec![0.0; n_levels];
    for (&y, &w) in response.iter().zip(weights) {
        assert!(y < n_levels, "response level out of range");
        level_weight[y] += w;
    }
    if let Some(level) = level_weight.iter().position(|&w| !(w > 0.0)) {
        return Err(MdamError::EmptyResponseLevel { level });
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(MdamError::Validation("all case weights are zero".into()));
    }

    match irls(design, response, n_levels, weights, 0.0) {
        IrlsOutcome::Converged(fit) => Ok(fit),
        IrlsOutcome::Separated => {
            let mut fit = match irls(design, response, n_levels, weights, RIDGE_FALLBACK) {
                IrlsOutcome::Converged(fit) => fit,
                IrlsOutcome::Separated | IrlsOutcome::Stalled(_) => {
                    return Err(MdamError::Validation(
                        "logistic fit did not stabilize under ridge fallback".into(),
                    ))
                }
            };
            fit.separated = true;
            Ok(fit)
        }
        IrlsOutcome::Stalled(fit) => Ok(fit),
    }
}

enum IrlsOutcome {
    Converged(LogisticFit),
    /// Coefficient norm blew past the separation threshold at ridge 0.
    Separated,
    /// Hit the iteration cap; fit returned with `converged = false`.
    Stalled(LogisticFit),
}

fn irls(
    design: &DMatrix<f64>,
    response: &[usize],
    n_levels: usize,
    weights: &[f64],
    ridge: f64,
) -> IrlsOutcome {
    let p = design.ncols();
    let k = (n_levels - 1) * p;

    let mut beta = DMatrix::<f64>::zeros(n_levels - 1, p);
    let mut loglik = penalized_loglik(design, response, n_levels, weights, &beta, ridge);
    let mut iterations = 0;

    for iter in 1..=MAX_IRLS_ITER {
        iterations = iter;
        let probs = softmax_matrix(design, &beta);
        let gradient = score(design, response, weights, &probs, &beta, ridge);
        let gradient_norm = gradient.amax();
        let information = observed_information(design, weights, &probs, ridge);
        if gradient_norm <= GRADIENT_TOL {
            return IrlsOutcome::Converged(LogisticFit {
                n_levels,
                coefficients: beta,
                information,
                converged: true,
                separated: false,
                ridge,
                iterations,
                gradient_norm,
            });
        }

        let step = match information.clone().cholesky() {
            Some(chol) => chol.solve(&gradient),
            None => {
                // Near-singular information: jitter enough to take a step.
                let jitter = DMatrix::<f64>::identity(k, k) * 1e-8;
                match (information.clone() + jitter).cholesky() {
                    Some(chol) => chol.solve(&gradient),
                    None => return IrlsOutcome::Stalled(LogisticFit {
                        n_levels,
                        coefficients: beta,
                        information,
                        converged: false,
                        separated: false,
                        ridge,
                        iterations,
                        gradient_norm,
                    }),
                }
            }
        };

        // Step-halving keeps the objective increasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + reshape_step(&step, n_levels - 1, p) * scale;
            let candidate_loglik =
                penalized_loglik(design, response, n_levels, weights, &candidate, ridge);
            if candidate_loglik.is_finite() && candidate_loglik >= loglik - 1e-12 {
                beta = candidate;
                loglik = candidate_loglik;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if ridge == 0.0 && beta.norm() > SEPARATION_NORM {
            return IrlsOutcome::Separated;
        }
    }

    let probs = softmax_matrix(design, &beta);
    let gradient = score(design, response, weights, &probs, &beta, ridge);
    let gradient_norm = gradient.amax();
    let converged = gradient_norm <= GRADIENT_TOL;
    let information = observed_information(design, weights, &probs, ridge);
    let fit = LogisticFit {
        n_levels,
        coefficients: beta,
        information,
        converged,
        separated: false,
        ridge,
        iterations,
        gradient_norm,
    };
    if converged {
        IrlsOutcome::Converged(fit)
    } else {
        IrlsOutcome::Stalled(fit)
    }
}

fn reshape_step(step: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| step[r * cols + c])
}

/// Level probabilities for every design row: `n x m`, reference level last.
fn softmax_matrix(design: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    let m = beta.nrows() + 1;
    let mut probs = DMatrix::<f64>::zeros(n, m);
    let mut eta = vec![0.0; m];
    for i in 0..n {
        for c in 0..m - 1 {
            eta[c] = (0..design.ncols()).map(|j| design[(i, j)] * beta[(c, j)]).sum();
        }
        eta[m - 1] = 0.0;
        let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..m {
            let e = (eta[c] - max).exp();
            probs[(i, c)] = e;
            denom += e;
        }
        for c in 0..m {
            probs[(i, c)] /= denom;
        }
    }
    probs
}

fn penalized_loglik(
    design: &DMatrix<f64>,
    response: &[usize],
    n_levels: usize,
    weights: &[f64],
    beta: &DMatrix<f64>,
    ridge: f64,
) -> f64 {
    let probs = softmax_matrix(design, beta);
    let mut ll = 0.0;
    for (i, (&y, &w)) in response.iter().zip(weights).enumerate() {
        ll += w * probs[(i, y)].max(1e-300).ln();
    }
    let _ = n_levels;
    ll - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Score of the (penalized) weighted log-likelihood, stacked level-major.
fn score(
    design: &DMatrix<f64>,
    response: &[usize],
    weights: &[f64],
    probs: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    ridge: f64,
) -> DVector<f64> {
    let p = design.ncols();
    let m1 = beta.nrows();
    let mut gradient = DVector::<f64>::zeros(m1 * p);
    for i in 0..design.nrows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for c in 0..m1 {
            let indicator = if response[i] == c { 1.0 } else { 0.0 };
            let resid = w * (indicator - probs[(i, c)]);
            for j in 0..p {
                gradient[c * p + j] += resid * design[(i, j)];
            }
        }
    }
    if ridge > 0.0 {
        for c in 0..m1 {
            for j in 0..p {
                gradient[c * p + j] -= ridge * beta[(c, j)];
            }
        }
    }
    gradient
}

fn observed_information(
    design: &DMatrix<f64>,
    weights: &[f64],
    probs: &DMatrix<f64>,
    ridge: f64,
) -> DMatrix<f64> {
    let p = design.ncols();
    let m1 = probs.ncols() - 1;
    let mut info = DMatrix::<f64>::zeros(m1 * p, m1 * p);
    for i in 0..design.nrows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for c in 0..m1 {
            for d in c..m1 {
                let kron = if c == d { 1.0 } else { 0.0 };
                let s = w * probs[(i, c)] * (kron - probs[(i, d)]);
                for a in 0..p {
                    for b in 0..p {
                        let v = s * design[(i, a)] * design[(i, b)];
                        info[(c * p + a, d * p + b)] += v;
                        if c != d {
                            info[(d * p + b, c * p + a)] += v;
                        }
                    }
                }
            }
        }
    }
    // The off-diagonal blocks get a negative sign from the multinomial
    // Hessian; p_c(delta - p_d) already carries it through kron = 0.
    if ridge > 0.0 {
        for idx in 0..m1 * p {
            info[(idx, idx)] += ridge;
        }
    }
    info
}

impl LogisticFit {
    /// Predicted level probabilities for one design row.
    pub fn predict_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        predict_with(&self.coefficients, self.n_levels, row)
    }

    /// One coefficient draw from `N(beta, information^{-1})`.
    pub fn draw_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LogisticDraw> {
        let covariance = psd_inverse(&self.information)?;
        let noise = psd_sample(&covariance, rng)?;
        let p = self.coefficients.ncols();
        let mut coefficients = self.coefficients.clone();
        for c in 0..coefficients.nrows() {
            for j in 0..p {
                coefficients[(c, j)] += noise[c * p + j];
            }
        }
        Ok(LogisticDraw { coefficients })
    }
}

impl LogisticDraw {
    pub fn predict_row(&self, n_levels: usize, row: &[f64]) -> Result<Vec<f64>> {
        predict_with(&self.coefficients, n_levels, row)
    }
}

fn predict_with(coefficients: &DMatrix<f64>, n_levels: usize, row: &[f64]) -> Result<Vec<f64>> {
    if row.len() != coefficients.ncols() {
        return Err(MdamError::Validation(format!(
            "design row arity {} does not match fit arity {}",
            row.len(),
            coefficients.ncols()
        )));
    }
    let mut eta = vec![0.0; n_levels];
    for c in 0..n_levels - 1 {
        eta[c] = row
            .iter()
            .enumerate()
            .map(|(j, x)| x * coefficients[(c, j)])
            .sum();
    }
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let denom: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= denom;
    }
    Ok(probs)
}

/// Weighted least squares with a ridge fallback on rank deficiency.
pub fn fit_linear(design: &DMatrix<f64>, response: &[f64], weights: &[f64]) -> Result<LinearFit> {
    assert_eq!(design.nrows(), response.len());
    assert_eq!(design.nrows(), weights.len());
    let n = design.nrows();
    let p = design.ncols();

    let weight_sum: f64 = weights.iter().sum();
    let df = weight_sum - p as f64;
    if df <= 0.0 {
        return Err(MdamError::ZeroDegreesOfFreedom);
    }

    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for a in 0..p {
            xtwy[a] += w * design[(i, a)] * response[i];
            for b in a..p {
                let v = w * design[(i, a)] * design[(i, b)];
                xtwx[(a, b)] += v;
                if a != b {
                    xtwx[(b, a)] += v;
                }
            }
        }
    }

    let (solved, ridge) = match xtwx.clone().cholesky() {
        Some(chol) => ((chol.solve(&xtwy), chol), 0.0),
        None => {
            let mut ridged = xtwx.clone();
            for d in 0..p {
                ridged[(d, d)] += RIDGE_FALLBACK;
            }
            let chol = ridged
                .cholesky()
                .ok_or(MdamError::NonPsdCovariance)?;
            ((chol.solve(&xtwy), chol), RIDGE_FALLBACK)
        }
    };
    let (coefficients, chol) = solved;

    let mut rss = 0.0;
    for i in 0..n {
        let fitted: f64 = (0..p).map(|j| design[(i, j)] * coefficients[j]).sum();
        let r = response[i] - fitted;
        rss += weights[i] * r * r;
    }
    let residual_variance = rss / df;
    let unit_covariance = chol.inverse();

    Ok(LinearFit {
        coefficients,
        residual_variance,
        unit_covariance,
        degrees_of_freedom: df,
        ridge,
    })
}

impl LinearFit {
    /// Coefficient covariance at the fitted residual variance.
    pub fn coefficient_covariance(&self) -> DMatrix<f64> {
        &self.unit_covariance * self.residual_variance
    }

    /// Draw residual variance from its scaled inverse chi-square
    /// approximation, then coefficients conditional on it.
    pub fn draw_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LinearDraw> {
        let residual_variance = if self.residual_variance > 0.0 {
            let chi: f64 = ChiSquared::new(self.degrees_of_freedom)
                .map_err(|_| MdamError::ZeroDegreesOfFreedom)?
                .sample(rng);
            self.degrees_of_freedom * self.residual_variance / chi.max(1e-12)
        } else {
            0.0
        };
        let covariance = &self.unit_covariance * residual_variance;
        let noise = psd_sample(&covariance, rng)?;
        Ok(LinearDraw {
            coefficients: &self.coefficients + noise,
            residual_variance,
        })
    }
}

/// Inverse of a symmetric PSD matrix via its eigendecomposition.
fn psd_inverse(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eigen = matrix.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = (max_eig * 1e-14).max(1e-300);
    let mut inv_values = eigen.eigenvalues.clone();
    for v in inv_values.iter_mut() {
        if *v < -1e-10 * max_eig.max(1.0) {
            return Err(MdamError::NonPsdCovariance);
        }
        *v = 1.0 / v.max(floor);
    }
    let q = &eigen.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&inv_values) * q.transpose())
}

/// Sample `N(0, covariance)` by scaling the eigenbasis; exact for PSD
/// matrices including the zero matrix.
fn psd_sample<R: Rng + ?Sized>(covariance: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let k = covariance.nrows();
    let eigen = covariance.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if eigen
        .eigenvalues
        .iter()
        .any(|&v| v < -1e-10 * max_eig.max(1.0) - 1e-10)
    {
        return Err(MdamError::NonPsdCovariance);
    }
    let z = DVector::<f64>::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scaled = DVector::<f64>::from_fn(k, |i, _| eigen.eigenvalues[i].max(0.0).sqrt() * z[i]);
    Ok(&eigen.eigenvectors * scaled)
}

/// Default residual tolerance for [`solve_system`].
pub const SOLVE_TOL: f64 = 1e-10;
/// Iteration cap for the nonlinear solver.
pub const MAX_SOLVE_ITER: usize = 200;

/// A small square nonlinear system `F(x) = 0`.
pub struct EquationSystem<'a> {
    pub dimension: usize,
    /// Writes `F(x)` into the output slice.
    pub residual: Box<dyn Fn(&[f64], &mut [f64]) + 'a>,
    pub initial: Vec<f64>,
    pub tolerance: f64,
}

impl<'a> EquationSystem<'a> {
    pub fn new(
        dimension: usize,
        initial: Vec<f64>,
        residual: impl Fn(&[f64], &mut [f64]) + 'a,
    ) -> Self {
        assert_eq!(initial.len(), dimension);
        assert!(dimension <= 64, "solver is for small systems only");
        Self {
            dimension,
            residual: Box::new(residual),
            initial,
            tolerance: SOLVE_TOL,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.residual)(x, out);
    }
}

/// A located root with its residual.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub root: Vec<f64>,
    pub max_residual: f64,
    pub iterations: usize,
}

/// Damped Newton with a finite-difference Jacobian and backtracking line
/// search; falls back to a dogleg trust-region step when the Newton
/// direction stops making progress.
pub fn solve_system(sys: &EquationSystem) -> Result<SolveOutcome> {
    let n = sys.dimension;
    let mut x = sys.initial.clone();
    let mut f = vec![0.0; n];
    sys.eval(&x, &mut f);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(MdamError::Validation(
            "system residual not evaluable at the initial point".into(),
        ));
    }

    let mut best_residual = max_abs(&f);
    let mut best_x = x.clone();
    let mut radius = 1.0f64.max(norm2(&x));

    for iter in 1..=MAX_SOLVE_ITER {
        let residual_norm = max_abs(&f);
        if residual_norm <= sys.tolerance {
            return Ok(SolveOutcome {
                root: x,
                max_residual: residual_norm,
                iterations: iter - 1,
            });
        }

        let jac = fd_jacobian(sys, &x, &f);
        let newton = newton_direction(&jac, &f);

        let merit0 = 0.5 * dot(&f, &f);
        let mut advanced = false;

        if let Some(direction) = &newton {
            // Backtracking on the merit 0.5||F||^2; the exact Newton
            // direction has slope -2*merit there.
            let mut t = 1.0;
            let mut trial = vec![0.0; n];
            let mut trial_f = vec![0.0; n];
            while t > 1e-10 {
                for i in 0..n {
                    trial[i] = x[i] + t * direction[i];
                }
                sys.eval(&trial, &mut trial_f);
                let merit = 0.5 * dot(&trial_f, &trial_f);
                if merit.is_finite() && merit <= merit0 * (1.0 - 1e-4 * t) {
                    x.copy_from_slice(&trial);
                    f.copy_from_slice(&trial_f);
                    advanced = true;
                    break;
                }
                t *= 0.5;
            }
        }

        if !advanced {
            advanced = dogleg_step(sys, &mut x, &mut f, &jac, newton.as_deref(), &mut radius);
        }

        let now = max_abs(&f);
        if now < best_residual {
            best_residual = now;
            best_x.copy_from_slice(&x);
        }
        if !advanced {
            // Stagnation: neither Newton nor the trust region reduced the merit.
            return Err(MdamError::SolverNoConvergence {
                best_residual,
                best_point: best_x,
            });
        }
    }

    let final_norm = max_abs(&f);
    if final_norm <= sys.tolerance {
        Ok(SolveOutcome {
            root: x,
            max_residual: final_norm,
            iterations: MAX_SOLVE_ITER,
        })
    } else if final_norm < best_residual {
        Err(MdamError::SolverNoConvergence {
            best_residual: final_norm,
            best_point: x,
        })
    } else {
        Err(MdamError::SolverNoConvergence {
            best_residual,
            best_point: best_x,
        })
    }
}

/// Forward-difference Jacobian with step `1e-7 * max(1, |x_k|)`.
fn fd_jacobian(sys: &EquationSystem, x: &[f64], f0: &[f64]) -> DMatrix<f64> {
    let n = sys.dimension;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let mut xh = x.to_vec();
    let mut fh = vec![0.0; n];
    for k in 0..n {
        let h = 1e-7 * x[k].abs().max(1.0);
        xh[k] = x[k] + h;
        sys.eval(&xh, &mut fh);
        for r in 0..n {
            jac[(r, k)] = (fh[r] - f0[r]) / h;
        }
        xh[k] = x[k];
    }
    jac
}

fn newton_direction(jac: &DMatrix<f64>, f: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_iterator(f.len(), f.iter().map(|v| -v));
    let lu = jac.clone().lu();
    if let Some(solution) = lu.solve(&rhs) {
        if solution.iter().all(|v| v.is_finite()) {
            return Some(solution.iter().cloned().collect());
        }
    }
    // Singular Jacobian: Levenberg-style damping.
    let jtj = jac.transpose() * jac;
    let jtf = jac.transpose() * DVector::from_column_slice(f);
    let scale = jtj.diagonal().amax().max(1e-300);
    let mut lambda = 1e-10 * scale;
    for _ in 0..20 {
        let mut damped = jtj.clone();
        for d in 0..damped.nrows() {
            damped[(d, d)] += lambda;
        }
        if let Some(chol) = damped.cholesky() {
            let solution = chol.solve(&(-&jtf));
            if solution.iter().all(|v| v.is_finite()) {
                return Some(solution.iter().cloned().collect());
            }
        }
        lambda *= 10.0;
    }
    None
}

/// One dogleg pass: shrink the radius until a step reduces the merit.
/// Returns false when the radius collapses without progress.
fn dogleg_step(
    sys: &EquationSystem,
    x: &mut [f64],
    f: &mut [f64],
    jac: &DMatrix<f64>,
    newton: Option<&[f64]>,
    radius: &mut f64,
) -> bool {
    let n = x.len();
    let merit0 = 0.5 * dot(f, f);
    let gradient = jac.transpose() * DVector::from_column_slice(f);
    let grad_norm = gradient.norm();
    if grad_norm == 0.0 {
        return false; // merit stationary; nothing to do
    }
    let jg = jac * &gradient;
    let jg_norm2 = dot(jg.as_slice(), jg.as_slice());
    if jg_norm2 == 0.0 {
        return false;
    }
    // Cauchy point: steepest descent minimizer of the quadratic model.
    let cauchy_scale = grad_norm * grad_norm / jg_norm2;
    let cauchy: Vec<f64> = gradient.iter().map(|g| -cauchy_scale * g).collect();
    let cauchy_norm = norm2(&cauchy);

    let mut trial = vec![0.0; n];
    let mut trial_f = vec![0.0; n];
    while *radius > 1e-14 {
        let step: Vec<f64> = match newton {
            Some(nd) if norm2(nd) <= *radius => nd.to_vec(),
            _ => {
                if cauchy_norm >= *radius {
                    cauchy.iter().map(|c| c * *radius / cauchy_norm).collect()
                } else if let Some(nd) = newton {
                    // Dogleg segment between the Cauchy and Newton points.
                    let d: Vec<f64> = nd.iter().zip(&cauchy).map(|(n, c)| n - c).collect();
                    let a = dot(&d, &d);
                    let b = 2.0 * dot(&cauchy, &d);
                    let c = dot(&cauchy, &cauchy) - *radius * *radius;
                    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
                    let tau = if a > 0.0 { (-b + disc) / (2.0 * a) } else { 0.0 };
                    cauchy
                        .iter()
                        .zip(&d)
                        .map(|(c0, dd)| c0 + tau.clamp(0.0, 1.0) * dd)
                        .collect()
                } else {
                    cauchy.iter().map(|c| c * (*radius / cauchy_norm).min(1.0)).collect()
                }
            }
        };

        for i in 0..n {
            trial[i] = x[i] + step[i];
        }
        sys.eval(&trial, &mut trial_f);
        let merit = 0.5 * dot(&trial_f, &trial_f);
        if merit.is_finite() && merit < merit0 {
            let reduction = (merit0 - merit) / merit0.max(1e-300);
            x.copy_from_slice(&trial);
            f.copy_from_slice(&trial_f);
            if reduction > 0.5 {
                *radius *= 2.0;
            }
            return true;
        }
        *radius *= 0.25;
    }
    false
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn norm2(values: &[f64]) -> f64 {
    dot(values, values).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Build a design matrix from rows.
pub fn design_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, p, |i, j| rows[i][j])
}
