//! Recursive least squares regularized by the log-determinant divergence of
//! the pseudo-inertia to a prior.
//!
//! The recursion keeps the quadratic sufficient statistics `A = Σ ΓᵀWΓ`,
//! `b = Σ ΓᵀWy`, `c = Σ yᵀWy`. Each step folds in one sample and then runs
//! damped Newton–Raphson on
//!
//! ```text
//! J(θ) = ½ (θᵀAθ − 2bᵀθ + c) − ½ Σ (θ − θ̂_j)ᵀ G (θ − θ̂_j) + α [D(L(φ), L(φ₀)) + β/2 ‖ψ − ψ₀‖²]
//! ```
//!
//! from the previous estimate. Steps are shortened until the candidate is
//! physically consistent and the objective does not increase, so every
//! accepted estimate stays strictly inside the consistent set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regressor::{RegressorSample, SampleKind};
use crate::spatial::{
    logdet_divergence, logdet_divergence_grad_hess, InertiaParams, Mat3, SpatialError, Vec10, Vec3,
    DEFAULT_CONSISTENCY_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("prior inertia is not physically consistent")]
    InconsistentPrior,
    #[error(transparent)]
    NonPositiveDefinite(#[from] SpatialError),
    #[error("sample has {got} columns, estimator expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Regularization strength `α` (held constant over steps).
    pub alpha: f64,
    /// Weight `β` of the squared distance of the extra parameters `ψ` to their prior.
    pub beta: f64,
    /// Forgetting matrix `G` (square, θ-sized). `None` means zero. Experimental.
    #[serde(skip)]
    pub forgetting: Option<DMatrix<f64>>,
    pub newton_max_iters: usize,
    pub newton_tol: f64,
    pub step_shrink: f64,
    /// Maximum number of step halvings per Newton iteration.
    pub max_backtracks: usize,
    pub consistency_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            forgetting: None,
            newton_max_iters: 20,
            newton_tol: 1e-10,
            step_shrink: 0.5,
            max_backtracks: 60,
            consistency_tol: DEFAULT_CONSISTENCY_TOL,
        }
    }
}

impl EstimatorConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self { alpha, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(EstimatorError::InvalidConfig("alpha and beta must be non-negative".into()));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(EstimatorError::InvalidConfig("step_shrink must lie in (0, 1)".into()));
        }
        if !(self.consistency_tol >= 0.0) {
            return Err(EstimatorError::InvalidConfig("consistency_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Default prior for an unknown grasped object: 1 kg at the grasp origin with
/// isotropic rotational inertia 1e-2 kg·m² (in the object's own frame).
pub fn default_unknown_prior() -> InertiaParams {
    InertiaParams::from_com(1.0, Vec3::zeros(), &(Mat3::identity() * 1e-2))
}

/// How momentum measurements are turned into regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MomentumMode {
    /// Regress directly on the measured momentum (zero for a system starting at rest).
    #[default]
    Absolute,
    /// Regress on differences to the first sample, cancelling any constant offset.
    Difference,
}

/// Outcome of one recursive step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub newton_iters: usize,
    /// `J_k` at the accepted estimate.
    pub objective: f64,
    /// Smallest pseudo-inertia eigenvalue of the accepted estimate.
    pub min_eig: f64,
    /// No consistent, non-increasing step could be found; the estimate was kept.
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    config: EstimatorConfig,
    theta: DVector<f64>,
    phi0: InertiaParams,
    psi0: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    // forgetting statistics: Σ G, Σ G θ̂_j, Σ θ̂_jᵀ G θ̂_j
    g_sum: DMatrix<f64>,
    g_theta: DVector<f64>,
    g_const: f64,
    step: usize,
    momentum_reference: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl EstimatorState {
    pub fn init(phi0: InertiaParams, psi0: Option<DVector<f64>>, config: EstimatorConfig) -> Result<Self, EstimatorError> {
        config.validate()?;
        if !phi0.is_physically_consistent(config.consistency_tol) {
            return Err(EstimatorError::InconsistentPrior);
        }
        let psi0 = psi0.unwrap_or_else(|| DVector::zeros(0));
        let n = 10 + psi0.len();
        if let Some(g) = &config.forgetting {
            if g.shape() != (n, n) {
                return Err(EstimatorError::InvalidConfig(format!("forgetting matrix must be {n}×{n}")));
            }
        }
        let mut theta = DVector::zeros(n);
        theta.rows_mut(0, 10).copy_from(&phi0.0);
        theta.rows_mut(10, psi0.len()).copy_from(&psi0);
        Ok(Self {
            config,
            theta,
            phi0,
            psi0,
            a: DMatrix::zeros(n, n),
            b: DVector::zeros(n),
            c: 0.0,
            g_sum: DMatrix::zeros(n, n),
            g_theta: DVector::zeros(n),
            g_const: 0.0,
            step: 0,
            momentum_reference: None,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn prior(&self) -> InertiaParams {
        self.phi0
    }

    pub fn information_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn phi_of(theta: &DVector<f64>) -> InertiaParams {
        InertiaParams(Vec10::from_iterator(theta.rows(0, 10).iter().copied()))
    }

    /// Current estimate split into the inertia part and the extra parameters.
    pub fn estimate(&self) -> (InertiaParams, DVector<f64>) {
        (Self::phi_of(&self.theta), self.theta.rows(10, self.psi0.len()).into_owned())
    }

    fn regularizer(&self, theta: &DVector<f64>) -> Result<f64, EstimatorError> {
        let d = logdet_divergence(&Self::phi_of(theta), &self.phi0)?;
        let dpsi = theta.rows(10, self.psi0.len()) - &self.psi0;
        Ok(d + 0.5 * self.config.beta * dpsi.norm_squared())
    }

    /// `J_k(θ)`.
    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64, EstimatorError> {
        self.check_dim(theta.len())?;
        let quad = 0.5 * (theta.dot(&(&self.a * theta)) - 2.0 * self.b.dot(theta) + self.c);
        let forget = 0.5 * (theta.dot(&(&self.g_sum * theta)) - 2.0 * self.g_theta.dot(theta) + self.g_const);
        Ok(quad - forget + self.config.alpha * self.regularizer(theta)?)
    }

    /// `J(θ + d) − J(θ)` without the constant terms, which would otherwise
    /// swamp small decreases in rounding.
    fn objective_change(&self, theta: &DVector<f64>, d: &DVector<f64>, reg_at_theta: f64, alpha: f64) -> Result<f64, EstimatorError> {
        let lin = &self.a * theta - &self.b - (&self.g_sum * theta - &self.g_theta);
        let h = &self.a - &self.g_sum;
        let quad = d.dot(&lin) + 0.5 * d.dot(&(h * d));
        let reg = self.regularizer(&(theta + d))? - reg_at_theta;
        Ok(quad + alpha * reg)
    }

    /// Gradient and Hessian of `J_k` at `theta`.
    pub fn gradient_hessian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError> {
        self.check_dim(theta.len())?;
        self.gradient_hessian_with(theta, self.config.alpha)
    }

    fn gradient_hessian_with(&self, theta: &DVector<f64>, alpha: f64) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError> {
        let (gd, hd) = logdet_divergence_grad_hess(&Self::phi_of(theta), &self.phi0)?;
        let mut grad = &self.a * theta - &self.b - (&self.g_sum * theta - &self.g_theta);
        let mut hess = &self.a - &self.g_sum;
        for i in 0..10 {
            grad[i] += alpha * gd[i];
            for j in 0..10 {
                hess[(i, j)] += alpha * hd[(i, j)];
            }
        }
        let np = self.psi0.len();
        for k in 0..np {
            grad[10 + k] += alpha * self.config.beta * (theta[10 + k] - self.psi0[k]);
            hess[(10 + k, 10 + k)] += alpha * self.config.beta;
        }
        Ok((grad, hess))
    }

    fn check_dim(&self, got: usize) -> Result<(), EstimatorError> {
        if got != self.dim() {
            return Err(EstimatorError::DimensionMismatch { expected: self.dim(), got });
        }
        Ok(())
    }

    fn min_eig(&self, theta: &DVector<f64>) -> f64 {
        Self::phi_of(theta).min_pseudo_eigenvalue()
    }

    /// Fold a regressor sample into the statistics and re-minimize.
    pub fn step(&mut self, sample: &RegressorSample) -> Result<StepReport, EstimatorError> {
        self.check_dim(sample.n_cols())?;
        let gtw = sample.matrix.transpose() * &sample.weight;
        self.a += &gtw * &sample.matrix;
        self.b += &gtw * &sample.measurement;
        self.c += sample.measurement.dot(&(&sample.weight * &sample.measurement));
        if let Some(g) = &self.config.forgetting {
            self.g_sum += g;
            self.g_theta += g * &self.theta;
            self.g_const += self.theta.dot(&(g * &self.theta));
        }
        // symmetrize against accumulated rounding
        self.a = 0.5 * (&self.a + self.a.transpose());
        self.step += 1;
        self.minimize()
    }

    /// Momentum-regression step. In [`MomentumMode::Difference`] the first
    /// sample becomes the reference and later samples are regressed on
    /// `(U_m − U_m,0, P_b − P_b,0)`.
    pub fn step_momentum(
        &mut self,
        regressor: &DMatrix<f64>,
        measured: &DVector<f64>,
        time: f64,
        mode: MomentumMode,
    ) -> Result<StepReport, EstimatorError> {
        let (u, y) = match mode {
            MomentumMode::Absolute => (regressor.clone(), measured.clone()),
            MomentumMode::Difference => {
                let (u0, y0) = self.momentum_reference.get_or_insert_with(|| (regressor.clone(), measured.clone()));
                (regressor - &*u0, measured - &*y0)
            }
        };
        let sample = RegressorSample::unweighted(SampleKind::Momentum, u, y, time);
        self.step(&sample)
    }

    fn solve_newton(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
        if let Some(chol) = hess.clone().cholesky() {
            return -chol.solve(grad);
        }
        let svd = hess.clone().svd(true, true);
        let smax = svd.singular_values.max();
        svd.solve(grad, 1e-14 * smax.max(f64::MIN_POSITIVE)).map(|d| -d).unwrap_or_else(|_| -grad.clone())
    }

    /// Damped Newton on `J_k` with regularization weight `alpha`, from `theta`.
    fn newton(&self, mut theta: DVector<f64>, alpha: f64) -> Result<NewtonRun, EstimatorError> {
        let cfg = &self.config;
        let mut run = NewtonRun { theta: DVector::zeros(0), iters: 0, converged: false, stalled: false };
        for it in 0..cfg.newton_max_iters {
            let (grad, hess) = self.gradient_hessian_with(&theta, alpha)?;
            let delta = Self::solve_newton(&hess, &grad);
            if delta.norm() < cfg.newton_tol {
                run.converged = true;
                break;
            }
            let reg0 = self.regularizer(&theta)?;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_backtracks {
                let d = &delta * t;
                let cand = &theta + &d;
                if self.min_eig(&cand) > cfg.consistency_tol {
                    if let Ok(change) = self.objective_change(&theta, &d, reg0, alpha) {
                        if change <= 0.0 {
                            accepted = Some((cand, d));
                            break;
                        }
                    }
                }
                t *= cfg.step_shrink;
            }
            let Some((cand, d)) = accepted else {
                // No admissible step. Near the optimum this is rounding; far from it, a stall.
                let decrement = -grad.dot(&delta);
                let scale = 1.0 + self.objective(&theta).map(f64::abs).unwrap_or(0.0);
                run.stalled = it == 0 && decrement > 1e-9 * scale;
                run.converged = !run.stalled;
                break;
            };
            theta = cand;
            run.iters += 1;
            if d.norm() < cfg.newton_tol {
                run.converged = true;
                break;
            }
        }
        run.theta = theta;
        Ok(run)
    }

    fn minimize(&mut self) -> Result<StepReport, EstimatorError> {
        let alpha = self.config.alpha;
        let mut best = self.newton(self.theta.clone(), alpha)?;
        let mut iters = best.iters;
        if !best.converged && !best.stalled && alpha > 0.0 {
            // Pressed against the cone boundary damped Newton crawls. Re-centre
            // with a heavier regularizer and relax it back to `alpha`.
            let mut theta = best.theta.clone();
            for m in (0..=CONTINUATION_DECADES).rev() {
                let run = self.newton(theta, alpha * 10f64.powi(m))?;
                iters += run.iters;
                if m == 0 && self.objective(&run.theta)? <= self.objective(&best.theta)? {
                    best = run;
                    break;
                }
                theta = run.theta;
            }
        }
        self.theta = best.theta;
        Ok(StepReport {
            newton_iters: iters,
            objective: self.objective(&self.theta)?,
            min_eig: self.min_eig(&self.theta),
            stalled: best.stalled,
        })
    }
}

/// Decades of extra regularization weight used to re-centre a stuck iterate.
const CONTINUATION_DECADES: i32 = 6;

struct NewtonRun {
    theta: DVector<f64>,
    iters: usize,
    converged: bool,
    stalled: bool,
}
