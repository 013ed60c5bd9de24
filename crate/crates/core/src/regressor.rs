//! Linear-in-parameters regressors for generalized force and base momentum,
//! plus numerical identifiability analysis.
//!
//! Columns are obtained by probing the (exactly linear) dynamics code with
//! unit parameter vectors, one link at a time, so `U Φ` reproduces inverse
//! dynamics and `U_m Φ` reproduces the base momentum to rounding.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::multibody::{body_wrench, link_wrench_to_generalized, Kinematics, ModelError, MultibodyModel, RobotState};
use crate::spatial::{InertiaParams, PARAM_LABELS};

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("no regressor samples given")]
    EmptyInput,
    #[error("column index {index} out of bounds for {cols} columns")]
    IndexOutOfBounds { index: usize, cols: usize },
    #[error("column selection must be strictly increasing")]
    UnsortedSelection,
    #[error("sample shape mismatch: {0}")]
    Shape(String),
    #[error("weight matrix must be symmetric positive definite")]
    InvalidWeight,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv output failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Force,
    Momentum,
}

/// One timestep's regressor, measurement and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorSample {
    pub kind: SampleKind,
    pub matrix: DMatrix<f64>,
    pub measurement: DVector<f64>,
    pub weight: DMatrix<f64>,
    pub time: f64,
}

impl RegressorSample {
    pub fn new(
        kind: SampleKind,
        matrix: DMatrix<f64>,
        measurement: DVector<f64>,
        weight: DMatrix<f64>,
        time: f64,
    ) -> Result<Self, RegressorError> {
        let rows = matrix.nrows();
        if measurement.len() != rows {
            return Err(RegressorError::Shape(format!("{} rows but {} measurements", rows, measurement.len())));
        }
        if weight.nrows() != rows || weight.ncols() != rows {
            return Err(RegressorError::Shape(format!("weight must be {rows}×{rows}")));
        }
        if (&weight - weight.transpose()).abs().max() > 1e-12 * (1.0 + weight.abs().max())
            || weight.clone().cholesky().is_none()
        {
            return Err(RegressorError::InvalidWeight);
        }
        Ok(Self { kind, matrix, measurement, weight, time })
    }

    /// Sample weighted by the identity.
    pub fn unweighted(kind: SampleKind, matrix: DMatrix<f64>, measurement: DVector<f64>, time: f64) -> Self {
        let n = matrix.nrows();
        Self::new(kind, matrix, measurement, DMatrix::identity(n, n), time).expect("identity weight is valid")
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Retained regressor columns, in increasing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSelection {
    indices: Vec<usize>,
    labels: Vec<String>,
}

impl ColumnSelection {
    pub fn new(indices: Vec<usize>, labels: Vec<String>) -> Result<Self, RegressorError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RegressorError::UnsortedSelection);
        }
        if labels.len() != indices.len() {
            return Err(RegressorError::Shape("one label per index".into()));
        }
        Ok(Self { indices, labels })
    }

    /// All columns of `n` with generic labels.
    pub fn all(n: usize) -> Self {
        Self { indices: (0..n).collect(), labels: (0..n).map(|i| format!("c{i}")).collect() }
    }

    /// The 10 parameter columns of one link of `model`.
    pub fn link(model: &MultibodyModel, link: usize) -> Self {
        let name = &model.links()[link].name;
        Self {
            indices: (10 * link..10 * link + 10).collect(),
            labels: PARAM_LABELS.iter().map(|p| format!("{name}.{p}")).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

/// Columns of the force regressor belonging to one link (`n_d × 10`), given
/// precomputed kinematics.
pub fn link_force_regressor(model: &MultibodyModel, kin: &Kinematics, link: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(model.nv(), 10);
    for k in 0..10 {
        let w = body_wrench(&InertiaParams::unit(k), &kin.velocity[link], &kin.acceleration[link]);
        u.set_column(k, &link_wrench_to_generalized(model, kin, link, w));
    }
    u
}

/// Force regressor `U(q, ν, ν̇)` with `U Φ = F` (`n_d × 10 n_b`).
pub fn force_regressor(model: &MultibodyModel, state: &RobotState, nudot: &DVector<f64>) -> DMatrix<f64> {
    let kin = Kinematics::compute(model, state, nudot, true);
    let mut u = DMatrix::zeros(model.nv(), 10 * model.n_links());
    for i in 0..model.n_links() {
        u.columns_mut(10 * i, 10).copy_from(&link_force_regressor(model, &kin, i));
    }
    u
}

/// Extra generalized-force terms `Λ(q, ν, ν̇)` linear in unknown parameters `ψ`,
/// entering as `y = F + Λ ψ`.
pub trait FrictionModel {
    fn n_params(&self, model: &MultibodyModel) -> usize;
    fn columns(&self, model: &MultibodyModel, state: &RobotState, nudot: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoFriction;

impl FrictionModel for NoFriction {
    fn n_params(&self, _: &MultibodyModel) -> usize {
        0
    }
    fn columns(&self, model: &MultibodyModel, _: &RobotState, _: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(model.nv(), 0)
    }
}

/// One viscous coefficient per actuated joint: column `j` holds `−ν_j` on the
/// joint's row, so a joint friction torque `−b ν` corresponds to `ψ = −b`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ViscousFriction;

impl FrictionModel for ViscousFriction {
    fn n_params(&self, model: &MultibodyModel) -> usize {
        model.n_joints()
    }
    fn columns(&self, model: &MultibodyModel, state: &RobotState, _: &DVector<f64>) -> DMatrix<f64> {
        let nb = model.n_base_dofs();
        let nj = model.n_joints();
        let mut lam = DMatrix::zeros(model.nv(), nj);
        for j in 0..nj {
            lam[(nb + j, j)] = -state.nu[nb + j];
        }
        lam
    }
}

/// Extended regressor `Γ = [U Λ]`.
pub fn extended_regressor(
    model: &MultibodyModel,
    state: &RobotState,
    nudot: &DVector<f64>,
    friction: &dyn FrictionModel,
) -> DMatrix<f64> {
    let u = force_regressor(model, state, nudot);
    let lam = friction.columns(model, state, nudot);
    let mut gamma = DMatrix::zeros(u.nrows(), u.ncols() + lam.ncols());
    gamma.columns_mut(0, u.ncols()).copy_from(&u);
    gamma.columns_mut(u.ncols(), lam.ncols()).copy_from(&lam);
    gamma
}

/// Momentum-regressor columns of one link (`6 × 10`): the link's momentum
/// for each unit parameter, transported to the base frame.
pub fn link_momentum_regressor(model: &MultibodyModel, kin: &Kinematics, link: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(6, 10);
    let v = kin.velocity[link];
    for k in 0..10 {
        let mut p = InertiaParams::unit(k).spatial_inertia().momentum(&v);
        let mut i = link;
        while let Some(par) = model.links()[i].parent {
            p = kin.local[i].force_to_parent(&p);
            i = par;
        }
        u.set_column(k, &p);
    }
    u
}

/// Momentum regressor `U_m(q, ν)` with `U_m Φ = P_b` (`6 × 10 n_b`).
pub fn momentum_regressor(model: &MultibodyModel, state: &RobotState) -> Result<DMatrix<f64>, RegressorError> {
    if !model.is_floating() {
        return Err(ModelError::FixedBaseModel.into());
    }
    let kin = Kinematics::compute(model, state, &DVector::zeros(model.nv()), false);
    let mut u = DMatrix::zeros(6, 10 * model.n_links());
    for i in 0..model.n_links() {
        u.columns_mut(10 * i, 10).copy_from(&link_momentum_regressor(model, &kin, i));
    }
    Ok(u)
}

pub fn select_columns(matrix: &DMatrix<f64>, selection: &ColumnSelection) -> Result<DMatrix<f64>, RegressorError> {
    if let Some(&bad) = selection.indices.iter().find(|&&i| i >= matrix.ncols()) {
        return Err(RegressorError::IndexOutOfBounds { index: bad, cols: matrix.ncols() });
    }
    Ok(matrix.select_columns(selection.indices.iter()))
}

/// Result of a numerical base-parameter analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParameters {
    pub rank: usize,
    /// Pivot columns, sorted.
    pub independent: ColumnSelection,
    /// Pivot columns in the order the factorization chose them.
    pub pivot_order: Vec<usize>,
}

/// Column-pivoted Householder QR. Columns listed in `priority` are pivoted
/// before any other column. Returns the pivot order of the numerically
/// independent columns: those whose remaining norm exceeds `tol` times the
/// largest column norm.
pub fn pivoted_qr(matrix: &DMatrix<f64>, tol: f64, priority: &[usize]) -> Vec<usize> {
    let (m, n) = matrix.shape();
    let mut a = matrix.clone();
    let reference = (0..n).map(|j| a.column(j).norm()).fold(0.0, f64::max);
    if reference == 0.0 {
        return Vec::new();
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut pivots = Vec::new();
    let is_priority = |j: usize| priority.contains(&j);
    for k in 0..m.min(n) {
        let norm_below = |a: &DMatrix<f64>, j: usize| a.view((k, j), (m - k, 1)).norm();
        let pick = |pool: &mut dyn Iterator<Item = usize>, a: &DMatrix<f64>| {
            pool.map(|j| (j, norm_below(a, j))).fold(None, |best: Option<(usize, f64)>, (j, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((j, v)),
            })
        };
        let mut chosen = pick(&mut remaining.iter().copied().filter(|&j| is_priority(j)), &a);
        if chosen.map_or(true, |(_, v)| v <= tol * reference) {
            chosen = pick(&mut remaining.iter().copied().filter(|&j| !is_priority(j)), &a);
        }
        let Some((j, v)) = chosen else { break };
        if v <= tol * reference {
            break;
        }
        remaining.retain(|&c| c != j);
        pivots.push(j);

        // Householder reflection zeroing column j below row k.
        let x = a.view((k, j), (m - k, 1)).clone_owned();
        let alpha = if x[0] >= 0.0 { -v } else { v };
        let mut house = x;
        house[0] -= alpha;
        let hn = house.norm();
        if hn == 0.0 {
            continue;
        }
        house /= hn;
        let mut sub = a.view_mut((k, 0), (m - k, n));
        let proj = house.transpose() * &sub;
        sub -= 2.0 * &house * proj;
    }
    pivots
}

fn stack(samples: &[RegressorSample]) -> Result<DMatrix<f64>, RegressorError> {
    let first = samples.first().ok_or(RegressorError::EmptyInput)?;
    let cols = first.n_cols();
    if samples.iter().any(|s| s.n_cols() != cols) {
        return Err(RegressorError::Shape("samples disagree on column count".into()));
    }
    let mut ordered: Vec<&RegressorSample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.time.total_cmp(&b.time));
    let rows: usize = ordered.iter().map(|s| s.matrix.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for s in ordered {
        out.rows_mut(r, s.matrix.nrows()).copy_from(&s.matrix);
        r += s.matrix.nrows();
    }
    Ok(out)
}

/// Numerical rank and an independent column set of the stacked regressor.
pub fn base_parameter_analysis(samples: &[RegressorSample], tol: f64) -> Result<BaseParameters, RegressorError> {
    base_parameter_analysis_with_priority(samples, tol, &[], None)
}

/// As [`base_parameter_analysis`], pivoting the `priority` columns first so
/// that a basis containing them is found whenever one exists.
pub fn base_parameter_analysis_with_priority(
    samples: &[RegressorSample],
    tol: f64,
    priority: &[usize],
    labels: Option<&[String]>,
) -> Result<BaseParameters, RegressorError> {
    let stacked = stack(samples)?;
    let pivot_order = pivoted_qr(&stacked, tol, priority);
    let mut indices = pivot_order.clone();
    indices.sort_unstable();
    let labels = indices
        .iter()
        .map(|&i| labels.and_then(|l| l.get(i).cloned()).unwrap_or_else(|| format!("c{i}")))
        .collect();
    Ok(BaseParameters { rank: pivot_order.len(), independent: ColumnSelection::new(indices, labels)?, pivot_order })
}

/// Default relative rank tolerance.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Debug dump: one CSV row per (sample, matrix row).
pub fn write_regressor_csv<W: Write>(
    mut out: W,
    samples: &[RegressorSample],
    labels: &[String],
) -> Result<(), RegressorError> {
    write!(out, "sample,row,time")?;
    for l in labels {
        write!(out, ",{l}")?;
    }
    writeln!(out, ",measurement")?;
    for (k, s) in samples.iter().enumerate() {
        if s.n_cols() != labels.len() {
            return Err(RegressorError::Shape(format!("{} labels for {} columns", labels.len(), s.n_cols())));
        }
        for r in 0..s.matrix.nrows() {
            write!(out, "{k},{r},{:.16e}", s.time)?;
            for c in 0..s.n_cols() {
                write!(out, ",{:.16e}", s.matrix[(r, c)])?;
            }
            writeln!(out, ",{:.16e}", s.measurement[r])?;
        }
    }
    Ok(())
}
