//! Closed-loop excitation experiments: a Cartesian velocity profile tracked
//! through damped least-squares IK, exact-model torques, integration of the
//! true dynamics, and recursive estimation of the grasped object from
//! regressors built on a perturbed copy of the robot model.
//!
//! The plant run ([`simulate`]) does not depend on the seed; the seeded part
//! (model randomization, sensor noise, estimation) lives in [`estimate`].

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{default_unknown_prior, EstimatorConfig, EstimatorError, EstimatorState};
use crate::multibody::{
    forward_dynamics, forward_kinematics, free_floating_inverse_dynamics, integrate, inverse_dynamics,
    inverse_dynamics_with, link_jacobians, momentum_about_base, momentum_in_world, panda_fixed, panda_floating,
    project_momentum, Kinematics, ModelError, MultibodyModel, OriginFile, RobotState,
};
use crate::regressor::{link_force_regressor, link_momentum_regressor, RegressorSample, SampleKind};
use crate::spatial::{axis_angle, logdet_divergence, InertiaParams, Mat3, Pose, Vec3, Vec6};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("Momentum requires Floating")]
    MomentumRequiresFloating,
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseMode {
    Fixed,
    Floating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressorKind {
    Force,
    Momentum,
}

/// How `noise_pct` scales the torque noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseMode {
    /// Additive `noise_pct · U(−1, 1)` in N·m.
    #[default]
    Absolute,
    /// Multiplicative `τ (1 + noise_pct · U(−1, 1))`.
    Relative,
}

/// Finite-difference rule turning sampled velocities into the accelerations
/// fed to the force regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AccelDifference {
    /// `(ν_k − ν_{k−1}) / h`
    Backward,
    /// `(ν_{k+1} − ν_{k−1}) / 2h`
    Central,
    /// `(ν_{k−2} − 8ν_{k−1} + 8ν_{k+1} − ν_{k+2}) / 12h`, central at `k = 1`
    #[default]
    FivePoint,
}

/// Sinusoidal Cartesian excitation of the grasped object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityProfileParams {
    /// Radius of the horizontal circle, m.
    pub r: f64,
    /// Orientation amplitude, rad.
    pub r_omega: f64,
    pub f: f64,
    pub f_z: f64,
    pub f_omega_x: f64,
    pub f_omega_y: f64,
    pub f_omega_z: f64,
}

impl Default for VelocityProfileParams {
    fn default() -> Self {
        Self { r: 0.15, r_omega: 0.5, f: 0.5, f_z: 0.125, f_omega_x: 0.75, f_omega_y: 1.0, f_omega_z: 1.75 }
    }
}

impl VelocityProfileParams {
    fn validate(&self) -> Result<(), SimulationError> {
        let all = [self.r, self.r_omega, self.f, self.f_z, self.f_omega_x, self.f_omega_y, self.f_omega_z];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SimulationError::InvalidScenario("trajectory parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Desired twist `[ω; v]` of the grasped object, expressed in the base frame.
pub fn target_velocity(t: f64, p: &VelocityProfileParams) -> Vec6 {
    let w = |f: f64| 2.0 * PI * f;
    Vec6::new(
        p.r_omega * w(p.f_omega_x) * (w(p.f_omega_x) * t).sin(),
        p.r_omega * w(p.f_omega_y) * (w(p.f_omega_y) * t).sin(),
        p.r_omega * w(p.f_omega_z) * (w(p.f_omega_z) * t).sin(),
        p.r * w(p.f) * (w(p.f) * t).cos(),
        p.r * w(p.f) * (w(p.f) * t).sin(),
        p.r * w(p.f_z) * (w(p.f_z) * t).sin(),
    )
}

/// Jacobian (`6 × n_joints`) from joint rates to the twist `[ω; v]` of the
/// `tool` frame (given in end-effector coordinates) relative to the base,
/// expressed in base coordinates.
pub fn tool_jacobian(model: &MultibodyModel, state: &RobotState, tool: &Pose) -> DMatrix<f64> {
    let ee = model.end_effector;
    let nb = model.n_base_dofs();
    let nj = model.n_joints();
    let jac = link_jacobians(model, state);
    let world = forward_kinematics(model, state);
    let r = world[0].rotation.inverse() * world[ee].rotation;
    let p = tool.translation;
    let mut out = DMatrix::zeros(6, nj);
    for j in 0..nj {
        let col = jac.view((6 * ee, nb + j), (6, 1));
        let w = Vec3::new(col[0], col[1], col[2]);
        let v = Vec3::new(col[3], col[4], col[5]) + w.cross(&p);
        out.view_mut((0, j), (3, 1)).copy_from(&(r * w));
        out.view_mut((3, j), (3, 1)).copy_from(&(r * v));
    }
    out
}

/// Joint rates realising `desired` (a base-frame tool twist `[ω; v]`) by damped
/// least squares, `q̇ = Jᵀ (J Jᵀ + λ² 𝟙)⁻¹ V`. The base twist is left alone.
pub fn ik_joint_velocity(model: &MultibodyModel, state: &RobotState, tool: &Pose, desired: &Vec6, damping: f64) -> DVector<f64> {
    let j = tool_jacobian(model, state, tool);
    let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * (damping * damping);
    let rhs = DVector::from_column_slice(desired.as_slice());
    let y = match jjt.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => jjt.svd(true, true).solve(&rhs, 0.0).unwrap_or_else(|_| DVector::zeros(6)),
    };
    j.transpose() * y
}

pub const DEFAULT_IK_DAMPING: f64 = 1e-6;

/// Joint rates in the null space of the tool Jacobian that pull the arm
/// toward `q_ref` with proportional `gain`: `(𝟙 − J⁺J) k (q_ref − q)`.
/// They leave the tool twist unchanged up to the damping.
pub fn posture_joint_velocity(model: &MultibodyModel, state: &RobotState, tool: &Pose, q_ref: &[f64], gain: f64, damping: f64) -> DVector<f64> {
    let nj = model.n_joints();
    let off = model.nq() - nj;
    let err = DVector::from_fn(nj, |i, _| q_ref[i] - state.q[off + i]);
    if gain == 0.0 {
        return DVector::zeros(nj);
    }
    let j = tool_jacobian(model, state, tool);
    let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * (damping * damping);
    let rhs = &j * &err;
    let y = match jjt.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => jjt.svd(true, true).solve(&rhs, 0.0).unwrap_or_else(|_| DVector::zeros(6)),
    };
    (err - j.transpose() * y) * gain
}

/// Triangle-rejection attempts before the principal-moment noise is shrunk.
const RESAMPLE_CAP: usize = 1000;

fn triangle_ok(l: &Vec3) -> bool {
    l.x + l.y > l.z && l.y + l.z > l.x && l.z + l.x > l.y
}

/// Perturb one body's parameters: mass, CoM, principal moments and principal
/// axes are each disturbed in proportion to `alpha_eta`, and the tensor is
/// rebuilt about the link origin by the parallel-axis theorem. Principal
/// moments are redrawn until they satisfy the triangle inequality.
///
/// Panics if `phi` has non-positive mass.
pub fn randomize_params(phi: &InertiaParams, alpha_eta: f64, rng: &mut impl Rng) -> InertiaParams {
    if alpha_eta == 0.0 {
        return *phi;
    }
    let m = phi.mass();
    let c = phi.com().expect("randomize_params needs positive mass");
    let ic = phi.inertia_about_com().expect("positive mass");
    let mut eta = || rng.gen_range(-1.0..1.0);

    let m_star = m * (1.0 + alpha_eta * eta());
    let c_star = c + Vec3::new(eta(), eta(), eta()) * (0.01 * m * alpha_eta);

    // I_c = R_cᵀ diag(λ) R_c
    let eig = ic.symmetric_eigen();
    let lambda = eig.eigenvalues;
    let mut r_c: Mat3 = eig.eigenvectors.transpose();
    if r_c.determinant() < 0.0 {
        r_c.row_mut(2).neg_mut();
    }
    let mut scale = 1.0;
    let mut lambda_star = lambda;
    let mut attempts = 0;
    loop {
        let e = Vec3::new(eta(), eta(), eta()) * (alpha_eta * scale);
        let cand = lambda + lambda.component_mul(&e);
        if triangle_ok(&cand) {
            lambda_star = cand;
            break;
        }
        attempts += 1;
        if attempts >= RESAMPLE_CAP {
            scale *= 0.5;
            if scale < 1e-12 {
                break;
            }
        }
    }

    let gamma = alpha_eta * PI * eta();
    let a = Vec3::new(eta(), eta(), eta()) * alpha_eta;
    let d_r = if a.norm() > 0.0 { axis_angle(&a.normalize(), gamma) } else { axis_angle(&Vec3::z(), 0.0) };
    let r_star = r_c * d_r.matrix();
    let ic_star = r_star.transpose() * Mat3::from_diagonal(&lambda_star) * r_star;
    let i_star = ic_star + (Mat3::identity() * c_star.dot(&c_star) - c_star * c_star.transpose()) * m_star;
    InertiaParams::from_parts(m_star, c_star * m_star, &i_star)
}

/// Add sensor noise to a torque vector.
pub fn add_torque_noise(tau: &DVector<f64>, noise_pct: f64, mode: NoiseMode, rng: &mut impl Rng) -> DVector<f64> {
    if noise_pct == 0.0 {
        return tau.clone();
    }
    tau.map(|t| {
        let e = noise_pct * rng.gen_range(-1.0..1.0);
        match mode {
            NoiseMode::Absolute => t + e,
            NoiseMode::Relative => t * (1.0 + e),
        }
    })
}

fn default_noise() -> f64 {
    0.05
}
fn default_dt_sim() -> f64 {
    1e-4
}
fn default_dt_est() -> f64 {
    1e-2
}
/// Start posture from which the default excitation stays clear of the
/// workspace boundary and wrist singularity for the whole run.
pub const DEFAULT_INITIAL_JOINTS: [f64; 7] = [0.5, -1.0, 0.3, -2.9, -0.6, 1.5, -1.7];

fn default_initial_joints() -> Vec<f64> {
    DEFAULT_INITIAL_JOINTS.to_vec()
}
fn default_posture_gain() -> f64 {
    2.0
}

/// The grasped object: parameters in its own body frame and the pose of that
/// frame in the end-effector frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub phi: InertiaParams,
    pub grasp: OriginFile,
}

impl TargetSpec {
    /// Homogeneous cube centred on its body frame.
    pub fn cube(mass: f64, side: f64, grasp_xyz: [f64; 3]) -> Self {
        Self {
            phi: InertiaParams::solid_box(mass, [side; 3]),
            grasp: OriginFile { xyz: grasp_xyz, rpy: [0.0; 3] },
        }
    }

    pub fn grasp_pose(&self) -> Pose {
        Pose::from_xyz_rpy(self.grasp.xyz, self.grasp.rpy)
    }
}

/// One experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Model file path (relative to the scenario file) or `builtin:panda_fixed` / `builtin:panda_floating`.
    pub model: String,
    pub base_mode: BaseMode,
    pub target: TargetSpec,
    pub regressor_kind: RegressorKind,
    pub alpha_eta: f64,
    pub alpha: f64,
    /// Also perturb the floating base body of the estimation model.
    #[serde(default)]
    pub randomize_base: bool,
    #[serde(default = "default_noise")]
    pub noise_pct: f64,
    #[serde(default)]
    pub accel_difference: AccelDifference,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    pub duration: f64,
    #[serde(default = "default_dt_sim")]
    pub dt_sim: f64,
    #[serde(default = "default_dt_est")]
    pub dt_est: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trajectory: VelocityProfileParams,
    #[serde(default = "default_initial_joints")]
    pub initial_joints: Vec<f64>,
    /// Null-space gain pulling the arm back toward `initial_joints`, 1/s.
    #[serde(default = "default_posture_gain")]
    pub posture_gain: f64,
    /// Prior for the object in its own frame; defaults to [`default_unknown_prior`].
    #[serde(default)]
    pub prior: Option<InertiaParams>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json_str(s: &str) -> Result<Self, SimulationError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| SimulationError::Parse(e.to_string()))?;
        sc.check_fields()?;
        Ok(sc)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SimulationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| SimulationError::Io { path: path.to_path_buf(), source })?;
        let mut sc = Self::from_json_str(&text)?;
        sc.base_dir = path.parent().map(Path::to_path_buf);
        Ok(sc)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn check_fields(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidScenario(m.into()));
        if self.regressor_kind == RegressorKind::Momentum && self.base_mode == BaseMode::Fixed {
            return Err(SimulationError::MomentumRequiresFloating);
        }
        if !(0.0..=1.0).contains(&self.alpha_eta) {
            return bad("alpha_eta must lie in [0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.posture_gain >= 0.0) {
            return bad("posture_gain must be non-negative");
        }
        if !(self.noise_pct >= 0.0) {
            return bad("noise_pct must be non-negative");
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return bad("duration must be non-negative");
        }
        if !(self.dt_sim > 0.0) || !(self.dt_est > 0.0) {
            return bad("time steps must be positive");
        }
        let ratio = self.dt_est / self.dt_sim;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return bad("dt_est must be an integer multiple of dt_sim");
        }
        self.trajectory.validate()?;
        if !self.target.phi.is_physically_consistent(0.0) {
            return bad("target inertia is not physically consistent");
        }
        if let Some(p) = &self.prior {
            if !p.is_physically_consistent(0.0) {
                return bad("prior is not physically consistent");
            }
        }
        Ok(())
    }

    /// Load the robot model, with gravity set by the base mode.
    pub fn load_model(&self) -> Result<MultibodyModel, SimulationError> {
        let mut model = match self.model.as_str() {
            "builtin:panda_fixed" => panda_fixed(),
            "builtin:panda_floating" => panda_floating(),
            path => {
                let p = match &self.base_dir {
                    Some(dir) => dir.join(path),
                    None => PathBuf::from(path),
                };
                MultibodyModel::from_file(&p)?
            }
        };
        match (self.base_mode, model.is_floating()) {
            (BaseMode::Fixed, false) => model.gravity = Vec3::new(0.0, 0.0, -9.8),
            (BaseMode::Floating, true) => model.gravity = Vec3::zeros(),
            _ => {
                return Err(SimulationError::InvalidScenario(format!(
                    "base_mode {:?} does not match model '{}'",
                    self.base_mode, model.name
                )))
            }
        }
        if self.initial_joints.len() != model.n_joints() {
            return Err(SimulationError::InvalidScenario(format!(
                "initial_joints has {} entries, model has {} joints",
                self.initial_joints.len(),
                model.n_joints()
            )));
        }
        Ok(model)
    }

    /// Everything the seed-free plant run depends on, as a canonical string.
    pub fn plant_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a str,
            base_dir: &'a Option<PathBuf>,
            base_mode: BaseMode,
            target: &'a TargetSpec,
            duration: f64,
            dt_sim: f64,
            dt_est: f64,
            trajectory: &'a VelocityProfileParams,
            initial_joints: &'a [f64],
            posture_gain: f64,
        }
        serde_json::to_string(&Key {
            model: &self.model,
            base_dir: &self.base_dir,
            base_mode: self.base_mode,
            target: &self.target,
            duration: self.duration,
            dt_sim: self.dt_sim,
            dt_est: self.dt_est,
            trajectory: &self.trajectory,
            initial_joints: &self.initial_joints,
            posture_gain: self.posture_gain,
        })
        .expect("key serializes")
    }

    fn est_steps(&self) -> usize {
        (self.duration / self.dt_est + 1e-9).floor() as usize
    }

    fn sim_ratio(&self) -> usize {
        (self.dt_est / self.dt_sim).round() as usize
    }
}

/// Plant state at one estimation instant.
#[derive(Debug, Clone)]
pub struct PlantSample {
    pub t: f64,
    pub state: RobotState,
    /// Generalized force applied from this instant (zero base rows when floating).
    pub tau: DVector<f64>,
    /// True base momentum in the base frame (floating only).
    pub momentum: Option<Vec6>,
}

/// Seed-free record of one closed-loop run, sampled at `dt_est`.
#[derive(Debug, Clone)]
pub struct Recording {
    pub samples: Vec<PlantSample>,
    /// Largest world-momentum deviation relative to the peak link-momentum scale.
    pub max_momentum_drift: Option<f64>,
    pub wall_time: f64,
}

fn momentum_scale(model: &MultibodyModel, state: &RobotState) -> f64 {
    let kin = Kinematics::compute(model, state, &DVector::zeros(model.nv()), false);
    model.links().iter().zip(&kin.velocity).map(|(l, v)| l.phi.spatial_inertia().momentum(v).norm()).sum()
}

/// Estimation instants simulated past `duration` so the differencing stencil
/// is complete at the last row.
const LOOKAHEAD: usize = 2;

/// Run the plant: exact-model torque control tracking the IK velocities,
/// integrated at `dt_sim`. Extra estimation intervals beyond `duration`
/// are simulated so that accelerations can be centrally differenced.
pub fn simulate(scenario: &Scenario) -> Result<Recording, SimulationError> {
    let start = Instant::now();
    let robot = scenario.load_model()?;
    let truth = robot.attach_target(&scenario.target.phi, &scenario.target.grasp_pose())?;
    let tool = scenario.target.grasp_pose();
    let floating = truth.is_floating();
    let nb = truth.n_base_dofs();
    let nj = truth.n_joints();
    let ratio = scenario.sim_ratio();
    let n_est = scenario.est_steps() + LOOKAHEAD;

    let mut s = truth.state_from_joints(&scenario.initial_joints);
    let h0 = if floating { Some(momentum_in_world(&s, &momentum_about_base(&truth, &s)?)) } else { None };
    let mut drift: f64 = 0.0;
    let mut peak_scale: f64 = 0.0;
    let mut samples = Vec::with_capacity(n_est + 1);

    let static_tau = if floating { DVector::zeros(truth.nv()) } else { inverse_dynamics(&truth, &s, &DVector::zeros(truth.nv())) };
    for n in 0..=n_est * ratio {
        let t = n as f64 * scenario.dt_sim;
        let desired = target_velocity(t, &scenario.trajectory);
        let qd = ik_joint_velocity(&truth, &s, &tool, &desired, DEFAULT_IK_DAMPING)
            + posture_joint_velocity(&truth, &s, &tool, &scenario.initial_joints, scenario.posture_gain, DEFAULT_IK_DAMPING);
        let qdd = (qd - s.nu.rows(nb, nj)) / scenario.dt_sim;
        let force = if floating {
            let (_, tau) = free_floating_inverse_dynamics(&truth, &s, &qdd)?;
            let mut f = DVector::zeros(truth.nv());
            f.rows_mut(nb, nj).copy_from(&tau);
            f
        } else {
            inverse_dynamics(&truth, &s, &qdd)
        };
        if n % ratio == 0 {
            let k = n / ratio;
            let momentum = if floating { Some(momentum_about_base(&truth, &s)?) } else { None };
            if let (Some(h0), Some(p)) = (h0, momentum) {
                peak_scale = peak_scale.max(momentum_scale(&truth, &s));
                drift = drift.max((momentum_in_world(&s, &p) - h0).norm());
            }
            let tau = if k == 0 { static_tau.clone() } else { force.clone() };
            samples.push(PlantSample { t: k as f64 * scenario.dt_est, state: s.clone(), tau, momentum });
            if k == n_est {
                break;
            }
        }
        let acc = forward_dynamics(&truth, &s, &force)?;
        s = integrate(&truth, &s, &acc, scenario.dt_sim);
        if let Some(h0) = h0 {
            s = project_momentum(&truth, &s, &h0)?;
        }
    }
    let max_momentum_drift = h0.map(|h0| drift / peak_scale.max(h0.norm()).max(f64::MIN_POSITIVE));
    Ok(Recording { samples, max_momentum_drift, wall_time: start.elapsed().as_secs_f64() })
}

/// One estimation instant of an experiment.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub k: usize,
    pub t: f64,
    pub q: DVector<f64>,
    pub nu: DVector<f64>,
    pub tau_true: DVector<f64>,
    pub tau_noisy: DVector<f64>,
    pub momentum: Option<Vec6>,
    /// Target estimate in end-effector coordinates.
    pub theta: InertiaParams,
    pub objective: f64,
    pub min_eig: f64,
    pub newton_iters: usize,
    pub stalled: bool,
    /// Measured signal (generalized force, or momentum) and the estimator's prediction of it.
    pub measured: DVector<f64>,
    pub predicted: DVector<f64>,
    pub d_phi: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_d_phi: f64,
    pub final_rms: f64,
    pub steps: usize,
    pub stalls: usize,
    pub max_momentum_drift: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentLog {
    pub scenario: String,
    pub seed: u64,
    pub kind: RegressorKind,
    /// End-effector link parameters of the (randomized) estimation model.
    pub ee_model_phi: InertiaParams,
    /// True end-effector link plus target.
    pub ee_truth_phi: InertiaParams,
    pub rows: Vec<LogRow>,
    pub summary: Summary,
    /// Error that ended the run early, if any.
    pub failure: Option<String>,
}

/// Per-row metrics and final values.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub d_phi: Vec<f64>,
    pub rms: Vec<f64>,
    pub final_d_phi: f64,
    pub final_rms: f64,
}

/// `D_φ` of the predicted end-effector-plus-target body against `phi_true`,
/// and the RMS of measured minus predicted signal, for every row.
/// The divergence is congruence invariant, so evaluating it in end-effector
/// coordinates equals evaluating it about the composite CoM.
pub fn compute_metrics(log: &ExperimentLog, phi_true: &InertiaParams) -> Metrics {
    let d_phi: Vec<f64> = log
        .rows
        .iter()
        .map(|r| logdet_divergence(&(log.ee_model_phi + r.theta), phi_true).unwrap_or(f64::INFINITY))
        .collect();
    let rms: Vec<f64> = log
        .rows
        .iter()
        .map(|r| {
            let n = r.measured.len();
            if n == 0 {
                0.0
            } else {
                ((&r.measured - &r.predicted).norm_squared() / n as f64).sqrt()
            }
        })
        .collect();
    Metrics {
        final_d_phi: d_phi.last().copied().unwrap_or(f64::NAN),
        final_rms: rms.last().copied().unwrap_or(f64::NAN),
        d_phi,
        rms,
    }
}

/// The estimation model: manipulator links randomized with stream 0 of the
/// seed. A floating base body is left exact unless `include_base` is set.
pub fn randomized_model(robot: &MultibodyModel, alpha_eta: f64, seed: u64, include_base: bool) -> MultibodyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let skip_base = robot.is_floating() && !include_base;
    let params: Vec<InertiaParams> = robot
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| if i == 0 && skip_base { *p } else { randomize_params(p, alpha_eta, &mut rng) })
        .collect();
    let mut out = robot.clone();
    out.set_params(&params);
    out
}

/// Seeded estimation over a recorded plant run.
pub fn estimate(scenario: &Scenario, recording: &Recording, seed: u64) -> Result<ExperimentLog, SimulationError> {
    let robot = scenario.load_model()?;
    let grasp = scenario.target.grasp_pose();
    let ee = robot.end_effector;
    let est_model = randomized_model(&robot, scenario.alpha_eta, seed, scenario.randomize_base);
    let ee_model_phi = est_model.links()[ee].phi;
    let ee_truth_phi = robot.links()[ee].phi + scenario.target.phi.transform(&grasp);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let prior = scenario.prior.unwrap_or_else(default_unknown_prior).transform(&grasp);
    let mut est = EstimatorState::init(prior, None, EstimatorConfig::with_alpha(scenario.alpha))?;
    let nb = robot.n_base_dofs();
    let nj = robot.n_joints();
    let nv = robot.nv();
    let theta_dv = |phi: &InertiaParams| DVector::from_column_slice(phi.as_slice());

    let mut log = ExperimentLog {
        scenario: scenario.name.clone(),
        seed,
        kind: scenario.regressor_kind,
        ee_model_phi,
        ee_truth_phi,
        rows: Vec::new(),
        summary: Summary { final_d_phi: f64::NAN, final_rms: f64::NAN, steps: 0, stalls: 0, max_momentum_drift: recording.max_momentum_drift },
        failure: None,
    };
    let samples = &recording.samples;
    let n_rows = scenario.est_steps().min(samples.len().saturating_sub(LOOKAHEAD));
    let dt = scenario.dt_est;

    // first instant: at rest, prior estimate
    {
        let s0 = &samples[0];
        let (measured, predicted) = match scenario.regressor_kind {
            RegressorKind::Force => {
                let zero = DVector::zeros(nv);
                let kin = Kinematics::compute(&est_model, &s0.state, &zero, true);
                let u = link_force_regressor(&est_model, &kin, ee);
                let known = inverse_dynamics_with(&est_model, &kin, |i| est_model.links()[i].phi);
                (s0.tau.clone(), known + u * theta_dv(&prior))
            }
            RegressorKind::Momentum => (DVector::zeros(6), DVector::zeros(6)),
        };
        log.rows.push(LogRow {
            k: 0,
            t: s0.t,
            q: s0.state.q.clone(),
            nu: s0.state.nu.clone(),
            tau_true: s0.tau.clone(),
            tau_noisy: s0.tau.clone(),
            momentum: s0.momentum,
            theta: prior,
            objective: 0.0,
            min_eig: prior.min_pseudo_eigenvalue(),
            newton_iters: 0,
            stalled: false,
            measured,
            predicted,
            d_phi: 0.0,
            rms: 0.0,
        });
    }

    let first = match scenario.regressor_kind {
        RegressorKind::Force => 2,
        RegressorKind::Momentum => 1,
    };
    for k in 1..=n_rows {
        let smp = &samples[k];
        let s = &smp.state;
        let tau_true = smp.tau.clone();
        let mut tau_noisy = tau_true.clone();
        let (u, known, measured) = match scenario.regressor_kind {
            RegressorKind::Force => {
                let joints = tau_true.rows(nb, nj).into_owned();
                tau_noisy.rows_mut(nb, nj).copy_from(&add_torque_noise(&joints, scenario.noise_pct, scenario.noise_mode, &mut noise_rng));
                let nu = |i: usize| &samples[i].state.nu;
                let nudot = match scenario.accel_difference {
                    AccelDifference::Backward => (nu(k) - nu(k - 1)) / dt,
                    AccelDifference::FivePoint if k >= 2 => {
                        (nu(k - 2) - nu(k - 1) * 8.0 + nu(k + 1) * 8.0 - nu(k + 2)) / (12.0 * dt)
                    }
                    _ => (nu(k + 1) - nu(k - 1)) / (2.0 * dt),
                };
                let kin = Kinematics::compute(&est_model, s, &nudot, true);
                let u = link_force_regressor(&est_model, &kin, ee);
                let known = inverse_dynamics_with(&est_model, &kin, |i| est_model.links()[i].phi);
                (u, known, tau_noisy.clone())
            }
            RegressorKind::Momentum => {
                let kin = Kinematics::compute(&est_model, s, &DVector::zeros(nv), false);
                let u = link_momentum_regressor(&est_model, &kin, ee);
                let known = momentum_about_base(&est_model, s)?;
                // momentum of a system released from rest is known to be zero
                (u, DVector::from_column_slice(known.as_slice()), DVector::zeros(6))
            }
        };
        let mut row = LogRow {
            k,
            t: smp.t,
            q: s.q.clone(),
            nu: s.nu.clone(),
            tau_true,
            tau_noisy,
            momentum: smp.momentum,
            theta: est.estimate().0,
            objective: 0.0,
            min_eig: 0.0,
            newton_iters: 0,
            stalled: false,
            measured: measured.clone(),
            predicted: DVector::zeros(0),
            d_phi: 0.0,
            rms: 0.0,
        };
        if k >= first {
            let kind = match scenario.regressor_kind {
                RegressorKind::Force => SampleKind::Force,
                RegressorKind::Momentum => SampleKind::Momentum,
            };
            let sample = RegressorSample::unweighted(kind, u.clone(), &measured - &known, smp.t);
            match est.step(&sample) {
                Ok(rep) => {
                    row.objective = rep.objective;
                    row.min_eig = rep.min_eig;
                    row.newton_iters = rep.newton_iters;
                    row.stalled = rep.stalled;
                }
                Err(e) => {
                    log.failure = Some(format!("step {k}: {e}"));
                    break;
                }
            }
        } else {
            row.min_eig = est.estimate().0.min_pseudo_eigenvalue();
        }
        row.theta = est.estimate().0;
        row.predicted = known + &u * theta_dv(&row.theta);
        log.rows.push(row);
    }

    let metrics = compute_metrics(&log, &ee_truth_phi);
    for (row, (d, r)) in log.rows.iter_mut().zip(metrics.d_phi.iter().zip(&metrics.rms)) {
        row.d_phi = *d;
        row.rms = *r;
    }
    log.summary.final_d_phi = metrics.final_d_phi;
    log.summary.final_rms = metrics.final_rms;
    log.summary.steps = log.rows.len() - 1;
    log.summary.stalls = log.rows.iter().filter(|r| r.stalled).count();
    if let Some(d) = recording.max_momentum_drift {
        if d > MOMENTUM_DRIFT_TOL && log.failure.is_none() {
            log.failure = Some(format!("momentum drift {d:.3e} exceeds {MOMENTUM_DRIFT_TOL:e}"));
        }
    }
    Ok(log)
}

/// Relative momentum drift tolerated by the per-run self-check.
pub const MOMENTUM_DRIFT_TOL: f64 = 1e-6;

/// Simulate and estimate with the scenario's own seed.
pub fn run_experiment(scenario: &Scenario) -> Result<ExperimentLog, SimulationError> {
    let recording = simulate(scenario)?;
    estimate(scenario, &recording, scenario.seed)
}

/// Estimator trace, one row per estimation instant, full precision.
pub fn write_trace_csv<W: Write>(mut out: W, log: &ExperimentLog) -> std::io::Result<()> {
    write!(out, "k,t,J_k,D_sigma_to_truth,min_eig_L,newton_iters,rms")?;
    for i in 0..10 {
        write!(out, ",theta_hat_{i}")?;
    }
    writeln!(out)?;
    for r in &log.rows {
        write!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}", r.k, r.t, r.objective, r.d_phi, r.min_eig, r.newton_iters, r.rms)?;
        for v in r.theta.as_slice() {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
