//! Kinematic-tree rigid multibody with an optional free-floating base.
//!
//! Generalized coordinates of a floating model are
//! `[qw, qx, qy, qz, px, py, pz, joints…]` (base orientation and position in
//! the world frame), and the generalized velocity is `[ω, v, joint rates…]`
//! with the base twist expressed in the base body frame. A fixed-base model
//! uses joint angles and rates only.
//!
//! Inverse dynamics is recursive Newton–Euler and the mass matrix comes from
//! the composite-rigid-body recursion; [`mass_matrix_via_jacobians`] is the
//! independent `𝒥ᵀ𝒢𝒥` route kept as a cross-check.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{cross_force, cross_motion, InertiaParams, Mat6, Pose, Rotation, Vec3, Vec6};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("link `{0}`: parent must precede child")]
    ParentOrder(String),
    #[error("link `{link}`: unknown parent `{parent}`")]
    UnknownParent { link: String, parent: String },
    #[error("link `{0}`: joint axis must be unit length")]
    NonUnitAxis(String),
    #[error("link `{0}`: a floating base must be the root link 0")]
    FloatingNotRoot(String),
    #[error("link `{0}`: only link 0 may be a root")]
    MultipleRoots(String),
    #[error("unknown end-effector link `{0}`")]
    UnknownEndEffector(String),
    #[error("model has no links")]
    Empty,
    #[error("target inertia is not physically consistent")]
    InconsistentTarget,
    #[error("operation requires a floating-base model")]
    FixedBaseModel,
    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    StateDimension { expected: usize, got: usize },
    #[error("invalid model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Joint {
    Revolute { axis: Vec3 },
    Fixed,
    FloatingBase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub name: String,
    pub parent: Option<usize>,
    pub joint: Joint,
    /// Joint frame in the parent link frame (at zero joint angle).
    pub origin: Pose,
    /// Inertial parameters in the link frame, origin at the parent joint.
    pub phi: InertiaParams,
}

/// A grasped object merged into one link's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetAttachment {
    pub link: usize,
    /// Target parameters expressed in that link's frame.
    pub phi_in_link: InertiaParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultibodyModel {
    pub name: String,
    links: Vec<LinkModel>,
    pub gravity: Vec3,
    pub end_effector: usize,
    pub target: Option<TargetAttachment>,
    /// First velocity index of each link's joint, if it has degrees of freedom.
    dof: Vec<Option<usize>>,
    nv: usize,
    floating: bool,
}

impl MultibodyModel {
    pub fn new(
        name: impl Into<String>,
        links: Vec<LinkModel>,
        gravity: Vec3,
        end_effector: usize,
    ) -> Result<Self, ModelError> {
        if links.is_empty() {
            return Err(ModelError::Empty);
        }
        if end_effector >= links.len() {
            return Err(ModelError::UnknownEndEffector(end_effector.to_string()));
        }
        let floating = matches!(links[0].joint, Joint::FloatingBase);
        let mut dof = Vec::with_capacity(links.len());
        let mut nv = if floating { 6 } else { 0 };
        for (i, link) in links.iter().enumerate() {
            match link.parent {
                None if i != 0 => return Err(ModelError::MultipleRoots(link.name.clone())),
                Some(p) if p >= i => return Err(ModelError::ParentOrder(link.name.clone())),
                _ => {}
            }
            match link.joint {
                Joint::FloatingBase if i != 0 => return Err(ModelError::FloatingNotRoot(link.name.clone())),
                Joint::FloatingBase => dof.push(Some(0)),
                Joint::Revolute { axis } => {
                    if (axis.norm() - 1.0).abs() > 1e-12 {
                        return Err(ModelError::NonUnitAxis(link.name.clone()));
                    }
                    if i == 0 {
                        return Err(ModelError::ParentOrder(link.name.clone()));
                    }
                    dof.push(Some(nv));
                    nv += 1;
                }
                Joint::Fixed => dof.push(None),
            }
        }
        Ok(Self { name: name.into(), links, gravity, end_effector, target: None, dof, nv, floating })
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_model(self)).expect("model serializes")
    }

    pub fn links(&self) -> &[LinkModel] {
        &self.links
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    /// Degrees of freedom `n_d`.
    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn nq(&self) -> usize {
        self.nv + usize::from(self.floating)
    }

    pub fn n_base_dofs(&self) -> usize {
        if self.floating {
            6
        } else {
            0
        }
    }

    pub fn n_joints(&self) -> usize {
        self.nv - self.n_base_dofs()
    }

    pub fn is_floating(&self) -> bool {
        self.floating
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn dof_index(&self, link: usize) -> Option<usize> {
        self.dof[link]
    }

    pub fn params(&self) -> Vec<InertiaParams> {
        self.links.iter().map(|l| l.phi).collect()
    }

    pub fn set_params(&mut self, params: &[InertiaParams]) {
        assert_eq!(params.len(), self.links.len());
        for (l, p) in self.links.iter_mut().zip(params) {
            l.phi = *p;
        }
    }

    /// Stacked parameter vector `Φ` (10 per link).
    pub fn param_vector(&self) -> DVector<f64> {
        DVector::from_iterator(10 * self.n_links(), self.links.iter().flat_map(|l| l.phi.0.iter().copied()))
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.phi.mass()).sum()
    }

    /// Column labels `link.param` matching [`MultibodyModel::param_vector`].
    pub fn param_labels(&self) -> Vec<String> {
        self.links
            .iter()
            .flat_map(|l| crate::spatial::PARAM_LABELS.iter().map(move |p| format!("{}.{}", l.name, p)))
            .collect()
    }

    pub fn zero_state(&self) -> RobotState {
        let mut q = DVector::zeros(self.nq());
        if self.floating {
            q[0] = 1.0;
        }
        RobotState { q, nu: DVector::zeros(self.nv) }
    }

    /// State with the given joint angles and the base (if any) at the world origin, at rest.
    pub fn state_from_joints(&self, joints: &[f64]) -> RobotState {
        let mut s = self.zero_state();
        let off = self.nq() - self.n_joints();
        for (k, v) in joints.iter().enumerate().take(self.n_joints()) {
            s.q[off + k] = *v;
        }
        s
    }

    pub fn check_state(&self, state: &RobotState) -> Result<(), ModelError> {
        if state.q.len() != self.nq() {
            return Err(ModelError::StateDimension { expected: self.nq(), got: state.q.len() });
        }
        if state.nu.len() != self.nv {
            return Err(ModelError::StateDimension { expected: self.nv, got: state.nu.len() });
        }
        Ok(())
    }

    fn joint_angle(&self, state: &RobotState, link: usize) -> f64 {
        let v = self.dof[link].expect("joint has a dof");
        state.q[v + usize::from(self.floating)]
    }

    /// Link frame in its parent frame (for the root: in the world frame).
    fn local_pose(&self, state: &RobotState, link: usize) -> Pose {
        let l = &self.links[link];
        match l.joint {
            Joint::FloatingBase => state.base_pose(),
            Joint::Fixed => l.origin,
            Joint::Revolute { axis } => {
                let rot = crate::spatial::axis_angle(&axis, self.joint_angle(state, link));
                l.origin.compose(&Pose::new(rot, Vec3::zeros()))
            }
        }
    }

    /// Motion subspace columns of the link's joint, in the link frame.
    fn motion_subspace(&self, link: usize) -> Vec<Vec6> {
        match self.links[link].joint {
            Joint::FloatingBase => (0..6).map(|k| Vec6::ith(k, 1.0)).collect(),
            Joint::Revolute { axis } => vec![Vec6::new(axis.x, axis.y, axis.z, 0.0, 0.0, 0.0)],
            Joint::Fixed => vec![],
        }
    }

    /// Merge a grasped object into the end-effector link. `grasp` places the
    /// target's body frame in the end-effector frame.
    pub fn attach_target(&self, phi_target: &InertiaParams, grasp: &Pose) -> Result<MultibodyModel, ModelError> {
        let mut out = self.clone();
        if phi_target.0.iter().all(|v| *v == 0.0) {
            return Ok(out);
        }
        if !phi_target.is_physically_consistent(0.0) {
            return Err(ModelError::InconsistentTarget);
        }
        let in_link = phi_target.transform(grasp);
        let ee = self.end_effector;
        out.links[ee].phi = self.links[ee].phi + in_link;
        out.target = Some(TargetAttachment { link: ee, phi_in_link: in_link });
        Ok(out)
    }

    /// The model without the attached target.
    pub fn without_target(&self) -> MultibodyModel {
        let mut out = self.clone();
        if let Some(t) = out.target.take() {
            out.links[t.link].phi = out.links[t.link].phi - t.phi_in_link;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: DVector<f64>,
    pub nu: DVector<f64>,
}

impl RobotState {
    /// Base pose from the first seven coordinates (floating models only).
    pub fn base_pose(&self) -> Pose {
        let quat = UnitQuaternion::from_quaternion(Quaternion::new(self.q[0], self.q[1], self.q[2], self.q[3]));
        Pose::new(quat.to_rotation_matrix(), Vec3::new(self.q[4], self.q[5], self.q[6]))
    }

    pub fn set_base_pose(&mut self, pose: &Pose) {
        let quat = UnitQuaternion::from_rotation_matrix(&pose.rotation);
        self.q[0] = quat.w;
        self.q[1] = quat.i;
        self.q[2] = quat.j;
        self.q[3] = quat.k;
        self.q.fixed_rows_mut::<3>(4).copy_from(&pose.translation);
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.q.fixed_rows::<4>(0).norm()
    }
}

/// Per-link placement and motion for one state.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// Link frame in its parent frame (root: in the world frame).
    pub local: Vec<Pose>,
    /// Link frame in the world frame.
    pub world: Vec<Pose>,
    /// Body twist of each link in its own frame.
    pub velocity: Vec<Vec6>,
    /// Body acceleration of each link, including the fictitious gravity acceleration.
    pub acceleration: Vec<Vec6>,
}

impl Kinematics {
    /// Velocities and accelerations for inverse dynamics. Gravity enters as an
    /// upward acceleration of the root.
    pub fn compute(model: &MultibodyModel, state: &RobotState, nudot: &DVector<f64>, with_gravity: bool) -> Self {
        let n = model.n_links();
        let mut local = Vec::with_capacity(n);
        let mut world: Vec<Pose> = Vec::with_capacity(n);
        let mut velocity: Vec<Vec6> = Vec::with_capacity(n);
        let mut acceleration: Vec<Vec6> = Vec::with_capacity(n);
        for i in 0..n {
            let x = model.local_pose(state, i);
            let (w, mut v, mut a) = match model.links[i].parent {
                None => {
                    let g = if with_gravity { -(x.rotation.inverse() * model.gravity) } else { Vec3::zeros() };
                    (x, Vec6::zeros(), Vec6::new(0.0, 0.0, 0.0, g.x, g.y, g.z))
                }
                Some(p) => (world[p].compose(&x), x.motion_to_child(&velocity[p]), x.motion_to_child(&acceleration[p])),
            };
            if let Some(d) = model.dof[i] {
                for (k, s) in model.motion_subspace(i).iter().enumerate() {
                    let qd = state.nu[d + k];
                    v += s * qd;
                    a += s * nudot[d + k];
                }
                // velocity-product term v_i ×m (S q̇); zero for the root
                if model.links[i].parent.is_some() {
                    let sq: Vec6 = model.motion_subspace(i).iter().enumerate().map(|(k, s)| s * state.nu[d + k]).sum();
                    a += cross_motion(&v, &sq);
                }
            }
            local.push(x);
            world.push(w);
            velocity.push(v);
            acceleration.push(a);
        }
        Kinematics { local, world, velocity, acceleration }
    }
}

/// Accumulate per-link wrenches (each in its own link frame) into generalized forces.
pub fn wrenches_to_generalized(model: &MultibodyModel, kin: &Kinematics, mut wrenches: Vec<Vec6>) -> DVector<f64> {
    let mut out = DVector::zeros(model.nv());
    for i in (0..model.n_links()).rev() {
        let f = wrenches[i];
        if let Some(d) = model.dof[i] {
            for (k, s) in model.motion_subspace(i).iter().enumerate() {
                out[d + k] = s.dot(&f);
            }
        }
        if let Some(p) = model.links[i].parent {
            let fp = kin.local[i].force_to_parent(&f);
            wrenches[p] += fp;
        }
    }
    out
}

/// Generalized force caused by a single wrench acting on `link` (all other links massless).
pub fn link_wrench_to_generalized(model: &MultibodyModel, kin: &Kinematics, link: usize, wrench: Vec6) -> DVector<f64> {
    let mut out = DVector::zeros(model.nv());
    let mut f = wrench;
    let mut i = link;
    loop {
        if let Some(d) = model.dof[i] {
            for (k, s) in model.motion_subspace(i).iter().enumerate() {
                out[d + k] = s.dot(&f);
            }
        }
        match model.links[i].parent {
            Some(p) => {
                f = kin.local[i].force_to_parent(&f);
                i = p;
            }
            None => break,
        }
    }
    out
}

/// Net inertial wrench `G a + v ×f G v` of a body with parameters `phi`.
pub fn body_wrench(phi: &InertiaParams, velocity: &Vec6, acceleration: &Vec6) -> Vec6 {
    let g = phi.spatial_inertia().0;
    g * acceleration + cross_force(velocity, &(g * velocity))
}

pub fn forward_kinematics(model: &MultibodyModel, state: &RobotState) -> Vec<Pose> {
    let mut world: Vec<Pose> = Vec::with_capacity(model.n_links());
    for i in 0..model.n_links() {
        let x = model.local_pose(state, i);
        let w = match model.links[i].parent {
            None => x,
            Some(p) => world[p].compose(&x),
        };
        world.push(w);
    }
    world
}

/// Stacked link Jacobians `𝒥` (6·n_b × n_d); block `i` maps `ν` to the body
/// twist of link `i` in its own frame.
pub fn link_jacobians(model: &MultibodyModel, state: &RobotState) -> DMatrix<f64> {
    let n = model.n_links();
    let nv = model.nv();
    let mut jac = DMatrix::zeros(6 * n, nv);
    for i in 0..n {
        let x = model.local_pose(state, i);
        let mut block = nalgebra::OMatrix::<f64, nalgebra::U6, nalgebra::Dyn>::zeros(nv);
        if let Some(p) = model.links[i].parent {
            block = x.motion_matrix_to_child() * jac.fixed_rows::<6>(6 * p);
        }
        if let Some(d) = model.dof[i] {
            for (k, s) in model.motion_subspace(i).iter().enumerate() {
                let mut col = block.column_mut(d + k);
                col += s;
            }
        }
        jac.rows_mut(6 * i, 6).copy_from(&block);
    }
    jac
}

/// Block-diagonal `𝒢` of link spatial inertias.
pub fn stacked_spatial_inertia(model: &MultibodyModel) -> DMatrix<f64> {
    let n = model.n_links();
    let mut g = DMatrix::zeros(6 * n, 6 * n);
    for (i, l) in model.links.iter().enumerate() {
        g.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&l.phi.spatial_inertia().0);
    }
    g
}

/// `M = 𝒥ᵀ 𝒢 𝒥`.
pub fn mass_matrix_via_jacobians(model: &MultibodyModel, state: &RobotState) -> DMatrix<f64> {
    let j = link_jacobians(model, state);
    let g = stacked_spatial_inertia(model);
    j.transpose() * g * j
}

/// Joint-space mass matrix by the composite-rigid-body recursion.
pub fn mass_matrix(model: &MultibodyModel, state: &RobotState) -> DMatrix<f64> {
    let n = model.n_links();
    let nv = model.nv();
    let local: Vec<Pose> = (0..n).map(|i| model.local_pose(state, i)).collect();
    let xm: Vec<Mat6> = local.iter().map(|x| x.motion_matrix_to_child()).collect();
    let mut composite: Vec<Mat6> = model.links.iter().map(|l| l.phi.spatial_inertia().0).collect();
    for i in (1..n).rev() {
        if let Some(p) = model.links[i].parent {
            let c = xm[i].transpose() * composite[i] * xm[i];
            composite[p] += c;
        }
    }
    let mut m = DMatrix::zeros(nv, nv);
    for i in 0..n {
        let Some(di) = model.dof[i] else { continue };
        let s_i = model.motion_subspace(i);
        let mut forces: Vec<Vec6> = s_i.iter().map(|s| composite[i] * s).collect();
        for (a, s) in s_i.iter().enumerate() {
            for (b, f) in forces.iter().enumerate() {
                m[(di + a, di + b)] = s.dot(f);
            }
        }
        let mut j = i;
        while let Some(p) = model.links[j].parent {
            for f in forces.iter_mut() {
                *f = xm[j].transpose() * *f;
            }
            j = p;
            if let Some(dj) = model.dof[j] {
                for (a, s) in model.motion_subspace(j).iter().enumerate() {
                    for (b, f) in forces.iter().enumerate() {
                        let v = s.dot(f);
                        m[(dj + a, di + b)] = v;
                        m[(di + b, dj + a)] = v;
                    }
                }
            }
        }
    }
    m
}

/// Generalized force `F = M ν̇ + c ν + g` by recursive Newton–Euler.
pub fn inverse_dynamics(model: &MultibodyModel, state: &RobotState, nudot: &DVector<f64>) -> DVector<f64> {
    let kin = Kinematics::compute(model, state, nudot, true);
    inverse_dynamics_with(model, &kin, |i| model.links[i].phi)
}

/// RNEA backward pass with caller-supplied link parameters.
pub fn inverse_dynamics_with(
    model: &MultibodyModel,
    kin: &Kinematics,
    params: impl Fn(usize) -> InertiaParams,
) -> DVector<f64> {
    let wrenches = (0..model.n_links()).map(|i| body_wrench(&params(i), &kin.velocity[i], &kin.acceleration[i])).collect();
    wrenches_to_generalized(model, kin, wrenches)
}

/// Solve the equations of motion for `ν̇`.
pub fn forward_dynamics(
    model: &MultibodyModel,
    state: &RobotState,
    force: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    let bias = inverse_dynamics(model, state, &DVector::zeros(model.nv()));
    let m = mass_matrix(model, state);
    let chol = m.cholesky().ok_or(ModelError::SingularMassMatrix)?;
    Ok(chol.solve(&(force - bias)))
}

/// Inverse dynamics of a free-floating system with an unactuated base: given
/// joint accelerations, returns the base acceleration that keeps the base
/// wrench zero and the joint torques that realise the motion.
pub fn free_floating_inverse_dynamics(
    model: &MultibodyModel,
    state: &RobotState,
    joint_acc: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
    if !model.is_floating() {
        return Err(ModelError::FixedBaseModel);
    }
    let nj = model.n_joints();
    let bias = inverse_dynamics(model, state, &DVector::zeros(model.nv()));
    let m = mass_matrix(model, state);
    let m_bb = m.view((0, 0), (6, 6)).clone_owned();
    let m_bj = m.view((0, 6), (6, nj));
    let rhs = -(m_bj * joint_acc + bias.rows(0, 6));
    let base_acc = m_bb.cholesky().ok_or(ModelError::SingularMassMatrix)?.solve(&rhs);
    let tau = m.view((6, 0), (nj, 6)) * &base_acc + m.view((6, 6), (nj, nj)) * joint_acc + bias.rows(6, nj);
    Ok((base_acc, tau))
}

/// Spatial momentum of the whole system about the base origin, in the base frame.
pub fn momentum_about_base(model: &MultibodyModel, state: &RobotState) -> Result<Vec6, ModelError> {
    if !model.is_floating() {
        return Err(ModelError::FixedBaseModel);
    }
    let kin = Kinematics::compute(model, state, &DVector::zeros(model.nv()), false);
    let mut p: Vec<Vec6> = (0..model.n_links())
        .map(|i| model.links[i].phi.spatial_inertia().momentum(&kin.velocity[i]))
        .collect();
    for i in (1..model.n_links()).rev() {
        if let Some(par) = model.links[i].parent {
            let f = kin.local[i].force_to_parent(&p[i]);
            p[par] += f;
        }
    }
    Ok(p[0])
}

/// Base-frame momentum re-expressed in the world frame about the world origin.
pub fn momentum_in_world(state: &RobotState, p_base: &Vec6) -> Vec6 {
    state.base_pose().force_to_parent(p_base)
}

/// Kinetic plus gravitational potential energy.
pub fn total_energy(model: &MultibodyModel, state: &RobotState) -> f64 {
    let m = mass_matrix(model, state);
    let kinetic = 0.5 * state.nu.dot(&(&m * &state.nu));
    let world = forward_kinematics(model, state);
    let potential: f64 = model
        .links
        .iter()
        .zip(&world)
        .map(|(l, w)| {
            let c = w.rotation * l.phi.first_moment() + w.translation * l.phi.mass();
            -model.gravity.dot(&c)
        })
        .sum();
    kinetic + potential
}

/// Advance `state` by one semi-implicit Euler step: velocity first, then
/// configuration with the updated velocity. The base orientation uses the
/// quaternion exponential and is renormalized.
pub fn integrate(model: &MultibodyModel, state: &RobotState, nudot: &DVector<f64>, dt: f64) -> RobotState {
    let nu = &state.nu + nudot * dt;
    let mut q = state.q.clone();
    let mut off = 0;
    if model.is_floating() {
        let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let omega = Vec3::new(nu[0], nu[1], nu[2]);
        let v = Vec3::new(nu[3], nu[4], nu[5]);
        let p = Vec3::new(q[4], q[5], q[6]) + quat * v * dt;
        let next = UnitQuaternion::new_normalize((quat * UnitQuaternion::from_scaled_axis(omega * dt)).into_inner());
        q[0] = next.w;
        q[1] = next.i;
        q[2] = next.j;
        q[3] = next.k;
        q.fixed_rows_mut::<3>(4).copy_from(&p);
        off = 1;
    }
    for k in model.n_base_dofs()..model.nv() {
        q[k + off] += nu[k] * dt;
    }
    RobotState { q, nu }
}

/// Re-solve the base twist so the world-frame momentum equals `h_world`,
/// keeping the joint rates. Applied after [`integrate`] it removes the
/// first-order momentum drift of the Euler step.
pub fn project_momentum(model: &MultibodyModel, state: &RobotState, h_world: &Vec6) -> Result<RobotState, ModelError> {
    if !model.is_floating() {
        return Err(ModelError::FixedBaseModel);
    }
    let nj = model.n_joints();
    let target = state.base_pose().inverse().force_to_parent(h_world);
    let m = mass_matrix(model, state);
    let rhs = DVector::from_column_slice(target.as_slice()) - m.view((0, 6), (6, nj)) * state.nu.rows(6, nj);
    let m_bb = m.view((0, 0), (6, 6)).clone_owned();
    let base = m_bb.cholesky().ok_or(ModelError::SingularMassMatrix)?.solve(&rhs);
    let mut out = state.clone();
    out.nu.rows_mut(0, 6).copy_from(&base);
    Ok(out)
}

/// Configuration displaced along `nu` by `eps` (same update as [`integrate`]'s position step).
pub fn displace(model: &MultibodyModel, state: &RobotState, nu: &DVector<f64>, eps: f64) -> RobotState {
    let s = RobotState { q: state.q.clone(), nu: nu.clone() };
    let mut out = integrate(model, &s, &DVector::zeros(model.nv()), eps);
    out.nu = state.nu.clone();
    out
}

/// Rotation vector of `r`. Uses atan2 so small angles keep full precision.
pub fn rotation_log(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let w = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
    let s = w.norm();
    let c = (m.trace() - 1.0) * 0.5;
    let angle = s.atan2(c);
    if angle > 3.0 {
        return r.scaled_axis();
    }
    if s < 1e-300 {
        return w;
    }
    w * (angle / s)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OriginFile {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JointFile {
    Revolute { axis: [f64; 3] },
    Fixed,
    Floating,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinkFile {
    pub name: String,
    pub parent: Option<String>,
    pub joint: JointFile,
    pub origin: OriginFile,
    pub phi: InertiaParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub name: String,
    pub gravity: [f64; 3],
    pub end_effector: String,
    pub links: Vec<LinkFile>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<MultibodyModel, ModelError> {
        let mut links = Vec::with_capacity(self.links.len());
        for (i, l) in self.links.iter().enumerate() {
            let parent = match &l.parent {
                None => None,
                Some(name) => {
                    let p = self.links[..i].iter().position(|o| &o.name == name);
                    match p {
                        Some(p) => Some(p),
                        None if self.links.iter().any(|o| &o.name == name) => {
                            return Err(ModelError::ParentOrder(l.name.clone()))
                        }
                        None => return Err(ModelError::UnknownParent { link: l.name.clone(), parent: name.clone() }),
                    }
                }
            };
            let joint = match l.joint {
                JointFile::Revolute { axis } => Joint::Revolute { axis: Vec3::from(axis) },
                JointFile::Fixed => Joint::Fixed,
                JointFile::Floating => Joint::FloatingBase,
            };
            links.push(LinkModel {
                name: l.name.clone(),
                parent,
                joint,
                origin: Pose::from_xyz_rpy(l.origin.xyz, l.origin.rpy),
                phi: l.phi,
            });
        }
        let ee = self
            .links
            .iter()
            .position(|l| l.name == self.end_effector)
            .ok_or_else(|| ModelError::UnknownEndEffector(self.end_effector.clone()))?;
        MultibodyModel::new(self.name, links, Vec3::from(self.gravity), ee)
    }

    pub fn from_model(model: &MultibodyModel) -> Self {
        let links = model
            .links
            .iter()
            .map(|l| {
                let (r, p, y) = l.origin.rotation.euler_angles();
                LinkFile {
                    name: l.name.clone(),
                    parent: l.parent.map(|p| model.links[p].name.clone()),
                    joint: match l.joint {
                        Joint::Revolute { axis } => JointFile::Revolute { axis: [axis.x, axis.y, axis.z] },
                        Joint::Fixed => JointFile::Fixed,
                        Joint::FloatingBase => JointFile::Floating,
                    },
                    origin: OriginFile { xyz: l.origin.translation.into(), rpy: [r, p, y] },
                    phi: l.phi,
                }
            })
            .collect();
        ModelFile {
            name: model.name.clone(),
            gravity: model.gravity.into(),
            end_effector: model.links[model.end_effector].name.clone(),
            links,
        }
    }
}

pub const PANDA_FIXED_JSON: &str = include_str!("../../../data/models/panda_fixed.json");
pub const PANDA_FLOATING_JSON: &str = include_str!("../../../data/models/panda_floating.json");

/// The shipped 7-DOF arm on a fixed base.
pub fn panda_fixed() -> MultibodyModel {
    MultibodyModel::from_json_str(PANDA_FIXED_JSON).expect("shipped model parses")
}

/// The shipped 7-DOF arm on a 216 kg free-floating base.
pub fn panda_floating() -> MultibodyModel {
    MultibodyModel::from_json_str(PANDA_FLOATING_JSON).expect("shipped model parses")
}
