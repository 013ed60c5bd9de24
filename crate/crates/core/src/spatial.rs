//! Small fixed-size linear algebra for rigid bodies.
//!
//! Conventions held throughout the crate:
//! - 6-vectors are `[angular; linear]`, for motion (twists) and force (wrenches) alike.
//! - A [`Pose`] is the placement of a child frame in its parent frame:
//!   `p_parent = R * p_child + t`.
//! - Inertial parameters are the 10-vector
//!   `[m, hx, hy, hz, Ixx, Iyy, Izz, Iyz, Izx, Ixy]`, with `h = m c` and the
//!   inertia tensor taken about the frame origin.

use nalgebra::{
    Cholesky, Matrix3, Matrix4, Matrix6, Rotation3, SMatrix, SVector, SymmetricEigen, Unit,
    Vector3, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;
pub type Vec10 = SVector<f64, 10>;
pub type Mat10 = SMatrix<f64, 10, 10>;
pub type Rotation = Rotation3<f64>;

/// Minimum pseudo-inertia eigenvalue accepted as physically consistent.
pub const DEFAULT_CONSISTENCY_TOL: f64 = 1e-9;

/// Parameter labels in storage order.
pub const PARAM_LABELS: [&str; 10] = ["m", "hx", "hy", "hz", "Ixx", "Iyy", "Izz", "Iyz", "Izx", "Ixy"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("pseudo-inertia of {which} is not positive definite")]
    NonPositiveDefinite { which: &'static str },
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn angular(v: &Vec6) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn linear(v: &Vec6) -> Vec3 {
    Vec3::new(v[3], v[4], v[5])
}

pub fn spatial(ang: &Vec3, lin: &Vec3) -> Vec6 {
    Vec6::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z)
}

/// Motion cross product `v ×m w`.
pub fn cross_motion(v: &Vec6, w: &Vec6) -> Vec6 {
    let (om, vl) = (angular(v), linear(v));
    let (om_w, vl_w) = (angular(w), linear(w));
    spatial(&om.cross(&om_w), &(om.cross(&vl_w) + vl.cross(&om_w)))
}

/// Force cross product `v ×f f`.
pub fn cross_force(v: &Vec6, f: &Vec6) -> Vec6 {
    let (om, vl) = (angular(v), linear(v));
    let (n, fl) = (angular(f), linear(f));
    spatial(&(om.cross(&n) + vl.cross(&fl)), &om.cross(&fl))
}

/// Rigid placement of a child frame in a parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Rotation::identity(), translation }
    }

    /// URDF-style origin: fixed-axis roll, pitch, yaw then translation.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self {
            rotation: Rotation::from_euler_angles(rpy[0], rpy[1], rpy[2]),
            translation: Vec3::new(xyz[0], xyz[1], xyz[2]),
        }
    }

    /// `self * other`: `other` is expressed in the frame described by `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Re-express a parent-frame twist in the child frame.
    pub fn motion_to_child(&self, v: &Vec6) -> Vec6 {
        let rt = self.rotation.inverse();
        let om = angular(v);
        let vl = linear(v) + om.cross(&self.translation);
        spatial(&(rt * om), &(rt * vl))
    }

    /// Re-express a child-frame twist in the parent frame.
    pub fn motion_to_parent(&self, v: &Vec6) -> Vec6 {
        let om = self.rotation * angular(v);
        let vl = self.rotation * linear(v) + self.translation.cross(&om);
        spatial(&om, &vl)
    }

    /// Re-express a child-frame wrench in the parent frame.
    pub fn force_to_parent(&self, f: &Vec6) -> Vec6 {
        let fl = self.rotation * linear(f);
        let n = self.rotation * angular(f) + self.translation.cross(&fl);
        spatial(&n, &fl)
    }

    /// 6×6 matrix of [`Pose::motion_to_child`]. Its transpose maps child
    /// wrenches to the parent.
    pub fn motion_matrix_to_child(&self) -> Mat6 {
        let rt = self.rotation.inverse().into_inner();
        let mut x = Mat6::zeros();
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
        x.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rt * skew(&self.translation)));
        x
    }

    /// 4×4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> Mat4 {
        let mut t = Mat4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        t
    }
}

/// Rotation by `angle` about the unit `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Rotation {
    match Unit::try_new(*axis, 1e-15) {
        Some(a) => Rotation::from_axis_angle(&a, angle),
        None => Rotation::identity(),
    }
}

/// The 10 inertial parameters of a rigid body, about and in its own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 10]", into = "[f64; 10]")]
pub struct InertiaParams(pub Vec10);

impl From<[f64; 10]> for InertiaParams {
    fn from(a: [f64; 10]) -> Self {
        InertiaParams(Vec10::from_row_slice(&a))
    }
}

impl From<InertiaParams> for [f64; 10] {
    fn from(p: InertiaParams) -> Self {
        let mut a = [0.0; 10];
        a.copy_from_slice(p.0.as_slice());
        a
    }
}

impl std::ops::Add for InertiaParams {
    type Output = InertiaParams;
    fn add(self, rhs: Self) -> Self {
        InertiaParams(self.0 + rhs.0)
    }
}

impl std::ops::Sub for InertiaParams {
    type Output = InertiaParams;
    fn sub(self, rhs: Self) -> Self {
        InertiaParams(self.0 - rhs.0)
    }
}

impl std::ops::Mul<f64> for InertiaParams {
    type Output = InertiaParams;
    fn mul(self, s: f64) -> Self {
        InertiaParams(self.0 * s)
    }
}

impl InertiaParams {
    pub fn zero() -> Self {
        InertiaParams(Vec10::zeros())
    }

    /// Unit vector selecting parameter `k`.
    pub fn unit(k: usize) -> Self {
        let mut v = Vec10::zeros();
        v[k] = 1.0;
        InertiaParams(v)
    }

    /// From mass, first moment and inertia about the frame origin.
    pub fn from_parts(mass: f64, h: Vec3, inertia: &Mat3) -> Self {
        InertiaParams(Vec10::from_row_slice(&[
            mass,
            h.x,
            h.y,
            h.z,
            inertia[(0, 0)],
            inertia[(1, 1)],
            inertia[(2, 2)],
            inertia[(1, 2)],
            inertia[(2, 0)],
            inertia[(0, 1)],
        ]))
    }

    /// From mass, centre of mass and inertia about the centre of mass.
    pub fn from_com(mass: f64, com: Vec3, inertia_com: &Mat3) -> Self {
        let inertia = inertia_com + mass * (com.dot(&com) * Mat3::identity() - com * com.transpose());
        Self::from_parts(mass, mass * com, &inertia)
    }

    /// Uniform solid box centred on the frame origin.
    pub fn solid_box(mass: f64, size: [f64; 3]) -> Self {
        let [a, b, c] = size;
        let k = mass / 12.0;
        let ic = Mat3::from_diagonal(&Vec3::new(k * (b * b + c * c), k * (a * a + c * c), k * (a * a + b * b)));
        Self::from_com(mass, Vec3::zeros(), &ic)
    }

    pub fn mass(&self) -> f64 {
        self.0[0]
    }

    pub fn first_moment(&self) -> Vec3 {
        Vec3::new(self.0[1], self.0[2], self.0[3])
    }

    /// Centre of mass; `None` when the mass is not positive.
    pub fn com(&self) -> Option<Vec3> {
        (self.mass() > 0.0).then(|| self.first_moment() / self.mass())
    }

    /// Symmetric inertia tensor about the frame origin.
    pub fn inertia(&self) -> Mat3 {
        let p = &self.0;
        Mat3::new(p[4], p[9], p[8], p[9], p[5], p[7], p[8], p[7], p[6])
    }

    /// Inertia tensor about the centre of mass.
    pub fn inertia_about_com(&self) -> Option<Mat3> {
        let c = self.com()?;
        Some(self.inertia() - self.mass() * (c.dot(&c) * Mat3::identity() - c * c.transpose()))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn pseudo_inertia(&self) -> PseudoInertia {
        PseudoInertia::from_params(self)
    }

    pub fn spatial_inertia(&self) -> SpatialInertia {
        SpatialInertia::from_params(self)
    }

    pub fn min_pseudo_eigenvalue(&self) -> f64 {
        self.pseudo_inertia().min_eigenvalue()
    }

    pub fn is_physically_consistent(&self, tol: f64) -> bool {
        self.min_pseudo_eigenvalue() > tol
    }

    /// Parameters of this body re-expressed in the frame where `pose` places
    /// the body's frame.
    pub fn transform(&self, pose: &Pose) -> InertiaParams {
        let m = self.mass();
        let r = pose.rotation.matrix();
        let t = &pose.translation;
        let rh = r * self.first_moment();
        let st = skew(t);
        let srh = skew(&rh);
        let inertia = r * self.inertia() * r.transpose() - srh * st - st * srh - m * st * st;
        InertiaParams::from_parts(m, rh + m * t, &inertia)
    }
}

/// Re-express `phi` (given in a body frame) in the frame where `pose` places it.
pub fn transform_params(phi: &InertiaParams, pose: &Pose) -> InertiaParams {
    phi.transform(pose)
}

/// 4×4 pseudo-inertia `[[Σ, h], [hᵀ, m]]` with `Σ = ½ tr(I) 𝟙 − I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoInertia(pub Mat4);

impl PseudoInertia {
    pub fn from_params(phi: &InertiaParams) -> Self {
        let i = phi.inertia();
        let sigma = 0.5 * i.trace() * Mat3::identity() - i;
        let h = phi.first_moment();
        let mut l = Mat4::zeros();
        l.fixed_view_mut::<3, 3>(0, 0).copy_from(&sigma);
        l.fixed_view_mut::<3, 1>(0, 3).copy_from(&h);
        l.fixed_view_mut::<1, 3>(3, 0).copy_from(&h.transpose());
        l[(3, 3)] = phi.mass();
        PseudoInertia(l)
    }

    /// Inverse of the linear map `φ ↦ L(φ)` (reads the upper triangle).
    pub fn to_params(&self) -> InertiaParams {
        let l = &self.0;
        let sigma = Mat3::new(
            l[(0, 0)], l[(0, 1)], l[(0, 2)],
            l[(0, 1)], l[(1, 1)], l[(1, 2)],
            l[(0, 2)], l[(1, 2)], l[(2, 2)],
        );
        let inertia = sigma.trace() * Mat3::identity() - sigma;
        InertiaParams::from_parts(l[(3, 3)], Vec3::new(l[(0, 3)], l[(1, 3)], l[(2, 3)]), &inertia)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0).eigenvalues.min()
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }
}

/// 6×6 spatial inertia about the frame origin, `[[I, skew(h)], [skew(h)ᵀ, m 𝟙]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialInertia(pub Mat6);

impl SpatialInertia {
    pub fn from_params(phi: &InertiaParams) -> Self {
        let sh = skew(&phi.first_moment());
        let mut g = Mat6::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&phi.inertia());
        g.fixed_view_mut::<3, 3>(0, 3).copy_from(&sh);
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&sh.transpose());
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(phi.mass() * Mat3::identity()));
        SpatialInertia(g)
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }

    /// Spatial momentum of the body moving with twist `v`.
    pub fn momentum(&self, v: &Vec6) -> Vec6 {
        self.0 * v
    }
}

pub fn pseudo_inertia(phi: &InertiaParams) -> PseudoInertia {
    PseudoInertia::from_params(phi)
}

pub fn spatial_inertia(phi: &InertiaParams) -> SpatialInertia {
    SpatialInertia::from_params(phi)
}

pub fn is_physically_consistent(phi: &InertiaParams, tol: f64) -> bool {
    phi.is_physically_consistent(tol)
}

struct Factored {
    chol: Cholesky<f64, nalgebra::U4>,
    log_det: f64,
}

fn factor(l: Mat4, which: &'static str) -> Result<Factored, SpatialError> {
    let chol = Cholesky::new(l).ok_or(SpatialError::NonPositiveDefinite { which })?;
    let diag = chol.l_dirty().diagonal();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(SpatialError::NonPositiveDefinite { which });
    }
    let log_det = 2.0 * diag.iter().map(|d| d.ln()).sum::<f64>();
    Ok(Factored { chol, log_det })
}

/// Log-determinant divergence between the pseudo-inertias of `phi` and `phi0`:
/// `−log(|L|/|L₀|) + tr(L₀⁻¹ L) − 4`.
pub fn logdet_divergence(phi: &InertiaParams, phi0: &InertiaParams) -> Result<f64, SpatialError> {
    let l = phi.pseudo_inertia().0;
    let f = factor(l, "estimate")?;
    let f0 = factor(phi0.pseudo_inertia().0, "reference")?;
    let trace = f0.chol.solve(&l).trace();
    Ok(f0.log_det - f.log_det + trace - 4.0)
}

/// `∂L/∂φ_k` for each of the 10 parameters (constant, since `L` is linear).
pub fn pseudo_inertia_basis() -> [Mat4; 10] {
    std::array::from_fn(|k| InertiaParams::unit(k).pseudo_inertia().0)
}

/// Gradient and Hessian of [`logdet_divergence`] with respect to `phi`.
pub fn logdet_divergence_grad_hess(
    phi: &InertiaParams,
    phi0: &InertiaParams,
) -> Result<(Vec10, Mat10), SpatialError> {
    let f = factor(phi.pseudo_inertia().0, "estimate")?;
    let f0 = factor(phi0.pseudo_inertia().0, "reference")?;
    let l_inv = f.chol.inverse();
    let l0_inv = f0.chol.inverse();
    let dl = l0_inv - l_inv;
    let basis = pseudo_inertia_basis();

    let mut grad = Vec10::zeros();
    let products: [Mat4; 10] = std::array::from_fn(|k| l_inv * basis[k]);
    for k in 0..10 {
        grad[k] = dl.component_mul(&basis[k]).sum();
    }
    let mut hess = Mat10::zeros();
    for k in 0..10 {
        for j in k..10 {
            // tr(B_k B_j) = Σ B_k[a,b] B_j[b,a]
            let v = products[k].component_mul(&products[j].transpose()).sum();
            hess[(k, j)] = v;
            hess[(j, k)] = v;
        }
    }
    Ok((grad, hess))
}
