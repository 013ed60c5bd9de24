#![allow(dead_code)]

use nalgebra::{DVector, UnitQuaternion};
use orbit_inertia::multibody::{forward_kinematics, link_jacobians, MultibodyModel, RobotState};
use orbit_inertia::spatial::{InertiaParams, Pose, Vec3, Vec6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.gen_range(-1.0..1.0))
}

/// Random state: arbitrary base pose, joint angles in [-π, π], velocities in [-1, 1].
pub fn random_state(model: &MultibodyModel, rng: &mut impl Rng) -> RobotState {
    let mut s = model.zero_state();
    if model.is_floating() {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = UnitQuaternion::from_scaled_axis(axis * 2.0).to_rotation_matrix();
        let t = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        s.set_base_pose(&Pose::new(rot, t));
    }
    let off = model.nq() - model.n_joints();
    for k in off..model.nq() {
        s.q[k] = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    }
    s.nu = uniform_vec(rng, model.nv(), 1.0);
    s
}

/// Random physically consistent body: a box of random size and mass placed
/// at a random pose.
pub fn random_body(rng: &mut impl Rng) -> InertiaParams {
    let mass = rng.gen_range(0.2..10.0);
    let size = [rng.gen_range(0.02..0.5), rng.gen_range(0.02..0.5), rng.gen_range(0.02..0.5)];
    let pose = Pose::from_xyz_rpy(
        [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
    );
    InertiaParams::solid_box(mass, size).transform(&pose)
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// World-frame momentum as a plain sum over links, each body momentum
/// mapped through its forward-kinematics pose.
pub fn world_momentum_per_link(model: &MultibodyModel, state: &RobotState) -> Vec6 {
    let jac = link_jacobians(model, state);
    let v = &jac * &state.nu;
    let world = forward_kinematics(model, state);
    let mut h = Vec6::zeros();
    for (i, link) in model.links().iter().enumerate() {
        let vi = Vec6::from_iterator(v.rows(6 * i, 6).iter().copied());
        h += world[i].force_to_parent(&(link.phi.spatial_inertia().0 * vi));
    }
    h
}
