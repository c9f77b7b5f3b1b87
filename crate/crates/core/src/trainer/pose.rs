//! Unobserved camera poses for the regularization patch.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;

use crate::camera::{pose_from_parts, Camera};
use crate::error::{Error, Result};

/// Pose between `a` (`w = 0`) and `b` (`w = 1`): linear in the centre,
/// normalized quaternion interpolation in the rotation. Intrinsics and
/// bounds come from `intrinsics`.
pub fn interpolate_pose(intrinsics: &Camera, a: &Camera, b: &Camera, w: f64) -> Result<Camera> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("interpolation weight {w} outside [0, 1]")));
    }
    if w == 0.0 {
        return intrinsics.with_pose(*a.pose());
    }
    if w == 1.0 {
        return intrinsics.with_pose(*b.pose());
    }
    let qa = a.quaternion().into_inner();
    let mut qb = b.quaternion().into_inner();
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let q: Quaternion<f64> = qa * (1.0 - w) + qb * w;
    let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let center = a.center() * (1.0 - w) + b.center() * w;
    intrinsics.with_pose(pose_from_parts(&rot, &center))
}

/// Random pair of distinct train cameras, random weight in `[0, 1)`.
pub fn sample_novel_pose(cameras: &[Camera], rng: &mut impl Rng) -> Result<Camera> {
    if cameras.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "novel poses need at least 2 train cameras, got {}",
            cameras.len()
        )));
    }
    let i = rng.gen_range(0..cameras.len());
    let mut j = rng.gen_range(0..cameras.len() - 1);
    if j >= i {
        j += 1;
    }
    let w: f64 = rng.gen();
    interpolate_pose(&cameras[0], &cameras[i], &cameras[j], w)
}
