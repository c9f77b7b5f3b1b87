//! Pinhole cameras, ray generation and cross-view pixel transfer.
//!
//! Conventions: right-handed camera frame with +z forward (x right, y down),
//! poses stored camera-to-world, integer pixel coordinates address pixel
//! centres, and "depth" means camera-space z.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    pose: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Result of carrying a source pixel with known depth into a target view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    /// Real-valued target pixel.
    pub pixel: Vector2<f64>,
    /// Depth of the transferred point in the target camera.
    pub depth: f64,
    pub in_bounds: bool,
}

impl Transfer {
    /// Nearest target pixel (column, row); `None` when out of bounds.
    pub fn nearest_pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if !self.in_bounds {
            return None;
        }
        let col = (self.pixel.x.round() as usize).min(width - 1);
        let row = (self.pixel.y.round() as usize).min(height - 1);
        Some((col, row))
    }
}

/// A novel-view pixel linked to an input-view pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Vector2<f64>,
    pub target: Vector2<f64>,
    pub projected_depth: f64,
    pub rendered_depth: f64,
    pub projection_error: f64,
    pub in_bounds: bool,
}

impl Correspondence {
    pub fn new(source: Vector2<f64>, transfer: Transfer, rendered_depth: f64) -> Self {
        Self {
            source,
            target: transfer.pixel,
            projected_depth: transfer.depth,
            rendered_depth,
            projection_error: projection_error(rendered_depth, transfer.depth),
            in_bounds: transfer.in_bounds,
        }
    }
}

/// `(d̂ − d̃)²`.
pub fn projection_error(rendered: f64, projected: f64) -> f64 {
    let d = rendered - projected;
    d * d
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::InvalidData(format!(
            "pose rotation is not proper orthonormal (orthogonality error {ortho:.2e}, det {det})"
        )));
    }
    Ok(())
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Matrix4<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidData(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidData("image size must be nonzero".into()));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::InvalidData(format!("need 0 < near < far, got {near}, {far}")));
        }
        check_rotation(&pose.fixed_view::<3, 3>(0, 0).into_owned())?;
        let bottom = pose.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > 1e-12 {
            return Err(Error::InvalidData("pose is not an affine rigid transform".into()));
        }
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let k_inv = Matrix3::new(
            1.0 / fx,
            0.0,
            -cx / fx,
            0.0,
            1.0 / fy,
            -cy / fy,
            0.0,
            0.0,
            1.0,
        );
        Ok(Self {
            k,
            k_inv,
            pose,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear towards the top of the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidData("eye and target coincide".into()))?;
        let x = (-up)
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidData("up is parallel to the view direction".into()))?;
        let y = z.cross(&x);
        let rot = Matrix3::from_columns(&[x, y, z]);
        let pose = pose_from_parts(&rot, &eye);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            pose,
            width,
            height,
            near,
            far,
        )
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    /// Camera-to-world transform.
    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation()))
    }

    pub fn with_bounds(&self, near: f64, far: f64) -> Result<Self> {
        Self::new(
            self.fx(),
            self.fy(),
            self.cx(),
            self.cy(),
            self.pose,
            self.width,
            self.height,
            near,
            far,
        )
    }

    pub fn with_pose(&self, pose: Matrix4<f64>) -> Result<Self> {
        Self::new(
            self.fx(),
            self.fy(),
            self.cx(),
            self.cy(),
            pose,
            self.width,
            self.height,
            self.near,
            self.far,
        )
    }

    /// Intrinsics for an image reduced by an integer `factor` with area
    /// averaging (pixel-centre convention).
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        let f = factor as f64;
        Self::new(
            self.fx() / f,
            self.fy() / f,
            (self.cx() + 0.5) / f - 0.5,
            (self.cy() + 0.5) / f - 0.5,
            self.pose,
            self.width / factor,
            self.height / factor,
            self.near,
            self.far,
        )
    }

    /// Uniformly rescales the scene: translation and bounds multiply by `s`.
    pub fn scaled_scene(&self, s: f64) -> Result<Self> {
        let mut pose = self.pose;
        for i in 0..3 {
            pose[(i, 3)] *= s;
        }
        Self::new(
            self.fx(),
            self.fy(),
            self.cx(),
            self.cy(),
            pose,
            self.width,
            self.height,
            self.near * s,
            self.far * s,
        )
    }

    fn world_to_camera(&self, xw: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (xw - self.center())
    }

    pub fn contains(&self, x: &Vector2<f64>) -> bool {
        x.x >= 0.0 && x.y >= 0.0 && x.x < self.width as f64 && x.y < self.height as f64
    }

    pub fn pixel_to_ray(&self, x: Vector2<f64>) -> Result<Ray> {
        if !self.contains(&x) {
            return Err(Error::OutOfBounds(x.x, x.y));
        }
        Ok(self.ray_unchecked(x))
    }

    pub(crate) fn ray_unchecked(&self, x: Vector2<f64>) -> Ray {
        let cam_dir = self.k_inv * Vector3::new(x.x, x.y, 1.0);
        Ray {
            origin: self.center(),
            direction: (self.rotation() * cam_dir).normalize(),
            pixel: x,
        }
    }

    /// Ray through the centre of pixel (`col`, `row`).
    pub fn pixel_ray(&self, col: usize, row: usize) -> Ray {
        self.ray_unchecked(Vector2::new(col as f64, row as f64))
    }

    /// Camera-frame z of the unit ray direction through `x`; multiplying a
    /// distance along that ray by this converts it to depth.
    pub fn axis_cosine(&self, x: Vector2<f64>) -> f64 {
        1.0 / (self.k_inv * Vector3::new(x.x, x.y, 1.0)).norm()
    }

    /// World point to (pixel, depth).
    pub fn project(&self, xw: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let pc = self.world_to_camera(xw);
        if pc.z <= 0.0 {
            return Err(Error::BehindCamera(pc.z));
        }
        let h = self.k * pc;
        Ok((Vector2::new(h.x / h.z, h.y / h.z), pc.z))
    }

    /// (pixel, depth) to world point.
    pub fn backproject(&self, x: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 {
            return Err(Error::BehindCamera(depth));
        }
        let pc = self.k_inv * Vector3::new(x.x, x.y, 1.0) * depth;
        Ok(self.rotation() * pc + self.center())
    }

    /// Carries pixel `x` at depth `d` of `self` into `target`.
    pub fn transfer(&self, target: &Camera, x: Vector2<f64>, d: f64) -> Result<Transfer> {
        let xw = self.backproject(x, d)?;
        let h = target.k * target.world_to_camera(&xw);
        let depth = h.z;
        let pixel = Vector2::new(h.x / h.z, h.y / h.z);
        let in_bounds = depth > 0.0 && target.contains(&pixel);
        Ok(Transfer {
            pixel,
            depth,
            in_bounds,
        })
    }

    /// Vectors `(a, b)` with the homogeneous target pixel of `x` at source
    /// depth `d` equal to `a·d + b`.
    pub fn transfer_coefficients(&self, target: &Camera, x: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let rt = target.rotation().transpose();
        let dir = rt * self.rotation() * (self.k_inv * Vector3::new(x.x, x.y, 1.0));
        let offset = rt * (self.center() - target.center());
        (target.k * dir, target.k * offset)
    }

    /// Coefficients `(a, b)` with transferred depth `d̃ = a·d + b`, which is
    /// affine in the source depth for a fixed pixel.
    pub fn transfer_depth_coefficients(&self, target: &Camera, x: Vector2<f64>) -> (f64, f64) {
        let (a, b) = self.transfer_coefficients(target, x);
        (a.z, b.z)
    }
}

pub fn pose_from_parts(rot: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut pose = Matrix4::identity();
    pose.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    pose.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam(fx: f64, c: f64, pose: Matrix4<f64>) -> Camera {
        Camera::new(fx, fx, c, c, pose, 100, 100, 0.1, 10.0).unwrap()
    }

    fn translated(x: f64, y: f64, z: f64) -> Matrix4<f64> {
        pose_from_parts(&Matrix3::identity(), &Vector3::new(x, y, z))
    }

    #[test]
    fn rays_through_axis_and_principal_point() {
        let c = Camera::new(1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 10, 10, 0.1, 5.0).unwrap();
        let r = c.pixel_to_ray(Vector2::new(0.0, 0.0)).unwrap();
        assert!((r.direction - Vector3::z()).norm() < 1e-15);

        let c = cam(100.0, 50.0, Matrix4::identity());
        let r = c.pixel_to_ray(Vector2::new(50.0, 50.0)).unwrap();
        assert!((r.direction - Vector3::z()).norm() < 1e-15);

        let c = Camera::new(100.0, 100.0, 50.0, 50.0, Matrix4::identity(), 200, 100, 0.1, 5.0)
            .unwrap();
        let r = c.pixel_to_ray(Vector2::new(150.0, 50.0)).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.direction - Vector3::new(s, 0.0, s)).norm() < 1e-12);
        assert!(((r.direction.norm()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let c = cam(100.0, 50.0, Matrix4::identity());
        assert!(c.pixel_to_ray(Vector2::new(100.0, 3.0)).is_err());
        assert!(c.pixel_to_ray(Vector2::new(-0.1, 3.0)).is_err());
    }

    #[test]
    fn project_examples() {
        let c = cam(100.0, 50.0, Matrix4::identity());
        let (px, d) = c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px.x, px.y, d), (50.0, 50.0, 1.0));
        let (px, d) = c.project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((px.x - 60.0).abs() < 1e-12 && (px.y - 50.0).abs() < 1e-12 && d == 1.0);
        assert!(matches!(
            c.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let c = cam(100.0, 50.0, Matrix4::identity());
        let p = c.backproject(Vector2::new(50.0, 50.0), 2.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        let p = c.backproject(Vector2::new(60.0, 50.0), 1.0).unwrap();
        assert!((p - Vector3::new(0.1, 0.0, 1.0)).norm() < 1e-15);
        assert!(c.backproject(Vector2::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn transfer_examples() {
        let src = Camera::new(100.0, 100.0, 50.0, 50.0, Matrix4::identity(), 200, 100, 0.1, 5.0)
            .unwrap();
        let same = src.transfer(&src, Vector2::new(12.0, 34.0), 1.7).unwrap();
        assert!((same.pixel - Vector2::new(12.0, 34.0)).norm() < 1e-12);
        assert!((same.depth - 1.7).abs() < 1e-12);

        let tgt = src.with_pose(translated(-1.0, 0.0, 0.0)).unwrap();
        let t = src.transfer(&tgt, Vector2::new(50.0, 50.0), 1.0).unwrap();
        assert!((t.pixel - Vector2::new(150.0, 50.0)).norm() < 1e-12);
        assert!((t.depth - 1.0).abs() < 1e-12);
        assert!(t.in_bounds);

        let behind = src.with_pose(translated(0.0, 0.0, 3.0)).unwrap();
        let t = src.transfer(&behind, Vector2::new(50.0, 50.0), 1.0).unwrap();
        assert!(t.depth <= 0.0 && !t.in_bounds);
    }

    #[test]
    fn depth_coefficients_match_transfer() {
        let src = cam(80.0, 50.0, Matrix4::identity());
        let rot = Rotation3::from_euler_angles(0.1, -0.2, 0.05).into_inner();
        let tgt = src.with_pose(pose_from_parts(&rot, &Vector3::new(0.3, -0.1, 0.2))).unwrap();
        let x = Vector2::new(20.0, 70.0);
        let (a, b) = src.transfer_depth_coefficients(&tgt, x);
        for d in [0.5, 1.0, 3.0] {
            let t = src.transfer(&tgt, x, d).unwrap();
            assert!((a * d + b - t.depth).abs() < 1e-12);
            let (ha, hb) = src.transfer_coefficients(&tgt, x);
            let h = ha * d + hb;
            assert!((Vector2::new(h.x / h.z, h.y / h.z) - t.pixel).norm() < 1e-9);
        }
    }

    #[test]
    fn projection_error_examples() {
        assert_eq!(projection_error(1.0, 1.0), 0.0);
        assert_eq!(projection_error(2.0, 1.0), 1.0);
        assert!((projection_error(0.3, 0.7) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn invalid_cameras_rejected() {
        let bad_rot = pose_from_parts(&(Matrix3::identity() * 1.1), &Vector3::zeros());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, bad_rot, 4, 4, 0.1, 1.0).is_err());
        let mirror = pose_from_parts(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), &Vector3::zeros());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, mirror, 4, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(-1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 4, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 4, 4, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn ray_direction_is_unit(col in 0usize..100, row in 0usize..100,
                                 ax in -1.0f64..1.0, ay in -1.0f64..1.0) {
            let rot = Rotation3::from_euler_angles(ax, ay, 0.3).into_inner();
            let c = cam(70.0, 49.5, pose_from_parts(&rot, &Vector3::new(1.0, 2.0, 3.0)));
            let r = c.pixel_ray(col, row);
            prop_assert!((r.direction.norm() - 1.0).abs() < 1e-9);
        }
    }
}
