//! Pinhole cameras, rays, spherical direction coordinates and the rotation
//! logarithm used to measure how far a viewpoint lies from a set of poses.
//!
//! Conventions: the camera looks along its local `+z` axis, `+x` points right
//! in the image and `+y` points down. Pixel `(u, v)` covers the square
//! `[u, u+1) x [v, v+1)`, so integer pixel indices map to centers at
//! half-integer offsets. World space is `z`-up.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-6;

/// Pinhole camera: intrinsics plus a rigid camera-to-world pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Columns are the camera axes expressed in world coordinates.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        check_rotation(&rotation, ORTHO_TOL)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera at `position` looking at `target`, with world `+z` as the up hint.
    /// Intrinsics are derived from a horizontal field of view.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        width: u32,
        height: u32,
        fov_x: f64,
    ) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera position coincides with its target"))?;
        let mut up = Vec3::z();
        if forward.cross(&up).norm() < 1e-6 {
            up = Vec3::y();
        }
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            fx,
            fx,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            rotation,
            position,
        )
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Maps a world point into the camera frame (the inverse of the pose).
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Ray through the continuous pixel coordinate `(u, v)`; its direction passes
    /// through `(u + 0.5, v + 0.5)` on the image plane. Bounds are `[0, inf)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if !(0.0..self.width as f64).contains(&u) || !(0.0..self.height as f64).contains(&v) {
            return Err(Error::invalid(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let local = Vec3::new(
            (u + 0.5 - self.cx) / self.fx,
            (v + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let dir = (self.rotation * local).normalize();
        Ok(Ray {
            origin: self.translation,
            dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
        })
    }

    /// Ray through the center of integer pixel `(px, py)`.
    pub fn pixel_center_ray(&self, px: u32, py: u32) -> Result<Ray> {
        self.pixel_ray(px as f64, py as f64)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Half-line `o + t d` restricted to `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if (dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "ray direction must be unit, norm is {}",
                dir.norm()
            )));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::invalid(format!(
                "ray bounds must satisfy 0 <= near < far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Self {
            origin,
            dir,
            t_near,
            t_far,
        })
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Direction in spherical coordinates: elevation `theta` above the `xy`-plane
/// and azimuth `phi` measured from `+x` towards `+y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDir {
    pub theta: f64,
    pub phi: f64,
}

pub fn dir_from_spherical(s: SphericalDir) -> Vec3 {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    Vec3::new(ct * cp, ct * sp, st)
}

/// Inverse of [`dir_from_spherical`]. At the poles the azimuth is defined as 0.
pub fn spherical_from_dir(d: &Vec3) -> Result<SphericalDir> {
    let n = d.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::invalid(format!(
            "spherical conversion needs a unit vector, norm is {n}"
        )));
    }
    let z = d.z.clamp(-1.0, 1.0);
    let planar = d.x.hypot(d.y);
    if planar == 0.0 {
        return Ok(SphericalDir {
            theta: FRAC_PI_2.copysign(z),
            phi: 0.0,
        });
    }
    let theta = z.atan2(planar);
    let mut phi = d.y.atan2(d.x);
    if phi <= -PI {
        phi += 2.0 * PI;
    }
    Ok(SphericalDir { theta, phi })
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new(Vec3::repeat(-half), Vec3::repeat(half))
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extent(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn padded(&self, margin: f64) -> Aabb {
        Aabb::new(self.min.add_scalar(-margin), self.max.add_scalar(margin))
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb::new(self.min.inf(&other.min), self.max.sup(&other.max))
    }

    /// Slab test; returns the parametric entry and exit distances clipped to
    /// `[t_min, t_max]`.
    pub fn intersect(&self, origin: &Vec3, inv_dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, f64)> {
        let mut t0 = t_min;
        let mut t1 = t_max;
        for i in 0..3 {
            let a = (self.min[i] - origin[i]) * inv_dir[i];
            let b = (self.max[i] - origin[i]) * inv_dir[i];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // NaN from 0 * inf leaves the bound unchanged
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

fn check_rotation(r: &Mat3, tol: f64) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if !(err < tol) || r.determinant() <= 0.0 {
        return Err(Error::invalid(format!(
            "matrix is not a rotation (orthonormality error {err:.3e}, det {:.6})",
            r.determinant()
        )));
    }
    Ok(())
}

/// Snaps a nearly-orthonormal matrix onto SO(3). Inputs further than `tol`
/// from a rotation are rejected.
pub fn nearest_rotation(m: &Mat3, tol: f64) -> Result<Mat3> {
    check_rotation(m, tol)?;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    Ok(u * vt)
}

/// Rotation vector `w` with `exp([w]x) = r` and `|w| <= pi`.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    check_rotation(r, 1e-6)?;
    let vee = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * vee.norm();
    let angle = sin.atan2(cos);

    if angle < 1e-6 {
        // theta / (2 sin theta) ~ (1 + theta^2 / 6) / 2
        return Ok(vee * 0.5 * (1.0 + angle * angle / 6.0));
    }
    if angle < PI - 1e-3 {
        return Ok(vee * (angle / (2.0 * angle.sin())));
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part (R + R^T)/2 - cos I = (1 - cos) a a^T.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
    let i = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap();
    let mut axis = sym.column(i).into_owned().normalize();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    Ok(axis * angle)
}

/// Rodrigues exponential of a rotation vector.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let angle = w.norm();
    let k = Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    if angle < 1e-8 {
        return Mat3::identity() + k + k * k * 0.5;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Mat3::identity() + k * a + k * k * b
}

/// Smallest rotation-vector distance `min_x |log x - log y|` from `y` to the set.
pub fn pose_distance(y: &Mat3, set: &[Mat3]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("pose distance against an empty pose set"));
    }
    let ly = so3_log(y)?;
    let mut best = f64::INFINITY;
    for x in set {
        best = best.min((so3_log(x)? - ly).norm());
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cam_identity(width: u32) -> Camera {
        Camera::new(
            100.0,
            100.0,
            50.0,
            50.0,
            width,
            width,
            Mat3::identity(),
            Vec3::zeros(),
        )
        .unwrap()
    }

    fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn principal_ray_is_forward() {
        let r = cam_identity(100).pixel_ray(49.5, 49.5).unwrap();
        assert_abs_diff_eq!(r.dir, Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn forty_five_degree_ray() {
        let r = cam_identity(200).pixel_ray(149.5, 49.5).unwrap();
        let expect = Vec3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        assert_abs_diff_eq!(r.dir, expect, epsilon = 1e-12);
    }

    #[test]
    fn translation_moves_origin_only() {
        let cam = Camera::new(
            100.0,
            100.0,
            50.0,
            50.0,
            100,
            100,
            Mat3::identity(),
            Vec3::new(0.0, 0.0, -4.0),
        )
        .unwrap();
        let r = cam.pixel_ray(49.5, 49.5).unwrap();
        assert_eq!(r.origin, Vec3::new(0.0, 0.0, -4.0));
        assert_abs_diff_eq!(r.dir, Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = cam_identity(100);
        assert!(cam.pixel_ray(100.0, 3.0).is_err());
        assert!(cam.pixel_ray(-0.1, 3.0).is_err());
    }

    #[test]
    fn bad_camera_rejected() {
        let skew = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(1.0, 1.0, 0.5, 0.5, 1, 1, skew, Vec3::zeros()).is_err());
        assert!(Camera::new(0.0, 1.0, 0.5, 0.5, 1, 1, Mat3::identity(), Vec3::zeros()).is_err());
        assert!(Camera::new(1.0, 1.0, 1.0, 0.5, 1, 1, Mat3::identity(), Vec3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let cam = Camera::look_at(Vec3::new(3.0, 1.0, 2.0), Vec3::zeros(), 64, 64, 0.7).unwrap();
        let fwd = cam.rotation.column(2).into_owned();
        assert_abs_diff_eq!(fwd, -Vec3::new(3.0, 1.0, 2.0).normalize(), epsilon = 1e-12);
        // straight down from the pole
        let top = Camera::look_at(Vec3::new(0.0, 0.0, 4.0), Vec3::zeros(), 64, 64, 0.7).unwrap();
        assert_abs_diff_eq!(top.rotation.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spherical_examples() {
        let d = dir_from_spherical(SphericalDir { theta: 0.0, phi: 0.0 });
        assert_abs_diff_eq!(d, Vec3::x(), epsilon = 1e-15);
        let d = dir_from_spherical(SphericalDir { theta: FRAC_PI_2, phi: 1.3 });
        assert_abs_diff_eq!(d, Vec3::z(), epsilon = 1e-15);
        let d = dir_from_spherical(SphericalDir { theta: 0.0, phi: FRAC_PI_2 });
        assert_abs_diff_eq!(d, Vec3::y(), epsilon = 1e-15);

        let s = spherical_from_dir(&Vec3::z()).unwrap();
        assert_eq!((s.theta, s.phi), (FRAC_PI_2, 0.0));
        let s = spherical_from_dir(&Vec3::x()).unwrap();
        assert_eq!((s.theta, s.phi), (0.0, 0.0));
        let s = spherical_from_dir(&-Vec3::y()).unwrap();
        assert_abs_diff_eq!(s.theta, 0.0);
        assert_abs_diff_eq!(s.phi, -FRAC_PI_2);
        // azimuth range is (-pi, pi]
        let s = spherical_from_dir(&-Vec3::x()).unwrap();
        assert_abs_diff_eq!(s.phi, PI);
        assert!(spherical_from_dir(&Vec3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn so3_log_examples() {
        assert_eq!(so3_log(&Mat3::identity()).unwrap(), Vec3::zeros());
        let w = so3_log(&rot_z(FRAC_PI_2)).unwrap();
        assert_abs_diff_eq!(w, Vec3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-12);
        // exactly pi: antisymmetric part is zero
        let w = so3_log(&rot_z(PI)).unwrap();
        assert_abs_diff_eq!(w.norm(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(w.normalize().z.abs(), 1.0, epsilon = 1e-12);
        assert!(so3_log(&(Mat3::identity() * 2.0)).is_err());
        assert!(so3_log(&-Mat3::identity()).is_err());
    }

    #[test]
    fn pose_distance_examples() {
        let i = Mat3::identity();
        assert_eq!(pose_distance(&i, &[i]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            pose_distance(&rot_z(FRAC_PI_2), &[i]).unwrap(),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            pose_distance(&rot_z(0.4), &[rot_z(0.1), rot_z(0.3)]).unwrap(),
            0.1,
            epsilon = 1e-12
        );
        assert!(pose_distance(&i, &[]).is_err());
    }
}
