//! SE(3) algebra, the pinhole camera, cross-view reprojection, rigid flow
//! and bilinear warping.
//!
//! Poses are stored world-to-camera everywhere: `X_cam = R * X_world + t`.
//! Twists are ordered `(rho, phi)`, translation part first.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::raster::{FlowField, Raster, Support, ValidityMask};

/// Points whose depth in the target view falls below this are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-4;
const SERIES_ANGLE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Focal length equal to the long side, principal point at the center.
    pub fn ideal(width: usize, height: usize) -> Self {
        let f = width.max(height) as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn long_side(&self) -> usize {
        self.width.max(self.height)
    }

    /// Intrinsics of the image area-downsampled by `factor`.
    pub fn downsample(&self, factor: usize) -> Self {
        let s = factor as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point; `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z <= MIN_DEPTH {
            return None;
        }
        Some([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Tangent-space element `(rho, phi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self(Vector6::from_column_slice(v))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn phi(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform stored as a unit quaternion and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds from a raw quaternion, renormalizing it.
    pub fn from_quaternion(q: Quaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates, for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// 6x6 adjoint acting on `(rho, phi)` twists.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * r));
        ad
    }
}

#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map of SO(3) as a unit quaternion.
pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_unchecked(Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z))
}

/// Logarithm of SO(3) on the principal branch.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Result<Vector3<f64>> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    let theta = 2.0 * s.atan2(w);
    if theta > std::f64::consts::PI - 1e-9 {
        return Err(Error::BranchCut(theta));
    }
    let k = if s < 1e-10 {
        // atan2(s, w) / s to second order in s/w
        2.0 / w * (1.0 - s * s / (3.0 * w * w))
    } else {
        theta / s
    };
    Ok(v * k)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let h = hat(phi);
    let (a, b) = if theta < SERIES_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + h * a + h * h * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let h = hat(phi);
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - h * 0.5 + h * h * c
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t4 = theta2 * theta2;
        (
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = theta2 * theta2;
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(J(xi) d) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let (rho, phi) = (xi.rho(), xi.phi());
    let j = so3_left_jacobian(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q(&rho, &phi));
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let (rho, phi) = (xi.rho(), xi.phi());
    let ji = so3_left_jacobian_inv(&phi);
    let q = se3_q(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    out
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let phi = xi.phi();
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * xi.rho(),
    }
}

pub fn se3_log(p: &Pose) -> Result<Twist> {
    let phi = so3_log(&p.rotation)?;
    let rho = so3_left_jacobian_inv(&phi) * p.translation;
    Ok(Twist::new(rho, phi))
}

/// `d * K^-1 * [x, 1]`.
pub fn backproject(x: [f64; 2], depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(k.ray(x[0], x[1]) * depth)
}

/// Result of moving one pixel from view `a` into view `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reprojection {
    pub pixel: [f64; 2],
    pub depth: f64,
    /// False when the point lands behind camera `b`.
    pub valid: bool,
}

/// Transfers pixel `x_a` with depth `depth_a` from view `a` into view `b`.
pub fn reproject(x_a: [f64; 2], depth_a: f64, pose_a: &Pose, pose_b: &Pose, k: &Intrinsics) -> Result<Reprojection> {
    let rel = pose_b.compose(&pose_a.inverse());
    reproject_relative(x_a, depth_a, &rel, k)
}

/// As [`reproject`] with the relative transform `P_b * P_a^-1` precomputed.
#[inline]
pub fn reproject_relative(x_a: [f64; 2], depth_a: f64, rel: &Pose, k: &Intrinsics) -> Result<Reprojection> {
    let p = rel.transform_point(&backproject(x_a, depth_a, k)?);
    let valid = p.z > MIN_DEPTH;
    let pixel = if valid {
        [k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy]
    } else {
        [f64::NAN, f64::NAN]
    };
    Ok(Reprojection {
        pixel,
        depth: p.z,
        valid,
    })
}

/// Flow induced by depth `depth_a` and the camera motion from `a` to `b`.
/// Pixels with non-positive depth, behind camera `b`, or landing outside
/// the image are invalid and carry zero flow.
pub fn rigid_flow(depth_a: &Raster<f64>, pose_a: &Pose, pose_b: &Pose, k: &Intrinsics) -> (FlowField, ValidityMask) {
    let (w, h) = (depth_a.width(), depth_a.height());
    let rel = pose_b.compose(&pose_a.inverse());
    let mut flow = FlowField::zeros(w, h);
    let mut mask = ValidityMask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let d = depth_a.get(x, y, 0);
            let Ok(r) = reproject_relative([x as f64, y as f64], d, &rel, k) else {
                continue;
            };
            if r.valid && k.in_bounds(r.pixel[0], r.pixel[1]) {
                flow.set(x, y, [r.pixel[0] - x as f64, r.pixel[1] - y as f64]);
                mask.set(x, y, true);
            }
        }
    }
    (flow, mask)
}

/// Samples `src` at `x + flow(x)` for every pixel. Invalid pixels (support
/// outside the image) are zero in the output.
pub fn warp_bilinear(src: &Raster<f64>, flow: &FlowField) -> Result<(Raster<f64>, ValidityMask)> {
    if src.width() != flow.width() || src.height() != flow.height() {
        return Err(Error::Dimension(format!(
            "warp source {}x{} vs flow {}x{}",
            src.width(),
            src.height(),
            flow.width(),
            flow.height()
        )));
    }
    let (w, h, c) = (src.width(), src.height(), src.channels());
    let mut out = Raster::filled(w, h, c, 0.0);
    let mut mask = ValidityMask::filled(w, h, false);
    let data = src.data();
    for y in 0..h {
        for x in 0..w {
            let f = flow.get(x, y);
            let Some(s) = Support::new(x as f64 + f[0], y as f64 + f[1], w, h) else {
                continue;
            };
            mask.set(x, y, true);
            let wt = s.weights();
            let i = s.index(w);
            for ch in 0..c {
                let v = wt[0] * data[i * c + ch]
                    + wt[1] * data[(i + 1) * c + ch]
                    + wt[2] * data[(i + w) * c + ch]
                    + wt[3] * data[(i + w + 1) * c + ch];
                out.set(x, y, ch, v);
            }
        }
    }
    Ok((out, mask))
}

/// Linear interpolation between two poses in twist space of their relative
/// transform: `exp(alpha * log(P1 * P0^-1)) * P0`.
pub fn interpolate_pose(p0: &Pose, p1: &Pose, alpha: f64) -> Result<Pose> {
    let rel = se3_log(&p1.compose(&p0.inverse()))?;
    Ok(se3_exp(&Twist(rel.0 * alpha)).compose(p0))
}
