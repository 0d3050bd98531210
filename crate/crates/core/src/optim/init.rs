//! Relative pose from a dense flow and the source frame's depth, used to
//! initialize keyframe poses before joint refinement.

use nalgebra::{Matrix5, Matrix6, UnitQuaternion, Vector3, Vector5, Vector6};

use crate::geometry::{hat, se3_exp, so3_exp, Intrinsics, Pose, Twist, MIN_DEPTH};
use crate::raster::{FlowField, Raster, ValidityMask};

/// Residuals beyond this many pixels are down-weighted (Huber).
pub const HUBER_PX: f64 = 1.0;
pub const MIN_POINTS: usize = 30;

/// `P_b * P_a^-1` minimizing the reprojection error between `D_a`-lifted
/// pixels of `a` moved into `b` and their flow targets. Gauss-Newton with
/// Huber weights from the identity; `None` with fewer than
/// [`MIN_POINTS`] usable pixels or a singular system.
pub fn relative_pose_from_flow(
    depth_a: &Raster<f64>,
    flow: &FlowField,
    valid: &ValidityMask,
    k: &Intrinsics,
    stride: usize,
    iters: usize,
) -> Option<Pose> {
    let stride = stride.max(1);
    let mut points = Vec::new();
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            let d = depth_a.get(x, y, 0);
            let f = flow.get(x, y);
            if valid.get(x, y) && d > MIN_DEPTH && f[0].is_finite() && f[1].is_finite() {
                points.push((k.ray(x as f64, y as f64) * d, [x as f64 + f[0], y as f64 + f[1]]));
            }
        }
    }
    if points.len() < MIN_POINTS {
        return None;
    }
    let mut pose = Pose::identity();
    for _ in 0..iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let r = pose.rotation_matrix();
        for (x, target) in &points {
            let p = r * x + pose.translation;
            if p.z <= MIN_DEPTH {
                continue;
            }
            let iz = 1.0 / p.z;
            let res = [k.fx * p.x * iz + k.cx - target[0], k.fy * p.y * iz + k.cy - target[1]];
            let norm = (res[0] * res[0] + res[1] * res[1]).sqrt();
            let w = if norm <= HUBER_PX { 1.0 } else { HUBER_PX / norm };
            // Projection derivative times the left-perturbation derivative [I, -p^].
            let dpi = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * p.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * p.y * iz * iz,
            );
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dpi);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-dpi * hat(&p)));
            let rv = nalgebra::Vector2::new(res[0], res[1]);
            h += w * j.transpose() * j;
            g += w * j.transpose() * rv;
        }
        let step = h.cholesky()?.solve(&(-g));
        pose = se3_exp(&Twist(step)).compose(&pose);
        if step.norm() < 1e-10 {
            break;
        }
    }
    pose.translation.iter().all(|v| v.is_finite()).then_some(pose)
}

/// Two-view geometry from dense flow: rotation and unit translation direction
/// from the epipolar constraint, plus triangulated depths of both frames
/// in units of the baseline length.
#[derive(Clone, Debug)]
pub struct TwoView {
    /// `P_b * P_a^-1` with a unit-norm translation.
    pub pose: Pose,
    /// `(x, y, depth)` at integer pixels of frame a.
    pub depth_a: Vec<(usize, usize, f64)>,
    /// Frame b depths splatted to the nearest pixel, NaN where empty.
    pub depth_b: Raster<f64>,
}

impl TwoView {
    /// The median ratio `reference / depth_a` over pixels where both are
    /// finite and positive. Multiplying the translation by it puts the pair
    /// in the reference's scale.
    pub fn scale_to(&self, reference: &Raster<f64>) -> Option<f64> {
        let mut ratios: Vec<f64> = self
            .depth_a
            .iter()
            .map(|&(x, y, d)| reference.get(x, y, 0) / d)
            .filter(|r| r.is_finite() && *r > 0.0)
            .collect();
        if ratios.len() < MIN_POINTS {
            return None;
        }
        let mid = ratios.len() / 2;
        let (_, m, _) = ratios.select_nth_unstable_by(mid, f64::total_cmp);
        Some(*m)
    }
}

fn sampson(r: &nalgebra::Matrix3<f64>, t: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let e = hat(t) * r;
    let l2 = e * a;
    let l1 = e.transpose() * b;
    let num = b.dot(&l2);
    let den = l2.x * l2.x + l2.y * l2.y + l1.x * l1.x + l1.y * l1.y;
    if den > 0.0 {
        num / den.sqrt()
    } else {
        0.0
    }
}

/// Depth along `ray` (in frame a) whose image in frame b lies on the
/// normalized bearing `m`; `None` without parallax or behind either camera.
fn triangulate(ray: &Vector3<f64>, m: &Vector3<f64>, pose: &Pose) -> Option<f64> {
    let rr = pose.rotation_matrix() * ray;
    let c = m.cross(&rr);
    let n2 = c.norm_squared();
    if n2 < 1e-12 {
        return None;
    }
    let d = -c.dot(&m.cross(&pose.translation)) / n2;
    (d > MIN_DEPTH && (rr * d + pose.translation).z > MIN_DEPTH).then_some(d)
}

/// Rotation and translation direction minimizing Huber-weighted Sampson
/// errors on every `stride`-th pixel, refined from each of `inits` (e.g.
/// [`relative_pose_from_flow`] or a motion prediction) and from axis-aligned
/// translations; then triangulates every valid pixel. `None` without a
/// start or when too few points triangulate.
pub fn two_view_from_flow(
    inits: &[Pose],
    flow: &FlowField,
    valid: &ValidityMask,
    k: &Intrinsics,
    stride: usize,
    iters: usize,
) -> Option<TwoView> {
    let stride = stride.max(1);
    let mut pts = Vec::new();
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            let f = flow.get(x, y);
            if valid.get(x, y) && f[0].is_finite() && f[1].is_finite() {
                pts.push((
                    (x, y),
                    k.ray(x as f64, y as f64),
                    k.ray(x as f64 + f[0], y as f64 + f[1]),
                ));
            }
        }
    }
    if pts.len() < MIN_POINTS {
        return None;
    }
    let bearings: Vec<(Vector3<f64>, Vector3<f64>)> = pts.iter().map(|(_, a, b)| (*a, *b)).collect();
    let delta = HUBER_PX / k.fx.max(k.fy);
    // Near-planar scenes leave competing minima, so every start is refined
    // and the lowest cost wins. Each given start is also tried with the
    // six axis directions as translation.
    let mut starts: Vec<(UnitQuaternion<f64>, Vector3<f64>)> = Vec::new();
    for p in inits {
        if p.translation.norm() > 1e-12 {
            starts.push((p.rotation, p.translation.normalize()));
        }
    }
    if let Some(first) = inits.first() {
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            starts.push((first.rotation, axis));
            starts.push((first.rotation, -axis));
        }
    }
    let (q, t, _) = starts
        .iter()
        .map(|(q, t)| refine_epipolar(&bearings, delta, *q, *t, iters))
        .min_by(|a, b| a.2.total_cmp(&b.2))?;
    // The epipolar cost cannot tell t from -t; keep the sign that puts
    // more points in front of both cameras.
    let in_front = |t: Vector3<f64>| {
        let pose = Pose::new(q, t);
        bearings
            .iter()
            .filter(|(a, b)| triangulate(a, b, &pose).is_some())
            .count()
    };
    let t = if in_front(-t) > in_front(t) { -t } else { t };
    let pose = Pose::new(q, t);
    let mut depth_a = Vec::with_capacity(k.width * k.height);
    let mut depth_b = Raster::filled(k.width, k.height, 1, f64::NAN);
    for y in 0..k.height {
        for x in 0..k.width {
            let f = flow.get(x, y);
            if !valid.get(x, y) || !f[0].is_finite() || !f[1].is_finite() {
                continue;
            }
            let a = k.ray(x as f64, y as f64);
            let Some(d) = triangulate(&a, &k.ray(x as f64 + f[0], y as f64 + f[1]), &pose) else {
                continue;
            };
            depth_a.push((x, y, d));
            let p = pose.transform_point(&(a * d));
            if let Some([u, v]) = k.project(&p) {
                let (u, v) = (u.round(), v.round());
                if u >= 0.0 && v >= 0.0 && (u as usize) < k.width && (v as usize) < k.height {
                    depth_b.set(u as usize, v as usize, 0, p.z);
                }
            }
        }
    }
    (depth_a.len() >= MIN_POINTS).then_some(TwoView { pose, depth_a, depth_b })
}

/// Levenberg-Marquardt on Huber-weighted Sampson errors over a rotation
/// and a unit translation; returns the refined pair and its cost.
fn refine_epipolar(
    pts: &[(Vector3<f64>, Vector3<f64>)],
    delta: f64,
    q0: UnitQuaternion<f64>,
    t0: Vector3<f64>,
    iters: usize,
) -> (UnitQuaternion<f64>, Vector3<f64>, f64) {
    let cost = |r: &nalgebra::Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        pts.iter()
            .map(|(a, b)| {
                let e = sampson(r, t, a, b).abs();
                if e <= delta {
                    0.5 * e * e
                } else {
                    delta * (e - 0.5 * delta)
                }
            })
            .sum()
    };
    let mut q = q0;
    let mut t = t0;
    let mut current = cost(&q.to_rotation_matrix().into_inner(), &t);
    let mut lambda = 1e-3;
    let apply = |q: &UnitQuaternion<f64>, t: &Vector3<f64>, d: &Vector5<f64>| {
        let (b1, b2) = tangent_basis(t);
        let q2 = so3_exp(&Vector3::new(d[0], d[1], d[2])) * q;
        let t2 = (t + b1 * d[3] + b2 * d[4]).normalize();
        (q2, t2)
    };
    for _ in 0..iters {
        let r = q.to_rotation_matrix().into_inner();
        let mut h = Matrix5::<f64>::zeros();
        let mut g = Vector5::<f64>::zeros();
        const STEP: f64 = 1e-7;
        let perturbed: Vec<nalgebra::Matrix3<f64>> = (0..5)
            .map(|j| {
                let mut d = Vector5::zeros();
                d[j] = STEP;
                let (q2, _) = apply(&q, &t, &d);
                q2.to_rotation_matrix().into_inner()
            })
            .collect();
        let ts: Vec<Vector3<f64>> = (0..5)
            .map(|j| {
                let mut d = Vector5::zeros();
                d[j] = STEP;
                apply(&q, &t, &d).1
            })
            .collect();
        for (a, b) in pts {
            let e = sampson(&r, &t, a, b);
            let w = if e.abs() <= delta { 1.0 } else { delta / e.abs() };
            let mut j = Vector5::zeros();
            for c in 0..5 {
                j[c] = (sampson(&perturbed[c], &ts[c], a, b) - e) / STEP;
            }
            h += w * j * j.transpose();
            g += w * j * e;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h;
            for c in 0..5 {
                damped[(c, c)] += lambda * h[(c, c)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let d = chol.solve(&(-g));
            let (q2, t2) = apply(&q, &t, &d);
            let c2 = cost(&q2.to_rotation_matrix().into_inner(), &t2);
            if c2 < current {
                let small = current - c2 < 1e-12 * current.max(1e-300);
                q = q2;
                t = t2;
                current = c2;
                lambda = (lambda * 0.3).max(1e-9);
                accepted = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (q, t, current)
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&helper).normalize();
    (b1, t.cross(&b1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_log;

    #[test]
    fn recovers_a_rigid_motion_from_exact_flow() {
        let k = Intrinsics::ideal(48, 36);
        let depth = Raster::from_vec(
            48,
            36,
            1,
            (0..48 * 36)
                .map(|i| 2.0 + 0.3 * ((i % 48) as f64 * 0.2).sin() + 0.01 * (i / 48) as f64)
                .collect(),
        )
        .unwrap();
        let truth = se3_exp(&Twist::new(
            Vector3::new(0.12, -0.05, 0.08),
            Vector3::new(0.02, -0.04, 0.03),
        ));
        let mut flow = FlowField::zeros(48, 36);
        for y in 0..36 {
            for x in 0..48 {
                let p = truth.transform_point(&(k.ray(x as f64, y as f64) * depth.get(x, y, 0)));
                flow.set(
                    x,
                    y,
                    [k.fx * p.x / p.z + k.cx - x as f64, k.fy * p.y / p.z + k.cy - y as f64],
                );
            }
        }
        let valid = ValidityMask::filled(48, 36, true);
        let est = relative_pose_from_flow(&depth, &flow, &valid, &k, 2, 20).unwrap();
        let err = se3_log(&est.compose(&truth.inverse())).unwrap();
        assert!(err.norm() < 1e-8, "{}", err.norm());
    }

    fn exact_flow(k: &Intrinsics, depth: &Raster<f64>, truth: &Pose) -> FlowField {
        let mut flow = FlowField::zeros(k.width, k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                let p = truth.transform_point(&(k.ray(x as f64, y as f64) * depth.get(x, y, 0)));
                flow.set(
                    x,
                    y,
                    [k.fx * p.x / p.z + k.cx - x as f64, k.fy * p.y / p.z + k.cy - y as f64],
                );
            }
        }
        flow
    }

    #[test]
    fn two_view_ignores_depth_bias_and_recovers_scale() {
        let k = Intrinsics::ideal(48, 36);
        let depth = Raster::from_vec(
            48,
            36,
            1,
            (0..48 * 36)
                .map(|i| 2.0 + 0.3 * ((i % 48) as f64 * 0.2).sin() + 0.01 * (i / 48) as f64)
                .collect(),
        )
        .unwrap();
        let truth = se3_exp(&Twist::new(
            Vector3::new(0.2, -0.05, 0.08),
            Vector3::new(0.02, -0.04, 0.03),
        ));
        let flow = exact_flow(&k, &depth, &truth);
        let valid = ValidityMask::filled(48, 36, true);
        // A smoothly biased depth gives a biased starting pose.
        let biased = Raster::from_vec(
            48,
            36,
            1,
            depth
                .data()
                .iter()
                .enumerate()
                .map(|(i, d)| d * (1.0 + 0.2 * ((i % 48) as f64 / 30.0).cos()))
                .collect(),
        )
        .unwrap();
        let init = relative_pose_from_flow(&biased, &flow, &valid, &k, 2, 20).unwrap();
        let tv = two_view_from_flow(&[init], &flow, &valid, &k, 2, 30).unwrap();
        assert!(tv.pose.rotation.angle_to(&truth.rotation) < 1e-7);
        assert!((tv.pose.translation - truth.translation.normalize()).norm() < 1e-6);
        let s = tv.scale_to(&depth).unwrap();
        assert!((s - truth.translation.norm()).abs() < 1e-6, "{s}");
        for &(x, y, d) in &tv.depth_a {
            assert!((d * s - depth.get(x, y, 0)).abs() < 1e-5);
        }
    }

    #[test]
    fn pure_rotation_has_no_two_view_solution() {
        let k = Intrinsics::ideal(24, 18);
        let depth = Raster::filled(24, 18, 1, 2.0);
        let rot = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.05, 0.0)));
        let flow = exact_flow(&k, &depth, &rot);
        let valid = ValidityMask::filled(24, 18, true);
        assert!(two_view_from_flow(&[Pose::identity()], &flow, &valid, &k, 1, 10).is_none());
    }

    #[test]
    fn too_few_points_give_none() {
        let k = Intrinsics::ideal(8, 6);
        let depth = Raster::filled(8, 6, 1, 1.0);
        let valid = ValidityMask::filled(8, 6, false);
        assert!(relative_pose_from_flow(&depth, &FlowField::zeros(8, 6), &valid, &k, 1, 5).is_none());
    }
}
