//! Trajectory metrics after similarity alignment and depth metrics after
//! per-frame median scaling.

use std::fmt::Write as _;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::raster::{Raster, ValidityMask};

/// `x -> s * R * x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Maps a world-to-camera pose into the aligned frame and returns it as
    /// camera-to-world.
    pub fn apply_to_camera(&self, w2c: &Pose) -> Pose {
        let c2w = w2c.inverse();
        let r = UnitQuaternion::from_matrix(&(self.rotation * c2w.rotation_matrix()));
        Pose::new(r, self.apply(&c2w.translation))
    }
}

/// Relative size below which a point set is treated as degenerate.
const DEGENERACY: f64 = 1e-12;

fn centered(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    (mean, points.iter().map(|p| p - mean).collect())
}

fn check_spread(points: &[Vector3<f64>], name: &str) -> Result<()> {
    let scatter: Matrix3<f64> = points.iter().map(|p| p * p.transpose()).sum();
    let mut sv = scatter.singular_values();
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= DEGENERACY * sv[0] {
        return Err(Error::DegenerateAlignment(format!(
            "{name} points are coincident or collinear"
        )));
    }
    Ok(())
}

/// Least-squares similarity (or rigid motion when `with_scale` is false)
/// taking `est` onto `gt`.
pub fn umeyama_align(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 3 {
        return Err(Error::DegenerateAlignment(format!(
            "{} correspondences, need 3",
            est.len()
        )));
    }
    let n = est.len() as f64;
    let (mu_e, ce) = centered(est);
    let (mu_g, cg) = centered(gt);
    check_spread(&ce, "estimated")?;
    check_spread(&cg, "reference")?;
    let cov: Matrix3<f64> = cg.iter().zip(&ce).map(|(g, e)| g * e.transpose()).sum::<Matrix3<f64>>() / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let var_e = ce.iter().map(|p| p.norm_squared()).sum::<f64>() / n;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e
    } else {
        1.0
    };
    let translation = mu_g - scale * (rotation * mu_e);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub alignment: Similarity,
}

/// Position RMSE of the camera centers after 7-DoF alignment. Poses are
/// world-to-camera.
pub fn ate(est: &[Pose], gt: &[Pose]) -> Result<AteReport> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch(est.len(), gt.len()));
    }
    let ce: Vec<Vector3<f64>> = est.iter().map(Pose::center).collect();
    let cg: Vec<Vector3<f64>> = gt.iter().map(Pose::center).collect();
    let alignment = umeyama_align(&ce, &cg, true)?;
    let sq: f64 = ce
        .iter()
        .zip(&cg)
        .map(|(e, g)| (alignment.apply(e) - g).norm_squared())
        .sum();
    Ok(AteReport {
        rmse: (sq / ce.len() as f64).sqrt(),
        alignment,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpeReport {
    pub trans_rmse: f64,
    pub rot_mean_deg: f64,
}

/// Relative pose error over `step`-frame deltas of the aligned estimate.
pub fn rpe(est: &[Pose], gt: &[Pose], step: usize) -> Result<RpeReport> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch(est.len(), gt.len()));
    }
    if step == 0 || step >= est.len() {
        return Err(Error::DegenerateTrajectory(format!(
            "rpe step {step} needs 1 <= step < {}",
            est.len()
        )));
    }
    let align = ate(est, gt)?.alignment;
    let e: Vec<Pose> = est.iter().map(|p| align.apply_to_camera(p)).collect();
    let g: Vec<Pose> = gt.iter().map(Pose::inverse).collect();
    let m = est.len() - step;
    let (mut sq, mut rot) = (0.0, 0.0);
    for i in 0..m {
        let dg = g[i].inverse().compose(&g[i + step]);
        let de = e[i].inverse().compose(&e[i + step]);
        let err = dg.inverse().compose(&de);
        sq += err.translation.norm_squared();
        rot += err.angle().to_degrees();
    }
    Ok(RpeReport {
        trans_rmse: (sq / m as f64).sqrt(),
        rot_mean_deg: rot / m as f64,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    /// Frames with at least one valid pixel.
    pub frames: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Metrics of one frame after scaling `est` by `median(gt / est)`; `None`
/// when no pixel is valid.
pub fn frame_depth_metrics(est: &Raster<f64>, gt: &Raster<f64>, mask: &ValidityMask) -> Option<DepthMetrics> {
    let pairs: Vec<(f64, f64)> = est
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .filter(|((e, g), m)| **m && **e > 0.0 && **g > 0.0 && e.is_finite() && g.is_finite())
        .map(|((e, g), _)| (*e, *g))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let mut ratios: Vec<f64> = pairs.iter().map(|(e, g)| g / e).collect();
    let s = median(&mut ratios);
    let n = pairs.len() as f64;
    let mut m = DepthMetrics {
        frames: 1,
        ..DepthMetrics::default()
    };
    let mut sq = 0.0;
    let mut good = 0usize;
    for &(e, g) in &pairs {
        let e = e * s;
        let d = e - g;
        m.abs_rel += d.abs() / g;
        m.sq_rel += d * d / g;
        sq += d * d;
        if (e / g).max(g / e) < 1.25 {
            good += 1;
        }
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (sq / n).sqrt();
    m.delta1 = good as f64 / n;
    Some(m)
}

/// Per-frame metrics averaged over the frames that have valid pixels.
pub fn depth_metrics(est: &[Raster<f64>], gt: &[Raster<f64>], masks: &[ValidityMask]) -> Result<DepthMetrics> {
    if est.len() != gt.len() || est.len() != masks.len() {
        return Err(Error::LengthMismatch(est.len(), gt.len().min(masks.len())));
    }
    let mut acc = DepthMetrics::default();
    for (t, ((e, g), m)) in est.iter().zip(gt).zip(masks).enumerate() {
        if !e.same_shape(g) || e.width() != m.width() || e.height() != m.height() {
            return Err(Error::Dimension(format!("frame {t} depth sizes differ")));
        }
        match frame_depth_metrics(e, g, m) {
            Some(f) => {
                acc.abs_rel += f.abs_rel;
                acc.sq_rel += f.sq_rel;
                acc.rmse += f.rmse;
                acc.delta1 += f.delta1;
                acc.frames += 1;
            }
            None => log::warn!("frame {t} has no valid depth pixels, excluded"),
        }
    }
    if acc.frames == 0 {
        return Err(Error::Scene("no frame has valid depth pixels".into()));
    }
    let n = acc.frames as f64;
    acc.abs_rel /= n;
    acc.sq_rel /= n;
    acc.rmse /= n;
    acc.delta1 /= n;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub ate: f64,
    pub rpe: RpeReport,
    pub rpe_step: usize,
    pub depth: Option<DepthMetrics>,
}

impl EvalReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![
            ("frames", self.frames.to_string()),
            ("ate_rmse", format!("{:.9}", self.ate)),
            ("rpe_step", self.rpe_step.to_string()),
            ("rpe_trans_rmse", format!("{:.9}", self.rpe.trans_rmse)),
            ("rpe_rot_mean_deg", format!("{:.9}", self.rpe.rot_mean_deg)),
        ];
        if let Some(d) = self.depth {
            f.extend([
                ("depth_frames", d.frames.to_string()),
                ("abs_rel", format!("{:.9}", d.abs_rel)),
                ("sq_rel", format!("{:.9}", d.sq_rel)),
                ("rmse", format!("{:.9}", d.rmse)),
                ("delta_1_25", format!("{:.9}", d.delta1)),
            ]);
        }
        f
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let keys: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let vals: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }

    pub fn has_nan(&self) -> bool {
        let mut v = vec![self.ate, self.rpe.trans_rmse, self.rpe.rot_mean_deg];
        if let Some(d) = self.depth {
            v.extend([d.abs_rel, d.sq_rel, d.rmse, d.delta1]);
        }
        v.iter().any(|x| x.is_nan())
    }
}

/// Estimated depths, ground-truth depths and validity masks.
pub type DepthSet<'a> = (&'a [Raster<f64>], &'a [Raster<f64>], &'a [ValidityMask]);

/// Full report: ATE, RPE at `step`, and depth metrics when depths are given.
pub fn evaluate_run(est: &[Pose], gt: &[Pose], step: usize, depths: Option<DepthSet>) -> Result<EvalReport> {
    let a = ate(est, gt)?;
    let r = rpe(est, gt, step)?;
    let depth = depths.map(|(e, g, m)| depth_metrics(e, g, m)).transpose()?;
    Ok(EvalReport {
        frames: est.len(),
        ate: a.rmse,
        rpe: r,
        rpe_step: step,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        let q = UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ));
        Similarity {
            scale: rng.random_range(0.2..5.0),
            rotation: q.to_rotation_matrix().into_inner(),
            translation: Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        }
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                se3_exp(&Twist::from_slice(&v))
            })
            .collect()
    }

    /// Applies a similarity to a world-to-camera trajectory, returning
    /// world-to-camera poses.
    fn transform_trajectory(s: &Similarity, traj: &[Pose]) -> Vec<Pose> {
        traj.iter().map(|p| s.apply_to_camera(p).inverse()).collect()
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 10);
        let s = umeyama_align(&p, &p, true).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_constructed_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let est = random_points(&mut rng, 12);
            let truth = random_similarity(&mut rng);
            let gt: Vec<_> = est.iter().map(|p| truth.apply(p)).collect();
            let s = umeyama_align(&est, &gt, true).unwrap();
            assert!((s.scale - truth.scale).abs() <= 1e-9);
            assert!((s.rotation - truth.rotation).abs().max() <= 1e-9);
            assert!((s.translation - truth.translation).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn reflection_is_never_returned() {
        let est = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let gt: Vec<_> = est.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let s = umeyama_align(&est, &gt, true).unwrap();
        assert_relative_eq!(s.rotation.determinant(), 1.0, epsilon = 1e-12);
        let res: f64 = est.iter().zip(&gt).map(|(e, g)| (s.apply(e) - g).norm()).sum();
        assert!(res > 1e-3);
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_points(&mut rng, 5);
        assert!(matches!(
            umeyama_align(&line, &p, true),
            Err(Error::DegenerateAlignment(_))
        ));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 5];
        assert!(matches!(
            umeyama_align(&p, &same, true),
            Err(Error::DegenerateAlignment(_))
        ));
        assert!(matches!(
            umeyama_align(&p[..2], &p[..2], true),
            Err(Error::DegenerateAlignment(_))
        ));
        assert!(matches!(
            umeyama_align(&p[..3], &p[..4], true),
            Err(Error::LengthMismatch(3, 4))
        ));
    }

    #[test]
    fn ate_outlier_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_trajectory(&mut rng, 100);
        let mut est = gt.clone();
        let c = est[37].center() + Vector3::new(1.0, 0.0, 0.0);
        est[37] = Pose::new(est[37].rotation, -(est[37].rotation * c));
        let r = ate(&est, &gt).unwrap();
        // Independent evaluation: brute-force refine the alignment residual.
        let ce: Vec<_> = est.iter().map(Pose::center).collect();
        let cg: Vec<_> = gt.iter().map(Pose::center).collect();
        let rmse = |s: &Similarity| {
            (ce.iter()
                .zip(&cg)
                .map(|(e, g)| (s.apply(e) - g).norm_squared())
                .sum::<f64>()
                / 100.0)
                .sqrt()
        };
        assert_relative_eq!(r.rmse, rmse(&r.alignment), epsilon = 1e-12);
        assert!(r.rmse < 0.1 && r.rmse > 0.09, "{}", r.rmse);
        // Any perturbation of the optimum increases the residual.
        for k in 0..7 {
            let mut s = r.alignment;
            match k {
                0 => s.scale *= 1.0 + 1e-4,
                1..=3 => s.translation[k - 1] += 1e-4,
                _ => {
                    let mut axis = Vector3::zeros();
                    axis[k - 4] = 1e-4;
                    s.rotation = UnitQuaternion::from_scaled_axis(axis).to_rotation_matrix().into_inner() * s.rotation;
                }
            }
            assert!(rmse(&s) > r.rmse);
        }
    }

    #[test]
    fn ate_absorbs_scale_and_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_trajectory(&mut rng, 30);
        for _ in 0..20 {
            let s = random_similarity(&mut rng);
            let est = transform_trajectory(&s, &gt);
            assert!(ate(&est, &gt).unwrap().rmse <= 1e-9);
        }
        assert!(matches!(ate(&gt[..3], &gt), Err(Error::LengthMismatch(3, 30))));
    }

    #[test]
    fn rpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_trajectory(&mut rng, 20);
        let r = rpe(&gt, &gt, 1).unwrap();
        assert!(r.trans_rmse < 1e-9 && r.rot_mean_deg < 1e-6);
        assert!(rpe(&gt, &gt, 20).is_err());

        // Camera-to-world steps of pure translation along a line with a
        // rotation about the optical axis growing by 1 degree per frame.
        let n = 30;
        let centers: Vec<Vector3<f64>> = (0..n)
            .map(|i| Vector3::new(i as f64 * 0.1, (i as f64 * 0.3).sin(), (i as f64 * 0.2).cos()))
            .collect();
        let gt: Vec<Pose> = centers
            .iter()
            .map(|c| Pose::new(UnitQuaternion::identity(), *c).inverse())
            .collect();
        let est: Vec<Pose> = centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, (i as f64).to_radians()));
                Pose::new(q, *c).inverse()
            })
            .collect();
        let r = rpe(&est, &gt, 1).unwrap();
        assert_relative_eq!(r.rot_mean_deg, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn depth_metric_examples() {
        let (w, h) = (8, 6);
        let gt = Raster::from_vec(w, h, 1, (0..w * h).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap();
        let mask = ValidityMask::filled(w, h, true);
        let m = depth_metrics(
            std::slice::from_ref(&gt),
            std::slice::from_ref(&gt),
            std::slice::from_ref(&mask),
        )
        .unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.delta1), (0.0, 0.0, 0.0, 1.0));
        let scaled = gt.map(|v| v * 3.7);
        let m = depth_metrics(&[scaled], std::slice::from_ref(&gt), std::slice::from_ref(&mask)).unwrap();
        assert!(m.abs_rel < 1e-15 && m.delta1 == 1.0);

        // Checkerboard +-20%: median scaling picks a value between the two
        // ratios; evaluate the two-point statistics directly.
        let c: f64 = 2.0;
        let gt = Raster::filled(w, h, 1, c);
        let est = Raster::from_vec(
            w,
            h,
            1,
            (0..w * h)
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    c * if (x + y) % 2 == 0 { 1.2 } else { 0.8 }
                })
                .collect(),
        )
        .unwrap();
        let m = depth_metrics(&[est], &[gt], &[mask]).unwrap();
        let s: f64 = 0.5 * (1.0 / 1.2 + 1.0 / 0.8);
        let (hi, lo) = (1.2 * s, 0.8 * s);
        let abs_rel = 0.5 * ((hi - 1.0).abs() + (lo - 1.0).abs());
        let sq_rel = 0.5 * c * ((hi - 1.0).powi(2) + (lo - 1.0).powi(2));
        let rmse = (0.5 * c * c * ((hi - 1.0).powi(2) + (lo - 1.0).powi(2))).sqrt();
        let delta = 0.5 * ((hi.max(1.0 / hi) < 1.25) as u8 as f64 + (lo.max(1.0 / lo) < 1.25) as u8 as f64);
        assert_relative_eq!(m.abs_rel, abs_rel, epsilon = 1e-12);
        assert_relative_eq!(m.sq_rel, sq_rel, epsilon = 1e-12);
        assert_relative_eq!(m.rmse, rmse, epsilon = 1e-12);
        assert_eq!(m.delta1, delta);
    }

    #[test]
    fn empty_frames_are_excluded() {
        let gt = Raster::filled(4, 4, 1, 2.0);
        let est = Raster::filled(4, 4, 1, 3.0);
        let none = ValidityMask::filled(4, 4, false);
        let all = ValidityMask::filled(4, 4, true);
        let m = depth_metrics(
            &[est.clone(), est.clone()],
            &[gt.clone(), gt.clone()],
            &[none.clone(), all],
        )
        .unwrap();
        assert_eq!(m.frames, 1);
        assert!(depth_metrics(&[est], &[gt], &[none]).is_err());
    }

    #[test]
    fn report_formats() {
        let r = EvalReport {
            frames: 3,
            ate: 0.5,
            rpe: RpeReport {
                trans_rmse: 0.25,
                rot_mean_deg: 1.0,
            },
            rpe_step: 1,
            depth: None,
        };
        assert_eq!(
            r.to_key_values(),
            "frames = 3\nate_rmse = 0.500000000\nrpe_step = 1\nrpe_trans_rmse = 0.250000000\nrpe_rot_mean_deg = 1.000000000\n"
        );
        assert_eq!(r.to_csv().lines().count(), 2);
        assert!(!r.has_nan());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn depth_metrics_ignore_per_frame_scale(seed in 0u64..10_000, k0 in -6i32..6, k1 in -6i32..6, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (7, 5);
            let mk = |rng: &mut ChaCha8Rng| Raster::from_vec(w, h, 1, (0..w * h).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap();
            let gt = vec![mk(&mut rng), mk(&mut rng)];
            let est = vec![mk(&mut rng), mk(&mut rng)];
            let masks = vec![ValidityMask::filled(w, h, true); 2];
            let base = depth_metrics(&est, &gt, &masks).unwrap();
            // Binary scale factors are exact in floating point.
            let pow2 = vec![est[0].map(|v| v * 2f64.powi(k0)), est[1].map(|v| v * 2f64.powi(k1))];
            prop_assert_eq!(depth_metrics(&pow2, &gt, &masks).unwrap(), base);
            let general = vec![est[0].map(|v| v * c), est[1].map(|v| v / c)];
            let g = depth_metrics(&general, &gt, &masks).unwrap();
            prop_assert!((g.abs_rel - base.abs_rel).abs() <= 1e-12);
            prop_assert!((g.rmse - base.rmse).abs() <= 1e-12);
            prop_assert_eq!(g.delta1, base.delta1);
            prop_assert!(base.abs_rel >= 0.0 && (0.0..=1.0).contains(&base.delta1));
        }

        #[test]
        fn ate_is_similarity_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_trajectory(&mut rng, 15);
            let est: Vec<Pose> = gt.iter().map(|p| {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-0.05..0.05)).collect();
                se3_exp(&Twist::from_slice(&v)).compose(p)
            }).collect();
            let base = ate(&est, &gt).unwrap().rmse;
            let s = random_similarity(&mut rng);
            let moved = ate(&transform_trajectory(&s, &est), &gt).unwrap().rmse;
            prop_assert!((moved - base).abs() <= 1e-9, "{} vs {}", moved, base);
        }
    }
}
