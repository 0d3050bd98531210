//! TUM-style trajectory text: `timestamp tx ty tz qx qy qz qw` per line,
//! camera-to-world, quaternion scalar-last.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stamped {
    pub timestamp: f64,
    /// Camera-to-world.
    pub pose: Pose,
}

fn num(v: f64) -> String {
    // shortest round-trip representation; never prints "-0"
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

pub fn format_line(s: &Stamped) -> String {
    let t = s.pose.translation;
    let mut q = *s.pose.rotation.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let mut line = format!("{:.9}", s.timestamp);
    for v in [t.x, t.y, t.z, q.i, q.j, q.k, q.w] {
        let _ = write!(line, " {}", num(v));
    }
    line
}

pub fn format_trajectory(poses: &[Stamped]) -> String {
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_line(p));
        out.push('\n');
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Stamped>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::TrajectoryFormat { line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| err(format!("bad number {f:?}: {e}")))?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let n = q.norm();
        if (n - 1.0).abs() > 1e-3 {
            return Err(err(format!("non-unit quaternion (norm {n})")));
        }
        out.push(Stamped {
            timestamp: v[0],
            pose: Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

pub fn write_trajectory(poses: &[Stamped], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, format_trajectory(poses)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Stamped>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_line() {
        let s = Stamped {
            timestamp: 0.0,
            pose: Pose::identity(),
        };
        assert_eq!(format_line(&s), "0.000000000 0 0 0 0 0 0 1");
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses: Vec<Stamped> = (0..100)
            .map(|i| {
                let xi: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                Stamped {
                    timestamp: i as f64 / 30.0,
                    pose: se3_exp(&Twist::from_slice(&xi)),
                }
            })
            .collect();
        let back = parse_trajectory(&format_trajectory(&poses)).unwrap();
        let worst = poses
            .iter()
            .zip(&back)
            .map(|(a, b)| (a.pose.translation - b.pose.translation).amax())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-7);
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.pose.rotation.angle_to(&b.pose.rotation) < 1e-12);
            assert!((a.timestamp - b.timestamp).abs() < 1e-9);
        }
    }

    #[test]
    fn eight_fields_required() {
        let e = parse_trajectory("0 0 0 0 0 0 0 1\n0 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(e, Error::TrajectoryFormat { line: 2, .. }), "{e}");
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(parse_trajectory("0 0 0 0 0 0 0 1.01\n").is_err());
        assert!(parse_trajectory("0 0 0 0 0 0 0 1.0005\n").is_ok());
    }
}
