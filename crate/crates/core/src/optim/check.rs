//! Finite-difference verification of the analytic gradients, plus the
//! random small problems it runs on.

use std::sync::Arc;

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::LossWeights;
use crate::exec::Executor;
use crate::geometry::{se3_exp, Intrinsics, Pose, Twist};
use crate::io::prior::normalize_log_prior;
use crate::optim::loss::{evaluate, DirectedFlow, FrameInputs, Level, PairSample, Problem};
use crate::optim::params::{FrameParams, MeshGrid};
use crate::raster::{FlowField, Raster, ValidityMask};

/// Gradient-entry comparisons below this magnitude are judged absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Entries where `+h` or `-h` changes a discrete sampling decision.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(slot, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares every gradient entry with a central difference of step `h`.
pub fn finite_difference_check(problem: &Problem, params: &[FrameParams], h: f64) -> FdReport {
    let exec = Executor::sequential();
    let base = evaluate(problem, params, &exec, true);
    let mut report = FdReport::default();
    let mut work = params.to_vec();
    for (slot, g) in base.grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let analytic = g.flatten();
        let theta = params[slot].flatten();
        for (j, &ga) in analytic.iter().enumerate() {
            let mut eval_at = |delta: f64| {
                let mut t = theta.clone();
                t[j] += delta;
                work[slot].unflatten(&t);
                let e = evaluate(problem, &work, &exec, false);
                work[slot].unflatten(&theta);
                (e.loss.total(), e.signature)
            };
            let (lp, sp) = eval_at(h);
            let (lm, sm) = eval_at(-h);
            if sp != base.signature || sm != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((slot, j, ga, numeric));
                }
            }
        }
    }
    report
}

/// A self-contained small problem: frames, pairs and parameters.
pub struct Instance {
    pub level: Level,
    pub frames: Vec<FrameInputs>,
    pub pairs: Vec<PairSample>,
    pub unary: Vec<usize>,
    pub params: Vec<FrameParams>,
    pub weights: LossWeights,
}

impl Instance {
    pub fn problem(&self) -> Problem<'_> {
        Problem {
            level: &self.level,
            frames: &self.frames,
            pairs: &self.pairs,
            unary: &self.unary,
            weights: self.weights,
            dynamic_weight: 4.0,
        }
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, offset: f64, amp: f64) -> Raster<f64> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            ]
        })
        .collect();
    let total: f64 = waves.iter().map(|v| v[3]).sum();
    let mut r = Raster::filled(w, h, 1, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves
                .iter()
                .map(|v| v[3] * (v[0] * x as f64 + v[1] * y as f64 + v[2]).sin())
                .sum();
            r.set(x, y, 0, offset + amp * s / total);
        }
    }
    r
}

/// Random instance with `frames` frames on a `w x h` image and a mesh of
/// `mesh_cols x mesh_rows` vertices.
pub fn random_instance(seed: u64, frames: usize, w: usize, h: usize, mesh_cols: usize, mesh_rows: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::ideal(w, h);
    let level = Level::new(k, MeshGrid::new(mesh_cols, mesh_rows));
    let mut inputs = Vec::new();
    let mut params = Vec::new();
    for _ in 0..frames {
        let image = smooth_field(&mut rng, w, h, 0.5, 0.35);
        let prior = smooth_field(&mut rng, w, h, 3.0, 0.8);
        let mut mask = ValidityMask::filled(w, h, true);
        for _ in 0..(w * h / 10) {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            mask.set(x, y, false);
        }
        let np = normalize_log_prior(&prior, &mask).expect("enough static pixels");
        inputs.push(FrameInputs::new(image, np.values, &prior, mask, &level));
        let base_twist: Vec<f64> = (0..6)
            .map(|i| rng.random_range(-1.0..1.0) * if i < 3 { 0.08 } else { 0.02 })
            .collect();
        let mut p = FrameParams::new(
            np.mean + rng.random_range(-0.1..0.1),
            np.std * rng.random_range(0.7..1.3),
            level.mesh.grid.len(),
            se3_exp(&Twist::from_slice(&base_twist)),
        );
        for m in &mut p.mesh {
            *m = rng.random_range(-0.1..0.1);
        }
        p.twist = Vector6::from_fn(|i, _| rng.random_range(-1.0..1.0) * if i < 3 { 0.03 } else { 0.01 });
        params.push(p);
    }
    let mut pairs = Vec::new();
    for a in 0..frames {
        for b in a + 1..frames {
            let flows = (b == a + 1).then(|| {
                let f = smooth_field(&mut rng, w, h, 0.0, 0.8);
                let g = smooth_field(&mut rng, w, h, 0.0, 0.8);
                let fwd = FlowField::from_vec(w, h, f.data().iter().zip(g.data()).map(|(&u, &v)| [u, v]).collect())
                    .expect("sizes match");
                let bwd = FlowField::from_vec(w, h, fwd.data().iter().map(|v| [-v[0] + 0.05, -v[1]]).collect())
                    .expect("sizes match");
                Arc::new((
                    DirectedFlow::new(fwd.clone(), &bwd, 1.0),
                    DirectedFlow::new(bwd, &fwd, 1.0),
                ))
            });
            pairs.push(PairSample {
                a,
                b,
                weight: rng.random_range(0.25..1.0),
                flows,
            });
        }
    }
    Instance {
        level,
        frames: inputs,
        pairs,
        unary: (0..frames).collect(),
        params,
        weights: LossWeights::default(),
    }
}

/// Realized pose of every slot.
pub fn poses(params: &[FrameParams]) -> Vec<Pose> {
    params.iter().map(FrameParams::pose).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let inst = random_instance(seed, 2 + (seed as usize % 2), 16, 12, 4, 3);
            let r = finite_difference_check(&inst.problem(), &inst.params, 1e-5);
            assert!(r.checked > 3 * r.skipped, "{r:?}");
            assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn gradient_loss_is_blind_to_log_scale() {
        let mut inst = random_instance(9, 2, 16, 12, 4, 3);
        inst.pairs.clear();
        inst.weights = LossWeights {
            photo: 0.0,
            flow: 0.0,
            consistency: 0.0,
            gradient: 1.0,
            deform: 0.0,
        };
        let e = evaluate(&inst.problem(), &inst.params, &Executor::sequential(), true);
        let g = e.grads[0].as_ref().unwrap();
        assert!(g.a.abs() < 1e-12, "{}", g.a);
        assert!(g.b.abs() > 1e-8);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let mut inst = random_instance(3, 3, 16, 12, 4, 3);
        inst.weights = LossWeights {
            photo: 0.0,
            flow: 0.0,
            consistency: 0.0,
            gradient: 0.0,
            deform: 0.0,
        };
        let e = evaluate(&inst.problem(), &inst.params, &Executor::sequential(), true);
        assert_eq!(e.loss.total(), 0.0);
    }

    #[test]
    fn parallel_evaluation_is_bitwise_identical() {
        let inst = random_instance(5, 3, 16, 12, 4, 3);
        let a = evaluate(&inst.problem(), &inst.params, &Executor::sequential(), true);
        let b = evaluate(&inst.problem(), &inst.params, &Executor::new(4), true);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }
}
