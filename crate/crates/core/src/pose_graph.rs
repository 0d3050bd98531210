//! Keyframe pose graph and pose-only bundle adjustment.
//!
//! Vertices hold world-to-camera poses `T_i`. An edge `(i, j)` carries the
//! measured relative transform `Z_ij = P_j * P_i^-1` and a diagonal
//! information weight; its residual is `log(Z_ij^-1 * T_j * T_i^-1)`.
//! Updates are left-multiplicative: `T <- exp(delta) * T`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::geometry::{se3_exp, se3_left_jacobian_inv, se3_log, Pose, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Sequential { tau: usize },
    Covisible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraphEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: Pose,
    /// Diagonal of the information matrix.
    pub weight: Vector6<f64>,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug)]
pub struct PoseGraph {
    pub poses: Vec<Pose>,
    pub edges: Vec<PoseGraphEdge>,
    pub anchor: usize,
}

/// Measured relative poses keyed by keyframe position pair `(i, j)`, `i < j`.
pub type Measurements = BTreeMap<(usize, usize), Pose>;

/// Sequential edges `(i, i + tau)` for every in-range `tau`, weighted
/// `1/tau`, plus identity-weighted co-visible edges. The first vertex is
/// the anchor.
pub fn build_graph(
    initial_poses: Vec<Pose>,
    tau_set: &[usize],
    sequential: &Measurements,
    covisible: &Measurements,
) -> Result<PoseGraph> {
    let k = initial_poses.len();
    let mut edges = Vec::new();
    for &tau in tau_set {
        for i in 0..k.saturating_sub(tau) {
            let j = i + tau;
            let z = sequential
                .get(&(i, j))
                .ok_or_else(|| Error::Dimension(format!("missing sequential measurement for edge ({i}, {j})")))?;
            edges.push(PoseGraphEdge {
                i,
                j,
                measurement: *z,
                weight: Vector6::repeat(1.0 / tau as f64),
                kind: EdgeKind::Sequential { tau },
            });
        }
    }
    for (&(i, j), z) in covisible {
        if i == j || i >= k || j >= k {
            return Err(Error::Dimension(format!("invalid co-visible edge ({i}, {j})")));
        }
        edges.push(PoseGraphEdge {
            i,
            j,
            measurement: *z,
            weight: Vector6::repeat(1.0),
            kind: EdgeKind::Covisible,
        });
    }
    let g = PoseGraph {
        poses: initial_poses,
        edges,
        anchor: 0,
    };
    g.check_connected()?;
    Ok(g)
}

pub fn edge_residual(edge: &PoseGraphEdge, t_i: &Pose, t_j: &Pose) -> Result<Twist> {
    se3_log(&edge.measurement.inverse().compose(t_j).compose(&t_i.inverse()))
}

struct Linearized {
    r: Vector6<f64>,
    ji: Matrix6<f64>,
    jj: Matrix6<f64>,
}

fn linearize(edge: &PoseGraphEdge, poses: &[Pose]) -> Result<Linearized> {
    let zinv = edge.measurement.inverse();
    let e0 = zinv.compose(&poses[edge.j]).compose(&poses[edge.i].inverse());
    let r = se3_log(&e0)?;
    let jinv = se3_left_jacobian_inv(&r);
    Ok(Linearized {
        r: r.0,
        jj: jinv * zinv.adjoint(),
        ji: -(jinv * e0.adjoint()),
    })
}

#[derive(Clone, Debug)]
pub struct PgoReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub accepted_steps: usize,
}

impl PoseGraph {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn check_connected(&self) -> Result<()> {
        let k = self.poses.len();
        if k == 0 {
            return Ok(());
        }
        let mut adj = vec![Vec::new(); k];
        for e in &self.edges {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([self.anchor]);
        seen[self.anchor] = true;
        while let Some(v) = queue.pop_front() {
            for &n in &adj[v] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(v) => Err(Error::DisconnectedGraph(v)),
            None => Ok(()),
        }
    }

    pub fn cost_of(&self, poses: &[Pose]) -> Result<f64> {
        let mut c = 0.0;
        for e in &self.edges {
            let r = edge_residual(e, &poses[e.i], &poses[e.j])?;
            c += r.0.component_mul(&e.weight).dot(&r.0);
        }
        Ok(c)
    }

    pub fn cost(&self) -> Result<f64> {
        self.cost_of(&self.poses)
    }

    /// Levenberg-Marquardt over all non-anchor vertices.
    pub fn optimize(&mut self, max_iter: usize, exec: &Executor) -> Result<PgoReport> {
        let k = self.poses.len();
        let initial_cost = self.cost()?;
        let mut report = PgoReport {
            initial_cost,
            final_cost: initial_cost,
            cost_history: vec![initial_cost],
            iterations: 0,
            accepted_steps: 0,
        };
        if k < 2 || initial_cost <= 1e-18 {
            return Ok(report);
        }
        // parameter block of each vertex, anchor excluded
        let block: Vec<Option<usize>> = (0..k)
            .scan(0usize, |next, v| {
                Some(if v == self.anchor {
                    None
                } else {
                    *next += 1;
                    Some(*next - 1)
                })
            })
            .collect();
        let n = 6 * (k - 1);
        let mut lambda = 1e-4;
        let mut cost = initial_cost;
        while report.iterations < max_iter {
            report.iterations += 1;
            let lin = exec.map(&self.edges, |e| linearize(e, &self.poses));
            let mut h = DMatrix::<f64>::zeros(n, n);
            let mut g = DVector::<f64>::zeros(n);
            for (e, l) in self.edges.iter().zip(lin) {
                let l = l?;
                let w = Matrix6::from_diagonal(&e.weight);
                let blocks = [(block[e.i], l.ji), (block[e.j], l.jj)];
                for (ba, ja) in &blocks {
                    let Some(a) = ba else { continue };
                    let jtw = ja.transpose() * w;
                    let ga = jtw * l.r;
                    for c in 0..6 {
                        g[6 * a + c] += ga[c];
                    }
                    for (bb, jb) in &blocks {
                        let Some(b) = bb else { continue };
                        let hab = jtw * jb;
                        let mut view = h.view_mut((6 * a, 6 * b), (6, 6));
                        view += hab;
                    }
                }
            }
            let diag: Vec<f64> = (0..n).map(|d| h[(d, d)].max(1e-12)).collect();
            let mut stepped = false;
            while !stepped {
                if lambda > 1e8 {
                    return Err(Error::LmDiverged(lambda));
                }
                let mut damped = h.clone();
                for (d, v) in diag.iter().enumerate() {
                    damped[(d, d)] += lambda * v;
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let mut trial = self.poses.clone();
                for v in 0..k {
                    if let Some(b) = block[v] {
                        let d = Twist(delta.fixed_rows::<6>(6 * b).into_owned());
                        trial[v] = se3_exp(&d).compose(&trial[v]);
                    }
                }
                let new_cost = self.cost_of(&trial).unwrap_or(f64::INFINITY);
                if new_cost < cost {
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    self.poses = trial;
                    cost = new_cost;
                    report.cost_history.push(cost);
                    report.accepted_steps += 1;
                    lambda = (lambda * 0.5).max(1e-12);
                    stepped = true;
                    if rel < 1e-9 || cost <= 1e-18 {
                        report.final_cost = cost;
                        return Ok(report);
                    }
                } else {
                    lambda *= 10.0;
                    // converged: no step improves a tiny cost
                    if lambda > 1e8 && cost < 1e-12 {
                        report.final_cost = cost;
                        return Ok(report);
                    }
                }
            }
        }
        report.final_cost = cost;
        Ok(report)
    }

    /// One edge per line: `i j` then the 3x4 measurement matrix row-major,
    /// then the six information weights.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.edges {
            let m = e.measurement.matrix();
            let _ = write!(s, "{} {}", e.i, e.j);
            for r in 0..3 {
                for c in 0..4 {
                    let _ = write!(s, " {}", m[(r, c)]);
                }
            }
            for w in e.weight.iter() {
                let _ = write!(s, " {w}");
            }
            s.push('\n');
        }
        s
    }
}
