//! Per-frame depth and pose parameters, mesh upsampling, and Adam.

use nalgebra::Vector6;

use crate::geometry::{se3_exp, se3_left_jacobian, Pose, Twist};
use crate::raster::{Raster, Support, ValidityMask};

/// Coarse deformation grid with `long_side` vertices along the longer
/// image axis, spanning the image corner to corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeshGrid {
    pub cols: usize,
    pub rows: usize,
}

impl MeshGrid {
    pub fn new(cols: usize, rows: usize) -> Self {
        Self {
            cols: cols.max(2),
            rows: rows.max(2),
        }
    }

    pub fn for_image(width: usize, height: usize, long_side: usize) -> Self {
        let n = long_side.max(2);
        let short = |s: usize, l: usize| (((n - 1) as f64 * s as f64 / l as f64).round() as usize + 1).max(2);
        if width >= height {
            Self::new(n, short(height, width))
        } else {
            Self::new(short(width, height), n)
        }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 4-connected vertex pairs, horizontal then vertical.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols - 1 {
                e.push((r * self.cols + c, r * self.cols + c + 1));
            }
        }
        for r in 0..self.rows - 1 {
            for c in 0..self.cols {
                e.push((r * self.cols + c, (r + 1) * self.cols + c));
            }
        }
        e
    }
}

/// Bilinear upsampling of a mesh to one image resolution.
#[derive(Clone, Debug)]
pub struct MeshSampler {
    pub grid: MeshGrid,
    pub width: usize,
    pub height: usize,
    supports: Vec<Support>,
}

impl MeshSampler {
    pub fn new(grid: MeshGrid, width: usize, height: usize) -> Self {
        let sx = (grid.cols - 1) as f64 / (width.max(2) - 1) as f64;
        let sy = (grid.rows - 1) as f64 / (height.max(2) - 1) as f64;
        let mut supports = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let s = Support::new(x as f64 * sx, y as f64 * sy, grid.cols, grid.rows)
                    .expect("mesh coordinates lie inside the grid");
                supports.push(s);
            }
        }
        Self {
            grid,
            width,
            height,
            supports,
        }
    }

    pub fn upsample(&self, mesh: &[f64]) -> Vec<f64> {
        self.supports.iter().map(|s| s.apply(mesh, self.grid.cols)).collect()
    }

    /// Adjoint of [`MeshSampler::upsample`].
    pub fn transpose(&self, pixel_grad: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.grid.len()];
        for (s, &v) in self.supports.iter().zip(pixel_grad) {
            if v != 0.0 {
                s.scatter(&mut g, self.grid.cols, v);
            }
        }
        g
    }

    /// Whether each vertex's footprint (pixels nearest to it) is mostly
    /// static. Vertices without pixels count as static.
    pub fn static_vertices(&self, mask: &ValidityMask) -> Vec<bool> {
        let n = self.grid.len();
        let mut stat = vec![0usize; n];
        let mut all = vec![0usize; n];
        let sx = (self.grid.cols - 1) as f64 / (self.width.max(2) - 1) as f64;
        let sy = (self.grid.rows - 1) as f64 / (self.height.max(2) - 1) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let c = (x as f64 * sx).round() as usize;
                let r = (y as f64 * sy).round() as usize;
                let v = r.min(self.grid.rows - 1) * self.grid.cols + c.min(self.grid.cols - 1);
                all[v] += 1;
                if mask.get(x, y) {
                    stat[v] += 1;
                }
            }
        }
        (0..n).map(|v| all[v] == 0 || 2 * stat[v] >= all[v]).collect()
    }
}

/// Depth `exp(a + b * n + mesh)` and pose `exp(twist) * base` of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameParams {
    pub a: f64,
    pub b: f64,
    pub mesh: Vec<f64>,
    pub twist: Vector6<f64>,
    pub base: Pose,
}

impl FrameParams {
    pub fn new(a: f64, b: f64, mesh_len: usize, base: Pose) -> Self {
        Self {
            a,
            b,
            mesh: vec![0.0; mesh_len],
            twist: Vector6::zeros(),
            base,
        }
    }

    pub fn pose(&self) -> Pose {
        se3_exp(&Twist(self.twist)).compose(&self.base)
    }

    /// Moves the twist into the base pose.
    pub fn fold(&mut self) {
        self.base = self.pose();
        self.twist = Vector6::zeros();
    }

    pub fn set_pose(&mut self, p: Pose) {
        self.base = p;
        self.twist = Vector6::zeros();
    }

    pub fn log_depth(&self, normalized_prior: &[f64], sampler: &MeshSampler) -> Vec<f64> {
        let up = sampler.upsample(&self.mesh);
        normalized_prior
            .iter()
            .zip(up)
            .map(|(&n, m)| self.a + self.b * n + m)
            .collect()
    }

    /// Parameter count in the flattened layout `[a, b, mesh.., twist..]`.
    pub fn flat_len(&self) -> usize {
        8 + self.mesh.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.push(self.a);
        v.push(self.b);
        v.extend_from_slice(&self.mesh);
        v.extend(self.twist.iter());
        v
    }

    pub fn unflatten(&mut self, v: &[f64]) {
        let m = self.mesh.len();
        self.a = v[0];
        self.b = v[1];
        self.mesh.copy_from_slice(&v[2..2 + m]);
        self.twist = Vector6::from_column_slice(&v[2 + m..8 + m]);
    }

    /// Converts a left-perturbation gradient into a gradient on the twist
    /// parameter: `d/d twist = J_l(twist)^T * d/d eps`.
    pub fn twist_gradient(&self, g_eps: &Vector6<f64>) -> Vector6<f64> {
        se3_left_jacobian(&Twist(self.twist)).transpose() * g_eps
    }
}

/// `D = exp(a + b * n + upsample(mesh))`.
pub fn depth_from_params(normalized_prior: &Raster<f64>, params: &FrameParams, sampler: &MeshSampler) -> Raster<f64> {
    let l = params.log_depth(normalized_prior.data(), sampler);
    Raster::from_vec(
        normalized_prior.width(),
        normalized_prior.height(),
        1,
        l.into_iter().map(f64::exp).collect(),
    )
    .expect("sizes match by construction")
}

/// Gradient in the flattened layout of [`FrameParams::flatten`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGrad {
    pub a: f64,
    pub b: f64,
    pub mesh: Vec<f64>,
    pub twist: Vector6<f64>,
}

impl FrameGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(8 + self.mesh.len());
        v.push(self.a);
        v.push(self.b);
        v.extend_from_slice(&self.mesh);
        v.extend(self.twist.iter());
        v
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Entries whose `active` flag is false are
/// left untouched (moments included).
pub fn adam_step(params: &mut [f64], grads: &[f64], lr: f64, state: &mut AdamState, active: &[bool]) {
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        if !active[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(MeshGrid::for_image(384, 288, 17), MeshGrid { cols: 17, rows: 13 });
        assert_eq!(MeshGrid::for_image(16, 12, 4), MeshGrid { cols: 4, rows: 3 });
        assert_eq!(MeshGrid::for_image(12, 16, 4), MeshGrid { cols: 3, rows: 4 });
        assert_eq!(MeshGrid::new(3, 2).edges().len(), 2 * 2 + 3);
    }

    #[test]
    fn constant_depth_from_scale() {
        let n = Raster::from_vec(4, 3, 1, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let s = MeshSampler::new(MeshGrid::new(3, 2), 4, 3);
        let p = FrameParams::new(2f64.ln(), 0.0, 6, Pose::identity());
        let d = depth_from_params(&n, &p, &s);
        assert!(d.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn reproduces_prior_up_to_scale_and_power() {
        let prior = Raster::from_vec(4, 4, 1, (0..16).map(|i| 1.0 + 0.2 * i as f64).collect()).unwrap();
        let mask = ValidityMask::filled(4, 4, true);
        let np = crate::io::prior::normalize_log_prior(&prior, &mask).unwrap();
        let s = MeshSampler::new(MeshGrid::new(2, 2), 4, 4);
        let d = depth_from_params(&np.values, &FrameParams::new(0.0, 1.0, 4, Pose::identity()), &s);
        let gm = np.mean.exp();
        for (a, b) in d.data().iter().zip(prior.data()) {
            assert!((a - (b / gm).powf(1.0 / np.std)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_vertex_bump() {
        let g = MeshGrid::new(3, 3);
        let s = MeshSampler::new(g, 9, 9);
        let mut mesh = vec![0.0; 9];
        mesh[4] = 1.0;
        let up = s.upsample(&mesh);
        let peak = up.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, 1.0);
        assert_eq!(up[4 * 9 + 4], 1.0);
        assert_eq!(up[0], 0.0);
        assert!((up[4 * 9 + 2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transpose_is_adjoint() {
        let s = MeshSampler::new(MeshGrid::new(4, 3), 11, 7);
        let mesh: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let pix: Vec<f64> = (0..77).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = s.upsample(&mesh).iter().zip(&pix).map(|(a, b)| a * b).sum();
        let rhs: f64 = s.transpose(&pix).iter().zip(&mesh).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], 0.1, &mut st, &[true, true]);
        assert_eq!(p, vec![1.0, 2.0]);
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.5], 0.01, &mut st, &[true, true]);
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] - 2.01).abs() < 1e-9);
        let mut q = vec![1.0];
        adam_step(&mut q, &[1.0], 0.5, &mut AdamState::new(1), &[false]);
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let mut p = FrameParams::new(0.3, 1.2, 3, Pose::identity());
        p.mesh = vec![0.1, 0.2, 0.3];
        p.twist = Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let v = p.flatten();
        let mut q = FrameParams::new(0.0, 0.0, 3, Pose::identity());
        q.unflatten(&v);
        assert_eq!(p, q);
    }

    #[test]
    fn static_vertex_majority() {
        let s = MeshSampler::new(MeshGrid::new(2, 2), 4, 4);
        let mut m = ValidityMask::filled(4, 4, true);
        for (x, y) in [(0, 0), (1, 0), (0, 1)] {
            m.set(x, y, false);
        }
        assert_eq!(s.static_vertices(&m), vec![false, true, true, true]);
    }
}
