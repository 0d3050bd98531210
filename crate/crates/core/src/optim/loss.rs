//! Loss terms and their analytic gradients.
//!
//! Pair terms are evaluated per direction `a -> b`: every pixel of `a` is
//! lifted with `D_a`, moved by `P_b * P_a^-1` and projected into `b`.
//! Gradients flow into both frames' log-depth rasters and into left
//! perturbations of both poses; [`evaluate`] maps them onto parameters.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::{Vector3, Vector6};

use crate::config::LossWeights;
use crate::exec::Executor;
use crate::geometry::{Intrinsics, Pose, MIN_DEPTH};
use crate::keyframing::fb_residual;
use crate::optim::params::{FrameGrad, FrameParams, MeshGrid, MeshSampler};
use crate::raster::{FlowField, Raster, Support, ValidityMask};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const GRADIENT_SCALES: usize = 3;
pub const MIN_GRADIENT_NORM: f64 = 1e-8;

/// Resolution-dependent geometry shared by every frame.
#[derive(Clone, Debug)]
pub struct Level {
    pub intrinsics: Intrinsics,
    pub rays: Vec<Vector3<f64>>,
    pub mesh: MeshSampler,
}

impl Level {
    pub fn new(intrinsics: Intrinsics, grid: MeshGrid) -> Self {
        let (w, h) = (intrinsics.width, intrinsics.height);
        let mut rays = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                rays.push(intrinsics.ray(x as f64, y as f64));
            }
        }
        Self {
            intrinsics,
            rays,
            mesh: MeshSampler::new(grid, w, h),
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// 3x3 box means of an image and its square; zero on the border.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub mean: Vec<f64>,
    pub sq: Vec<f64>,
}

impl BoxStats {
    pub fn new(image: &[f64], w: usize, h: usize) -> Self {
        let mut mean = vec![0.0; w * h];
        let mut sq = vec![0.0; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let (mut s, mut s2) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = image[(y + dy - 1) * w + x + dx - 1];
                        s += v;
                        s2 += v * v;
                    }
                }
                mean[y * w + x] = s / 9.0;
                sq[y * w + x] = s2 / 9.0;
            }
        }
        Self { mean, sq }
    }
}

type ScaleDirections = (usize, usize, Vec<Option<[f64; 2]>>);

/// Unit gradient directions of a prior depth at each pyramid scale;
/// `None` where the prior gradient is below [`MIN_GRADIENT_NORM`].
#[derive(Clone, Debug)]
pub struct PriorDirections {
    /// Width, height and directions per scale.
    scales: Vec<ScaleDirections>,
}

impl PriorDirections {
    pub fn new(prior_depth: &Raster<f64>) -> Self {
        let mut scales = Vec::new();
        for s in 0..GRADIENT_SCALES {
            let d = prior_depth.downsample(1 << s);
            let (w, h) = (d.width(), d.height());
            let mut dirs = vec![None; w * h];
            if w >= 2 && h >= 2 {
                for y in 0..h - 1 {
                    for x in 0..w - 1 {
                        let v = d.get(x, y, 0);
                        let g = [d.get(x + 1, y, 0) - v, d.get(x, y + 1, 0) - v];
                        let n = g[0].hypot(g[1]);
                        if n >= MIN_GRADIENT_NORM {
                            dirs[y * w + x] = Some([g[0] / n, g[1] / n]);
                        }
                    }
                }
            }
            scales.push((w, h, dirs));
        }
        Self { scales }
    }
}

/// Immutable inputs of one frame at one resolution.
#[derive(Clone, Debug)]
pub struct FrameInputs {
    pub image: Raster<f64>,
    pub normalized_prior: Raster<f64>,
    pub mask: ValidityMask,
    pub static_vertices: Vec<bool>,
    pub stats: BoxStats,
    pub prior_dirs: PriorDirections,
}

impl FrameInputs {
    pub fn new(
        image: Raster<f64>,
        normalized_prior: Raster<f64>,
        prior_depth: &Raster<f64>,
        mask: ValidityMask,
        level: &Level,
    ) -> Self {
        let stats = BoxStats::new(image.data(), image.width(), image.height());
        Self {
            static_vertices: level.mesh.static_vertices(&mask),
            prior_dirs: PriorDirections::new(prior_depth),
            image,
            normalized_prior,
            mask,
            stats,
        }
    }
}

/// A measured flow `a -> b` with its forward-backward-consistent pixels.
#[derive(Clone, Debug)]
pub struct DirectedFlow {
    pub flow: FlowField,
    pub valid: ValidityMask,
}

impl DirectedFlow {
    pub fn new(forward: FlowField, backward: &FlowField, fb_epsilon: f64) -> Self {
        let (w, h) = (forward.width(), forward.height());
        let mut valid = ValidityMask::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if fb_residual(&forward, backward, x, y).is_some_and(|r| r <= fb_epsilon) {
                    valid.set(x, y, true);
                }
            }
        }
        Self { flow: forward, valid }
    }
}

/// A frame pair entering the objective. `a` and `b` index the problem's
/// frame slots. Pairs carrying flows are adjacent and get the flow term.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    pub flows: Option<Arc<(DirectedFlow, DirectedFlow)>>,
}

impl PairSample {
    pub fn adjacent(&self) -> bool {
        self.flows.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub photo: f64,
    pub flow: f64,
    pub consistency: f64,
    pub gradient: f64,
    pub deform: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.photo + self.flow + self.consistency + self.gradient + self.deform
    }
}

#[derive(Clone, Copy)]
struct Sample {
    valid: bool,
    p: Vector3<f64>,
    uv: [f64; 2],
    sup: Support,
    iw: f64,
    diw: [f64; 2],
}

const INVALID: Sample = Sample {
    valid: false,
    p: Vector3::new(0.0, 0.0, 0.0),
    uv: [0.0, 0.0],
    sup: Support {
        x0: 0,
        y0: 0,
        fx: 0.0,
        fy: 0.0,
    },
    iw: 0.0,
    diw: [0.0, 0.0],
};

struct DirArgs<'a> {
    level: &'a Level,
    image_a: &'a [f64],
    mask_a: &'a ValidityMask,
    stats_a: &'a BoxStats,
    image_b: &'a [f64],
    depth_a: &'a [f64],
    depth_b: &'a [f64],
    rel: Pose,
    flow: Option<&'a DirectedFlow>,
    /// Weights of the photometric, flow and consistency terms.
    coef: [f64; 3],
    grad: bool,
}

#[derive(Clone, Debug, Default)]
struct DirOut {
    photo: f64,
    flow: f64,
    consistency: f64,
    grad_la: Vec<f64>,
    grad_lb: Vec<f64>,
    g_eps_a: Vector6<f64>,
    g_eps_b: Vector6<f64>,
    empty: usize,
    signature: u64,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

/// Sums over the in-bounds part of each pixel's 3x3 neighborhood, for
/// `C` interleaved channels.
fn box3<const C: usize>(src: &[[f64; C]], w: usize, h: usize, tmp: &mut Vec<[f64; C]>, out: &mut Vec<[f64; C]>) {
    let add = |a: [f64; C], b: [f64; C]| -> [f64; C] { std::array::from_fn(|c| a[c] + b[c]) };
    tmp.clear();
    for row in src.chunks_exact(w) {
        for x in 0..w {
            let mut s = row[x];
            if x > 0 {
                s = add(s, row[x - 1]);
            }
            if x + 1 < w {
                s = add(s, row[x + 1]);
            }
            tmp.push(s);
        }
    }
    out.clear();
    for y in 0..h {
        let mid = &tmp[y * w..(y + 1) * w];
        let up = if y > 0 { Some(&tmp[(y - 1) * w..y * w]) } else { None };
        let down = if y + 1 < h {
            Some(&tmp[(y + 1) * w..(y + 2) * w])
        } else {
            None
        };
        for x in 0..w {
            let mut s = mid[x];
            if let Some(u) = up {
                s = add(s, u[x]);
            }
            if let Some(d) = down {
                s = add(s, d[x]);
            }
            out.push(s);
        }
    }
}

/// Per-thread buffers reused across directions.
#[derive(Default)]
struct Scratch {
    samples: Vec<Sample>,
    g_iw: Vec<f64>,
    g_uv: Vec<[f64; 2]>,
    g_q: Vec<f64>,
    g_db: Vec<f64>,
    moments: Vec<[f64; 4]>,
    moment_sums: Vec<[f64; 4]>,
    coefs: Vec<[f64; 3]>,
    coef_sums: Vec<[f64; 3]>,
    tmp4: Vec<[f64; 4]>,
    tmp3: Vec<[f64; 3]>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

fn reset(v: &mut Vec<f64>, n: usize) {
    v.clear();
    v.resize(n, 0.0);
}

fn eval_direction(args: &DirArgs) -> DirOut {
    SCRATCH.with(|s| eval_direction_with(args, &mut s.borrow_mut()))
}

fn eval_direction_with(args: &DirArgs, sc: &mut Scratch) -> DirOut {
    let k = &args.level.intrinsics;
    let (w, h) = (k.width, k.height);
    let n = w * h;
    let r = args.rel.rotation_matrix();
    let t = args.rel.translation;
    let mask = args.mask_a.data();
    let image_a = args.image_a;
    let mut out = DirOut {
        signature: 0xcbf2_9ce4_8422_2325,
        ..DirOut::default()
    };

    let Scratch {
        samples,
        g_iw,
        g_uv,
        g_q,
        g_db,
        moments,
        moment_sums,
        coefs,
        coef_sums,
        tmp4,
        tmp3,
    } = sc;
    samples.clear();
    samples.reserve(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = r * (args.level.rays[i] * args.depth_a[i]) + t;
            let mut s = INVALID;
            if p.z > MIN_DEPTH {
                let iz = 1.0 / p.z;
                let u = k.fx * p.x * iz + k.cx;
                let v = k.fy * p.y * iz + k.cy;
                if let Some(sup) = Support::new(u, v, w, h) {
                    let (iw, du, dv) = sup.apply_with_grad(args.image_b, w);
                    s = Sample {
                        valid: true,
                        p,
                        uv: [u, v],
                        sup,
                        iw,
                        diw: [du, dv],
                    };
                    out.signature = mix(out.signature, (sup.x0 as u64) << 32 | sup.y0 as u64);
                }
            }
            out.signature = mix(out.signature, s.valid as u64);
            samples.push(s);
        }
    }
    let samples = &samples[..];
    let main = |i: usize| samples[i].valid && mask[i];

    let [c_photo, c_flow, c_cons] = args.coef;
    let gn = if args.grad { n } else { 0 };
    reset(g_iw, gn);
    reset(g_q, gn);
    reset(g_db, gn);
    g_uv.clear();
    g_uv.resize(gn, [0.0; 2]);

    let n_main = (0..n).filter(|&i| main(i)).count();
    if n_main == 0 {
        out.empty += 1;
    }

    if c_photo != 0.0 && n_main > 0 {
        let inv = 1.0 / n_main as f64;
        let mut l1 = 0.0;
        for i in 0..n {
            if main(i) {
                let d = samples[i].iw - image_a[i];
                l1 += d.abs();
                out.signature = mix(out.signature, (d > 0.0) as u64);
                if args.grad {
                    g_iw[i] += c_photo * sign(d) * inv;
                }
            }
        }
        // Structural term on interior pixels whose whole window is valid,
        // with window sums from separable box filters over
        // (valid, I_w, I_w^2, I_w * I_a).
        moments.clear();
        moments.extend((0..n).map(|i| {
            let sm = &samples[i];
            if sm.valid {
                [1.0, sm.iw, sm.iw * sm.iw, sm.iw * image_a[i]]
            } else {
                [0.0; 4]
            }
        }));
        box3(moments, w, h, tmp4, moment_sums);
        let mut centers = 0usize;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                centers += (main(i) && moment_sums[i][0] == 9.0) as usize;
            }
        }
        let mut dssim = 0.0;
        if centers > 0 {
            let inv_s = 1.0 / centers as f64;
            let g = -0.5 * c_photo * inv_s / 9.0;
            // Per-center coefficients of the window mean, second moment and
            // cross moment.
            coefs.clear();
            coefs.resize(gn, [0.0; 3]);
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    let i = y * w + x;
                    let [cnt, sw, sww, swr] = moment_sums[i];
                    if !(main(i) && cnt == 9.0) {
                        continue;
                    }
                    let mw = sw / 9.0;
                    let eww = sww / 9.0;
                    let ewr = swr / 9.0;
                    let mr = args.stats_a.mean[i];
                    let err = args.stats_a.sq[i];
                    let a = 2.0 * mw * mr + SSIM_C1;
                    let b = 2.0 * (ewr - mw * mr) + SSIM_C2;
                    let c = mw * mw + mr * mr + SSIM_C1;
                    let d = (eww - mw * mw) + (err - mr * mr) + SSIM_C2;
                    let cd = c * d;
                    let s = a * b / cd;
                    dssim += 0.5 * (1.0 - s);
                    if args.grad {
                        coefs[i] = [
                            g * ((2.0 * mr * b - 2.0 * mr * a) / cd - s * (2.0 * mw / c - 2.0 * mw / d)),
                            g * 2.0 * (-s / d),
                            g * 2.0 * a / cd,
                        ];
                    }
                }
            }
            dssim *= inv_s;
            if args.grad {
                // Transposed window sums scatter the coefficients back.
                box3(coefs, w, h, tmp3, coef_sums);
                for i in 0..n {
                    if samples[i].valid {
                        let [ba, bb, bc] = coef_sums[i];
                        g_iw[i] += ba + bb * samples[i].iw + bc * image_a[i];
                    }
                }
            }
        }
        out.photo = l1 * inv + dssim;
    }

    if let (Some(fl), true) = (args.flow, c_flow != 0.0) {
        let valid = fl.valid.data();
        let count = (0..n).filter(|&i| main(i) && valid[i]).count();
        if count == 0 {
            out.empty += 1;
        } else {
            let inv = 1.0 / count as f64;
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !(main(i) && valid[i]) {
                        continue;
                    }
                    let f = fl.flow.data()[i];
                    let ex = samples[i].uv[0] - x as f64 - f[0];
                    let ey = samples[i].uv[1] - y as f64 - f[1];
                    acc += ex.abs() + ey.abs();
                    out.signature = mix(out.signature, (ex > 0.0) as u64 | ((ey > 0.0) as u64) << 1);
                    if args.grad {
                        g_uv[i][0] += c_flow * inv * sign(ex);
                        g_uv[i][1] += c_flow * inv * sign(ey);
                    }
                }
            }
            out.flow = acc * inv;
        }
    }

    if c_cons != 0.0 && n_main > 0 {
        let inv = 1.0 / n_main as f64;
        let mut acc = 0.0;
        for i in 0..n {
            if !main(i) {
                continue;
            }
            let sm = &samples[i];
            let (s, ds_du, ds_dv) = sm.sup.apply_with_grad(args.depth_b, w);
            let q = sm.p.z;
            let sum = s + q;
            let diff = s - q;
            acc += diff.abs() / sum;
            out.signature = mix(out.signature, (diff > 0.0) as u64);
            if args.grad {
                let sg = sign(diff);
                let dc_ds = (sg * sum - diff.abs()) / (sum * sum);
                let dc_dq = (-sg * sum - diff.abs()) / (sum * sum);
                let g = c_cons * inv;
                g_uv[i][0] += g * dc_ds * ds_du;
                g_uv[i][1] += g * dc_ds * ds_dv;
                g_q[i] += g * dc_dq;
                sm.sup.scatter(g_db, w, g * dc_ds);
            }
        }
        out.consistency = acc * inv;
    }

    if !args.grad {
        return out;
    }
    out.grad_la = vec![0.0; n];
    for i in 0..n {
        let sm = &samples[i];
        if !sm.valid {
            continue;
        }
        let gu = g_uv[i][0] + g_iw[i] * sm.diw[0];
        let gv = g_uv[i][1] + g_iw[i] * sm.diw[1];
        if gu == 0.0 && gv == 0.0 && g_q[i] == 0.0 {
            continue;
        }
        let p = sm.p;
        let iz = 1.0 / p.z;
        let gp = Vector3::new(
            gu * k.fx * iz,
            gv * k.fy * iz,
            -(gu * k.fx * p.x + gv * k.fy * p.y) * iz * iz + g_q[i],
        );
        let ray_r = r * args.level.rays[i];
        out.grad_la[i] = gp.dot(&ray_r) * args.depth_a[i];
        let pxg = p.cross(&gp);
        out.g_eps_b += Vector6::new(gp.x, gp.y, gp.z, pxg.x, pxg.y, pxg.z);
        let gr = r.transpose() * gp;
        let x = args.level.rays[i] * args.depth_a[i];
        let gxr = gr.cross(&x);
        out.g_eps_a += Vector6::new(-gr.x, -gr.y, -gr.z, gxr.x, gxr.y, gxr.z);
    }
    out.grad_lb = g_db.iter().zip(args.depth_b).map(|(g, d)| g * d).collect();
    out
}

/// Orientation loss between depth gradients over three pyramid scales;
/// returns the loss and, on request, its gradient with respect to depth.
fn gradient_term(depth: &[f64], w: usize, h: usize, prior: &PriorDirections, grad: bool) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut g_depth = if grad { vec![0.0; w * h] } else { Vec::new() };
    for (s, (ws, hs, dirs)) in prior.scales.iter().enumerate() {
        let (ws, hs) = (*ws, *hs);
        if ws < 2 || hs < 2 {
            continue;
        }
        let f = 1usize << s;
        let norm = 1.0 / (f * f) as f64;
        let mut ds = vec![0.0; ws * hs];
        for y in 0..hs {
            for x in 0..ws {
                let mut acc = 0.0;
                for dy in 0..f {
                    let row = (y * f + dy) * w + x * f;
                    acc += depth[row..row + f].iter().sum::<f64>();
                }
                ds[y * ws + x] = acc * norm;
            }
        }
        let mut gs = vec![0.0; if grad { ws * hs } else { 0 }];
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut terms = Vec::new();
        for y in 0..hs - 1 {
            for x in 0..ws - 1 {
                let i = y * ws + x;
                let Some(pd) = dirs[i] else { continue };
                let g = [ds[i + 1] - ds[i], ds[i + ws] - ds[i]];
                let nrm = g[0].hypot(g[1]);
                if nrm < MIN_GRADIENT_NORM {
                    continue;
                }
                let cos = (g[0] * pd[0] + g[1] * pd[1]) / nrm;
                sum += (1.0 - cos).powi(2);
                count += 1;
                if grad {
                    terms.push((i, g, nrm, cos, pd));
                }
            }
        }
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        loss += sum * inv;
        if grad {
            for (i, g, nrm, cos, pd) in terms {
                let c = -2.0 * (1.0 - cos) * inv;
                let gx = c * (pd[0] / nrm - cos * g[0] / (nrm * nrm));
                let gy = c * (pd[1] / nrm - cos * g[1] / (nrm * nrm));
                gs[i + 1] += gx;
                gs[i + ws] += gy;
                gs[i] -= gx + gy;
            }
            for y in 0..hs {
                for x in 0..ws {
                    let v = gs[y * ws + x] * norm;
                    if v == 0.0 {
                        continue;
                    }
                    for dy in 0..f {
                        let row = (y * f + dy) * w + x * f;
                        for g in &mut g_depth[row..row + f] {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
    (loss, g_depth)
}

fn deform_term(mesh: &[f64], grid: MeshGrid, static_vertices: &[bool], w_dyn: f64, grad: bool) -> (f64, Vec<f64>) {
    let edges = grid.edges();
    let mut g = if grad { vec![0.0; mesh.len()] } else { Vec::new() };
    if edges.is_empty() {
        return (0.0, g);
    }
    let inv = 1.0 / edges.len() as f64;
    let mut sum = 0.0;
    for (u, v) in edges {
        let wt = if static_vertices[u] && static_vertices[v] {
            1.0
        } else {
            w_dyn
        };
        let d = mesh[u] - mesh[v];
        sum += wt * d * d;
        if grad {
            g[u] += 2.0 * wt * d * inv;
            g[v] -= 2.0 * wt * d * inv;
        }
    }
    (sum * inv, g)
}

/// Mean over `V_ab` of `|I_b(warp) - I_a| + DSSIM` at `a`'s static pixels.
pub fn photometric_loss(
    image_a: &Raster<f64>,
    image_b: &Raster<f64>,
    depth_a: &Raster<f64>,
    pose_a: &Pose,
    pose_b: &Pose,
    k: &Intrinsics,
    mask_a: &ValidityMask,
) -> f64 {
    let level = Level::new(*k, MeshGrid::new(2, 2));
    let stats = BoxStats::new(image_a.data(), k.width, k.height);
    eval_direction(&DirArgs {
        level: &level,
        image_a: image_a.data(),
        mask_a,
        stats_a: &stats,
        image_b: image_b.data(),
        depth_a: depth_a.data(),
        depth_b: depth_a.data(),
        rel: pose_b.compose(&pose_a.inverse()),
        flow: None,
        coef: [1.0, 0.0, 0.0],
        grad: false,
    })
    .photo
}

/// Mean L1 distance `|F_rigid - F_hat|_1` over the valid pixels.
pub fn flow_loss(rigid: &FlowField, measured: &FlowField, valid: &ValidityMask) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((a, b), &v) in rigid.data().iter().zip(measured.data()).zip(valid.data()) {
        if v {
            sum += (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean of `|D_b(x') - z_b| / (D_b(x') + z_b)` where `z_b` is the depth of
/// `a`'s point seen from `b` and `x'` its projection.
pub fn depth_consistency_loss(
    depth_a: &Raster<f64>,
    depth_b: &Raster<f64>,
    pose_a: &Pose,
    pose_b: &Pose,
    k: &Intrinsics,
) -> f64 {
    let level = Level::new(*k, MeshGrid::new(2, 2));
    let mask = ValidityMask::filled(k.width, k.height, true);
    let stats = BoxStats {
        mean: Vec::new(),
        sq: Vec::new(),
    };
    eval_direction(&DirArgs {
        level: &level,
        image_a: depth_a.data(),
        mask_a: &mask,
        stats_a: &stats,
        image_b: depth_b.data(),
        depth_a: depth_a.data(),
        depth_b: depth_b.data(),
        rel: pose_b.compose(&pose_a.inverse()),
        flow: None,
        coef: [0.0, 0.0, 1.0],
        grad: false,
    })
    .consistency
}

pub fn depth_gradient_loss(depth: &Raster<f64>, prior: &Raster<f64>) -> f64 {
    gradient_term(
        depth.data(),
        depth.width(),
        depth.height(),
        &PriorDirections::new(prior),
        false,
    )
    .0
}

pub fn deform_regularizer(mesh: &[f64], grid: MeshGrid, static_vertices: &[bool], w_dyn: f64) -> f64 {
    deform_term(mesh, grid, static_vertices, w_dyn, false).0
}

/// The objective over a set of frame slots.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub level: &'a Level,
    pub frames: &'a [FrameInputs],
    pub pairs: &'a [PairSample],
    /// Slots whose single-frame terms are included, each once.
    pub unary: &'a [usize],
    pub weights: LossWeights,
    pub dynamic_weight: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Parameter gradients per slot; `None` for slots outside the problem
    /// or when gradients were not requested.
    pub grads: Vec<Option<FrameGrad>>,
    /// Pair directions with an empty valid set.
    pub empty_sets: usize,
    /// Hash of every discrete decision: sample validity, bilinear cells,
    /// and the signs inside absolute values.
    pub signature: u64,
}

enum Task {
    Dir { pair: usize, forward: bool },
    Unary(usize),
}

enum TaskOut {
    Dir(DirOut),
    Unary {
        gradient: f64,
        deform: f64,
        grad_l: Vec<f64>,
        grad_mesh: Vec<f64>,
    },
}

pub fn evaluate(problem: &Problem, params: &[FrameParams], exec: &Executor, with_grad: bool) -> Evaluation {
    let slots = problem.frames.len();
    let lv = problem.level;
    let (w, h) = (lv.width(), lv.height());
    let wts = problem.weights;

    let mut involved = vec![false; slots];
    for p in problem.pairs {
        involved[p.a] = true;
        involved[p.b] = true;
    }
    for &u in problem.unary {
        involved[u] = true;
    }
    let active: Vec<usize> = (0..slots).filter(|&s| involved[s]).collect();
    let computed = exec.map(&active, |&s| {
        let l = params[s].log_depth(problem.frames[s].normalized_prior.data(), &lv.mesh);
        let d: Vec<f64> = l.iter().map(|v| v.exp()).collect();
        d
    });
    let mut depths: Vec<Option<Vec<f64>>> = vec![None; slots];
    for (s, d) in active.iter().zip(computed) {
        depths[*s] = Some(d);
    }
    let poses: Vec<Option<Pose>> = (0..slots).map(|s| involved[s].then(|| params[s].pose())).collect();

    let mut tasks = Vec::with_capacity(2 * problem.pairs.len() + problem.unary.len());
    for i in 0..problem.pairs.len() {
        tasks.push(Task::Dir { pair: i, forward: true });
        tasks.push(Task::Dir {
            pair: i,
            forward: false,
        });
    }
    for &u in problem.unary {
        tasks.push(Task::Unary(u));
    }

    let outs = exec.map(&tasks, |task| match *task {
        Task::Dir { pair, forward } => {
            let ps = &problem.pairs[pair];
            let (a, b) = if forward { (ps.a, ps.b) } else { (ps.b, ps.a) };
            let flow = ps.flows.as_ref().map(|f| if forward { &f.0 } else { &f.1 });
            let fa = &problem.frames[a];
            let pa = poses[a].as_ref().expect("involved");
            let pb = poses[b].as_ref().expect("involved");
            TaskOut::Dir(eval_direction(&DirArgs {
                level: lv,
                image_a: fa.image.data(),
                mask_a: &fa.mask,
                stats_a: &fa.stats,
                image_b: problem.frames[b].image.data(),
                depth_a: depths[a].as_deref().expect("involved"),
                depth_b: depths[b].as_deref().expect("involved"),
                rel: pb.compose(&pa.inverse()),
                flow,
                coef: [
                    ps.weight * wts.photo,
                    if flow.is_some() { ps.weight * wts.flow } else { 0.0 },
                    ps.weight * wts.consistency,
                ],
                grad: with_grad,
            }))
        }
        Task::Unary(s) => {
            let d = depths[s].as_deref().expect("involved");
            let (gradient, mut grad_l) = if wts.gradient != 0.0 {
                gradient_term(d, w, h, &problem.frames[s].prior_dirs, with_grad)
            } else {
                (0.0, Vec::new())
            };
            for (g, dv) in grad_l.iter_mut().zip(d) {
                *g *= wts.gradient * dv;
            }
            let (deform, mut grad_mesh) = if wts.deform != 0.0 {
                deform_term(
                    &params[s].mesh,
                    lv.mesh.grid,
                    &problem.frames[s].static_vertices,
                    problem.dynamic_weight,
                    with_grad,
                )
            } else {
                (0.0, Vec::new())
            };
            for g in &mut grad_mesh {
                *g *= wts.deform;
            }
            TaskOut::Unary {
                gradient,
                deform,
                grad_l,
                grad_mesh,
            }
        }
    });

    let mut loss = LossBreakdown::default();
    let mut empty_sets = 0;
    let mut signature = 0xcbf2_9ce4_8422_2325u64;
    let mut g_l: Vec<Vec<f64>> = vec![Vec::new(); slots];
    let mut g_mesh: Vec<Vec<f64>> = vec![Vec::new(); slots];
    let mut g_eps = vec![Vector6::zeros(); slots];
    let add = |dst: &mut Vec<f64>, src: &[f64]| {
        if src.is_empty() {
            return;
        }
        if dst.is_empty() {
            dst.extend_from_slice(src);
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    };
    for (task, out) in tasks.iter().zip(outs) {
        match (task, out) {
            (Task::Dir { pair, forward }, TaskOut::Dir(o)) => {
                let ps = &problem.pairs[*pair];
                let (a, b) = if *forward { (ps.a, ps.b) } else { (ps.b, ps.a) };
                loss.photo += ps.weight * wts.photo * o.photo;
                if ps.adjacent() {
                    loss.flow += ps.weight * wts.flow * o.flow;
                }
                loss.consistency += ps.weight * wts.consistency * o.consistency;
                empty_sets += o.empty;
                signature = mix(signature, o.signature);
                if with_grad {
                    add(&mut g_l[a], &o.grad_la);
                    add(&mut g_l[b], &o.grad_lb);
                    g_eps[a] += o.g_eps_a;
                    g_eps[b] += o.g_eps_b;
                }
            }
            (
                Task::Unary(s),
                TaskOut::Unary {
                    gradient,
                    deform,
                    grad_l,
                    grad_mesh,
                },
            ) => {
                loss.gradient += wts.gradient * gradient;
                loss.deform += wts.deform * deform;
                if with_grad {
                    add(&mut g_l[*s], &grad_l);
                    add(&mut g_mesh[*s], &grad_mesh);
                }
            }
            _ => unreachable!("task and output kinds match"),
        }
    }

    let mut grads = vec![None; slots];
    if with_grad {
        for &s in &active {
            let n = problem.frames[s].normalized_prior.data();
            let gl = &g_l[s];
            let (ga, gb, mut gm) = if gl.is_empty() {
                (0.0, 0.0, vec![0.0; params[s].mesh.len()])
            } else {
                (
                    gl.iter().sum(),
                    gl.iter().zip(n).map(|(g, v)| g * v).sum(),
                    lv.mesh.transpose(gl),
                )
            };
            if !g_mesh[s].is_empty() {
                for (a, b) in gm.iter_mut().zip(&g_mesh[s]) {
                    *a += b;
                }
            }
            grads[s] = Some(FrameGrad {
                a: ga,
                b: gb,
                mesh: gm,
                twist: params[s].twist_gradient(&g_eps[s]),
            });
        }
    }
    Evaluation {
        loss,
        grads,
        empty_sets,
        signature,
    }
}
