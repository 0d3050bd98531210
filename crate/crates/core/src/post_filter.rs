//! Flow-guided temporal depth filter. Each frame's depth becomes a
//! per-pixel weighted mean of its neighbors' depths, transformed into the
//! frame's view and aligned with chained optical flow.

use crate::exec::Executor;
use crate::geometry::{Intrinsics, Pose};
use crate::raster::{FlowField, Raster, ValidityMask};

/// Adjacent flows of a video: `fwd[t]` maps `t -> t+1`, `bwd[t]` maps `t -> t-1`.
#[derive(Clone, Copy, Debug)]
pub struct AdjacentFlows<'a> {
    pub fwd: &'a [Option<FlowField>],
    pub bwd: &'a [Option<FlowField>],
}

impl AdjacentFlows<'_> {
    fn step(&self, from: usize, forward: bool) -> &FlowField {
        let f = if forward { &self.fwd[from] } else { &self.bwd[from] };
        f.as_ref().expect("adjacent flow inside the video")
    }
}

/// Flow from frame `i` to frame `t` composed from adjacent flows.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainedFlow {
    pub flow: FlowField,
    pub valid: ValidityMask,
}

/// Composes adjacent flows one frame at a time, sampling each step at the
/// current displaced position. A pixel is invalid once any sample leaves
/// the image.
pub fn chain_flow(flows: AdjacentFlows, i: usize, t: usize) -> ChainedFlow {
    let base = flows
        .fwd
        .iter()
        .chain(flows.bwd)
        .flatten()
        .next()
        .expect("at least one flow");
    let (w, h) = (base.width(), base.height());
    let mut flow = FlowField::zeros(w, h);
    let mut valid = ValidityMask::filled(w, h, true);
    let forward = t > i;
    let mut cur = i;
    while cur != t {
        let step = flows.step(cur, forward);
        for y in 0..h {
            for x in 0..w {
                if !valid.get(x, y) {
                    continue;
                }
                let f = flow.get(x, y);
                match step.sample(x as f64 + f[0], y as f64 + f[1]) {
                    Some(s) => flow.set(x, y, [f[0] + s[0], f[1] + s[1]]),
                    None => {
                        valid.set(x, y, false);
                        flow.set(x, y, [0.0, 0.0]);
                    }
                }
            }
        }
        cur = if forward { cur + 1 } else { cur - 1 };
    }
    ChainedFlow { flow, valid }
}

/// `|F_it(x) + F_ti(x + F_it(x))|` per pixel of the source frame of
/// `f_it`; infinite where either flow is invalid.
pub fn fb_inconsistency(f_it: &ChainedFlow, f_ti: &ChainedFlow) -> Raster<f64> {
    let (w, h) = (f_it.flow.width(), f_it.flow.height());
    let mut out = Raster::filled(w, h, 1, f64::INFINITY);
    for y in 0..h {
        for x in 0..w {
            if !f_it.valid.get(x, y) {
                continue;
            }
            let f = f_it.flow.get(x, y);
            let (u, v) = (x as f64 + f[0], y as f64 + f[1]);
            let Some(b) = f_ti.flow.sample(u, v) else {
                continue;
            };
            // The backward sample must not touch invalid pixels.
            let cells_valid = [
                (u.floor(), v.floor()),
                (u.ceil(), v.ceil()),
                (u.floor(), v.ceil()),
                (u.ceil(), v.floor()),
            ]
            .iter()
            .all(|&(cx, cy)| f_ti.valid.get((cx as usize).min(w - 1), (cy as usize).min(h - 1)));
            if cells_valid {
                out.set(x, y, 0, ((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt());
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    /// Window half-width in frames.
    pub span: usize,
    pub gamma_ratio: f64,
    pub gamma_flow: f64,
}

/// Filtered depth of frame `t`. Neighbors `i` within `span` contribute
/// `D_i` sampled along the chained flow `t -> i` and transformed into frame
/// `t`, weighted by `exp(-gamma_ratio * max/min - gamma_flow * fb)` with
/// weights normalized per pixel. The frame's own depth always takes part
/// with ratio 1 and no flow penalty.
pub fn filter_depth(
    t: usize,
    depths: &[Raster<f64>],
    poses: &[Pose],
    k: &Intrinsics,
    flows: AdjacentFlows,
    p: &FilterParams,
) -> Raster<f64> {
    let n = depths.len();
    let d_t = &depths[t];
    let (w, h) = (d_t.width(), d_t.height());
    let self_w = (-p.gamma_ratio).exp();
    let mut num: Vec<f64> = d_t.data().iter().map(|&d| self_w * d).collect();
    let mut den = vec![self_w; w * h];
    let lo = t.saturating_sub(p.span);
    let hi = (t + p.span).min(n - 1);
    for i in lo..=hi {
        if i == t {
            continue;
        }
        let to_i = chain_flow(flows, t, i);
        let from_i = chain_flow(flows, i, t);
        let diff = fb_inconsistency(&to_i, &from_i);
        let rel = poses[t].compose(&poses[i].inverse());
        let r = rel.rotation_matrix();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let fb = diff.data()[idx];
                if !fb.is_finite() {
                    continue;
                }
                let f = to_i.flow.get(x, y);
                let (u, v) = (x as f64 + f[0], y as f64 + f[1]);
                let Some(di) = depths[i].sample(u, v) else {
                    continue;
                };
                if di <= 0.0 {
                    continue;
                }
                let pt = r * (k.ray(u, v) * di) + rel.translation;
                let z = pt.z;
                let dt = d_t.data()[idx];
                if z <= 0.0 || dt <= 0.0 {
                    continue;
                }
                let ratio = z.max(dt) / z.min(dt);
                let wgt = (-p.gamma_ratio * ratio - p.gamma_flow * fb).exp();
                num[idx] += wgt * z;
                den[idx] += wgt;
            }
        }
    }
    let data = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    Raster::from_vec(w, h, 1, data).expect("sizes match")
}

/// Filters every frame.
pub fn filter_video(
    depths: &[Raster<f64>],
    poses: &[Pose],
    k: &Intrinsics,
    flows: AdjacentFlows,
    p: &FilterParams,
    exec: &Executor,
) -> Vec<Raster<f64>> {
    exec.map_range(depths.len(), |t| filter_depth(t, depths, poses, k, flows, p))
}
