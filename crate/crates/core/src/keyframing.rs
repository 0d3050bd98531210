//! Flow-accumulation keyframe selection and descriptor-based keyframe
//! association with forward-backward flow verification.

use crate::error::{Error, Result};
use crate::raster::{FlowField, Raster, ValidityMask};

pub const DESCRIPTOR_GRID: usize = 16;
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID;

/// Serves dense flow from frame `i` to frame `j`.
pub trait FlowProvider: Sync {
    fn flow(&self, i: usize, j: usize) -> Result<FlowField>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSet {
    /// Strictly increasing frame indices, starting at 0.
    pub indices: Vec<usize>,
    /// Mean static flow magnitude of each adjacent step `t -> t+1`.
    pub step_magnitudes: Vec<f64>,
    /// Accumulator value after each step (reset to 0 on selection).
    pub trace: Vec<f64>,
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }
}

/// Mean flow magnitude over static pixels, divided by the image long side.
pub fn mean_static_flow_magnitude(flow: &FlowField, mask: &ValidityMask, long_side: usize) -> Result<f64> {
    let mut n = 0usize;
    let mut acc = 0.0;
    for (f, &m) in flow.data().iter().zip(mask.data()) {
        if m {
            acc += (f[0] * f[0] + f[1] * f[1]).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoStaticPixels);
    }
    Ok(acc / n as f64 / long_side as f64)
}

/// Frame 0 is always selected; frame `t` is selected once the magnitudes
/// accumulated since the last keyframe reach `threshold`. The last frame
/// closes the set.
pub fn select_keyframes(step_magnitudes: &[f64], threshold: f64) -> KeyframeSet {
    let n = step_magnitudes.len() + 1;
    let mut indices = vec![0];
    let mut trace = Vec::with_capacity(step_magnitudes.len());
    let mut acc = 0.0;
    for (t, &m) in step_magnitudes.iter().enumerate() {
        acc += m;
        trace.push(acc);
        if acc >= threshold * (1.0 - 1e-12) {
            indices.push(t + 1);
            acc = 0.0;
        }
    }
    if *indices.last().unwrap() != n - 1 {
        indices.push(n - 1);
    }
    KeyframeSet {
        indices,
        step_magnitudes: step_magnitudes.to_vec(),
        trace,
    }
}

/// `count` keyframes evenly spread over `n` frames, first and last included.
pub fn uniform_keyframes(n: usize, count: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![0];
    }
    let count = count.clamp(2, n);
    let mut out: Vec<usize> = (0..count)
        .map(|i| ((i as f64) * (n - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// 16x16 area-averaged thumbnail, mean-centered and L2-normalized. A
/// constant image maps to the first basis vector.
pub fn descriptor(image: &Raster<f64>) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let g = DESCRIPTOR_GRID;
    let mut thumb = vec![0.0; g * g];
    let mut area = vec![0.0; g * g];
    // overlap of [a0, a1) with [b0, b1)
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| (a1.min(b1) - a0.max(b0)).max(0.0);
    let sx = g as f64 / w as f64;
    let sy = g as f64 / h as f64;
    for y in 0..h {
        let (y0, y1) = (y as f64 * sy, (y + 1) as f64 * sy);
        for x in 0..w {
            let (x0, x1) = (x as f64 * sx, (x + 1) as f64 * sx);
            let v = image.get(x, y, 0);
            for cy in (y0.floor() as usize)..(y1.ceil() as usize).min(g) {
                let oy = overlap(y0, y1, cy as f64, cy as f64 + 1.0);
                if oy <= 0.0 {
                    continue;
                }
                for cx in (x0.floor() as usize)..(x1.ceil() as usize).min(g) {
                    let o = oy * overlap(x0, x1, cx as f64, cx as f64 + 1.0);
                    thumb[cy * g + cx] += o * v;
                    area[cy * g + cx] += o;
                }
            }
        }
    }
    for (t, a) in thumb.iter_mut().zip(&area) {
        if *a > 0.0 {
            *t /= a;
        }
    }
    let mean = thumb.iter().sum::<f64>() / thumb.len() as f64;
    for t in &mut thumb {
        *t -= mean;
    }
    let norm = thumb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        let mut e1 = vec![0.0; g * g];
        e1[0] = 1.0;
        return e1;
    }
    thumb.iter().map(|v| v / norm).collect()
}

/// Symmetric matrix of descriptor inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    k: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_descriptors(descriptors: &[Vec<f64>]) -> Self {
        let k = descriptors.len();
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v = if i == j {
                    1.0
                } else {
                    descriptors[i]
                        .iter()
                        .zip(&descriptors[j])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        .clamp(-1.0, 1.0)
                };
                data[i * k + j] = v;
                data[j * k + i] = v;
            }
        }
        Self { k, data }
    }

    pub fn from_rows(k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * k {
            return Err(Error::Dimension(format!("{k}x{k} matrix needs {} entries", k * k)));
        }
        Ok(Self { k, data })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn transpose(&self) -> Self {
        let k = self.k;
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                data[j * k + i] = self.data[i * k + j];
            }
        }
        Self { k, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
}

/// Pairs `i < j` with `j - i > alpha` whose similarity reaches `threshold`
/// and is a local maximum over a `window x window` neighborhood of
/// admissible entries. Ties go to the lexicographically smaller pair.
///
/// Entries are read in canonical order `(min, max)`, so the result does not
/// depend on which triangle of an asymmetric input holds the value.
pub fn associate_candidates(a: &SimilarityMatrix, threshold: f64, alpha: usize, window: usize) -> Vec<Candidate> {
    let k = a.size();
    let r = (window / 2) as isize;
    let admissible = |i: usize, j: usize| i < j && j - i > alpha;
    let value = |i: usize, j: usize| a.get(i.min(j), i.max(j));
    let mut out = Vec::new();
    for i in 0..k {
        for j in (i + alpha + 1)..k {
            let v = value(i, j);
            if v < threshold {
                continue;
            }
            let mut keep = true;
            'nms: for di in -r..=r {
                for dj in -r..=r {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= k as isize || nj >= k as isize {
                        continue;
                    }
                    let (ni, nj) = (ni as usize, nj as usize);
                    if !admissible(ni, nj) {
                        continue;
                    }
                    let nv = value(ni, nj);
                    if nv > v || (nv == v && (ni, nj) < (i, j)) {
                        keep = false;
                        break 'nms;
                    }
                }
            }
            if keep {
                out.push(Candidate { i, j, similarity: v });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub accepted: bool,
    pub inlier_ratio: f64,
    pub mean_flow: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyParams {
    pub movement_threshold: f64,
    pub min_inlier_ratio: f64,
    pub fb_epsilon: f64,
    pub long_side: usize,
}

/// Per-pixel forward-backward residual `|F_ij(x) + F_ji(x + F_ij(x))|`;
/// `None` where the forward target leaves the image.
#[inline]
pub fn fb_residual(flow_ij: &FlowField, flow_ji: &FlowField, x: usize, y: usize) -> Option<f64> {
    let f = flow_ij.get(x, y);
    let b = flow_ji.sample(x as f64 + f[0], y as f64 + f[1])?;
    Some(((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt())
}

/// Accepts a pair when enough static pixels of frame `i` are
/// forward-backward consistent and the mean flow stays within the
/// movement threshold.
pub fn verify_pair(
    flow_ij: &FlowField,
    flow_ji: &FlowField,
    mask_i: &ValidityMask,
    p: &VerifyParams,
) -> Result<Verification> {
    let (w, h) = (flow_ij.width(), flow_ij.height());
    let mut inliers = 0usize;
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask_i.get(x, y) {
                continue;
            }
            total += 1;
            if fb_residual(flow_ij, flow_ji, x, y).is_some_and(|r| r <= p.fb_epsilon) {
                inliers += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoStaticPixels);
    }
    let inlier_ratio = inliers as f64 / total as f64;
    let mean_flow = mean_static_flow_magnitude(flow_ij, mask_i, p.long_side)?;
    Ok(Verification {
        accepted: inlier_ratio >= p.min_inlier_ratio && mean_flow <= p.movement_threshold,
        inlier_ratio,
        mean_flow,
    })
}

/// Runs verification on every candidate. `pair.i`/`pair.j` index into
/// `frames` (keyframe position to frame index).
pub fn verify_candidates(
    candidates: &[Candidate],
    frames: &[usize],
    provider: &dyn FlowProvider,
    masks: &dyn Fn(usize) -> ValidityMask,
    p: &VerifyParams,
) -> Result<Vec<(Candidate, Verification)>> {
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (fi, fj) = (frames[c.i], frames[c.j]);
        let fwd = provider.flow(fi, fj)?;
        let bwd = provider.flow(fj, fi)?;
        out.push((*c, verify_pair(&fwd, &bwd, &masks(fi), p)?));
    }
    Ok(out)
}
