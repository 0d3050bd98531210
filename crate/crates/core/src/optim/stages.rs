//! The three optimization stages: sequential keyframe windows, co-visible
//! pair refinement, and all-frame windows with frozen keyframe poses.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use crate::config::{LossWeights, RunConfig};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::geometry::{interpolate_pose, Intrinsics, Pose};
use crate::io::prior::{normalize_log_prior, NormalizedPrior};
use crate::keyframing::FlowProvider;
use crate::optim::init::{relative_pose_from_flow, two_view_from_flow};
use crate::optim::loss::{evaluate, DirectedFlow, FrameInputs, Level, LossBreakdown, PairSample, Problem};
use crate::optim::params::{adam_step, depth_from_params, AdamState, FrameParams, MeshGrid, MeshSampler};
use crate::pose_graph::Measurements;
use crate::raster::{FlowField, Raster, ValidityMask};

/// Pixel stride and Gauss-Newton iterations of the flow pose initialization.
const INIT_STRIDE: usize = 2;
const INIT_ITERS: usize = 15;

/// Everything the stages read about the video, at processing resolution.
#[derive(Clone, Debug)]
pub struct VideoInputs {
    pub intrinsics: Intrinsics,
    pub images: Vec<Raster<f64>>,
    pub priors: Vec<Raster<f64>>,
    pub masks: Vec<ValidityMask>,
    pub normalized: Vec<NormalizedPrior>,
    /// Flow `t -> t+1`; `None` for the last frame.
    pub flows_fwd: Vec<Option<FlowField>>,
    /// Flow `t -> t-1`; `None` for the first frame.
    pub flows_bwd: Vec<Option<FlowField>>,
}

impl VideoInputs {
    pub fn new(
        intrinsics: Intrinsics,
        images: Vec<Raster<f64>>,
        priors: Vec<Raster<f64>>,
        masks: Vec<ValidityMask>,
        flows_fwd: Vec<Option<FlowField>>,
        flows_bwd: Vec<Option<FlowField>>,
    ) -> Result<Self> {
        let n = images.len();
        if n == 0 {
            return Err(Error::Scene("no frames".into()));
        }
        for len in [priors.len(), masks.len(), flows_fwd.len(), flows_bwd.len()] {
            if len != n {
                return Err(Error::LengthMismatch(n, len));
            }
        }
        let (w, h) = (intrinsics.width, intrinsics.height);
        let sized = |rw: usize, rh: usize| rw == w && rh == h;
        for t in 0..n {
            let flows_ok = [&flows_fwd[t], &flows_bwd[t]]
                .iter()
                .all(|f| f.as_ref().is_none_or(|f| sized(f.width(), f.height())));
            if !sized(images[t].width(), images[t].height())
                || !sized(priors[t].width(), priors[t].height())
                || !sized(masks[t].width(), masks[t].height())
                || !flows_ok
            {
                return Err(Error::Dimension(format!("frame {t} rasters do not match {w}x{h}")));
            }
            if t + 1 < n && flows_fwd[t].is_none() {
                return Err(Error::Scene(format!("missing forward flow of frame {t}")));
            }
            if t > 0 && flows_bwd[t].is_none() {
                return Err(Error::Scene(format!("missing backward flow of frame {t}")));
            }
        }
        let normalized = priors
            .iter()
            .zip(&masks)
            .enumerate()
            .map(|(t, (p, m))| normalize_log_prior(p, m).map_err(|e| Error::Scene(format!("frame {t}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intrinsics,
            images,
            priors,
            masks,
            normalized,
            flows_fwd,
            flows_bwd,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn grid(&self, cfg: &RunConfig) -> MeshGrid {
        MeshGrid::for_image(self.intrinsics.width, self.intrinsics.height, cfg.mesh_long_side)
    }

    /// Depth equal to the prior and identity poses.
    pub fn initial_params(&self, grid: MeshGrid) -> Vec<FrameParams> {
        self.normalized
            .iter()
            .map(|n| FrameParams::new(n.mean, n.std, grid.len(), Pose::identity()))
            .collect()
    }

    /// Frame inputs at `1/scale` resolution.
    fn frame_inputs(&self, t: usize, scale: usize, level: &Level) -> FrameInputs {
        FrameInputs::new(
            self.images[t].downsample(scale),
            self.normalized[t].values.downsample(scale),
            &self.priors[t].downsample(scale),
            self.masks[t].downsample(scale),
            level,
        )
    }

    /// Adjacent-frame flows `t -> t+1` and back, with their consistent sets.
    fn adjacent_flows(&self, t: usize, eps: f64) -> Arc<(DirectedFlow, DirectedFlow)> {
        let fwd = self.flows_fwd[t].clone().expect("checked in new");
        let bwd = self.flows_bwd[t + 1].clone().expect("checked in new");
        Arc::new((
            DirectedFlow::new(fwd.clone(), &bwd, eps),
            DirectedFlow::new(bwd, &fwd, eps),
        ))
    }
}

/// Overlapping windows of at most `size` items; consecutive windows share
/// `overlap` items.
pub fn windows(n: usize, size: usize, overlap: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let size = size.max(overlap + 1);
    let mut start = 0;
    loop {
        let end = (start + size).min(n);
        out.push(start..end);
        if end == n {
            return out;
        }
        start = end - overlap;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub window: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Per-iteration losses of one stage. Each window ends with a row holding
/// the loss after its last update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub stage: String,
    pub rows: Vec<LossRow>,
    pub empty_sets: usize,
}

impl LossCurve {
    pub fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            ..Self::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# stage {}\n# window iteration total photo flow consistency gradient deform\n",
            self.stage
        );
        for r in &self.rows {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
                r.window,
                r.iteration,
                l.total(),
                l.photo,
                l.flow,
                l.consistency,
                l.gradient,
                l.deform
            );
        }
        s
    }

    /// `(first, last)` total loss of every window.
    pub fn window_endpoints(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(usize, f64, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.window => last.2 = r.loss.total(),
                _ => out.push((r.window, r.loss.total(), r.loss.total())),
            }
        }
        out.into_iter().map(|(_, a, b)| (a, b)).collect()
    }
}

/// Which parts of a slot receive updates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Role {
    depth: bool,
    pose: bool,
}

const FROZEN: Role = Role {
    depth: false,
    pose: false,
};

struct Schedule {
    iters: usize,
    lr: f64,
    final_fraction: f64,
    mesh: bool,
}

impl Schedule {
    fn new(cfg: &RunConfig, iters: usize, lr: f64) -> Self {
        Self {
            iters,
            lr: lr * cfg.lr_scale,
            final_fraction: cfg.lr_final_fraction,
            mesh: !cfg.no_mesh,
        }
    }

    /// Exponential decay from `lr` to `lr * final_fraction`.
    fn rate(&self, it: usize) -> f64 {
        let span = self.iters.saturating_sub(1).max(1) as f64;
        self.lr * self.final_fraction.powf(it as f64 / span)
    }
}

fn run_adam(
    problem: &Problem,
    params: &mut [FrameParams],
    roles: &[Role],
    schedule: &Schedule,
    exec: &Executor,
    curve: &mut LossCurve,
    window: usize,
) {
    let active: Vec<Vec<bool>> = params
        .iter()
        .zip(roles)
        .map(|(p, r)| {
            let m = p.mesh.len();
            let mut a = vec![r.depth; 2];
            a.extend(std::iter::repeat_n(r.depth && schedule.mesh, m));
            a.extend(std::iter::repeat_n(r.pose, 6));
            a
        })
        .collect();
    let mut states: Vec<AdamState> = params.iter().map(|p| AdamState::new(p.flat_len())).collect();
    for it in 0..schedule.iters {
        let e = evaluate(problem, params, exec, true);
        curve.empty_sets += e.empty_sets;
        curve.rows.push(LossRow {
            window,
            iteration: it,
            loss: e.loss,
        });
        let lr = schedule.rate(it);
        for (s, g) in e.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if *roles.get(s).unwrap_or(&FROZEN) == FROZEN {
                continue;
            }
            let mut theta = params[s].flatten();
            adam_step(&mut theta, &g.flatten(), lr, &mut states[s], &active[s]);
            params[s].unflatten(&theta);
        }
    }
    let e = evaluate(problem, params, exec, false);
    curve.rows.push(LossRow {
        window,
        iteration: schedule.iters,
        loss: e.loss,
    });
    for p in params.iter_mut() {
        p.fold();
    }
}

/// Stage output shared by the keyframe stages.
#[derive(Clone, Debug, Default)]
pub struct StageResult {
    /// Relative poses `P_j * P_i^-1` keyed by keyframe positions `(i, j)`.
    pub measurements: Measurements,
    pub curve: LossCurve,
    pub degenerate_windows: usize,
}

fn sequential_pairs(
    range: &Range<usize>,
    tau_set: &[usize],
    flows: &dyn Fn(usize) -> Option<Arc<(DirectedFlow, DirectedFlow)>>,
) -> Vec<PairSample> {
    let mut pairs = Vec::new();
    for i in range.clone() {
        for &tau in tau_set {
            let j = i + tau;
            if j >= range.end {
                break;
            }
            pairs.push(PairSample {
                a: i - range.start,
                b: j - range.start,
                weight: 1.0 / tau as f64,
                flows: if tau == 1 { flows(i) } else { None },
            });
        }
    }
    pairs
}

/// Optimizes keyframe depth and pose in overlapping windows at reduced
/// resolution. `state` holds every frame's parameters and is updated for
/// the keyframes. Keyframe 0's pose is the anchor; frames finalized by an
/// earlier window stay frozen.
pub fn optimize_sequential_keyframes(
    inputs: &VideoInputs,
    keyframes: &[usize],
    state: &mut [FrameParams],
    provider: &dyn FlowProvider,
    cfg: &RunConfig,
    exec: &Executor,
) -> Result<StageResult> {
    let scale = cfg.keyframe_loss_scale;
    let level = Level::new(inputs.intrinsics.downsample(scale), inputs.grid(cfg));
    let eps = cfg.fb_epsilon_for(level.intrinsics.long_side());
    let k = keyframes.len();
    let frames: Vec<FrameInputs> = exec.map(keyframes, |&t| inputs.frame_inputs(t, scale, &level));
    let full_eps = cfg.fb_epsilon_for(inputs.intrinsics.long_side());
    let mut full_flows = Vec::with_capacity(k.saturating_sub(1));
    let mut flows = Vec::with_capacity(k.saturating_sub(1));
    for i in 0..k.saturating_sub(1) {
        let (a, b) = (keyframes[i], keyframes[i + 1]);
        let fwd_full = provider.flow(a, b)?;
        let bwd_full = provider.flow(b, a)?;
        let (fwd, bwd) = (fwd_full.downsample(scale), bwd_full.downsample(scale));
        flows.push(Arc::new((
            DirectedFlow::new(fwd.clone(), &bwd, eps),
            DirectedFlow::new(bwd, &fwd, eps),
        )));
        let mut chain = DirectedFlow::new(fwd_full, &bwd_full, full_eps);
        chain.valid = chain.valid.and(&inputs.masks[a]);
        full_flows.push(chain);
    }
    let sampler = MeshSampler::new(inputs.grid(cfg), inputs.intrinsics.width, inputs.intrinsics.height);
    // Pose of keyframe `i + 1` from keyframe `i`. The scale comes from
    // `reference`, a depth map of keyframe `i` (NaN where unknown); the
    // returned raster is keyframe `i + 1`'s triangulated depth in that scale.
    let chain_step = |state: &[FrameParams],
                      i: usize,
                      reference: Option<&Raster<f64>>,
                      predicted: Option<Pose>|
     -> (Pose, Option<Raster<f64>>) {
        let a = keyframes[i];
        let depth = depth_from_params(&inputs.normalized[a].values, &state[a], &sampler);
        let f = &full_flows[i];
        let k = &inputs.intrinsics;
        let Some(pnp) = relative_pose_from_flow(&depth, &f.flow, &f.valid, k, INIT_STRIDE, INIT_ITERS) else {
            log::warn!("flow pose init failed between keyframes {a} and {}", keyframes[i + 1]);
            return (Pose::identity(), None);
        };
        let inits: Vec<Pose> = std::iter::once(pnp).chain(predicted).collect();
        let two = two_view_from_flow(&inits, &f.flow, &f.valid, k, INIT_STRIDE, INIT_ITERS);
        let scaled = two.and_then(|tv| {
            let s = reference.and_then(|r| tv.scale_to(r)).or_else(|| tv.scale_to(&depth))?;
            let pose = Pose::new(tv.pose.rotation, tv.pose.translation * s);
            Some((pose, tv.depth_b.map(|d| d * s)))
        });
        match scaled {
            Some((pose, next)) => (pose, Some(next)),
            None => (pnp, None),
        }
    };

    let mut result = StageResult {
        curve: LossCurve::new("sequential_keyframes"),
        ..StageResult::default()
    };
    let schedule = Schedule::new(cfg, cfg.iters_keyframe, cfg.lr_keyframe);
    let weights = cfg.effective_weights();
    let mut finalized = 0;
    for (w, range) in windows(k, cfg.batch_size, cfg.alpha()).into_iter().enumerate() {
        if range.len() < 2 {
            log::warn!("keyframe window {range:?} has fewer than 2 keyframes, poses left at initialization");
            result.degenerate_windows += 1;
            finalized = range.end;
            continue;
        }
        // Chain flow-derived relative poses from the last fixed keyframe.
        // New keyframes take over the depth correction of that keyframe so
        // the chained translations share its scale.
        let start = finalized.max(1);
        let mut reference: Option<Raster<f64>> = None;
        for i in start..range.end {
            if finalized > 0 {
                let (src, dst) = (keyframes[finalized - 1], keyframes[i]);
                let (ns, nd) = (&inputs.normalized[src], &inputs.normalized[dst]);
                let (a, b) = (nd.mean + (state[src].a - ns.mean), nd.std * state[src].b / ns.std);
                state[dst].a = a;
                state[dst].b = b;
            }
            // The previous step serves as a constant-velocity start.
            let predicted = (i >= 2).then(|| {
                let (p1, p2) = (state[keyframes[i - 1]].pose(), state[keyframes[i - 2]].pose());
                p1.compose(&p2.inverse())
            });
            let (step, next) = chain_step(state, i - 1, reference.as_ref(), predicted);
            reference = next;
            let p = step.compose(&state[keyframes[i - 1]].pose());
            state[keyframes[i]].set_pose(p);
        }
        let mut params: Vec<FrameParams> = range.clone().map(|i| state[keyframes[i]].clone()).collect();
        let roles: Vec<Role> = range
            .clone()
            .map(|i| match i {
                _ if i < finalized => FROZEN,
                0 => Role {
                    depth: true,
                    pose: false,
                },
                _ => Role {
                    depth: true,
                    pose: true,
                },
            })
            .collect();
        let pairs = sequential_pairs(&range, &cfg.tau_set, &|i| Some(flows[i].clone()));
        let unary: Vec<usize> = (0..range.len()).filter(|&s| roles[s] != FROZEN).collect();
        let problem = Problem {
            level: &level,
            frames: &frames[range.clone()],
            pairs: &pairs,
            unary: &unary,
            weights,
            dynamic_weight: cfg.dynamic_pair_weight,
        };
        run_adam(&problem, &mut params, &roles, &schedule, exec, &mut result.curve, w);
        for (i, p) in range.clone().zip(params) {
            state[keyframes[i]] = p;
        }
        for pair in &pairs {
            let (i, j) = (range.start + pair.a, range.start + pair.b);
            let z = state[keyframes[j]]
                .pose()
                .compose(&state[keyframes[i]].pose().inverse());
            result.measurements.insert((i, j), z);
        }
        finalized = range.end;
    }
    Ok(result)
}

/// Refines the two poses of every co-visible keyframe pair (positions into
/// `keyframes`) at full resolution with depth frozen, and returns the
/// measured relative poses. `state` is not modified.
pub fn optimize_covisible_pairs(
    inputs: &VideoInputs,
    keyframes: &[usize],
    pairs: &[(usize, usize)],
    state: &[FrameParams],
    cfg: &RunConfig,
    exec: &Executor,
) -> StageResult {
    let level = Level::new(inputs.intrinsics, inputs.grid(cfg));
    let schedule = Schedule::new(cfg, cfg.iters_covisible, cfg.lr_covisible);
    let base = cfg.effective_weights();
    let weights = LossWeights {
        photo: base.photo,
        flow: 0.0,
        consistency: base.consistency,
        gradient: 0.0,
        deform: 0.0,
    };
    let role = Role {
        depth: false,
        pose: true,
    };
    let mut result = StageResult {
        curve: LossCurve::new("covisible_pairs"),
        ..StageResult::default()
    };
    for (w, &(i, j)) in pairs.iter().enumerate() {
        let (fi, fj) = (keyframes[i], keyframes[j]);
        let frames = [inputs.frame_inputs(fi, 1, &level), inputs.frame_inputs(fj, 1, &level)];
        let sample = [PairSample {
            a: 0,
            b: 1,
            weight: 1.0,
            flows: None,
        }];
        let problem = Problem {
            level: &level,
            frames: &frames,
            pairs: &sample,
            unary: &[],
            weights,
            dynamic_weight: cfg.dynamic_pair_weight,
        };
        let mut params = vec![state[fi].clone(), state[fj].clone()];
        run_adam(
            &problem,
            &mut params,
            &[role, role],
            &schedule,
            exec,
            &mut result.curve,
            w,
        );
        result
            .measurements
            .insert((i, j), params[1].pose().compose(&params[0].pose().inverse()));
    }
    result
}

/// Initializes non-keyframes from their enclosing keyframes: pose by
/// twist interpolation, depth by carrying over the nearest keyframe's
/// correction of the normalized prior.
pub fn initialize_nonkeyframes(inputs: &VideoInputs, keyframes: &[usize], state: &mut [FrameParams]) -> Result<()> {
    let n = inputs.len();
    for t in 0..n {
        if keyframes.binary_search(&t).is_ok() {
            continue;
        }
        let after = keyframes.partition_point(|&k| k < t);
        if after == 0 || after == keyframes.len() {
            return Err(Error::Scene(format!("frame {t} has no enclosing keyframes")));
        }
        let (k0, k1) = (keyframes[after - 1], keyframes[after]);
        let alpha = (t - k0) as f64 / (k1 - k0) as f64;
        let pose = interpolate_pose(&state[k0].pose(), &state[k1].pose(), alpha)?;
        let near = if t - k0 <= k1 - t { k0 } else { k1 };
        let (nk, nt) = (&inputs.normalized[near], &inputs.normalized[t]);
        let src = state[near].clone();
        let p = &mut state[t];
        p.a = nt.mean + (src.a - nk.mean);
        p.b = nt.std * src.b / nk.std;
        p.mesh = src.mesh;
        p.set_pose(pose);
    }
    Ok(())
}

/// Optimizes every frame in overlapping windows at full resolution with
/// keyframe poses frozen. Call [`initialize_nonkeyframes`] first.
pub fn optimize_nonkeyframes(
    inputs: &VideoInputs,
    keyframes: &[usize],
    state: &mut [FrameParams],
    cfg: &RunConfig,
    exec: &Executor,
) -> LossCurve {
    let n = inputs.len();
    let level = Level::new(inputs.intrinsics, inputs.grid(cfg));
    let eps = cfg.fb_epsilon_for(level.intrinsics.long_side());
    let schedule = Schedule::new(cfg, cfg.iters_nonkeyframe, cfg.lr_nonkeyframe);
    let weights = cfg.effective_weights();
    let mut curve = LossCurve::new("nonkeyframes");
    let mut finalized = 0;
    for (w, range) in windows(n, cfg.batch_size, cfg.alpha()).into_iter().enumerate() {
        if range.len() < 2 {
            finalized = range.end;
            continue;
        }
        let ts: Vec<usize> = range.clone().collect();
        let frames: Vec<FrameInputs> = exec.map(&ts, |&t| inputs.frame_inputs(t, 1, &level));
        let roles: Vec<Role> = range
            .clone()
            .map(|t| {
                if t < finalized {
                    FROZEN
                } else {
                    Role {
                        depth: true,
                        pose: keyframes.binary_search(&t).is_err(),
                    }
                }
            })
            .collect();
        let pairs = sequential_pairs(&range, &cfg.tau_set, &|t| Some(inputs.adjacent_flows(t, eps)));
        let unary: Vec<usize> = (0..range.len()).filter(|&s| roles[s] != FROZEN).collect();
        let problem = Problem {
            level: &level,
            frames: &frames,
            pairs: &pairs,
            unary: &unary,
            weights,
            dynamic_weight: cfg.dynamic_pair_weight,
        };
        let mut params: Vec<FrameParams> = range.clone().map(|t| state[t].clone()).collect();
        run_adam(&problem, &mut params, &roles, &schedule, exec, &mut curve, w);
        for (t, p) in range.clone().zip(params) {
            state[t] = p;
        }
        finalized = range.end;
    }
    curve
}
