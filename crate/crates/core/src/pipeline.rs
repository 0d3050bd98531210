//! End-to-end driver: keyframes, association, the optimization stages,
//! pose-graph optimization, post filter and exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvalReport};
use crate::exec::Executor;
use crate::geometry::{Intrinsics, Pose};
use crate::io::raster_file::{read_raster, write_raster};
use crate::io::scene::{Scene, SceneMeta};
use crate::io::trajectory::{read_trajectory, write_trajectory, Stamped};
use crate::keyframing::{
    associate_candidates, mean_static_flow_magnitude, select_keyframes, uniform_keyframes, verify_candidates,
    FlowProvider, SimilarityMatrix, VerifyParams,
};
use crate::optim::checkpoint::write_checkpoint;
use crate::optim::params::{depth_from_params, FrameParams, MeshSampler};
use crate::optim::stages::{
    initialize_nonkeyframes, optimize_covisible_pairs, optimize_nonkeyframes, optimize_sequential_keyframes, LossCurve,
    VideoInputs,
};
use crate::pose_graph::{build_graph, PgoReport};
use crate::post_filter::{chain_flow, filter_video, AdjacentFlows, FilterParams};
use crate::raster::{FlowField, Raster, ValidityMask};
use crate::synth::OracleFlow;

/// Serves pair flows: adjacent flows directly, then precomputed pair
/// files, then the ground-truth oracle, then chained adjacent flows.
/// Chained pixels that leave the image are NaN, which fails every
/// consistency test downstream.
pub struct SceneFlows<'a> {
    pub adjacent: AdjacentFlows<'a>,
    pub scene: Option<&'a Scene>,
    pub oracle: Option<OracleFlow>,
}

impl SceneFlows<'_> {
    pub fn source_name(&self) -> &'static str {
        if self.oracle.is_some() {
            "oracle"
        } else {
            "chained"
        }
    }
}

impl FlowProvider for SceneFlows<'_> {
    fn flow(&self, i: usize, j: usize) -> Result<FlowField> {
        let n = self.adjacent.fwd.len();
        if i >= n || j >= n {
            return Err(Error::FlowProviderMiss(i, j));
        }
        if j == i + 1 {
            return self.adjacent.fwd[i].clone().ok_or(Error::FlowProviderMiss(i, j));
        }
        if i == j + 1 {
            return self.adjacent.bwd[i].clone().ok_or(Error::FlowProviderMiss(i, j));
        }
        if let Some(scene) = self.scene {
            if let Some(f) = scene.read_pair_flow(i, j)? {
                return Ok(f);
            }
        }
        if let Some(o) = &self.oracle {
            return o.flow(i, j);
        }
        let c = chain_flow(self.adjacent, i, j);
        let mut f = c.flow;
        for (v, &ok) in f.data_mut().iter_mut().zip(c.valid.data()) {
            if !ok {
                *v = [f64::NAN; 2];
            }
        }
        Ok(f)
    }
}

/// Wall time of one stage in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTime {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub frames: usize,
    pub keyframes: Vec<usize>,
    pub flow_source: String,
    pub sequential_edges: usize,
    pub covisible_candidates: usize,
    pub covisible_edges: usize,
    pub pgo: Option<PgoReport>,
    pub curves: Vec<LossCurve>,
    pub times: Vec<StageTime>,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("frames", self.frames.to_string());
        kv("keyframe_count", self.keyframes.len().to_string());
        kv(
            "keyframes",
            self.keyframes
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("flow_source", self.flow_source.clone());
        kv("sequential_edges", self.sequential_edges.to_string());
        kv("covisible_candidates", self.covisible_candidates.to_string());
        kv("covisible_edges", self.covisible_edges.to_string());
        match &self.pgo {
            Some(p) => {
                kv("pgo_initial_cost", format!("{:.9e}", p.initial_cost));
                kv("pgo_final_cost", format!("{:.9e}", p.final_cost));
                kv("pgo_iterations", p.iterations.to_string());
            }
            None => kv("pgo", "skipped".into()),
        }
        for c in &self.curves {
            if let (Some(first), Some(last)) = (c.rows.first(), c.rows.last()) {
                kv(
                    &format!("loss_{}", c.stage),
                    format!("{:.9e} -> {:.9e}", first.loss.total(), last.loss.total()),
                );
            }
            kv(&format!("empty_sets_{}", c.stage), c.empty_sets.to_string());
        }
        for t in &self.times {
            kv(&format!("time_{}", t.stage), format!("{:.3}", t.seconds));
        }
        kv("time_total", format!("{:.3}", self.total_seconds));
        s
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// World-to-camera.
    pub poses: Vec<Pose>,
    /// Depth before the post filter.
    pub raw_depths: Vec<Raster<f64>>,
    pub depths: Vec<Raster<f64>>,
    pub params: Vec<FrameParams>,
    pub report: RunReport,
}

struct Timer {
    times: Vec<StageTime>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.times.push(StageTime {
            stage,
            seconds: (now - self.last).as_secs_f64(),
        });
        log::info!("stage {stage} done in {:.2}s", (now - self.last).as_secs_f64());
        self.last = now;
    }
}

/// Keyframe indices from accumulated static flow, or evenly spaced with the
/// same count under `uniform_keyframes`.
pub fn choose_keyframes(inputs: &VideoInputs, cfg: &RunConfig) -> Result<Vec<usize>> {
    let n = inputs.len();
    let long = inputs.intrinsics.long_side();
    let mags = (0..n.saturating_sub(1))
        .map(|t| {
            let f = inputs.flows_fwd[t].as_ref().expect("checked in VideoInputs::new");
            mean_static_flow_magnitude(f, &inputs.masks[t], long).map_err(|e| Error::Scene(format!("frame {t}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = select_keyframes(&mags, cfg.keyframe_threshold).indices;
    Ok(if cfg.uniform_keyframes {
        uniform_keyframes(n, selected.len())
    } else {
        selected
    })
}

/// Runs every stage on in-memory inputs.
pub fn run(
    inputs: &VideoInputs,
    descriptors: &[Vec<f64>],
    provider: &dyn FlowProvider,
    cfg: &RunConfig,
    exec: &Executor,
) -> Result<RunOutput> {
    cfg.validate()?;
    if descriptors.len() != inputs.len() {
        return Err(Error::LengthMismatch(inputs.len(), descriptors.len()));
    }
    let start = Instant::now();
    let mut timer = Timer::new();
    let mut report = RunReport {
        frames: inputs.len(),
        ..RunReport::default()
    };

    let keyframes = choose_keyframes(inputs, cfg).map_err(|e| e.in_stage("keyframes"))?;
    log::info!("{} keyframes of {} frames", keyframes.len(), inputs.len());
    timer.lap("keyframes");

    let kdesc: Vec<Vec<f64>> = keyframes.iter().map(|&k| descriptors[k].clone()).collect();
    let sim = SimilarityMatrix::from_descriptors(&kdesc);
    let candidates = associate_candidates(&sim, cfg.similarity_threshold, cfg.alpha(), cfg.nms_window);
    let long = inputs.intrinsics.long_side();
    let verify = VerifyParams {
        movement_threshold: cfg.keyframe_threshold,
        min_inlier_ratio: cfg.fb_inlier_ratio,
        fb_epsilon: cfg.fb_epsilon_for(long),
        long_side: long,
    };
    let masks = |t: usize| inputs.masks[t].clone();
    let verified =
        verify_candidates(&candidates, &keyframes, provider, &masks, &verify).map_err(|e| e.in_stage("association"))?;
    let accepted: Vec<(usize, usize)> = verified
        .iter()
        .filter(|(_, v)| v.accepted)
        .map(|(c, _)| (c.i, c.j))
        .collect();
    report.covisible_candidates = candidates.len();
    log::info!(
        "{} of {} co-visible candidates accepted",
        accepted.len(),
        candidates.len()
    );
    timer.lap("association");

    let grid = inputs.grid(cfg);
    let mut state = inputs.initial_params(grid);
    let seq = optimize_sequential_keyframes(inputs, &keyframes, &mut state, provider, cfg, exec)
        .map_err(|e| e.in_stage("sequential_keyframes"))?;
    report.sequential_edges = seq.measurements.len();
    report.curves.push(seq.curve);
    timer.lap("sequential_keyframes");

    if !cfg.skip_pgo {
        let cov = optimize_covisible_pairs(inputs, &keyframes, &accepted, &state, cfg, exec);
        report.covisible_edges = cov.measurements.len();
        report.curves.push(cov.curve);
        timer.lap("covisible_pairs");

        let poses: Vec<Pose> = keyframes.iter().map(|&k| state[k].pose()).collect();
        if keyframes.len() >= 2 {
            let mut graph = build_graph(poses, &cfg.tau_set, &seq.measurements, &cov.measurements)
                .map_err(|e| e.in_stage("pose_graph"))?;
            let pgo = graph
                .optimize(cfg.pgo_max_iters, exec)
                .map_err(|e| e.in_stage("pose_graph"))?;
            for (i, &k) in keyframes.iter().enumerate() {
                state[k].set_pose(graph.poses[i]);
            }
            report.pgo = Some(pgo);
        }
        timer.lap("pose_graph");
    }

    initialize_nonkeyframes(inputs, &keyframes, &mut state).map_err(|e| e.in_stage("nonkeyframes"))?;
    report
        .curves
        .push(optimize_nonkeyframes(inputs, &keyframes, &mut state, cfg, exec));
    timer.lap("nonkeyframes");

    let k = inputs.intrinsics;
    let sampler = MeshSampler::new(grid, k.width, k.height);
    let raw_depths: Vec<Raster<f64>> = exec.map_range(inputs.len(), |t| {
        depth_from_params(&inputs.normalized[t].values, &state[t], &sampler)
    });
    let poses: Vec<Pose> = state.iter().map(FrameParams::pose).collect();
    let filter = FilterParams {
        span: cfg.filter_span,
        gamma_ratio: cfg.filter_gamma_ratio,
        gamma_flow: cfg.filter_gamma_flow,
    };
    let flows = AdjacentFlows {
        fwd: &inputs.flows_fwd,
        bwd: &inputs.flows_bwd,
    };
    let depths = filter_video(&raw_depths, &poses, &k, flows, &filter, exec);
    timer.lap("post_filter");

    if let Some(bad) = poses.iter().position(|p| !p.translation.iter().all(|v| v.is_finite())) {
        return Err(Error::DegenerateTrajectory(format!("pose of frame {bad} is not finite")).in_stage("nonkeyframes"));
    }
    report.keyframes = keyframes;
    report.times = timer.times;
    report.total_seconds = (Instant::now() - start).as_secs_f64();
    Ok(RunOutput {
        poses,
        raw_depths,
        depths,
        params: state,
        report,
    })
}

/// Scene contents needed by [`run`].
pub struct LoadedScene {
    pub scene: Scene,
    pub inputs: VideoInputs,
    pub descriptors: Vec<Vec<f64>>,
    pub oracle: Option<OracleFlow>,
}

impl LoadedScene {
    pub fn provider(&self) -> SceneFlows<'_> {
        SceneFlows {
            adjacent: AdjacentFlows {
                fwd: &self.inputs.flows_fwd,
                bwd: &self.inputs.flows_bwd,
            },
            scene: Some(&self.scene),
            oracle: self.oracle.clone(),
        }
    }
}

/// Reads and checks every prior of a scene directory before any compute.
pub fn load_scene(root: &Path, exec: &Executor) -> Result<LoadedScene> {
    let scene = Scene::open(root)?;
    let n = scene.frame_count();
    if n == 0 {
        return Err(Error::Scene(format!("{} has no frames", root.display())));
    }
    let frames = exec.map_range(n, |t| -> Result<_> {
        Ok((scene.read_image(t)?, scene.read_priors(t)?))
    });
    let mut images = Vec::with_capacity(n);
    let mut priors = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut fwd = Vec::with_capacity(n);
    let mut bwd = Vec::with_capacity(n);
    let mut descriptors = Vec::with_capacity(n);
    for f in frames {
        let (img, p) = f?;
        images.push(img);
        priors.push(p.depth);
        masks.push(p.static_mask);
        fwd.push(p.flow_fwd);
        bwd.push(p.flow_bwd);
        descriptors.push(p.descriptor);
    }
    let inputs = VideoInputs::new(scene.meta.intrinsics, images, priors, masks, fwd, bwd)?;
    let oracle = if scene.has_ground_truth() {
        Some(OracleFlow::from_scene(&scene)?)
    } else {
        None
    };
    Ok(LoadedScene {
        scene,
        inputs,
        descriptors,
        oracle,
    })
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const META_FILE: &str = "frames.meta";

pub fn depth_output_path(out: &Path, t: usize) -> PathBuf {
    out.join("depth").join(format!("depth_{t:06}.gcvdr"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Refuses a non-empty output directory unless `force` is set.
pub fn prepare_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty (use --force)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out.join("depth")).map_err(|e| Error::io(out, e))
}

/// Writes the trajectory, filtered depths, loss curves, report, effective
/// config and checkpoint of a run.
pub fn write_outputs(out: &Path, meta: &SceneMeta, cfg: &RunConfig, result: &RunOutput) -> Result<()> {
    fs::create_dir_all(out.join("depth")).map_err(|e| Error::io(out, e))?;
    let stamped: Vec<Stamped> = result
        .poses
        .iter()
        .enumerate()
        .map(|(t, p)| Stamped {
            timestamp: meta.timestamp(t),
            pose: p.inverse(),
        })
        .collect();
    write_trajectory(&stamped, &out.join(TRAJECTORY_FILE))?;
    for (t, d) in result.depths.iter().enumerate() {
        write_raster(&d.to_f32(), &depth_output_path(out, t))?;
    }
    for c in &result.report.curves {
        write_text(&out.join(format!("loss_{}.txt", c.stage)), &c.to_text())?;
    }
    write_text(&out.join(REPORT_FILE), &result.report.to_text())?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    write_text(&out.join(META_FILE), &meta.to_text())?;
    write_checkpoint(&out.join("checkpoint"), &result.params)
}

/// Loads a scene, runs the pipeline and writes every output.
pub fn run_scene(scene_dir: &Path, out: &Path, cfg: &RunConfig, force: bool, exec: &Executor) -> Result<RunOutput> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let t0 = Instant::now();
    let loaded = load_scene(scene_dir, exec).map_err(|e| e.in_stage("load"))?;
    let load_time = (Instant::now() - t0).as_secs_f64();
    let provider = loaded.provider();
    let mut result = run(&loaded.inputs, &loaded.descriptors, &provider, cfg, exec)?;
    result.report.flow_source = provider.source_name().into();
    result.report.times.insert(
        0,
        StageTime {
            stage: "load",
            seconds: load_time,
        },
    );
    let t1 = Instant::now();
    write_outputs(out, &loaded.scene.meta, cfg, &result)?;
    result.report.times.push(StageTime {
        stage: "export",
        seconds: (Instant::now() - t1).as_secs_f64(),
    });
    result.report.total_seconds = (Instant::now() - t0).as_secs_f64();
    write_text(&out.join(REPORT_FILE), &result.report.to_text())?;
    Ok(result)
}

/// Estimated trajectory and depths read back from a run directory.
pub struct RunDir {
    pub meta: SceneMeta,
    /// World-to-camera.
    pub poses: Vec<Pose>,
    pub depths: Vec<Raster<f64>>,
}

pub fn read_run_dir(dir: &Path) -> Result<RunDir> {
    let meta_path = dir.join(META_FILE);
    let meta = SceneMeta::parse(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let poses: Vec<Pose> = read_trajectory(&dir.join(TRAJECTORY_FILE))?
        .iter()
        .map(|s| s.pose.inverse())
        .collect();
    let mut depths = Vec::new();
    for t in 0..poses.len() {
        let p = depth_output_path(dir, t);
        if !p.exists() {
            break;
        }
        depths.push(read_raster(&p)?.to_f64());
    }
    Ok(RunDir { meta, poses, depths })
}

/// Poses and depths to evaluate, read from a run directory, a scene's
/// `gt/` directory or a scene root (which stands for its `gt/` plus the
/// scene's static masks).
pub struct EvalInputs {
    /// World-to-camera.
    pub poses: Vec<Pose>,
    pub depths: Vec<Raster<f64>>,
    pub masks: Option<Vec<ValidityMask>>,
}

pub fn read_eval_dir(dir: &Path) -> Result<EvalInputs> {
    if dir.join("gt").join(TRAJECTORY_FILE).exists() && dir.join(META_FILE).exists() && dir.join("priors").is_dir() {
        let scene = Scene::open(dir)?;
        let mut e = read_eval_dir(&scene.gt_dir())?;
        let masks = (0..scene.frame_count())
            .map(|t| Ok(scene.read_priors(t)?.static_mask))
            .collect::<Result<Vec<_>>>()?;
        e.masks = Some(masks);
        return Ok(e);
    }
    let traj = dir.join(TRAJECTORY_FILE);
    if !traj.exists() {
        return Err(Error::Scene(format!("{} has no {TRAJECTORY_FILE}", dir.display())));
    }
    let poses: Vec<Pose> = read_trajectory(&traj)?.iter().map(|s| s.pose.inverse()).collect();
    let mut depths = Vec::new();
    for t in 0..poses.len() {
        let nested = depth_output_path(dir, t);
        let flat = dir.join(format!("depth_{t:06}.gcvdr"));
        let p = if nested.exists() { nested } else { flat };
        if !p.exists() {
            break;
        }
        depths.push(read_raster(&p)?.to_f64());
    }
    Ok(EvalInputs {
        poses,
        depths,
        masks: None,
    })
}

/// Evaluates `est` against `gt`. Depth metrics are included when both
/// sides hold a depth for every frame; masks come from whichever side
/// provides them, otherwise every pixel counts.
pub fn evaluate_dirs(est: &Path, gt: &Path, rpe_step: usize) -> Result<EvalReport> {
    let e = read_eval_dir(est)?;
    let g = read_eval_dir(gt)?;
    if e.poses.len() != g.poses.len() {
        return Err(Error::LengthMismatch(e.poses.len(), g.poses.len()));
    }
    let n = e.poses.len();
    let masks = match g.masks.or(e.masks) {
        Some(m) => m,
        None => g
            .depths
            .iter()
            .map(|d| ValidityMask::filled(d.width(), d.height(), true))
            .collect(),
    };
    let with_depth = e.depths.len() == n && g.depths.len() == n && masks.len() == n;
    evaluate_run(
        &e.poses,
        &g.poses,
        rpe_step,
        with_depth.then_some((&e.depths[..], &g.depths[..], &masks[..])),
    )
}

/// World-space points of every positive depth pixel of frame `t`, one
/// `x y z` line each.
pub fn point_cloud(depth: &Raster<f64>, pose_w2c: &Pose, k: &Intrinsics) -> String {
    let c2w = pose_w2c.inverse();
    let mut s = String::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.get(x, y, 0);
            if d > 0.0 && d.is_finite() {
                let p = c2w.transform_point(&(k.ray(x as f64, y as f64) * d));
                let _ = writeln!(s, "{:.6} {:.6} {:.6}", p.x, p.y, p.z);
            }
        }
    }
    s
}

/// Writes `points_%06d.xyz` for the selected frames of a run directory.
pub fn export_point_clouds(run_dir: &Path, frames: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let run = read_run_dir(run_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for &t in frames {
        if t >= run.depths.len() {
            return Err(Error::Config(format!(
                "frame {t} out of range (run has {} depths)",
                run.depths.len()
            )));
        }
        let p = out.join(format!("points_{t:06}.xyz"));
        write_text(&p, &point_cloud(&run.depths[t], &run.poses[t], &run.meta.intrinsics))?;
        written.push(p);
    }
    Ok(written)
}

/// In-memory inputs of a generated scene, matching what [`load_scene`]
/// reads back from its directory.
pub fn synthetic_inputs(s: &crate::synth::SyntheticScene) -> Result<(VideoInputs, Vec<Vec<f64>>)> {
    let n = s.frame_count();
    let inputs = VideoInputs::new(
        s.intrinsics,
        s.images.clone(),
        s.prior_depths.clone(),
        s.masks.clone(),
        (0..n).map(|t| (t + 1 < n).then(|| s.flows_fwd[t].clone())).collect(),
        (0..n).map(|t| (t > 0).then(|| s.flows_bwd[t - 1].clone())).collect(),
    )?;
    Ok((inputs, s.descriptors.clone()))
}
