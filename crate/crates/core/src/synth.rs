//! Deterministic synthetic scenes with exact ground truth.
//!
//! The world is a textured height field `Z = base + h(X, Y)` viewed by a
//! camera moving near the plane `Z = 0` and looking along `+Z`. Slopes are
//! bounded so every viewing ray meets the surface exactly once, which makes
//! depth, flow and visibility closed-form.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::geometry::{backproject, so3_exp, warp_bilinear, Intrinsics, Pose};
use crate::io::scene::{parse_key_values, FramePriors, Scene, SceneMeta};
use crate::keyframing::{descriptor, FlowProvider};
use crate::raster::{FlowField, Raster, ValidityMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryStyle {
    Loop,
    Spline,
    Forward,
}

impl TrajectoryStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loop" => Ok(Self::Loop),
            "spline" => Ok(Self::Spline),
            "forward" => Ok(Self::Forward),
            other => Err(Error::Config(format!(
                "unknown trajectory `{other}` (loop, spline, forward)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Loop => "loop",
            Self::Spline => "spline",
            Self::Forward => "forward",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub trajectory: TrajectoryStyle,
    /// Radius of the camera path in world units.
    pub motion_radius: f64,
    /// Peak camera rotation wobble in radians.
    pub rotation_wobble: f64,
    pub base_depth: f64,
    pub amplitude: f64,
    /// Surface frequencies in cycles per world unit.
    pub surface_frequency: [f64; 2],
    pub texture_octaves: usize,
    pub texture_contrast: f64,
    /// Finest texture wavelength in pixels at `base_depth`.
    pub texture_wavelength_px: f64,
    pub prior_scale: f64,
    pub prior_bias: f64,
    pub prior_noise: f64,
    /// Moving disk radius in pixels; 0 disables the dynamic region.
    pub dynamic_radius: f64,
    /// Disk velocity in pixels per frame.
    pub dynamic_velocity: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            frames: 120,
            width: 96,
            height: 72,
            fps: 30.0,
            trajectory: TrajectoryStyle::Loop,
            motion_radius: 0.6,
            rotation_wobble: 0.04,
            base_depth: 3.0,
            amplitude: 0.5,
            surface_frequency: [0.22, 0.17],
            texture_octaves: 3,
            texture_contrast: 0.8,
            texture_wavelength_px: 16.0,
            prior_scale: 1.7,
            prior_bias: 0.2,
            prior_noise: 0.0,
            dynamic_radius: 0.0,
            dynamic_velocity: [0.5, 0.2],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config("need >= 2 frames".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("image must be at least 8x8".into()));
        }
        if !(self.base_depth > self.amplitude && self.amplitude >= 0.0) {
            return Err(Error::Config("need base_depth > amplitude >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.prior_bias) {
            return Err(Error::Config("prior_bias must lie in [0, 1)".into()));
        }
        if !(self.prior_scale > 0.0) || self.prior_noise < 0.0 || self.fps <= 0.0 {
            return Err(Error::Config(
                "prior_scale and fps must be positive, prior_noise >= 0".into(),
            ));
        }
        if self.texture_octaves == 0 || self.texture_wavelength_px <= 0.0 {
            return Err(Error::Config(
                "texture needs >= 1 octave and a positive wavelength".into(),
            ));
        }
        if self.trajectory == TrajectoryStyle::Forward && self.motion_radius >= self.base_depth - self.amplitude - 0.5 {
            return Err(Error::Config("forward motion would reach the surface".into()));
        }
        // a single ray/surface intersection needs |grad h| * |ray_xy| < 1
        let slope = self.amplitude * TAU * self.surface_frequency[0].hypot(self.surface_frequency[1]);
        if slope >= 1.0 {
            return Err(Error::Config(format!(
                "surface too steep (max slope {slope:.3}); lower amplitude or frequency"
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\nframes = {}\nwidth = {}\nheight = {}\nfps = {}\ntrajectory = {}\n\
             motion_radius = {}\nrotation_wobble = {}\nbase_depth = {}\namplitude = {}\n\
             surface_frequency_x = {}\nsurface_frequency_y = {}\ntexture_octaves = {}\n\
             texture_contrast = {}\ntexture_wavelength_px = {}\nprior_scale = {}\nprior_bias = {}\n\
             prior_noise = {}\ndynamic_radius = {}\ndynamic_velocity_x = {}\ndynamic_velocity_y = {}\n",
            self.seed,
            self.frames,
            self.width,
            self.height,
            self.fps,
            self.trajectory.name(),
            self.motion_radius,
            self.rotation_wobble,
            self.base_depth,
            self.amplitude,
            self.surface_frequency[0],
            self.surface_frequency[1],
            self.texture_octaves,
            self.texture_contrast,
            self.texture_wavelength_px,
            self.prior_scale,
            self.prior_bias,
            self.prior_noise,
            self.dynamic_radius,
            self.dynamic_velocity[0],
            self.dynamic_velocity[1],
        )
    }

    /// Parses `key = value` text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_key_values(text)? {
            let f = || -> Result<f64> { v.parse().map_err(|e| Error::Config(format!("spec key `{k}`: {e}"))) };
            let u = || -> Result<usize> { v.parse().map_err(|e| Error::Config(format!("spec key `{k}`: {e}"))) };
            match k.as_str() {
                "seed" => s.seed = u()? as u64,
                "frames" => s.frames = u()?,
                "width" => s.width = u()?,
                "height" => s.height = u()?,
                "fps" => s.fps = f()?,
                "trajectory" => s.trajectory = TrajectoryStyle::parse(&v)?,
                "motion_radius" => s.motion_radius = f()?,
                "rotation_wobble" => s.rotation_wobble = f()?,
                "base_depth" => s.base_depth = f()?,
                "amplitude" => s.amplitude = f()?,
                "surface_frequency_x" => s.surface_frequency[0] = f()?,
                "surface_frequency_y" => s.surface_frequency[1] = f()?,
                "texture_octaves" => s.texture_octaves = u()?,
                "texture_contrast" => s.texture_contrast = f()?,
                "texture_wavelength_px" => s.texture_wavelength_px = f()?,
                "prior_scale" => s.prior_scale = f()?,
                "prior_bias" => s.prior_bias = f()?,
                "prior_noise" => s.prior_noise = f()?,
                "dynamic_radius" => s.dynamic_radius = f()?,
                "dynamic_velocity_x" => s.dynamic_velocity[0] = f()?,
                "dynamic_velocity_y" => s.dynamic_velocity[1] = f()?,
                other => return Err(Error::Config(format!("unknown spec key `{other}`"))),
            }
        }
        Ok(s)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::ideal(self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    k: [f64; 2],
    amplitude: f64,
    phase: f64,
}

impl Wave {
    #[inline]
    fn value(&self, x: f64, y: f64) -> f64 {
        self.amplitude * (self.k[0] * x + self.k[1] * y + self.phase).sin()
    }

    #[inline]
    fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let c = self.amplitude * (self.k[0] * x + self.k[1] * y + self.phase).cos();
        [c * self.k[0], c * self.k[1]]
    }
}

/// Height field and albedo of the synthetic world.
#[derive(Clone, Debug)]
pub struct World {
    base: f64,
    surface: Vec<Wave>,
    texture: Vec<Wave>,
}

impl World {
    fn new(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let [fx, fy] = spec.surface_frequency;
        // worst-case slope of the sum equals the single-wave bound in validate()
        let surface = vec![
            Wave {
                k: [TAU * fx, 0.0],
                amplitude: 0.5 * spec.amplitude,
                phase: rng.random_range(0.0..TAU),
            },
            Wave {
                k: [0.0, TAU * fy],
                amplitude: 0.3 * spec.amplitude,
                phase: rng.random_range(0.0..TAU),
            },
            Wave {
                k: [TAU * fx * 0.7, TAU * fy * 0.7],
                amplitude: 0.2 * spec.amplitude,
                phase: rng.random_range(0.0..TAU),
            },
        ];
        let focal = spec.width.max(spec.height) as f64;
        let finest = spec.texture_wavelength_px * spec.base_depth / focal;
        let n = spec.texture_octaves;
        let mut texture = Vec::new();
        let mut total = 0.0;
        for o in 0..n {
            // coarse octaves carry more energy
            let wavelength = finest * 2f64.powi((n - 1 - o) as i32);
            let amp = 2f64.powi(-(o as i32));
            for _ in 0..2 {
                let dir = rng.random_range(0.0..PI);
                let k = TAU / wavelength;
                texture.push(Wave {
                    k: [k * dir.cos(), k * dir.sin()],
                    amplitude: amp,
                    phase: rng.random_range(0.0..TAU),
                });
                total += amp;
            }
        }
        let scale = 0.5 * spec.texture_contrast.clamp(0.0, 1.0) / total;
        for w in &mut texture {
            w.amplitude *= scale;
        }
        Self {
            base: spec.base_depth,
            surface,
            texture,
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.base + self.surface.iter().map(|w| w.value(x, y)).sum::<f64>()
    }

    fn height_gradient(&self, x: f64, y: f64) -> [f64; 2] {
        self.surface.iter().fold([0.0, 0.0], |acc, w| {
            let g = w.gradient(x, y);
            [acc[0] + g[0], acc[1] + g[1]]
        })
    }

    pub fn albedo(&self, x: f64, y: f64) -> f64 {
        0.5 + self.texture.iter().map(|w| w.value(x, y)).sum::<f64>()
    }

    /// Camera-frame depth of the first surface hit along the ray through
    /// pixel `(u, v)` of a camera with world-to-camera pose `pose`.
    pub fn cast(&self, pose: &Pose, k: &Intrinsics, u: f64, v: f64) -> (f64, Vector3<f64>) {
        let c2w = pose.inverse();
        let o = c2w.translation;
        // camera z of the ray direction is 1, so the ray parameter is depth
        let d = c2w.rotation * k.ray(u, v);
        let mut t = (self.base - o.z) / d.z;
        for _ in 0..60 {
            let p = o + d * t;
            let g = p.z - self.height(p.x, p.y);
            let hg = self.height_gradient(p.x, p.y);
            let dg = d.z - hg[0] * d.x - hg[1] * d.y;
            let step = g / dg;
            t -= step;
            if step.abs() <= 1e-14 * t.abs() {
                break;
            }
        }
        (t, o + d * t)
    }
}

fn camera_to_world(spec: &SceneSpec, t: usize, rng_path: &[f64; 8]) -> Pose {
    let n = spec.frames;
    let r = spec.motion_radius;
    let w = spec.rotation_wobble;
    let (center, phi) = match spec.trajectory {
        TrajectoryStyle::Loop => {
            let s = TAU * t as f64 / (n - 1) as f64;
            let c = Vector3::new(r * (s.cos() - 1.0), r * s.sin(), 0.15 * r * (2.0 * s).sin());
            let phi = Vector3::new(w * s.sin(), w * (s.cos() - 1.0), 0.5 * w * (2.0 * s).sin());
            (c, phi)
        }
        TrajectoryStyle::Spline => {
            let s = t as f64 / (n - 1) as f64;
            let a = rng_path;
            let c = Vector3::new(
                r * ((a[0] + 2.0 * s).sin() - a[0].sin()),
                r * ((a[1] + 1.5 * s).sin() - a[1].sin()),
                0.2 * r * ((a[2] + 3.0 * s).sin() - a[2].sin()),
            );
            let phi = Vector3::new(
                w * ((a[3] + 2.5 * s).sin() - a[3].sin()),
                w * ((a[4] + 1.7 * s).sin() - a[4].sin()),
                0.5 * w * ((a[5] + 2.2 * s).sin() - a[5].sin()),
            );
            (c, phi)
        }
        TrajectoryStyle::Forward => {
            let s = t as f64 / (n - 1) as f64;
            let c = Vector3::new(0.1 * r * (TAU * s).sin(), 0.05 * r * (PI * s).sin(), r * s);
            let phi = Vector3::new(w * (PI * s).sin(), 0.5 * w * (TAU * s).sin(), 0.0);
            (c, phi)
        }
    };
    Pose::new(so3_exp(&phi), center)
}

/// Everything `generate` produces, kept in memory.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub world: World,
    /// World-to-camera ground-truth poses.
    pub poses: Vec<Pose>,
    pub depths: Vec<Raster<f64>>,
    pub images: Vec<Raster<f64>>,
    pub masks: Vec<ValidityMask>,
    pub prior_depths: Vec<Raster<f64>>,
    pub flows_fwd: Vec<FlowField>,
    pub flows_bwd: Vec<FlowField>,
    pub descriptors: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct Disk {
    center: [f64; 2],
    velocity: [f64; 2],
    radius: f64,
}

impl Disk {
    fn center_at(&self, t: usize) -> [f64; 2] {
        [
            self.center[0] + self.velocity[0] * t as f64,
            self.center[1] + self.velocity[1] * t as f64,
        ]
    }

    fn contains(&self, t: usize, u: f64, v: f64, margin: f64) -> bool {
        let c = self.center_at(t);
        (u - c[0]).hypot(v - c[1]) <= self.radius + margin
    }

    fn albedo(&self, t: usize, u: f64, v: f64) -> f64 {
        let c = self.center_at(t);
        let (du, dv) = (u - c[0], v - c[1]);
        0.5 + 0.35 * (0.5 * du).sin() * (0.4 * dv).cos()
    }
}

/// Trajectory extent: diagonal of the camera-center bounding box.
pub fn trajectory_extent(centers: &[Vector3<f64>]) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let mut lo = centers[0];
    let mut hi = centers[0];
    for c in centers {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    (hi - lo).norm()
}

/// Flow from pixel `(u, v)` of view `a` with depth `d` into view `b`.
fn transfer(rel: &Pose, k: &Intrinsics, u: f64, v: f64, d: f64) -> [f64; 2] {
    let p = rel.transform_point(&(k.ray(u, v) * d));
    if p.z <= 0.0 {
        return [f64::NAN, f64::NAN];
    }
    [k.fx * p.x / p.z + k.cx - u, k.fy * p.y / p.z + k.cy - v]
}

pub fn generate(spec: &SceneSpec, exec: &Executor) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let path_phases: [f64; 8] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
    let k = spec.intrinsics();
    let n = spec.frames;
    let (w, h) = (spec.width, spec.height);

    let c2w: Vec<Pose> = (0..n).map(|t| camera_to_world(spec, t, &path_phases)).collect();
    let centers: Vec<Vector3<f64>> = c2w.iter().map(|p| p.translation).collect();
    if trajectory_extent(&centers) <= 1e-9 {
        return Err(Error::DegenerateTrajectory("camera path has zero extent".into()));
    }
    let poses: Vec<Pose> = c2w.iter().map(Pose::inverse).collect();

    let disk = (spec.dynamic_radius > 0.0).then_some(Disk {
        center: [w as f64 * 0.3, h as f64 * 0.5],
        velocity: spec.dynamic_velocity,
        radius: spec.dynamic_radius,
    });

    // per-frame bias field phases and noise seeds, drawn sequentially
    let bias_phases: Vec<[f64; 2]> = {
        let p0 = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        let drift = [rng.random_range(0.02..0.06), rng.random_range(0.02..0.06)];
        (0..n)
            .map(|t| [p0[0] + drift[0] * t as f64, p0[1] + drift[1] * t as f64])
            .collect()
    };
    let noise_seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();

    struct Rendered {
        depth: Raster<f64>,
        image: Raster<f64>,
        mask: ValidityMask,
        prior: Raster<f64>,
    }
    let rendered: Vec<Rendered> = exec.map_range(n, |t| {
        let mut depth = Raster::filled(w, h, 1, 0.0);
        let mut image = Raster::filled(w, h, 1, 0.0);
        let mut mask = ValidityMask::filled(w, h, true);
        let mut prior = Raster::filled(w, h, 1, 0.0);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seeds[t]);
        let normal = Normal::new(0.0, spec.prior_noise.max(0.0)).ok();
        let [p1, p2] = bias_phases[t];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64, y as f64);
                let (d, p) = world.cast(&poses[t], &k, u, v);
                depth.set(x, y, 0, d);
                let mut albedo = world.albedo(p.x, p.y);
                if let Some(disk) = &disk {
                    if disk.contains(t, u, v, 0.0) {
                        albedo = disk.albedo(t, u, v);
                    }
                    if disk.contains(t, u, v, 1.0) {
                        mask.set(x, y, false);
                    }
                }
                image.set(x, y, 0, albedo.clamp(0.0, 1.0));
                let bias = 1.0 + spec.prior_bias * (PI * u / w as f64 + p1).cos() * (PI * v / h as f64 + p2).cos();
                let noise = match (&normal, spec.prior_noise > 0.0) {
                    (Some(nd), true) => nd.sample(&mut noise_rng),
                    _ => 0.0,
                };
                prior.set(x, y, 0, d * spec.prior_scale * bias * noise.exp());
            }
        }
        Rendered {
            depth,
            image,
            mask,
            prior,
        }
    });

    let flow_between = |a: usize, b: usize, depth: &Raster<f64>| -> FlowField {
        let rel = poses[b].compose(&poses[a].inverse());
        let mut f = FlowField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64, y as f64);
                let dyn_px = disk.as_ref().is_some_and(|dk| dk.contains(a, u, v, 0.0));
                let val = if dyn_px {
                    let s = (b as f64 - a as f64).signum();
                    [s * spec.dynamic_velocity[0], s * spec.dynamic_velocity[1]]
                } else {
                    transfer(&rel, &k, u, v, depth.get(x, y, 0))
                };
                f.set(x, y, val);
            }
        }
        f
    };
    let flows_fwd = exec.map_range(n - 1, |t| flow_between(t, t + 1, &rendered[t].depth));
    let flows_bwd = exec.map_range(n - 1, |t| flow_between(t + 1, t, &rendered[t + 1].depth));

    let mut out = SyntheticScene {
        spec: spec.clone(),
        intrinsics: k,
        world,
        poses,
        depths: Vec::with_capacity(n),
        images: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        prior_depths: Vec::with_capacity(n),
        flows_fwd,
        flows_bwd,
        descriptors: Vec::with_capacity(n),
    };
    for r in rendered {
        out.descriptors.push(descriptor(&r.image));
        out.depths.push(r.depth);
        out.images.push(r.image);
        out.masks.push(r.mask);
        out.prior_depths.push(r.prior);
    }
    Ok(out)
}

impl SyntheticScene {
    pub fn frame_count(&self) -> usize {
        self.images.len()
    }

    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(Pose::center).collect()
    }

    pub fn extent(&self) -> f64 {
        trajectory_extent(&self.camera_centers())
    }

    pub fn oracle(&self) -> OracleFlow {
        OracleFlow {
            intrinsics: self.intrinsics,
            poses: self.poses.clone(),
            depths: self.depths.clone(),
        }
    }

    /// Writes the scene layout plus ground truth. Refuses a non-empty
    /// directory unless `force` is set.
    pub fn write(&self, root: &Path, force: bool) -> Result<Scene> {
        if root.exists() {
            let non_empty = std::fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .next()
                .is_some();
            if non_empty && !force {
                return Err(Error::Config(format!(
                    "{} exists and is not empty (use --force)",
                    root.display()
                )));
            }
        }
        let meta = SceneMeta {
            intrinsics: self.intrinsics,
            frames: self.frame_count(),
            fps: self.spec.fps,
        };
        let scene = Scene::create(root, meta)?;
        let n = self.frame_count();
        for t in 0..n {
            scene.write_image(t, &self.images[t])?;
            scene.write_priors(
                t,
                &FramePriors {
                    depth: self.prior_depths[t].clone(),
                    static_mask: self.masks[t].clone(),
                    descriptor: self.descriptors[t].clone(),
                    flow_fwd: (t + 1 < n).then(|| self.flows_fwd[t].clone()),
                    flow_bwd: (t > 0).then(|| self.flows_bwd[t - 1].clone()),
                },
            )?;
        }
        scene.write_ground_truth(&self.poses, &self.depths)?;
        let spec_path = root.join("gt").join("spec.txt");
        std::fs::write(&spec_path, self.spec.to_text()).map_err(|e| Error::io(&spec_path, e))?;
        Ok(scene)
    }
}

/// Exact flows for arbitrary frame pairs from ground-truth depth and pose.
#[derive(Clone, Debug)]
pub struct OracleFlow {
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
    pub depths: Vec<Raster<f64>>,
}

impl OracleFlow {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let poses = scene.read_gt_poses()?;
        if poses.len() != scene.frame_count() {
            return Err(Error::LengthMismatch(poses.len(), scene.frame_count()));
        }
        let depths = (0..scene.frame_count())
            .map(|i| scene.read_gt_depth(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intrinsics: scene.meta.intrinsics,
            poses,
            depths,
        })
    }
}

impl FlowProvider for OracleFlow {
    fn flow(&self, i: usize, j: usize) -> Result<FlowField> {
        let n = self.poses.len();
        if i >= n || j >= n {
            return Err(Error::FlowProviderMiss(i, j));
        }
        let k = &self.intrinsics;
        let rel = self.poses[j].compose(&self.poses[i].inverse());
        let d = &self.depths[i];
        let mut f = FlowField::zeros(k.width, k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                f.set(x, y, transfer(&rel, k, x as f64, y as f64, d.get(x, y, 0)));
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub mean_residual: f64,
    pub max_residual: f64,
    pub valid_pixels: usize,
}

/// Warps frame `b` into frame `a` with ground-truth depth and pose and
/// measures the photometric L1 residual on valid static pixels of `a`.
pub fn render_pair_consistency_check(scene: &SyntheticScene, a: usize, b: usize) -> Result<ConsistencyReport> {
    let k = &scene.intrinsics;
    let rel = scene.poses[b].compose(&scene.poses[a].inverse());
    let (w, h) = (k.width, k.height);
    let mut flow = FlowField::zeros(w, h);
    let mut proj_valid = ValidityMask::filled(w, h, a == b);
    for y in 0..h {
        for x in 0..w {
            if a == b {
                break;
            }
            let p = rel.transform_point(&backproject([x as f64, y as f64], scene.depths[a].get(x, y, 0), k)?);
            if let Some(px) = k.project(&p) {
                flow.set(x, y, [px[0] - x as f64, px[1] - y as f64]);
                proj_valid.set(x, y, true);
            }
        }
    }
    let (warped, valid) = warp_bilinear(&scene.images[b], &flow)?;
    let valid = valid.and(&proj_valid).and(&scene.masks[a]);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if valid.get(x, y) {
                let r = (warped.get(x, y, 0) - scene.images[a].get(x, y, 0)).abs();
                sum += r;
                max = max.max(r);
                count += 1;
            }
        }
    }
    Ok(ConsistencyReport {
        mean_residual: if count > 0 { sum / count as f64 } else { 0.0 },
        max_residual: max,
        valid_pixels: count,
    })
}

/// Rotation of the camera relative to the first frame, in radians.
pub fn rotation_from_start(poses: &[Pose], t: usize) -> f64 {
    let r: UnitQuaternion<f64> = poses[t].rotation * poses[0].rotation.inverse();
    r.angle()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rigid_flow;
    use crate::keyframing::fb_residual;

    fn small(frames: usize) -> SceneSpec {
        SceneSpec {
            frames,
            width: 48,
            height: 36,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let s = SceneSpec {
            seed: 11,
            trajectory: TrajectoryStyle::Spline,
            prior_noise: 0.01,
            ..SceneSpec::default()
        };
        assert_eq!(SceneSpec::parse(&s.to_text()).unwrap(), s);
        assert!(SceneSpec::parse("bogus = 1").is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let e = generate(&small(1), &Executor::sequential()).unwrap_err();
        assert!(e.to_string().contains("need >= 2 frames"));
        let steep = SceneSpec {
            amplitude: 2.0,
            ..small(4)
        };
        assert!(generate(&steep, &Executor::sequential()).is_err());
        let still = SceneSpec {
            motion_radius: 0.0,
            ..small(4)
        };
        assert!(matches!(
            generate(&still, &Executor::sequential()),
            Err(Error::DegenerateTrajectory(_))
        ));
    }

    #[test]
    fn flows_match_rigid_flow() {
        let s = generate(&small(6), &Executor::sequential()).unwrap();
        for t in 0..5 {
            let (rf, valid) = rigid_flow(&s.depths[t], &s.poses[t], &s.poses[t + 1], &s.intrinsics);
            for (i, (a, b)) in rf.data().iter().zip(s.flows_fwd[t].data()).enumerate() {
                if valid.data()[i] {
                    assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn depth_matches_surface() {
        let s = generate(&small(3), &Executor::sequential()).unwrap();
        let k = s.intrinsics;
        for &(x, y) in &[(0usize, 0usize), (20, 17), (47, 35)] {
            let d = s.depths[1].get(x, y, 0);
            let p = s.poses[1].inverse().transform_point(&(k.ray(x as f64, y as f64) * d));
            assert!((p.z - s.world.height(p.x, p.y)).abs() < 1e-9);
        }
    }

    #[test]
    fn loop_closes() {
        let s = generate(&small(30), &Executor::sequential()).unwrap();
        let c = s.camera_centers();
        assert!((c[0] - c[29]).norm() <= 0.01 * s.extent());
        assert!(rotation_from_start(&s.poses, 29) < 1e-9);
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let a = generate(&small(5), &Executor::sequential()).unwrap();
        let b = generate(&small(5), &Executor::new(3)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.prior_depths, b.prior_depths);
        assert_eq!(a.flows_bwd, b.flows_bwd);
    }

    #[test]
    fn ground_truth_warp_is_photometrically_consistent() {
        let s = generate(&small(8), &Executor::sequential()).unwrap();
        for t in 0..7 {
            let r = render_pair_consistency_check(&s, t, t + 1).unwrap();
            assert!(r.valid_pixels > 0);
            assert!(r.mean_residual <= 5e-3, "pair {t}: {r:?}");
        }
        let same = render_pair_consistency_check(&s, 3, 3).unwrap();
        assert_eq!(same.max_residual, 0.0);
    }

    #[test]
    fn ground_truth_flows_are_fb_consistent() {
        let s = generate(&small(40), &Executor::sequential()).unwrap();
        let (w, h) = (s.intrinsics.width, s.intrinsics.height);
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                if let Some(r) = fb_residual(&s.flows_fwd[1], &s.flows_bwd[1], x, y) {
                    assert!(r <= 1e-3, "({x}, {y}): {r}");
                    checked += 1;
                }
            }
        }
        assert!(checked > w * h / 2);
    }

    #[test]
    fn oracle_matches_adjacent_flows() {
        let s = generate(&small(4), &Executor::sequential()).unwrap();
        let o = s.oracle();
        assert_eq!(o.flow(1, 2).unwrap(), s.flows_fwd[1]);
        assert_eq!(o.flow(2, 1).unwrap(), s.flows_bwd[1]);
        assert!(o
            .flow(0, 0)
            .unwrap()
            .data()
            .iter()
            .all(|f| f[0].abs() < 1e-12 && f[1].abs() < 1e-12));
        assert!(matches!(o.flow(0, 9), Err(Error::FlowProviderMiss(0, 9))));
    }

    #[test]
    fn dynamic_disk_masked() {
        let spec = SceneSpec {
            dynamic_radius: 5.0,
            ..small(3)
        };
        let s = generate(&spec, &Executor::sequential()).unwrap();
        let m = &s.masks[0];
        assert!(!m.get(14, 18));
        assert!(m.get(0, 0));
        assert_eq!(s.flows_fwd[0].get(14, 18), spec.dynamic_velocity);
    }
}
