//! Scene directory layout.
//!
//! ```text
//! scene/
//!   frames.meta                     key = value: width, height, fx, fy, cx, cy, frames, fps
//!   frames/frame_%06d.gcvdr         grayscale image in [0, 1]
//!   priors/depth_%06d.gcvdr         prior depth (arbitrary scale)
//!   priors/flow_fwd_%06d.gcvdr      flow t -> t+1 (frames 0..N-2)
//!   priors/flow_bwd_%06d.gcvdr      flow t -> t-1 (frames 1..N-1)
//!   priors/flow_%06d_%06d.gcvdr     optional flow i -> j for arbitrary pairs
//!   priors/mask_%06d.gcvdr          static mask {0, 1}
//!   priors/desc_%06d.gcvdr          descriptor, L x 1 x 1
//!   gt/depth_%06d.gcvdr             optional ground-truth depth
//!   gt/trajectory.txt               optional ground-truth camera-to-world poses
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::io::raster_file::{read_raster, write_raster};
use crate::io::trajectory::{read_trajectory, write_trajectory, Stamped};
use crate::raster::{FlowField, Raster, ValidityMask};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub intrinsics: Intrinsics,
    pub frames: usize,
    pub fps: f64,
}

impl SceneMeta {
    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        format!(
            "# gcvd scene\nwidth = {}\nheight = {}\nfx = {}\nfy = {}\ncx = {}\ncy = {}\nframes = {}\nfps = {}\n",
            k.width, k.height, k.fx, k.fy, k.cx, k.cy, self.frames, self.fps
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |key: &str| -> Result<&str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Scene(format!("frames.meta missing key `{key}`")))
        };
        let f = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|e| Error::Scene(format!("frames.meta `{key}`: {e}")))
        };
        let u = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|e| Error::Scene(format!("frames.meta `{key}`: {e}")))
        };
        let intrinsics = Intrinsics::new(f("fx")?, f("fy")?, f("cx")?, f("cy")?, u("width")?, u("height")?)
            .map_err(|e| Error::Scene(e.to_string()))?;
        let fps = if kv.contains_key("fps") { f("fps")? } else { 30.0 };
        Ok(Self {
            intrinsics,
            frames: u("frames")?,
            fps,
        })
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        i as f64 / self.fps
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Per-frame prior bundle.
#[derive(Clone, Debug)]
pub struct FramePriors {
    pub depth: Raster<f64>,
    pub static_mask: ValidityMask,
    pub descriptor: Vec<f64>,
    pub flow_fwd: Option<FlowField>,
    pub flow_bwd: Option<FlowField>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    root: PathBuf,
    pub meta: SceneMeta,
}

fn frame_file(dir: &str, stem: &str, i: usize) -> PathBuf {
    PathBuf::from(dir).join(format!("{stem}_{i:06}.gcvdr"))
}

impl Scene {
    pub fn create(root: &Path, meta: SceneMeta) -> Result<Self> {
        for d in ["frames", "priors"] {
            fs::create_dir_all(root.join(d)).map_err(|e| Error::io(root.join(d), e))?;
        }
        let meta_path = root.join("frames.meta");
        fs::write(&meta_path, meta.to_text()).map_err(|e| Error::io(&meta_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join("frames.meta");
        if !meta_path.exists() {
            return Err(Error::Scene(format!(
                "{} is not a scene directory (no frames.meta)",
                root.display()
            )));
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            meta: SceneMeta::parse(&text)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frame_count(&self) -> usize {
        self.meta.frames
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("frames", "frame", i))
    }
    pub fn depth_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("priors", "depth", i))
    }
    pub fn flow_fwd_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("priors", "flow_fwd", i))
    }
    pub fn flow_bwd_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("priors", "flow_bwd", i))
    }
    pub fn pair_flow_path(&self, i: usize, j: usize) -> PathBuf {
        self.root.join("priors").join(format!("flow_{i:06}_{j:06}.gcvdr"))
    }
    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("priors", "mask", i))
    }
    pub fn desc_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("priors", "desc", i))
    }
    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("gt")
    }
    pub fn gt_depth_path(&self, i: usize) -> PathBuf {
        self.root.join(frame_file("gt", "depth", i))
    }
    pub fn gt_trajectory_path(&self) -> PathBuf {
        self.gt_dir().join("trajectory.txt")
    }
    pub fn has_ground_truth(&self) -> bool {
        self.gt_trajectory_path().exists()
    }

    fn check_size(&self, path: &Path, w: usize, h: usize, c: usize) -> Result<()> {
        let k = &self.meta.intrinsics;
        if w != k.width || h != k.height || c == 0 {
            return Err(Error::Scene(format!(
                "{}: size {}x{}x{} does not match scene {}x{}",
                path.display(),
                w,
                h,
                c,
                k.width,
                k.height
            )));
        }
        Ok(())
    }

    fn read_sized(&self, path: &Path, channels: usize) -> Result<Raster<f32>> {
        let r = read_raster(path)?;
        self.check_size(path, r.width(), r.height(), r.channels())?;
        if r.channels() != channels {
            return Err(Error::Scene(format!(
                "{}: expected {} channels, found {}",
                path.display(),
                channels,
                r.channels()
            )));
        }
        Ok(r)
    }

    pub fn read_image(&self, i: usize) -> Result<Raster<f64>> {
        Ok(self.read_sized(&self.image_path(i), 1)?.to_f64())
    }

    pub fn read_flow_fwd(&self, i: usize) -> Result<FlowField> {
        FlowField::from_raster(&self.read_sized(&self.flow_fwd_path(i), 2)?)
    }

    pub fn read_flow_bwd(&self, i: usize) -> Result<FlowField> {
        FlowField::from_raster(&self.read_sized(&self.flow_bwd_path(i), 2)?)
    }

    pub fn read_pair_flow(&self, i: usize, j: usize) -> Result<Option<FlowField>> {
        let p = self.pair_flow_path(i, j);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(FlowField::from_raster(&self.read_sized(&p, 2)?)?))
    }

    pub fn read_descriptor(&self, i: usize) -> Result<Vec<f64>> {
        let p = self.desc_path(i);
        let r = read_raster(&p)?;
        let d: Vec<f64> = r.data().iter().map(|&v| f64::from(v)).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if d.is_empty() || (n - 1.0).abs() > 1e-5 {
            return Err(Error::Scene(format!("{}: descriptor norm {n} is not 1", p.display())));
        }
        Ok(d)
    }

    pub fn read_priors(&self, i: usize) -> Result<FramePriors> {
        let depth = self.read_sized(&self.depth_path(i), 1)?.to_f64();
        let static_mask = ValidityMask::from_raster(&self.read_sized(&self.mask_path(i), 1)?)?;
        for (d, &m) in depth.data().iter().zip(static_mask.data()) {
            if m && !(*d > 0.0 && d.is_finite()) {
                return Err(Error::Scene(format!(
                    "{}: non-positive prior depth {d} on a static pixel",
                    self.depth_path(i).display()
                )));
            }
        }
        let n = self.frame_count();
        let flow_fwd = if i + 1 < n { Some(self.read_flow_fwd(i)?) } else { None };
        let flow_bwd = if i > 0 { Some(self.read_flow_bwd(i)?) } else { None };
        Ok(FramePriors {
            depth,
            static_mask,
            descriptor: self.read_descriptor(i)?,
            flow_fwd,
            flow_bwd,
        })
    }

    pub fn write_image(&self, i: usize, img: &Raster<f64>) -> Result<()> {
        write_raster(&img.to_f32(), &self.image_path(i))
    }

    pub fn write_priors(&self, i: usize, p: &FramePriors) -> Result<()> {
        write_raster(&p.depth.to_f32(), &self.depth_path(i))?;
        write_raster(&p.static_mask.to_raster(), &self.mask_path(i))?;
        let d: Vec<f32> = p.descriptor.iter().map(|&v| v as f32).collect();
        write_raster(&Raster::from_vec(d.len(), 1, 1, d)?, &self.desc_path(i))?;
        if let Some(f) = &p.flow_fwd {
            write_raster(&f.to_raster(), &self.flow_fwd_path(i))?;
        }
        if let Some(f) = &p.flow_bwd {
            write_raster(&f.to_raster(), &self.flow_bwd_path(i))?;
        }
        Ok(())
    }

    pub fn write_pair_flow(&self, i: usize, j: usize, f: &FlowField) -> Result<()> {
        write_raster(&f.to_raster(), &self.pair_flow_path(i, j))
    }

    /// Ground-truth poses, world-to-camera.
    pub fn read_gt_poses(&self) -> Result<Vec<Pose>> {
        let t = read_trajectory(&self.gt_trajectory_path())?;
        Ok(t.iter().map(|s| s.pose.inverse()).collect())
    }

    pub fn read_gt_depth(&self, i: usize) -> Result<Raster<f64>> {
        Ok(self.read_sized(&self.gt_depth_path(i), 1)?.to_f64())
    }

    /// Writes ground truth; `poses` are world-to-camera.
    pub fn write_ground_truth(&self, poses: &[Pose], depths: &[Raster<f64>]) -> Result<()> {
        let stamped: Vec<Stamped> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| Stamped {
                timestamp: self.meta.timestamp(i),
                pose: p.inverse(),
            })
            .collect();
        write_trajectory(&stamped, &self.gt_trajectory_path())?;
        for (i, d) in depths.iter().enumerate() {
            write_raster(&d.to_f32(), &self.gt_depth_path(i))?;
        }
        Ok(())
    }
}

/// Summary returned by [`validate_scene`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneCounts {
    pub frames: usize,
    pub depths: usize,
    pub forward_flows: usize,
    pub backward_flows: usize,
    pub masks: usize,
    pub descriptors: usize,
}

/// Checks every file of a scene directory against the format contract.
pub fn validate_scene(root: &Path) -> Result<SceneCounts> {
    let scene = Scene::open(root)?;
    let n = scene.frame_count();
    if n == 0 {
        return Err(Error::Scene("scene has zero frames".into()));
    }
    let mut counts = SceneCounts {
        frames: 0,
        depths: 0,
        forward_flows: 0,
        backward_flows: 0,
        masks: 0,
        descriptors: 0,
    };
    let mut desc_len = None;
    for i in 0..n {
        let img = scene.read_image(i)?;
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Scene(format!("frame {i}: intensity outside [0, 1]")));
        }
        counts.frames += 1;
        let p = scene.read_priors(i)?;
        counts.depths += 1;
        counts.masks += 1;
        counts.descriptors += 1;
        counts.forward_flows += p.flow_fwd.is_some() as usize;
        counts.backward_flows += p.flow_bwd.is_some() as usize;
        for f in [&p.flow_fwd, &p.flow_bwd].into_iter().flatten() {
            if f.data().iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
                return Err(Error::Scene(format!("frame {i}: non-finite flow")));
            }
        }
        match desc_len {
            None => desc_len = Some(p.descriptor.len()),
            Some(l) if l != p.descriptor.len() => {
                return Err(Error::Scene(format!(
                    "frame {i}: descriptor length {} differs from {l}",
                    p.descriptor.len()
                )))
            }
            _ => {}
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trip() {
        let m = SceneMeta {
            intrinsics: Intrinsics::ideal(64, 48),
            frames: 12,
            fps: 30.0,
        };
        assert_eq!(SceneMeta::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn meta_missing_key() {
        let e = SceneMeta::parse("width = 4\nheight = 4\n").unwrap_err();
        assert!(e.to_string().contains("missing key"));
    }

    #[test]
    fn open_rejects_non_scene() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Scene::open(dir.path()), Err(Error::Scene(_))));
    }

    #[test]
    fn key_values_with_comments() {
        let kv = parse_key_values("# c\na = 1 # trailing\n\nb=two\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two");
        assert!(parse_key_values("novalue\n").is_err());
    }
}
