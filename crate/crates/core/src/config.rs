//! Run configuration: a flat `key = value` text file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::scene::parse_key_values;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub photo: f64,
    pub flow: f64,
    pub consistency: f64,
    pub gradient: f64,
    pub deform: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 1.0,
            flow: 10.0,
            consistency: 0.5,
            gradient: 0.1,
            deform: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Keyframe movement threshold, in units of the image long side.
    pub keyframe_threshold: f64,
    /// Descriptor cosine similarity needed for association.
    pub similarity_threshold: f64,
    /// Sequential neighbor offsets, sorted ascending.
    pub tau_set: Vec<usize>,
    pub weights: LossWeights,
    pub iters_keyframe: usize,
    pub iters_covisible: usize,
    pub iters_nonkeyframe: usize,
    pub lr_keyframe: f64,
    pub lr_covisible: f64,
    pub lr_nonkeyframe: f64,
    /// Multiplier applied to every learning rate. The base rates are tuned
    /// for network weights; direct per-frame parameters need larger steps.
    pub lr_scale: f64,
    /// Learning rate at the last iteration of a stage, as a fraction of
    /// the initial rate (exponential decay).
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    pub depth_long_side: usize,
    pub mesh_long_side: usize,
    /// Downsampling factor for keyframe-stage losses.
    pub keyframe_loss_scale: usize,
    pub filter_span: usize,
    pub filter_gamma_ratio: f64,
    pub filter_gamma_flow: f64,
    pub pgo_max_iters: usize,
    pub fb_inlier_ratio: f64,
    /// Forward-backward tolerance in pixels; `None` means `max(1, 0.01 * long side)`.
    pub fb_epsilon: Option<f64>,
    pub nms_window: usize,
    pub dynamic_pair_weight: f64,
    pub seed: u64,
    pub threads: usize,
    pub skip_pgo: bool,
    pub no_grad_loss: bool,
    pub no_mesh: bool,
    pub uniform_keyframes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            keyframe_threshold: 0.1,
            similarity_threshold: 0.9,
            tau_set: vec![1, 2, 4, 8],
            weights: LossWeights::default(),
            iters_keyframe: 300,
            iters_covisible: 100,
            iters_nonkeyframe: 100,
            lr_keyframe: 2e-4,
            lr_covisible: 5e-5,
            lr_nonkeyframe: 1e-4,
            lr_scale: 50.0,
            lr_final_fraction: 0.05,
            batch_size: 40,
            depth_long_side: 384,
            mesh_long_side: 17,
            keyframe_loss_scale: 4,
            filter_span: 4,
            filter_gamma_ratio: 2.0,
            filter_gamma_flow: 0.1,
            pgo_max_iters: 100,
            fb_inlier_ratio: 0.5,
            fb_epsilon: None,
            nms_window: 3,
            dynamic_pair_weight: 4.0,
            seed: 0,
            threads: 1,
            skip_pgo: false,
            no_grad_loss: false,
            no_mesh: false,
            uniform_keyframes: false,
        }
    }
}

impl RunConfig {
    /// Largest sequential offset; co-visible pairs must be further apart.
    pub fn alpha(&self) -> usize {
        self.tau_set.iter().copied().max().unwrap_or(1)
    }

    pub fn fb_epsilon_for(&self, long_side: usize) -> f64 {
        self.fb_epsilon.unwrap_or_else(|| (0.01 * long_side as f64).max(1.0))
    }

    /// Loss weights with ablations applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.no_grad_loss {
            w.gradient = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("keyframe_threshold", self.keyframe_threshold),
            ("similarity_threshold", self.similarity_threshold),
            ("lr_keyframe", self.lr_keyframe),
            ("lr_covisible", self.lr_covisible),
            ("lr_nonkeyframe", self.lr_nonkeyframe),
            ("lr_scale", self.lr_scale),
            ("lr_final_fraction", self.lr_final_fraction),
            ("filter_gamma_ratio", self.filter_gamma_ratio),
            ("filter_gamma_flow", self.filter_gamma_flow),
            ("fb_inlier_ratio", self.fb_inlier_ratio),
            ("dynamic_pair_weight", self.dynamic_pair_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let w = &self.weights;
        for (name, v) in [
            ("lambda_photo", w.photo),
            ("lambda_flow", w.flow),
            ("lambda_const", w.consistency),
            ("lambda_grad", w.gradient),
            ("lambda_deform", w.deform),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.tau_set.is_empty() || self.tau_set[0] == 0 || self.tau_set.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "tau_set must be strictly ascending positive offsets, got {:?}",
                self.tau_set
            )));
        }
        if self.batch_size <= self.alpha() {
            return Err(Error::Config(format!(
                "batch_size {} must exceed the largest tau {}",
                self.batch_size,
                self.alpha()
            )));
        }
        if self.mesh_long_side < 2 || self.keyframe_loss_scale == 0 || self.threads == 0 {
            return Err(Error::Config(
                "mesh_long_side >= 2, keyframe_loss_scale >= 1, threads >= 1 required".into(),
            ));
        }
        if self.nms_window.is_multiple_of(2) {
            return Err(Error::Config("nms_window must be odd".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let tau = self.tau_set.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("keyframe_threshold", self.keyframe_threshold.to_string());
        kv("similarity_threshold", self.similarity_threshold.to_string());
        kv("tau_set", tau);
        kv("lambda_photo", w.photo.to_string());
        kv("lambda_flow", w.flow.to_string());
        kv("lambda_const", w.consistency.to_string());
        kv("lambda_grad", w.gradient.to_string());
        kv("lambda_deform", w.deform.to_string());
        kv("iters_keyframe", self.iters_keyframe.to_string());
        kv("iters_covisible", self.iters_covisible.to_string());
        kv("iters_nonkeyframe", self.iters_nonkeyframe.to_string());
        kv("lr_keyframe", self.lr_keyframe.to_string());
        kv("lr_covisible", self.lr_covisible.to_string());
        kv("lr_nonkeyframe", self.lr_nonkeyframe.to_string());
        kv("lr_scale", self.lr_scale.to_string());
        kv("lr_final_fraction", self.lr_final_fraction.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("depth_long_side", self.depth_long_side.to_string());
        kv("mesh_long_side", self.mesh_long_side.to_string());
        kv("keyframe_loss_scale", self.keyframe_loss_scale.to_string());
        kv("filter_span", self.filter_span.to_string());
        kv("filter_gamma_ratio", self.filter_gamma_ratio.to_string());
        kv("filter_gamma_flow", self.filter_gamma_flow.to_string());
        kv("pgo_max_iters", self.pgo_max_iters.to_string());
        kv("fb_inlier_ratio", self.fb_inlier_ratio.to_string());
        kv(
            "fb_epsilon",
            self.fb_epsilon.map_or("auto".to_string(), |v| v.to_string()),
        );
        kv("nms_window", self.nms_window.to_string());
        kv("dynamic_pair_weight", self.dynamic_pair_weight.to_string());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("skip_pgo", self.skip_pgo.to_string());
        kv("no_grad_loss", self.no_grad_loss.to_string());
        kv("no_mesh", self.no_mesh.to_string());
        kv("uniform_keyframes", self.uniform_keyframes.to_string());
        s
    }

    /// Overrides fields of `self` with the pairs in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| Error::Config(format!("`{key}`: cannot parse {v:?}: {e}")))
        }
        match key {
            "keyframe_threshold" => self.keyframe_threshold = p(key, value)?,
            "similarity_threshold" => self.similarity_threshold = p(key, value)?,
            "tau_set" => {
                self.tau_set = value
                    .split(',')
                    .map(|t| p::<usize>(key, t.trim()))
                    .collect::<Result<_>>()?
            }
            "lambda_photo" => self.weights.photo = p(key, value)?,
            "lambda_flow" => self.weights.flow = p(key, value)?,
            "lambda_const" => self.weights.consistency = p(key, value)?,
            "lambda_grad" => self.weights.gradient = p(key, value)?,
            "lambda_deform" => self.weights.deform = p(key, value)?,
            "iters_keyframe" => self.iters_keyframe = p(key, value)?,
            "iters_covisible" => self.iters_covisible = p(key, value)?,
            "iters_nonkeyframe" => self.iters_nonkeyframe = p(key, value)?,
            "lr_keyframe" => self.lr_keyframe = p(key, value)?,
            "lr_covisible" => self.lr_covisible = p(key, value)?,
            "lr_nonkeyframe" => self.lr_nonkeyframe = p(key, value)?,
            "lr_scale" => self.lr_scale = p(key, value)?,
            "lr_final_fraction" => self.lr_final_fraction = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "depth_long_side" => self.depth_long_side = p(key, value)?,
            "mesh_long_side" => self.mesh_long_side = p(key, value)?,
            "keyframe_loss_scale" => self.keyframe_loss_scale = p(key, value)?,
            "filter_span" => self.filter_span = p(key, value)?,
            "filter_gamma_ratio" => self.filter_gamma_ratio = p(key, value)?,
            "filter_gamma_flow" => self.filter_gamma_flow = p(key, value)?,
            "pgo_max_iters" => self.pgo_max_iters = p(key, value)?,
            "fb_inlier_ratio" => self.fb_inlier_ratio = p(key, value)?,
            "fb_epsilon" => self.fb_epsilon = if value == "auto" { None } else { Some(p(key, value)?) },
            "nms_window" => self.nms_window = p(key, value)?,
            "dynamic_pair_weight" => self.dynamic_pair_weight = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "threads" => self.threads = p(key, value)?,
            "skip_pgo" => self.skip_pgo = p(key, value)?,
            "no_grad_loss" => self.no_grad_loss = p(key, value)?,
            "no_mesh" => self.no_mesh = p(key, value)?,
            "uniform_keyframes" => self.uniform_keyframes = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.keyframe_threshold, 0.1);
        assert_eq!(c.similarity_threshold, 0.9);
        assert_eq!(c.tau_set, vec![1, 2, 4, 8]);
        assert_eq!(c.alpha(), 8);
        assert_eq!(
            c.weights,
            LossWeights {
                photo: 1.0,
                flow: 10.0,
                consistency: 0.5,
                gradient: 0.1,
                deform: 0.5
            }
        );
        assert_eq!(
            (c.iters_keyframe, c.iters_covisible, c.iters_nonkeyframe),
            (300, 100, 100)
        );
        assert_eq!((c.lr_keyframe, c.lr_covisible, c.lr_nonkeyframe), (2e-4, 5e-5, 1e-4));
        assert_eq!((c.batch_size, c.depth_long_side, c.mesh_long_side), (40, 384, 17));
        assert_eq!(
            (c.filter_span, c.filter_gamma_ratio, c.filter_gamma_flow),
            (4, 2.0, 0.1)
        );
        assert_eq!(c.pgo_max_iters, 100);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig {
            tau_set: vec![1, 3],
            fb_epsilon: Some(1.5),
            skip_pgo: true,
            ..RunConfig::default()
        };
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        c.apply_text("tau_set = 4,2").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig {
            keyframe_threshold: -1.0,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fb_epsilon_default_rule() {
        let c = RunConfig::default();
        assert_eq!(c.fb_epsilon_for(64), 1.0);
        assert_eq!(c.fb_epsilon_for(384), 3.84);
    }
}
