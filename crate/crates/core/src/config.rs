//! Flat `key = value` pipeline configuration with two presets.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::benchmark::BenchSpec;
use crate::distmodel::{MlpShape, MlpTrainConfig};
use crate::error::{Error, Result};
use crate::refine::MaskParams;
use crate::scoring::{Eq7Mode, ScoreParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Square resize side before cropping; 0 keeps the input size.
    pub resize: usize,
    /// Centered crop side; 0 skips cropping.
    pub crop: usize,
    pub toy_channels: usize,
    pub levels: Vec<usize>,
    pub agg_patch: usize,
    pub d: usize,
    pub emb_fraction: f64,
    pub dist_size: usize,
    /// Random projection width for greedy subsampling; 0 means exact.
    pub projection_dim: usize,
    /// MLP neighborhood side.
    pub neighborhood: usize,
    /// Position histogram window side.
    pub hist_window: usize,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub sched_gamma: f64,
    pub sched_step: usize,
    pub lambda: f64,
    /// Prior threshold; 0 selects half the uniform mass.
    pub tau: f64,
    pub temperature: f64,
    pub sigma: f64,
    pub fuse_ratio: f64,
    pub use_position: bool,
    pub use_neighbor: bool,
    pub eq7_mode: Eq7Mode,
    pub bench: BenchSpec,
    pub refine_samples: usize,
    pub mask: MaskParams,
}

impl PipelineConfig {
    /// Full-scale settings for real backbones and images.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            resize: 512,
            crop: 480,
            toy_channels: 16,
            levels: vec![2, 3],
            agg_patch: 5,
            d: 1024,
            emb_fraction: 0.01,
            dist_size: 2048,
            projection_dim: 128,
            neighborhood: 9,
            hist_window: 9,
            mlp_layers: 10,
            mlp_width: 2048,
            epochs: 15,
            lr: 1e-3,
            batch: 2048,
            sched_gamma: 0.1,
            sched_step: 5,
            lambda: 1.0,
            tau: 0.0,
            temperature: 2.0,
            sigma: 8.0,
            fuse_ratio: 0.1,
            use_position: true,
            use_neighbor: true,
            eq7_mode: Eq7Mode::Voronoi,
            bench: BenchSpec::default(),
            refine_samples: 100,
            mask: MaskParams::default(),
        }
    }

    /// Small settings for the toy extractor and the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            resize: 0,
            crop: 0,
            agg_patch: 1,
            d: 16,
            dist_size: 64,
            projection_dim: 0,
            neighborhood: 5,
            hist_window: 1,
            mlp_layers: 3,
            mlp_width: 64,
            batch: 256,
            refine_samples: 20,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (paper | desk)"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn parse_bool(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        let k = key.trim();
        match k {
            "seed" => {
                self.seed = parse(k, value)?;
                self.bench.seed = self.seed;
            }
            "resize" => self.resize = parse(k, value)?,
            "crop" => self.crop = parse(k, value)?,
            "toy_channels" => self.toy_channels = parse(k, value)?,
            "levels" => {
                self.levels = value
                    .split(',')
                    .map(|s| parse(k, s.trim()))
                    .collect::<Result<_>>()?
            }
            "agg_patch" => self.agg_patch = parse(k, value)?,
            "d" => self.d = parse(k, value)?,
            "emb_fraction" => self.emb_fraction = parse(k, value)?,
            "dist_size" => self.dist_size = parse(k, value)?,
            "projection_dim" => self.projection_dim = parse(k, value)?,
            "neighborhood" => self.neighborhood = parse(k, value)?,
            "hist_window" => self.hist_window = parse(k, value)?,
            "mlp_layers" => self.mlp_layers = parse(k, value)?,
            "mlp_width" => self.mlp_width = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "batch" => self.batch = parse(k, value)?,
            "sched_gamma" => self.sched_gamma = parse(k, value)?,
            "sched_step" => self.sched_step = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "tau" => self.tau = parse(k, value)?,
            "temperature" => self.temperature = parse(k, value)?,
            "sigma" => self.sigma = parse(k, value)?,
            "fuse_ratio" => self.fuse_ratio = parse(k, value)?,
            "use_position" => self.use_position = parse_bool(k, value)?,
            "use_neighbor" => self.use_neighbor = parse_bool(k, value)?,
            "eq7_mode" => self.eq7_mode = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "bench_grid" => self.bench.grid = parse(k, value)?,
            "bench_cell_px" => self.bench.cell_px = parse(k, value)?,
            "bench_core_px" => self.bench.core_px = parse(k, value)?,
            "bench_palette" => self.bench.palette = parse(k, value)?,
            "bench_amplitude" => self.bench.amplitude = parse(k, value)?,
            "bench_noise" => self.bench.noise = parse(k, value)?,
            "bench_train" => self.bench.n_train = parse(k, value)?,
            "bench_test_normal" => self.bench.n_test_normal = parse(k, value)?,
            "bench_test_permute" => self.bench.n_test_permute = parse(k, value)?,
            "bench_test_blob" => self.bench.n_test_blob = parse(k, value)?,
            "refine_samples" => self.refine_samples = parse(k, value)?,
            "mask_patterns_min" => self.mask.n_patterns.0 = parse(k, value)?,
            "mask_patterns_max" => self.mask.n_patterns.1 = parse(k, value)?,
            "mask_scale_min" => self.mask.scale.0 = parse(k, value)?,
            "mask_scale_max" => self.mask.scale.1 = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{k}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let levels: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        let b = &self.bench;
        vec![
            ("seed", self.seed.to_string()),
            ("resize", self.resize.to_string()),
            ("crop", self.crop.to_string()),
            ("toy_channels", self.toy_channels.to_string()),
            ("levels", levels.join(",")),
            ("agg_patch", self.agg_patch.to_string()),
            ("d", self.d.to_string()),
            ("emb_fraction", format!("{:?}", self.emb_fraction)),
            ("dist_size", self.dist_size.to_string()),
            ("projection_dim", self.projection_dim.to_string()),
            ("neighborhood", self.neighborhood.to_string()),
            ("hist_window", self.hist_window.to_string()),
            ("mlp_layers", self.mlp_layers.to_string()),
            ("mlp_width", self.mlp_width.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch", self.batch.to_string()),
            ("sched_gamma", format!("{:?}", self.sched_gamma)),
            ("sched_step", self.sched_step.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("tau", format!("{:?}", self.tau)),
            ("temperature", format!("{:?}", self.temperature)),
            ("sigma", format!("{:?}", self.sigma)),
            ("fuse_ratio", format!("{:?}", self.fuse_ratio)),
            ("use_position", self.use_position.to_string()),
            ("use_neighbor", self.use_neighbor.to_string()),
            ("eq7_mode", self.eq7_mode.to_string()),
            ("bench_grid", b.grid.to_string()),
            ("bench_cell_px", b.cell_px.to_string()),
            ("bench_core_px", b.core_px.to_string()),
            ("bench_palette", b.palette.to_string()),
            ("bench_amplitude", format!("{:?}", b.amplitude)),
            ("bench_noise", format!("{:?}", b.noise)),
            ("bench_train", b.n_train.to_string()),
            ("bench_test_normal", b.n_test_normal.to_string()),
            ("bench_test_permute", b.n_test_permute.to_string()),
            ("bench_test_blob", b.n_test_blob.to_string()),
            ("refine_samples", self.refine_samples.to_string()),
            ("mask_patterns_min", self.mask.n_patterns.0.to_string()),
            ("mask_patterns_max", self.mask.n_patterns.1.to_string()),
            ("mask_scale_min", format!("{:?}", self.mask.scale.0)),
            ("mask_scale_max", format!("{:?}", self.mask.scale.1)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn from_text(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.crop > 0 && self.resize > 0 && self.crop > self.resize {
            return bad("crop must not exceed resize");
        }
        if self.levels.is_empty() || self.toy_channels == 0 {
            return bad("levels and toy_channels must be non-empty");
        }
        if self.agg_patch % 2 == 0 || self.d == 0 {
            return bad("agg_patch must be odd and d positive");
        }
        if !(self.emb_fraction > 0.0 && self.emb_fraction <= 1.0) || self.dist_size == 0 {
            return bad("emb_fraction must lie in (0, 1] and dist_size be positive");
        }
        if self.neighborhood % 2 == 0 || self.neighborhood < 3 {
            return bad("neighborhood must be odd and at least 3");
        }
        if self.hist_window % 2 == 0 {
            return bad("hist_window must be odd");
        }
        if self.mlp_layers == 0 || self.mlp_width == 0 {
            return bad("mlp_layers and mlp_width must be positive");
        }
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lambda > 0.0) || !(self.temperature > 0.0) || !(self.sigma >= 0.0) || self.tau < 0.0 {
            return bad("lambda and temperature must be positive, sigma and tau nonnegative");
        }
        if !(0.0..=1.0).contains(&self.fuse_ratio) {
            return bad("fuse_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn train_config(&self) -> MlpTrainConfig {
        MlpTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            sched_gamma: self.sched_gamma,
            sched_step: self.sched_step,
            seed: self.seed,
        }
    }

    pub fn mlp_shape(&self) -> MlpShape {
        MlpShape {
            layers: self.mlp_layers,
            width: self.mlp_width,
        }
    }

    /// Scoring parameters for a distribution coreset of `classes` elements.
    pub fn score_params(&self, classes: usize) -> ScoreParams {
        ScoreParams {
            lambda: self.lambda,
            tau: if self.tau > 0.0 {
                self.tau
            } else {
                1.0 / (2.0 * classes as f64)
            },
            sigma: self.sigma,
            eq7_mode: self.eq7_mode,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::paper()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = PipelineConfig::paper();
        assert_eq!((c.agg_patch, c.d, c.dist_size, c.neighborhood), (5, 1024, 2048, 9));
        assert_eq!((c.mlp_layers, c.mlp_width, c.epochs, c.batch), (10, 2048, 15, 2048));
        assert_eq!((c.resize, c.crop), (512, 480));
        assert_eq!(c.score_params(2048).tau, 1.0 / 4096.0);
        c.validate().unwrap();
        PipelineConfig::desk().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::desk();
        c.apply_text("seed = 7\n# comment\nuse_neighbor = false\nlevels = 2, 3\nlr = 0.0005 # trailing\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.bench.seed, 7);
        assert!(!c.use_neighbor);
        let back = PipelineConfig::from_text(PipelineConfig::paper(), &c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = PipelineConfig::desk();
        assert!(c.apply_text("colour = blue").is_err());
        assert!(c.apply_text("d = many").is_err());
        assert!(c.apply_text("just words").is_err());
        assert!(PipelineConfig::preset("huge").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = PipelineConfig::desk();
        c.agg_patch = 4;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::paper();
        c.crop = 600;
        assert!(c.validate().is_err());
    }
}
