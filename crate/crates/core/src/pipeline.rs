//! End-to-end fitting and scoring: features, coresets, priors and maps.

use std::fs;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::coreset::{
    build_memory_bank, kcenter_greedy, DistributionCoreset, EmbeddingCoreset, Provenance, VectorSet,
};
use crate::distmodel::{train_neighborhood_mlp, NeighborhoodMlp, PositionHistogram, PriorModel, TrainReport};
use crate::error::{invalid, shape, Error, Result};
use crate::features::{
    aggregate_patches, merge_hierarchy, preprocess, FeatureExtractor, FeatureHierarchy, FeatureLevel,
    FeatureMap, ToyExtractor,
};
use crate::image::{center_crop, resize_bilinear, RgbImage};
use crate::map::ScoreMap;
use crate::scoring::{full_resolution, score_map, AnomalyMap, ScoreParams, ScoringIndex};
use crate::refine::{composite_anomaly, generate_defect_mask, normalize_map, DefectSample, MaskParams};
use crate::tensorio::{read_index_file, read_tensor_strict, write_index_file, write_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Turns images (or exported hierarchies) into aggregated feature maps.
pub struct FeaturePipeline {
    extractor: Box<dyn FeatureExtractor>,
    resize: usize,
    crop: usize,
    levels: Vec<usize>,
    agg_patch: usize,
    d: usize,
}

impl FeaturePipeline {
    pub fn new(extractor: Box<dyn FeatureExtractor>, cfg: &PipelineConfig) -> Self {
        Self {
            extractor,
            resize: cfg.resize,
            crop: cfg.crop,
            levels: cfg.levels.clone(),
            agg_patch: cfg.agg_patch,
            d: cfg.d,
        }
    }

    /// Pipeline over the built-in toy extractor.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self::new(Box::new(ToyExtractor::new(cfg.seed, cfg.toy_channels)?), cfg))
    }

    pub fn prepare(&self, image: &RgbImage) -> Result<RgbImage> {
        prepare_image(image, self.resize, self.crop)
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        self.extractor.as_ref()
    }

    /// Preprocesses, extracts, merges and aggregates. Also returns the
    /// preprocessed image, whose size is the full-resolution map size.
    pub fn image_features(&self, image: &RgbImage) -> Result<(FeatureMap, RgbImage)> {
        let img = prepare_image(image, self.resize, self.crop)?;
        let hier = self.extractor.extract(&img)?;
        Ok((self.hierarchy_features(&hier)?, img))
    }

    pub fn hierarchy_features(&self, hier: &FeatureHierarchy) -> Result<FeatureMap> {
        let merged = merge_hierarchy(hier, &self.levels)?;
        aggregate_patches(&merged, self.agg_patch, self.d)
    }
}

/// Square resize then centered crop; a zero side skips that step.
pub fn prepare_image(image: &RgbImage, resize: usize, crop: usize) -> Result<RgbImage> {
    match (resize, crop) {
        (0, 0) => Ok(image.clone()),
        (0, c) => center_crop(image, c),
        (r, 0) => resize_bilinear(image, r, r),
        (r, c) => preprocess(image, r, c),
    }
}

/// Path of an exported feature level: `<dir>/<stem>_l<level>.pnit`.
pub fn level_path(dir: &Path, stem: &str, level: usize) -> std::path::PathBuf {
    dir.join(format!("{stem}_l{level}.pnit"))
}

/// Reads an externally exported hierarchy, one PNIT file per level.
pub fn load_hierarchy(dir: impl AsRef<Path>, stem: &str, levels: &[usize]) -> Result<FeatureHierarchy> {
    let dir = dir.as_ref();
    let levels = levels
        .iter()
        .map(|&level| {
            let t = read_tensor_strict(level_path(dir, stem, level))?;
            Ok(FeatureLevel {
                level,
                map: FeatureMap::from_tensor(&t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureHierarchy::new(levels)
}

/// Which prior terms to use at score time, plus the scoring parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSettings {
    pub use_position: bool,
    pub use_neighbor: bool,
    pub params: ScoreParams,
}

/// Score normalization statistics gathered over the training images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
    /// 99th percentile of training image scores.
    pub image_p99: f64,
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Feature map and full-resolution map for one image.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub feature: AnomalyMap,
    pub full: ScoreMap,
}

impl ScoredImage {
    pub fn image_score(&self) -> f64 {
        self.feature.image_score
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub config: PipelineConfig,
    pub c_emb: EmbeddingCoreset,
    pub c_dist: DistributionCoreset,
    pub histogram: Option<PositionHistogram>,
    pub mlp: Option<NeighborhoodMlp>,
    pub norm: NormStats,
    pub bank_size: usize,
    /// `(channels, height, width)` of the aggregated features.
    pub feature_shape: (usize, usize, usize),
    /// `(height, width)` of the preprocessed images.
    pub input_shape: (usize, usize),
    pub train_report: Option<TrainReport>,
}

/// Embedding coreset size for a bank of `bank` vectors.
pub fn embedding_size(bank: usize, fraction: f64) -> usize {
    ((bank as f64 * fraction).ceil() as usize).clamp(1, bank.max(1))
}

/// Fits every model from training feature maps. `input_shape` is the
/// preprocessed image size that full-resolution maps are resized to.
pub fn fit(cfg: &PipelineConfig, maps: &[FeatureMap], input_shape: (usize, usize)) -> Result<FittedModel> {
    cfg.validate()?;
    let first = maps.first().ok_or(Error::EmptyTrainingSet)?;
    let feature_shape = (first.channels(), first.height(), first.width());
    if maps
        .iter()
        .any(|m| (m.channels(), m.height(), m.width()) != feature_shape)
    {
        return Err(shape("training feature maps differ in shape"));
    }
    if input_shape.0 == 0 || input_shape.1 == 0 {
        return Err(invalid("input shape must be non-empty"));
    }
    let projection = (cfg.projection_dim > 0).then_some(cfg.projection_dim);

    let bank = build_memory_bank(maps)?;
    let n_emb = embedding_size(bank.len(), cfg.emb_fraction);
    let emb_idx = kcenter_greedy(&bank.vectors, n_emb, cfg.seed, projection)?;
    let c_emb = EmbeddingCoreset::from_bank(&bank, emb_idx)?;
    let n_dist = cfg.dist_size.min(c_emb.len());
    let dist_idx = kcenter_greedy(&c_emb.vectors, n_dist, cfg.seed.wrapping_add(1), projection)?;
    let c_dist = DistributionCoreset::new(&c_emb, dist_idx)?;

    let histogram = if cfg.use_position {
        Some(PositionHistogram::build(maps, &c_dist.vectors, cfg.hist_window)?)
    } else {
        None
    };
    let (mlp, train_report) = if cfg.use_neighbor {
        let (mlp, report) = train_neighborhood_mlp(
            maps,
            &c_dist.vectors,
            cfg.neighborhood,
            cfg.mlp_shape(),
            cfg.temperature,
            &cfg.train_config(),
        )?;
        (Some(mlp), Some(report))
    } else {
        (None, None)
    };

    let mut model = FittedModel {
        config: cfg.clone(),
        c_emb,
        c_dist,
        histogram,
        mlp,
        norm: NormStats {
            min: 0.0,
            max: 1.0,
            image_p99: 0.0,
        },
        bank_size: bank.len(),
        feature_shape,
        input_shape,
        train_report,
    };
    model.norm = model.training_norm(maps)?;
    Ok(model)
}

impl FittedModel {
    /// The settings recorded in the fit configuration.
    pub fn default_settings(&self) -> ScoreSettings {
        ScoreSettings {
            use_position: self.config.use_position,
            use_neighbor: self.config.use_neighbor,
            params: self.config.score_params(self.c_dist.len()),
        }
    }

    /// Default settings with the two prior switches overridden.
    pub fn ablation(&self, use_position: bool, use_neighbor: bool) -> ScoreSettings {
        ScoreSettings {
            use_position,
            use_neighbor,
            ..self.default_settings()
        }
    }

    fn check_features(&self, fm: &FeatureMap) -> Result<()> {
        let got = (fm.channels(), fm.height(), fm.width());
        if got != self.feature_shape {
            return Err(shape(format!(
                "features {got:?} do not match the fitted shape {:?}",
                self.feature_shape
            )));
        }
        Ok(())
    }

    /// Feature-resolution anomaly map.
    pub fn score_features(&self, fm: &FeatureMap, settings: &ScoreSettings) -> Result<AnomalyMap> {
        self.check_features(fm)?;
        let histogram = match (settings.use_position, &self.histogram) {
            (false, _) => None,
            (true, Some(h)) => Some(h),
            (true, None) => return Err(Error::Config("model was fitted without the position histogram".into())),
        };
        let mlp = match (settings.use_neighbor, &self.mlp) {
            (false, _) => None,
            (true, Some(m)) => Some(m),
            (true, None) => return Err(Error::Config("model was fitted without the neighborhood MLP".into())),
        };
        let prior = PriorModel {
            histogram,
            mlp,
            neighborhood: self.config.neighborhood,
            classes: self.c_dist.len(),
        };
        let index = ScoringIndex::new(&self.c_emb.vectors, &self.c_dist)?;
        score_map(fm, &prior, &index, &settings.params)
    }

    /// Feature-resolution map plus its upsampled, smoothed counterpart.
    pub fn score(&self, fm: &FeatureMap, settings: &ScoreSettings) -> Result<ScoredImage> {
        let feature = self.score_features(fm, settings)?;
        let (h, w) = self.input_shape;
        let full = full_resolution(&feature.map, h, w, settings.params.sigma)?;
        Ok(ScoredImage { feature, full })
    }

    fn training_norm(&self, maps: &[FeatureMap]) -> Result<NormStats> {
        let settings = self.default_settings();
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut scores = Vec::with_capacity(maps.len());
        for fm in maps {
            let s = self.score(fm, &settings)?;
            min = min.min(s.full.min());
            max = max.max(s.full.max());
            scores.push(s.image_score());
        }
        Ok(NormStats {
            min,
            max,
            image_p99: percentile(&scores, 99.0),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        let (c, h, w) = self.feature_shape;
        put(
            MODEL_MANIFEST,
            format!(
                "format = {MODEL_FORMAT}\nseed = {}\nfeature_channels = {c}\nfeature_height = {h}\nfeature_width = {w}\n\
                 input_height = {}\ninput_width = {}\nbank_size = {}\nemb_size = {}\ndist_size = {}\n\
                 position_model = {}\nneighbor_model = {}\n",
                self.config.seed,
                self.input_shape.0,
                self.input_shape.1,
                self.bank_size,
                self.c_emb.len(),
                self.c_dist.len(),
                self.histogram.is_some(),
                self.mlp.is_some(),
            ),
        )?;
        put("config.txt", self.config.to_text())?;
        put(
            "norm.txt",
            format!(
                "min = {:?}\nmax = {:?}\nimage_p99 = {:?}\n",
                self.norm.min, self.norm.max, self.norm.image_p99
            ),
        )?;
        if let Some(report) = &self.train_report {
            let losses: Vec<String> = report.epoch_loss.iter().map(|l| format!("{l:?}")).collect();
            put("train_log.txt", format!("steps = {}\nepoch_loss = {}\n", report.steps, losses.join(",")))?;
        }
        write_tensor(dir.join("c_emb.pnit"), &self.c_emb.vectors.to_tensor())?;
        let as_u32 = |v: &[usize]| -> Result<Vec<u32>> {
            v.iter()
                .map(|&i| u32::try_from(i).map_err(|_| invalid("index exceeds u32")))
                .collect()
        };
        let bank_idx = as_u32(&self.c_emb.bank_indices)?;
        let img: Vec<u32> = self.c_emb.provenance.iter().map(|p| p.image).collect();
        let ys: Vec<u32> = self.c_emb.provenance.iter().map(|p| p.y).collect();
        let xs: Vec<u32> = self.c_emb.provenance.iter().map(|p| p.x).collect();
        write_index_file(dir.join("c_emb.idx"), &[&bank_idx, &img, &ys, &xs])?;
        let members = as_u32(&self.c_dist.members)?;
        let voronoi = as_u32(&self.c_dist.voronoi)?;
        write_index_file(dir.join("c_dist.idx"), &[&members, &voronoi])?;
        if let Some(hist) = &self.histogram {
            write_tensor(dir.join("histogram.pnit"), &hist.to_tensor())?;
        }
        if let Some(mlp) = &self.mlp {
            mlp.save(dir)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_key_values(&dir.join(MODEL_MANIFEST))?;
        let get = |key: &str| -> Result<&str> {
            manifest
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::CorruptHeader(format!("model manifest lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::CorruptHeader(format!("model manifest `{key}` is not an integer")))
        };
        if get("format")? != MODEL_FORMAT {
            return Err(Error::CorruptHeader("unsupported model format".into()));
        }
        let cfg_path = dir.join("config.txt");
        let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = PipelineConfig::from_text(PipelineConfig::paper(), &cfg_text)?;

        let vectors = VectorSet::from_tensor(&read_tensor_strict(dir.join("c_emb.pnit"))?)?;
        let emb = read_index_file(dir.join("c_emb.idx"))?;
        if emb.len() != 4 || emb.iter().any(|a| a.len() != vectors.len()) {
            return Err(Error::CorruptHeader("c_emb.idx does not match c_emb.pnit".into()));
        }
        let c_emb = EmbeddingCoreset {
            bank_indices: emb[0].iter().map(|&i| i as usize).collect(),
            provenance: (0..vectors.len())
                .map(|i| Provenance {
                    image: emb[1][i],
                    y: emb[2][i],
                    x: emb[3][i],
                })
                .collect(),
            vectors,
        };
        let dist = read_index_file(dir.join("c_dist.idx"))?;
        if dist.len() != 2 {
            return Err(Error::CorruptHeader("c_dist.idx must hold two arrays".into()));
        }
        let widen = |v: &[u32]| v.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let c_dist = DistributionCoreset::from_parts(&c_emb, widen(&dist[0]), widen(&dist[1]))?;

        let feature_shape = (num("feature_channels")?, num("feature_height")?, num("feature_width")?);
        if feature_shape.0 != c_emb.vectors.dim() {
            return Err(shape("manifest channel count differs from the coreset dimension"));
        }
        let histogram = if get("position_model")? == "true" {
            let t = read_tensor_strict(dir.join("histogram.pnit"))?;
            let hist = PositionHistogram::from_tensor(&t, feature_shape.1, feature_shape.2)?;
            if hist.classes() != c_dist.len() {
                return Err(shape("histogram classes differ from the distribution coreset"));
            }
            Some(hist)
        } else {
            None
        };
        let mlp = if get("neighbor_model")? == "true" {
            Some(NeighborhoodMlp::load(dir)?)
        } else {
            None
        };

        let norm_kv = read_key_values(&dir.join("norm.txt"))?;
        let norm_field = |key: &str| -> Result<f64> {
            norm_kv
                .iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::CorruptHeader(format!("norm.txt lacks `{key}`")))
        };
        let norm = NormStats {
            min: norm_field("min")?,
            max: norm_field("max")?,
            image_p99: norm_field("image_p99")?,
        };
        Ok(Self {
            config,
            c_emb,
            c_dist,
            histogram,
            mlp,
            norm,
            bank_size: num("bank_size")?,
            feature_shape,
            input_shape: (num("input_height")?, num("input_width")?),
            train_report: None,
        })
    }
}

/// Training triples for an external refiner. A seeded color texture is
/// pasted into a clean image through a random defect mask; the composite is
/// scored and its map normalized with the training statistics.
pub fn synthesize_defects(
    model: &FittedModel,
    features: &FeaturePipeline,
    clean: &[RgbImage],
    count: usize,
    mask_params: &MaskParams,
    seed: u64,
) -> Result<Vec<DefectSample>> {
    if clean.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DEFECT_STREAM);
    let settings = model.default_settings();
    let (lo, hi) = if model.norm.min < model.norm.max {
        (model.norm.min, model.norm.max)
    } else {
        (model.norm.min, model.norm.min + 1.0)
    };
    (0..count)
        .map(|i| {
            let base = &clean[i % clean.len()];
            let (_, pre) = features.image_features(base)?;
            let (h, w) = (pre.height(), pre.width());
            let mask = generate_defect_mask(&mut rng, h, w, mask_params)?;
            let tint: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let mut texture = RgbImage::filled(h, w, tint);
            for y in 0..h {
                for x in 0..w {
                    for (c, &t) in tint.iter().enumerate() {
                        texture.set(y, x, c, (t + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0));
                    }
                }
            }
            let image = composite_anomaly(&pre, &texture, &mask)?;
            let (fm, _) = features.image_features(&image)?;
            let scored = model.score(&fm, &settings)?;
            DefectSample::new(image, mask, normalize_map(&scored.full, lo, hi)?)
        })
        .collect()
}

const DEFECT_STREAM: u64 = 3 << 32;

pub const MODEL_MANIFEST: &str = "manifest.txt";
const MODEL_FORMAT: &str = "pni-model-1";

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}
