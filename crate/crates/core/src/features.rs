//! Patch-level feature maps: extraction, hierarchy merging and neighborhood
//! aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape, Error, Result};
use crate::image::{center_crop, resize_bilinear, resize_planes, RgbImage};
use crate::tensorio::Tensor;

/// Dense `(channels, height, width)` feature tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("feature map needs at least one channel"));
        }
        if data.len() != channels * height * width {
            return Err(shape(format!(
                "({channels}, {height}, {width}) feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector at one position.
    pub fn vector_at(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    /// All position vectors, row-major over `(y, x)`, each `channels` long.
    pub fn position_major(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            let plane = &self.data[c * n..(c + 1) * n];
            for (i, &v) in plane.iter().enumerate() {
                out[i * self.channels + c] = v;
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            [1, c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(shape(format!(
                "expected a (C, H, W) feature tensor, got {:?}",
                t.dims()
            ))),
        }
    }
}

/// One level `j` of a hierarchical feature stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub level: usize,
    pub map: FeatureMap,
}

/// Feature maps from several depths of one extractor, shallowest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHierarchy {
    levels: Vec<FeatureLevel>,
}

impl FeatureHierarchy {
    pub fn new(levels: Vec<FeatureLevel>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(invalid("a feature hierarchy needs at least two levels"));
        }
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.level <= a.level {
                return Err(invalid("hierarchy levels must be strictly increasing"));
            }
            if b.map.height > a.map.height || b.map.width > a.map.width {
                return Err(invalid(format!(
                    "level {} is spatially larger than level {}",
                    b.level, a.level
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn level(&self, id: usize) -> Option<&FeatureMap> {
        self.levels.iter().find(|l| l.level == id).map(|l| &l.map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelDescriptor {
    pub level: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Anything that turns an image into a feature hierarchy. Implementations
/// must be deterministic for a given construction seed and input.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn levels(&self) -> Vec<LevelDescriptor>;
    fn extract(&self, image: &RgbImage) -> Result<FeatureHierarchy>;
}

/// Side of the box-filtered grid each toy cell is reduced to.
const TOY_GRID: usize = 4;

/// Lightweight stand-in for a pretrained backbone.
///
/// Level 2 has stride 4 and level 3 stride 8. Each output cell box-filters
/// its `stride x stride` pixel block down to a 4x4 grid per color channel,
/// centers it around mid-gray, applies a fixed seeded Gaussian random
/// projection and clamps the result to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    seed: u64,
    levels: Vec<(LevelDescriptor, Vec<f32>)>,
}

impl ToyExtractor {
    pub const STRIDES: [usize; 2] = [4, 8];

    pub fn new(seed: u64, channels_per_level: usize) -> Result<Self> {
        if channels_per_level == 0 {
            return Err(invalid("toy extractor needs at least one channel per level"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = 3 * TOY_GRID * TOY_GRID;
        let normal = Normal::new(0.0f32, (2.0 / in_dim as f32).sqrt()).unwrap();
        let levels = Self::STRIDES
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let weights = (0..channels_per_level * in_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                (
                    LevelDescriptor {
                        level: i + 2,
                        stride,
                        channels: channels_per_level,
                    },
                    weights,
                )
            })
            .collect();
        Ok(Self { seed, levels })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn extract_level(&self, image: &RgbImage, desc: &LevelDescriptor, weights: &[f32]) -> FeatureMap {
        let s = desc.stride;
        let box_size = s / TOY_GRID;
        let (h, w) = (image.height() / s, image.width() / s);
        let in_dim = 3 * TOY_GRID * TOY_GRID;
        let norm = 1.0 / (box_size * box_size) as f32;
        let mut data = vec![0.0f32; desc.channels * h * w];
        let mut patch = vec![0.0f32; in_dim];
        for cy in 0..h {
            for cx in 0..w {
                for c in 0..3 {
                    for by in 0..TOY_GRID {
                        for bx in 0..TOY_GRID {
                            let mut acc = 0.0;
                            for dy in 0..box_size {
                                for dx in 0..box_size {
                                    acc += image.get(
                                        cy * s + by * box_size + dy,
                                        cx * s + bx * box_size + dx,
                                        c,
                                    );
                                }
                            }
                            patch[(c * TOY_GRID + by) * TOY_GRID + bx] = acc * norm - 0.5;
                        }
                    }
                }
                for (k, row) in weights.chunks_exact(in_dim).enumerate() {
                    let v: f32 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    data[(k * h + cy) * w + cx] = v.clamp(-1.0, 1.0);
                }
            }
        }
        FeatureMap {
            channels: desc.channels,
            height: h,
            width: w,
            data,
        }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn name(&self) -> &str {
        "toy"
    }

    fn levels(&self) -> Vec<LevelDescriptor> {
        self.levels.iter().map(|(d, _)| *d).collect()
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureHierarchy> {
        let coarsest = Self::STRIDES[Self::STRIDES.len() - 1];
        if image.height() < coarsest || image.width() < coarsest {
            return Err(invalid(format!(
                "{}x{} image is smaller than one {coarsest}-pixel stride cell",
                image.height(),
                image.width()
            )));
        }
        let levels = self
            .levels
            .iter()
            .map(|(desc, weights)| FeatureLevel {
                level: desc.level,
                map: self.extract_level(image, desc, weights),
            })
            .collect();
        FeatureHierarchy::new(levels)
    }
}

/// Bilinear resize to `resize_to x resize_to`, then a centered
/// `crop_to x crop_to` crop.
pub fn preprocess(image: &RgbImage, resize_to: usize, crop_to: usize) -> Result<RgbImage> {
    if crop_to > resize_to {
        return Err(invalid(format!("crop {crop_to} exceeds resize {resize_to}")));
    }
    if crop_to == 0 {
        return Err(invalid("crop size must be positive"));
    }
    let resized = resize_bilinear(image, resize_to, resize_to)?;
    center_crop(&resized, crop_to)
}

/// Concatenate the requested levels along channels after bilinearly resizing
/// every level to the componentwise maximum spatial size.
pub fn merge_hierarchy(hier: &FeatureHierarchy, use_levels: &[usize]) -> Result<FeatureMap> {
    if use_levels.is_empty() {
        return Err(invalid("no levels requested for merging"));
    }
    let mut seen = use_levels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != use_levels.len() {
        return Err(invalid("duplicate level in merge request"));
    }
    let maps = use_levels
        .iter()
        .map(|&id| {
            hier.level(id)
                .ok_or_else(|| invalid(format!("hierarchy has no level {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let h = maps.iter().map(|m| m.height).max().unwrap();
    let w = maps.iter().map(|m| m.width).max().unwrap();
    let channels: usize = maps.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(channels * h * w);
    for m in maps {
        if m.height == h && m.width == w {
            data.extend_from_slice(&m.data);
        } else {
            let src: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
            let up = resize_planes(&src, m.channels, m.height, m.width, h, w);
            data.extend(up.into_iter().map(|v| v as f32));
        }
    }
    FeatureMap::new(channels, h, w, data)
}

/// Channel bin `[start, end)` for adaptive average pooling of `input`
/// channels into `output` bins.
pub(crate) fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Neighborhood aggregation: every position becomes the mean of the clipped
/// `agg_patch x agg_patch` window around it, then channels are adaptively
/// average pooled into `d` contiguous bins.
pub fn aggregate_patches(fm: &FeatureMap, agg_patch: usize, d: usize) -> Result<FeatureMap> {
    if agg_patch % 2 == 0 {
        return Err(invalid(format!("aggregation patch must be odd, got {agg_patch}")));
    }
    if d == 0 {
        return Err(invalid("output dimension must be positive"));
    }
    let (c, h, w) = (fm.channels, fm.height, fm.width);
    let r = agg_patch / 2;
    let n = h * w;

    // Clipped box mean, separable: horizontal sums then vertical sums.
    let mut pooled = vec![0.0f64; c * n];
    let mut rows = vec![0.0f64; n];
    for ch in 0..c {
        let plane = &fm.data[ch * n..(ch + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                rows[y * w + x] = plane[y * w + x0..=y * w + x1]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                let sum: f64 = (y0..=y1).map(|yy| rows[yy * w + x]).sum();
                pooled[ch * n + y * w + x] = sum / count;
            }
        }
    }

    let mut data = Vec::with_capacity(d * n);
    for i in 0..d {
        let (start, end) = adaptive_bin(i, c, d);
        let width = (end - start) as f64;
        for p in 0..n {
            let s: f64 = (start..end).map(|ch| pooled[ch * n + p]).sum();
            data.push((s / width) as f32);
        }
    }
    FeatureMap::new(d, h, w, data)
}
