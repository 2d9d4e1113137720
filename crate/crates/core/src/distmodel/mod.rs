//! Conditional prior over distribution coreset elements: a per-position
//! histogram and a neighborhood MLP, averaged.

mod histogram;
mod mlp;

pub use histogram::PositionHistogram;
pub use mlp::{
    mlp_forward, softmax_with_temperature, BatchNorm, DenseSamples, HiddenLayer, Linear,
    MlpShape, MlpTrainConfig, NeighborhoodMlp, SampleSource, TrainReport, BN_EPS, BN_MOMENTUM,
};

use crate::coreset::{nearest_unchecked, VectorSet};
use crate::error::{invalid, shape, Error, Result};
use crate::features::FeatureMap;

fn check_neighborhood(p: usize) -> Result<()> {
    if p % 2 == 0 {
        return Err(invalid(format!("neighborhood size must be odd, got {p}")));
    }
    if p == 1 {
        return Err(invalid("a 1x1 neighborhood has no neighbors to condition on"));
    }
    Ok(())
}

/// Input width of the neighborhood vector for `p x p` windows over `d`-dim
/// features.
pub fn neighborhood_width(p: usize, d: usize) -> usize {
    (p * p - 1) * d
}

/// Writes the neighbors of `(y, x)` in row-major window order, center
/// skipped, out-of-bounds slots zero.
pub(crate) fn fill_neighborhood(fm: &FeatureMap, y: usize, x: usize, p: usize, out: &mut [f64]) {
    let d = fm.channels();
    let r = (p / 2) as isize;
    let mut slot = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            let dst = &mut out[slot * d..(slot + 1) * d];
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= fm.height() as isize || xx >= fm.width() as isize {
                dst.fill(0.0);
            } else {
                for (c, v) in dst.iter_mut().enumerate() {
                    *v = fm.get(c, yy as usize, xx as usize) as f64;
                }
            }
            slot += 1;
        }
    }
}

/// Concatenated features of the `p * p - 1` neighbors of `(y, x)`.
pub fn neighborhood_vector(fm: &FeatureMap, y: usize, x: usize, p: usize) -> Result<Vec<f32>> {
    check_neighborhood(p)?;
    if y >= fm.height() || x >= fm.width() {
        return Err(invalid(format!("position ({y}, {x}) outside the feature map")));
    }
    let mut out = vec![0.0; neighborhood_width(p, fm.channels())];
    fill_neighborhood(fm, y, x, p, &mut out);
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Nearest distribution coreset element for every position, row-major.
pub fn label_map(fm: &FeatureMap, c_dist: &VectorSet) -> Result<Vec<u32>> {
    if c_dist.is_empty() {
        return Err(Error::EmptySet);
    }
    if fm.channels() != c_dist.dim() {
        return Err(shape(format!(
            "{}-channel features against a {}-d coreset",
            fm.channels(),
            c_dist.dim()
        )));
    }
    Ok(fm
        .position_major()
        .chunks_exact(fm.channels())
        .map(|v| nearest_unchecked(v, c_dist).0 as u32)
        .collect())
}

/// Every position of every training map, labelled by the nearest
/// distribution coreset element of its own feature.
pub struct NeighborhoodSamples<'a> {
    maps: &'a [FeatureMap],
    labels: Vec<Vec<u32>>,
    p: usize,
    per_map: usize,
}

impl<'a> NeighborhoodSamples<'a> {
    pub fn new(maps: &'a [FeatureMap], c_dist: &VectorSet, p: usize) -> Result<Self> {
        check_neighborhood(p)?;
        let first = maps.first().ok_or(Error::EmptyTrainingSet)?;
        let (h, w) = (first.height(), first.width());
        if maps.iter().any(|m| (m.height(), m.width()) != (h, w)) {
            return Err(shape("training feature maps differ in size"));
        }
        let labels = maps
            .iter()
            .map(|m| label_map(m, c_dist))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            maps,
            labels,
            p,
            per_map: h * w,
        })
    }

    pub fn labels(&self) -> &[Vec<u32>] {
        &self.labels
    }
}

impl SampleSource for NeighborhoodSamples<'_> {
    fn len(&self) -> usize {
        self.maps.len() * self.per_map
    }

    fn dim(&self) -> usize {
        neighborhood_width(self.p, self.maps[0].channels())
    }

    fn fill(&self, index: usize, out: &mut [f64]) {
        let m = &self.maps[index / self.per_map];
        let pos = index % self.per_map;
        fill_neighborhood(m, pos / m.width(), pos % m.width(), self.p, out);
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index / self.per_map][index % self.per_map] as usize
    }
}

pub fn train_neighborhood_mlp(
    maps: &[FeatureMap],
    c_dist: &VectorSet,
    p: usize,
    shape: MlpShape,
    temperature: f64,
    cfg: &MlpTrainConfig,
) -> Result<(NeighborhoodMlp, TrainReport)> {
    let samples = NeighborhoodSamples::new(maps, c_dist, p)?;
    NeighborhoodMlp::train(&samples, c_dist.len(), shape, temperature, cfg)
}

/// Elementwise mean of two distributions.
pub fn combined_prior(position: &[f64], neighbor: &[f64]) -> Result<Vec<f64>> {
    if position.len() != neighbor.len() {
        return Err(shape(format!(
            "priors of length {} and {}",
            position.len(),
            neighbor.len()
        )));
    }
    Ok(position
        .iter()
        .zip(neighbor)
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

/// The prior terms in use. With neither term the prior is uniform.
#[derive(Debug, Clone, Copy)]
pub struct PriorModel<'a> {
    pub histogram: Option<&'a PositionHistogram>,
    pub mlp: Option<&'a NeighborhoodMlp>,
    pub neighborhood: usize,
    pub classes: usize,
}

impl PriorModel<'_> {
    /// Prior vector for every position of `fm`, row-major, `classes` each.
    pub fn prior_map(&self, fm: &FeatureMap) -> Result<Vec<f64>> {
        let (h, w) = (fm.height(), fm.width());
        let n = h * w;
        let k = self.classes;
        let position = match self.histogram {
            Some(hist) => {
                if (hist.height(), hist.width()) != (h, w) || hist.classes() != k {
                    return Err(shape(format!(
                        "{h}x{w} features against a {}x{} histogram of {} classes",
                        hist.height(),
                        hist.width(),
                        hist.classes()
                    )));
                }
                let mut v = Vec::with_capacity(n * k);
                for y in 0..h {
                    for x in 0..w {
                        v.extend(hist.probs(y, x));
                    }
                }
                Some(v)
            }
            None => None,
        };
        let neighbor = match self.mlp {
            Some(mlp) => {
                check_neighborhood(self.neighborhood)?;
                let dim = neighborhood_width(self.neighborhood, fm.channels());
                if mlp.input_dim() != dim || mlp.classes() != k {
                    return Err(shape(format!(
                        "mlp {}->{} does not fit {dim}-wide neighborhoods of {k} classes",
                        mlp.input_dim(),
                        mlp.classes()
                    )));
                }
                let mut x = vec![0.0; n * dim];
                for (i, row) in x.chunks_exact_mut(dim).enumerate() {
                    fill_neighborhood(fm, i / w, i % w, self.neighborhood, row);
                }
                Some(mlp.predict_proba(&x, n)?)
            }
            None => None,
        };
        Ok(match (position, neighbor) {
            (Some(a), Some(b)) => combined_prior(&a, &b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => vec![1.0 / k as f64; n * k],
        })
    }
}
