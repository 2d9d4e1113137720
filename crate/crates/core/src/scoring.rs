//! Conditional likelihood of test features, anomaly maps and their
//! post-processing.

use crate::coreset::{nearest_unchecked, sq_dist, DistributionCoreset, VectorSet};
use crate::distmodel::PriorModel;
use crate::error::{invalid, shape, Error, Result};
use crate::features::FeatureMap;
use crate::image::resize_planes;
use crate::map::ScoreMap;

/// How the embedding coreset member standing in for a distribution coreset
/// element is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Eq7Mode {
    /// Nearest member of the element's Voronoi cell to the test feature.
    #[default]
    Voronoi,
    /// Embedding member nearest to the element itself.
    Literal,
}

impl std::str::FromStr for Eq7Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voronoi" => Ok(Self::Voronoi),
            "literal" => Ok(Self::Literal),
            _ => Err(invalid(format!("unknown eq7 mode `{s}` (voronoi | literal)"))),
        }
    }
}

impl std::fmt::Display for Eq7Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Voronoi => "voronoi",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub lambda: f64,
    pub tau: f64,
    /// Smoothing standard deviation in input pixels.
    pub sigma: f64,
    pub eq7_mode: Eq7Mode,
}

impl ScoreParams {
    /// Default parameters for a distribution coreset of `classes` elements.
    pub fn for_classes(classes: usize) -> Self {
        Self {
            lambda: 1.0,
            tau: 1.0 / (2.0 * classes as f64),
            sigma: 8.0,
            eq7_mode: Eq7Mode::Voronoi,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0 / classes as f64) {
            return Err(invalid(format!(
                "tau must lie in (0, 1/{classes}), got {}",
                self.tau
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[inline]
pub fn threshold_fn(x: f64, tau: f64) -> f64 {
    if x > tau {
        1.0
    } else {
        0.0
    }
}

/// Embedding coreset vectors together with the distribution coreset built on
/// them, plus the per-element stand-ins used in literal mode.
#[derive(Debug, Clone)]
pub struct ScoringIndex<'a> {
    pub c_emb: &'a VectorSet,
    pub c_dist: &'a DistributionCoreset,
    literal: Vec<usize>,
}

impl<'a> ScoringIndex<'a> {
    pub fn new(c_emb: &'a VectorSet, c_dist: &'a DistributionCoreset) -> Result<Self> {
        if c_dist.voronoi.len() != c_emb.len() || c_dist.vectors.dim() != c_emb.dim() {
            return Err(shape("distribution coreset does not belong to this embedding coreset"));
        }
        let literal = c_dist
            .vectors
            .rows()
            .map(|c| nearest_unchecked(c, c_emb).0)
            .collect();
        Ok(Self {
            c_emb,
            c_dist,
            literal,
        })
    }

    pub fn classes(&self) -> usize {
        self.c_dist.len()
    }

    fn check(&self, phi: &[f32], prior: &[f64]) -> Result<()> {
        if phi.len() != self.c_emb.dim() {
            return Err(shape(format!(
                "feature of length {} against {}-d coresets",
                phi.len(),
                self.c_emb.dim()
            )));
        }
        if prior.len() != self.classes() {
            return Err(shape(format!(
                "prior of length {} for {} elements",
                prior.len(),
                self.classes()
            )));
        }
        Ok(())
    }

    /// Smallest distance from `phi` to a stand-in of a surviving element.
    fn min_surviving_distance(&self, phi: &[f32], prior: &[f64], tau: f64, mode: Eq7Mode) -> f64 {
        assert!(
            prior.iter().any(|&p| p > tau),
            "every prior element is at or below the threshold"
        );
        let best = match mode {
            Eq7Mode::Voronoi => self
                .c_emb
                .rows()
                .zip(&self.c_dist.voronoi)
                .filter(|(_, &cell)| prior[cell] > tau)
                .map(|(r, _)| sq_dist(phi, r))
                .fold(f64::INFINITY, f64::min),
            Eq7Mode::Literal => self
                .literal
                .iter()
                .enumerate()
                .filter(|(c, _)| prior[*c] > tau)
                .map(|(_, &i)| sq_dist(phi, self.c_emb.row(i)))
                .fold(f64::INFINITY, f64::min),
        };
        best.sqrt()
    }

    /// Likelihood as the maximum over elements of the thresholded exponential
    /// distance term.
    pub fn feature_likelihood(&self, phi: &[f32], prior: &[f64], params: &ScoreParams) -> Result<f64> {
        self.check(phi, prior)?;
        assert!(
            prior.iter().any(|&p| p > params.tau),
            "every prior element is at or below the threshold"
        );
        let term = |c: usize, member: usize| {
            (-params.lambda * sq_dist(phi, self.c_emb.row(member)).sqrt()).exp()
                * threshold_fn(prior[c], params.tau)
        };
        let best = match params.eq7_mode {
            Eq7Mode::Voronoi => (0..self.c_emb.len())
                .map(|i| term(self.c_dist.voronoi[i], i))
                .fold(0.0, f64::max),
            Eq7Mode::Literal => self
                .literal
                .iter()
                .enumerate()
                .map(|(c, &i)| term(c, i))
                .fold(0.0, f64::max),
        };
        Ok(best)
    }

    /// Negative log-likelihood, evaluated as `lambda` times the surviving
    /// distance.
    pub fn feature_score(&self, phi: &[f32], prior: &[f64], params: &ScoreParams) -> Result<f64> {
        self.check(phi, prior)?;
        Ok(params.lambda * self.min_surviving_distance(phi, prior, params.tau, params.eq7_mode))
    }
}

/// Scores at feature resolution plus the image-level score.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub map: ScoreMap,
    pub image_score: f64,
}

impl AnomalyMap {
    pub fn from_map(map: ScoreMap) -> Self {
        let image_score = map.max();
        Self { map, image_score }
    }
}

pub fn score_map(
    fm: &FeatureMap,
    prior: &PriorModel<'_>,
    index: &ScoringIndex<'_>,
    params: &ScoreParams,
) -> Result<AnomalyMap> {
    let k = index.classes();
    params.validate(k)?;
    if prior.classes != k {
        return Err(shape("prior model and distribution coreset disagree on size"));
    }
    if fm.channels() != index.c_emb.dim() {
        return Err(shape(format!(
            "{}-channel features against {}-d coresets",
            fm.channels(),
            index.c_emb.dim()
        )));
    }
    let priors = prior.prior_map(fm)?;
    let feats = fm.position_major();
    let d = fm.channels();
    let scores = feats
        .chunks_exact(d)
        .zip(priors.chunks_exact(k))
        .map(|(phi, p)| params.lambda * index.min_surviving_distance(phi, p, params.tau, params.eq7_mode))
        .collect();
    Ok(AnomalyMap::from_map(ScoreMap::new(fm.height(), fm.width(), scores)?))
}

/// Half-pixel-center bilinear resize.
pub fn upsample_bilinear(map: &ScoreMap, height: usize, width: usize) -> Result<ScoreMap> {
    if height == 0 || width == 0 {
        return Err(invalid("upsampling target must be at least 1x1"));
    }
    let (h, w) = map.shape();
    if h == 0 || w == 0 {
        return Err(invalid("cannot upsample an empty map"));
    }
    ScoreMap::new(height, width, resize_planes(map.data(), 1, h, w, height, width))
}

/// Normalized Gaussian weights for offsets `-r..=r`, `r = ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Mirror an out-of-range index back into `0..n`, edge sample repeated.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_axis(src: &[f64], dst: &mut [f64], len: usize, count: usize, stride: usize, step: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    for line in 0..count {
        let base = line * stride;
        for i in 0..len {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let j = reflect(i as i64 + k as i64 - r, len);
                acc += wk * src[base + j * step];
            }
            dst[base + i * step] = acc;
        }
    }
}

/// Separable Gaussian smoothing with reflected borders.
pub fn gaussian_smooth(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    if !(sigma >= 0.0) {
        return Err(invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (h, w) = map.shape();
    let mut tmp = vec![0.0; h * w];
    convolve_axis(map.data(), &mut tmp, w, h, w, 1, &kernel);
    let mut out = vec![0.0; h * w];
    convolve_axis(&tmp, &mut out, h, w, 1, w, &kernel);
    ScoreMap::new(h, w, out)
}

/// Upsample a feature-resolution map to the input size, then smooth.
pub fn full_resolution(map: &ScoreMap, height: usize, width: usize, sigma: f64) -> Result<ScoreMap> {
    gaussian_smooth(&upsample_bilinear(map, height, width)?, sigma)
}

pub fn ensemble_average(maps: &[ScoreMap]) -> Result<ScoreMap> {
    let first = maps.first().ok_or(Error::EmptySet)?;
    let mut acc = vec![0.0; first.data().len()];
    for m in maps {
        m.ensure_same_shape(first, "ensemble member")?;
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let k = maps.len() as f64;
    ScoreMap::new(first.height(), first.width(), acc.into_iter().map(|v| v / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::{EmbeddingCoreset, MemoryBank, Provenance};

    fn coresets(points: &[f32], dim: usize, members: Vec<usize>) -> (EmbeddingCoreset, DistributionCoreset) {
        let vectors = VectorSet::new(dim, points.to_vec()).unwrap();
        let n = vectors.len();
        let bank = MemoryBank {
            vectors,
            provenance: vec![Provenance { image: 0, y: 0, x: 0 }; n],
        };
        let emb = EmbeddingCoreset::from_bank(&bank, (0..n).collect()).unwrap();
        let dist = DistributionCoreset::new(&emb, members).unwrap();
        (emb, dist)
    }

    #[test]
    fn threshold_boundaries() {
        let tau = 1.0 / 4096.0;
        assert_eq!(threshold_fn(0.001, tau), 1.0);
        assert_eq!(threshold_fn(tau, tau), 0.0);
        assert_eq!(threshold_fn(0.0, tau), 0.0);
    }

    #[test]
    fn exact_match_has_unit_likelihood() {
        let (emb, dist) = coresets(&[0.0, 0.0, 3.0, 4.0], 2, vec![0, 1]);
        let idx = ScoringIndex::new(&emb.vectors, &dist).unwrap();
        let p = ScoreParams::for_classes(2);
        assert_eq!(idx.feature_likelihood(&[3.0, 4.0], &[0.5, 0.5], &p).unwrap(), 1.0);
        assert_eq!(idx.feature_score(&[3.0, 4.0], &[0.5, 0.5], &p).unwrap(), 0.0);
    }

    #[test]
    fn single_element_half_likelihood() {
        let (emb, dist) = coresets(&[0.0], 1, vec![0]);
        let idx = ScoringIndex::new(&emb.vectors, &dist).unwrap();
        let p = ScoreParams::for_classes(1);
        let phi = [std::f64::consts::LN_2 as f32];
        let l = idx.feature_likelihood(&phi, &[1.0], &p).unwrap();
        assert!((l - 0.5).abs() < 1e-7);
    }

    #[test]
    fn suppressed_cells_are_skipped() {
        // Cells: {0: [0, 1]}, {1: [2]} with points 0, 1, 10.
        let (emb, dist) = coresets(&[0.0, 1.0, 10.0], 1, vec![0, 2]);
        let idx = ScoringIndex::new(&emb.vectors, &dist).unwrap();
        let p = ScoreParams::for_classes(2);
        assert_eq!(idx.feature_score(&[1.0], &[0.9, 0.1], &p).unwrap(), 0.0);
        let s = idx.feature_score(&[1.0], &[0.1, 0.9], &p).unwrap();
        assert_eq!(s, 9.0);
        let literal = ScoreParams { eq7_mode: Eq7Mode::Literal, ..p };
        assert_eq!(idx.feature_score(&[1.0], &[0.9, 0.1], &literal).unwrap(), 1.0);
    }

    #[test]
    fn score_map_max_is_image_score() {
        let m = ScoreMap::new(2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(AnomalyMap::from_map(m).image_score, 0.9);
    }

    #[test]
    fn params_validation() {
        let p = ScoreParams::for_classes(4);
        assert!(p.validate(4).is_ok());
        assert!(ScoreParams { tau: 0.25, ..p }.validate(4).is_err());
        assert!(ScoreParams { lambda: 0.0, ..p }.validate(4).is_err());
        assert!(ScoreParams { sigma: -1.0, ..p }.validate(4).is_err());
    }

    #[test]
    fn upsample_two_by_two() {
        let m = ScoreMap::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&m, 4, 4).unwrap();
        // Source coordinates for 2 -> 4: -0.25, 0.25, 0.75, 1.25, clamped.
        let coord = [0.0, 0.25, 0.75, 1.0];
        for (oy, &sy) in coord.iter().enumerate() {
            for (ox, &sx) in coord.iter().enumerate() {
                let want = 2.0 * sy + sx;
                assert!((up.get(oy, ox) - want).abs() < 1e-12);
            }
        }
        assert_eq!(upsample_bilinear(&m, 2, 2).unwrap(), m);
        assert!(upsample_bilinear(&m, 0, 2).is_err());
    }

    #[test]
    fn kernel_properties() {
        for sigma in [0.5, 1.0, 2.5, 8.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (4.0 * sigma as f64).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn reflect_folds() {
        let idx: Vec<usize> = (-4..8).map(|i| reflect(i, 3)).collect();
        assert_eq!(idx, vec![2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn impulse_response() {
        let k = gaussian_kernel(1.0);
        let mut m = ScoreMap::zeros(21, 21);
        m.set(10, 10, 1.0);
        let s = gaussian_smooth(&m, 1.0).unwrap();
        let c = k[k.len() / 2];
        assert!((s.get(10, 10) - c * c).abs() < 1e-15);
        assert!((s.get(10, 11) - c * k[k.len() / 2 + 1]).abs() < 1e-15);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let m = ScoreMap::filled(5, 9, 2.5);
        let s = gaussian_smooth(&m, 8.0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert_eq!(gaussian_smooth(&m, 0.0).unwrap(), m);
    }

    #[test]
    fn ensemble_cases() {
        let a = ScoreMap::filled(2, 2, 0.0);
        let b = ScoreMap::filled(2, 2, 1.0);
        assert_eq!(ensemble_average(&[a.clone(), b]).unwrap(), ScoreMap::filled(2, 2, 0.5));
        assert_eq!(ensemble_average(&[a.clone()]).unwrap(), a);
        assert!(ensemble_average(&[a, ScoreMap::zeros(1, 2)]).is_err());
        assert!(ensemble_average(&[]).is_err());
    }
}
