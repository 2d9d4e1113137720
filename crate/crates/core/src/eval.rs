//! Detection and localization metrics.

use crate::error::{invalid, Error, Result};

/// Scores paired with binary labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { scores, labels })
    }

    pub fn from_binary(scores: Vec<f64>, labels: &[u8]) -> Result<Self> {
        if labels.iter().any(|&l| l > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        Self::new(scores, labels.iter().map(|&l| l == 1).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn extend(&mut self, scores: &[f64], labels: &[bool]) -> Result<()> {
        let more = Self::new(scores.to_vec(), labels.to_vec())?;
        self.scores.extend(more.scores);
        self.labels.extend(more.labels);
        Ok(())
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(invalid("both classes must be present"));
        }
        Ok((p, n))
    }

    fn ascending(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        order
    }
}

/// Mann-Whitney AUROC with average ranks for ties.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (p, n) = data.require_both_classes()?;
    let order = data.ascending();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && data.scores[order[j + 1]] == data.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| data.labels[k]).count();
        rank_sum += avg * pos as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr)` from the strictest threshold to the loosest.
pub fn roc_curve(data: &LabeledScores) -> Result<Vec<(f64, f64)>> {
    let (p, n) = data.require_both_classes()?;
    let mut order = data.ascending();
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = data.scores[order[i]];
        while i < order.len() && data.scores[order[i]] == s {
            if data.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Threshold maximizing F1 of the rule `score > threshold`, searched over
/// one value below the minimum and the midpoints between consecutive
/// distinct scores. Lowest threshold wins ties.
pub fn f1_optimal_threshold(data: &LabeledScores) -> Result<(f64, f64)> {
    let total_pos = data.positives();
    if total_pos == 0 {
        return Err(invalid("F1 needs at least one positive"));
    }
    let order = data.ascending();
    let sorted: Vec<f64> = order.iter().map(|&i| data.scores[i]).collect();
    // positives at or after each sorted position
    let mut suffix_pos = vec![0usize; order.len() + 1];
    for k in (0..order.len()).rev() {
        suffix_pos[k] = suffix_pos[k + 1] + data.labels[order[k]] as usize;
    }
    let f1_from = |k: usize| {
        let predicted = order.len() - k;
        let tp = suffix_pos[k];
        2.0 * tp as f64 / (predicted + total_pos) as f64
    };
    let mut best = (sorted[0] - 1.0, f1_from(0));
    for k in 1..sorted.len() {
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let f1 = f1_from(k);
        if f1 > best.1 {
            best = ((sorted[k - 1] + sorted[k]) / 2.0, f1);
        }
    }
    Ok(best)
}

/// `(FPR, FNR)` of the rule `score > threshold`.
pub fn error_rates(data: &LabeledScores, threshold: f64) -> Result<(f64, f64)> {
    let (p, n) = data.require_both_classes()?;
    let (mut fp, mut fn_) = (0usize, 0usize);
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        match (s > threshold, l) {
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok((fp as f64 / n as f64, fn_ as f64 / p as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

/// Per-class counts over `bins` equal-width bins spanning all scores.
pub fn score_histogram(data: &LabeledScores, bins: usize) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let lo = data.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let edges = (0..=bins).map(|i| lo + span * i as f64 / bins as f64).collect();
    let mut normal = vec![0; bins];
    let mut anomalous = vec![0; bins];
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        let b = if span > 0.0 {
            (((s - lo) / span * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        if l {
            anomalous[b] += 1;
        } else {
            normal[b] += 1;
        }
    }
    Ok(ScoreHistogram {
        edges,
        normal,
        anomalous,
    })
}

/// Summary written by the evaluation command.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub f1_threshold: f64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
}

impl EvalReport {
    /// Image AUROC from image scores; pixel AUROC, F1 threshold and error
    /// rates from pooled pixels.
    pub fn compute(images: &LabeledScores, pixels: &LabeledScores) -> Result<Self> {
        let (f1_threshold, f1) = f1_optimal_threshold(pixels)?;
        let (fpr, fnr) = error_rates(pixels, f1_threshold)?;
        Ok(Self {
            image_auroc: auroc(images)?,
            pixel_auroc: auroc(pixels)?,
            f1_threshold,
            f1,
            fpr,
            fnr,
        })
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "image_auroc = {}\npixel_auroc = {}\nf1_threshold = {}\nf1 = {}\nfpr = {}\nfnr = {}\n",
            self.image_auroc, self.pixel_auroc, self.f1_threshold, self.f1, self.fpr, self.fnr
        )
    }
}
