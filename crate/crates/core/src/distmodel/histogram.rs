use crate::coreset::VectorSet;
use crate::error::{invalid, shape, Error, Result};
use crate::features::FeatureMap;
use crate::tensorio::Tensor;

use super::label_map;

/// Per-position counts of distribution coreset labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionHistogram {
    height: usize,
    width: usize,
    classes: usize,
    counts: Vec<u32>,
}

impl PositionHistogram {
    /// Counts, for every position, the labels found in the clipped
    /// `window x window` neighborhood around it across all label maps.
    pub fn from_label_maps(
        label_maps: &[Vec<u32>],
        height: usize,
        width: usize,
        classes: usize,
        window: usize,
    ) -> Result<Self> {
        if label_maps.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if window % 2 == 0 {
            return Err(invalid(format!("histogram window must be odd, got {window}")));
        }
        if classes == 0 {
            return Err(invalid("histogram needs at least one class"));
        }
        let r = window / 2;
        let mut counts = vec![0u32; height * width * classes];
        for labels in label_maps {
            if labels.len() != height * width {
                return Err(shape("label map size differs from histogram grid"));
            }
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
                return Err(invalid(format!("label {l} outside {classes} classes")));
            }
            for y in 0..height {
                for x in 0..width {
                    let cell = &mut counts[(y * width + x) * classes..][..classes];
                    for yy in y.saturating_sub(r)..=(y + r).min(height - 1) {
                        for xx in x.saturating_sub(r)..=(x + r).min(width - 1) {
                            cell[labels[yy * width + xx] as usize] += 1;
                        }
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            counts,
        })
    }

    pub fn build(maps: &[FeatureMap], c_dist: &VectorSet, window: usize) -> Result<Self> {
        let first = maps.first().ok_or(Error::EmptyTrainingSet)?;
        let (h, w) = (first.height(), first.width());
        let labels = maps
            .iter()
            .map(|m| {
                if (m.height(), m.width()) != (h, w) {
                    return Err(shape("training feature maps differ in size"));
                }
                label_map(m, c_dist)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_label_maps(&labels, h, w, c_dist.len(), window)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self, y: usize, x: usize) -> &[u32] {
        &self.counts[(y * self.width + x) * self.classes..][..self.classes]
    }

    pub fn probs(&self, y: usize, x: usize) -> Vec<f64> {
        let c = self.counts(y, x);
        let total: f64 = c.iter().map(|&v| v as f64).sum();
        c.iter().map(|&v| v as f64 / total).collect()
    }

    /// `(height * width, classes)` tensor of raw counts.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height * self.width, self.classes],
            self.counts.iter().map(|&c| c as f32).collect(),
        )
        .expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor, height: usize, width: usize) -> Result<Self> {
        let classes = match *t.dims() {
            [n, c] if n == height * width => c,
            _ => {
                return Err(shape(format!(
                    "histogram tensor {:?} does not fit a {height}x{width} grid",
                    t.dims()
                )))
            }
        };
        let counts = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as u32)
                } else {
                    Err(invalid(format!("histogram count {v} is not a small nonnegative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let hist = Self {
            height,
            width,
            classes,
            counts,
        };
        for y in 0..height {
            for x in 0..width {
                if hist.counts(y, x).iter().all(|&c| c == 0) {
                    return Err(invalid(format!("histogram cell ({y}, {x}) is empty")));
                }
            }
        }
        Ok(hist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_when_all_labels_agree() {
        let h = PositionHistogram::from_label_maps(&[vec![7; 9]], 3, 3, 10, 3).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let p = h.probs(y, x);
                assert_eq!(p[7], 1.0);
                assert_eq!(p.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn window_one_counts_center_only() {
        let h = PositionHistogram::from_label_maps(&[vec![0, 1], vec![1, 1]], 1, 2, 3, 1).unwrap();
        assert_eq!(h.probs(0, 0), vec![0.5, 0.5, 0.0]);
        assert_eq!(h.probs(0, 1), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn clipped_window_counts() {
        // 2x2 grid, window 3 covers every cell from every position.
        let h = PositionHistogram::from_label_maps(&[vec![0, 1, 2, 3]], 2, 2, 4, 3).unwrap();
        assert_eq!(h.counts(1, 1), &[1, 1, 1, 1]);
    }

    #[test]
    fn errors() {
        assert!(PositionHistogram::from_label_maps(&[], 1, 1, 2, 1).is_err());
        assert!(PositionHistogram::from_label_maps(&[vec![0]], 1, 1, 2, 2).is_err());
        assert!(PositionHistogram::from_label_maps(&[vec![5]], 1, 1, 2, 1).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let h = PositionHistogram::from_label_maps(&[vec![0, 1, 1, 2, 0, 2]], 2, 3, 3, 3).unwrap();
        let back = PositionHistogram::from_tensor(&h.to_tensor(), 2, 3).unwrap();
        assert_eq!(back, h);
        assert!(PositionHistogram::from_tensor(&h.to_tensor(), 3, 3).is_err());
    }
}
