//! Refinement support: synthetic defect masks and samples, the refinement
//! losses, map normalization and fusion, and the refiner interface with its
//! file-based bridge.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape, Error, Result};
use crate::image::RgbImage;
use crate::map::ScoreMap;
use crate::tensorio::{image_to_tensor, read_map, write_map, write_tensor};

pub const BRIDGE_CMD_ENV: &str = "PNI_BRIDGE_CMD";
pub const BRIDGE_INPUT_IMAGE: &str = "input_image.pnit";
pub const BRIDGE_INPUT_MAP: &str = "input_map.pnit";
pub const BRIDGE_OUTPUT_MAP: &str = "refined_map.pnit";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    /// Inclusive range of the number of patterns.
    pub n_patterns: (usize, usize),
    /// Pattern radius range as a fraction of the shorter canvas side.
    pub scale: (f64, f64),
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            n_patterns: (1, 4),
            scale: (0.05, 0.25),
        }
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Union of randomly placed hand-drawn-like blobs. Each blob is a closed
/// polygon whose radius follows a bounded random walk around its center,
/// stretched by a random aspect and scale. Values are exactly 0 or 1.
pub fn generate_defect_mask<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    params: &MaskParams,
) -> Result<ScoreMap> {
    if height < 8 || width < 8 {
        return Err(invalid(format!("{height}x{width} canvas is too small for a defect mask")));
    }
    let (n_lo, n_hi) = params.n_patterns;
    let (s_lo, s_hi) = params.scale;
    if n_lo == 0 || n_lo > n_hi || !(s_lo > 0.0 && s_lo <= s_hi) {
        return Err(invalid("defect mask pattern count and scale ranges must be positive and ordered"));
    }
    let mut mask = ScoreMap::zeros(height, width);
    let side = height.min(width) as f64;
    let step = Normal::new(0.0, 0.15).unwrap();
    for _ in 0..rng.random_range(n_lo..=n_hi) {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let radius = side * rng.random_range(s_lo..=s_hi);
        let aspect: f64 = rng.random_range(0.7..1.4);
        let (ry, rx) = (radius * aspect.sqrt(), radius / aspect.sqrt());
        let rot = rng.random_range(0.0..std::f64::consts::TAU);
        let vertices = rng.random_range(8..=16);
        let mut r: f64 = rng.random_range(0.5..1.0);
        let poly: Vec<(f64, f64)> = (0..vertices)
            .map(|k| {
                let jitter = rng.random_range(-0.3..0.3);
                let theta = (k as f64 + 0.5 + jitter) * std::f64::consts::TAU / vertices as f64;
                r = (r + step.sample(rng)).clamp(0.5, 1.0);
                let (ux, uy) = (r * theta.cos() * rx, r * theta.sin() * ry);
                (
                    cx + ux * rot.cos() - uy * rot.sin(),
                    cy + ux * rot.sin() + uy * rot.cos(),
                )
            })
            .collect();
        let reach = radius * 1.2 + 1.0;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                    mask.set(y, x, 1.0);
                }
            }
        }
        mask.set(cy as usize, cx as usize, 1.0);
    }
    Ok(mask)
}

fn check_binary(mask: &ScoreMap) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("mask must be binary"));
    }
    Ok(())
}

/// Pixels of `defect` where the mask is 1, of `clean` elsewhere.
pub fn composite_anomaly(clean: &RgbImage, defect: &RgbImage, mask: &ScoreMap) -> Result<RgbImage> {
    let (h, w) = (clean.height(), clean.width());
    if (defect.height(), defect.width()) != (h, w) || mask.shape() != (h, w) {
        return Err(shape("composite inputs differ in size"));
    }
    check_binary(mask)?;
    let mut out = clean.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1.0 {
                for c in 0..3 {
                    out.set(y, x, c, defect.get(y, x, c));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineLoss {
    pub reg: f64,
    pub grad: f64,
    pub total: f64,
}

/// Forward differences along rows (`vertical`) or columns, last one zero.
fn forward_diff(m: &ScoreMap, vertical: bool) -> Vec<f64> {
    let (h, w) = m.shape();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = if vertical && y + 1 < h {
                m.get(y + 1, x) - m.get(y, x)
            } else if !vertical && x + 1 < w {
                m.get(y, x + 1) - m.get(y, x)
            } else {
                0.0
            };
        }
    }
    out
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn refine_loss(refined: &ScoreMap, target: &ScoreMap) -> Result<RefineLoss> {
    refined.ensure_same_shape(target, "refined map")?;
    let n = (refined.height() * refined.width()) as f64;
    let reg = l2_diff(refined.data(), target.data()) / n;
    let grad = (l2_diff(&forward_diff(refined, true), &forward_diff(target, true))
        + l2_diff(&forward_diff(refined, false), &forward_diff(target, false)))
        / n;
    Ok(RefineLoss {
        reg,
        grad,
        total: reg + grad,
    })
}

/// Min-max normalization into `[0, 1]` with clamping.
pub fn normalize_map(map: &ScoreMap, min: f64, max: f64) -> Result<ScoreMap> {
    if !(min < max) {
        return Err(invalid(format!("normalization needs min < max, got [{min}, {max}]")));
    }
    let span = max - min;
    Ok(map.map(|v| ((v - min) / span).clamp(0.0, 1.0)))
}

/// `(1 - ratio) * estimate + ratio * refined`.
pub fn fuse_refined(estimate: &ScoreMap, refined: &ScoreMap, ratio: f64) -> Result<ScoreMap> {
    estimate.ensure_same_shape(refined, "refined map")?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("fusion ratio {ratio} outside [0, 1]")));
    }
    let data = estimate
        .data()
        .iter()
        .zip(refined.data())
        .map(|(a, b)| (1.0 - ratio) * a + ratio * b)
        .collect();
    ScoreMap::new(estimate.height(), estimate.width(), data)
}

pub trait Refiner {
    fn name(&self) -> &str;
    fn refine(&self, image: &RgbImage, estimate: &ScoreMap) -> Result<ScoreMap>;
}

/// Passes the estimate through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn name(&self) -> &str {
        "identity"
    }

    fn refine(&self, _image: &RgbImage, estimate: &ScoreMap) -> Result<ScoreMap> {
        Ok(estimate.clone())
    }
}

/// Runs an external command over a bridge directory: the image and map are
/// written as PNIT, the command is invoked with the directory as its last
/// argument, and the refined map is read back.
#[derive(Debug, Clone)]
pub struct FileBridgeRefiner {
    pub command: String,
    pub bridge_dir: PathBuf,
}

impl FileBridgeRefiner {
    pub fn new(command: impl Into<String>, bridge_dir: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            bridge_dir: bridge_dir.into(),
        }
    }

    /// Configured from `PNI_BRIDGE_CMD`, if set and non-empty.
    pub fn from_env(bridge_dir: impl Into<PathBuf>) -> Option<Self> {
        std::env::var(BRIDGE_CMD_ENV)
            .ok()
            .filter(|c| !c.trim().is_empty())
            .map(|c| Self::new(c, bridge_dir))
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Refiner {
            name: self.name().into(),
            message: message.into(),
        }
    }
}

impl Refiner for FileBridgeRefiner {
    fn name(&self) -> &str {
        "bridge"
    }

    fn refine(&self, image: &RgbImage, estimate: &ScoreMap) -> Result<ScoreMap> {
        let dir = &self.bridge_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(dir.join(BRIDGE_INPUT_IMAGE), &image_to_tensor(image))?;
        write_map(dir.join(BRIDGE_INPUT_MAP), estimate)?;
        let out_path = dir.join(BRIDGE_OUTPUT_MAP);
        if out_path.exists() {
            fs::remove_file(&out_path).map_err(|e| Error::io(&out_path, e))?;
        }
        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$1\"", self.command))
            .arg("sh")
            .arg(dir)
            .status()
            .map_err(|e| self.fail(format!("could not start `{}`: {e}", self.command)))?;
        if !status.success() {
            return Err(self.fail(format!("`{}` exited with {status}", self.command)));
        }
        if !out_path.exists() {
            return Err(self.fail(format!("no {BRIDGE_OUTPUT_MAP} in {}", dir.display())));
        }
        read_map(&out_path).map_err(|e| self.fail(e.to_string()))
    }
}

/// Runs a refiner on a normalized estimate and validates its output.
pub fn apply_refiner(refiner: &dyn Refiner, image: &RgbImage, estimate: &ScoreMap) -> Result<ScoreMap> {
    if (image.height(), image.width()) != estimate.shape() {
        return Err(shape("refiner image and map differ in size"));
    }
    if estimate.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("refiner input map must be normalized to [0, 1]"));
    }
    let out = refiner.refine(image, estimate).map_err(|e| match e {
        e @ Error::Refiner { .. } => e,
        e => Error::Refiner {
            name: refiner.name().into(),
            message: e.to_string(),
        },
    })?;
    if out.shape() != estimate.shape() {
        return Err(Error::Refiner {
            name: refiner.name().into(),
            message: format!("returned a {:?} map for a {:?} input", out.shape(), estimate.shape()),
        });
    }
    if !out.is_finite() {
        return Err(Error::Refiner {
            name: refiner.name().into(),
            message: "returned non-finite values".into(),
        });
    }
    Ok(out)
}

/// Training triple for the refinement network.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSample {
    pub image: RgbImage,
    pub mask: ScoreMap,
    pub estimate: ScoreMap,
}

impl DefectSample {
    pub fn new(image: RgbImage, mask: ScoreMap, estimate: ScoreMap) -> Result<Self> {
        let dims = (image.height(), image.width());
        if mask.shape() != dims || estimate.shape() != dims {
            return Err(shape("defect sample parts differ in size"));
        }
        check_binary(&mask)?;
        if estimate.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("defect sample estimate must lie in [0, 1]"));
        }
        Ok(Self {
            image,
            mask,
            estimate,
        })
    }

    /// Writes `<stem>_image.pnit`, `<stem>_mask.pnit`, `<stem>_estimate.pnit`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_tensor(dir.join(format!("{stem}_image.pnit")), &image_to_tensor(&self.image))?;
        write_map(dir.join(format!("{stem}_mask.pnit")), &self.mask)?;
        write_map(dir.join(format!("{stem}_estimate.pnit")), &self.estimate)
    }
}
