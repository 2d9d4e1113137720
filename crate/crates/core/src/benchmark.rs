//! Synthetic benchmark whose context anomalies are locally normal.
//!
//! Images are a grid of cells. Every cell carries a textured token core in
//! its top-left corner and mid-gray gutter elsewhere; the token of a cell is
//! fixed by its row band. A permute anomaly swaps the cores of two cells
//! whose tokens never occur near each other, so every local patch still looks
//! normal. A blob anomaly paints an out-of-palette patch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::image::RgbImage;
use crate::map::ScoreMap;
use crate::refine::{generate_defect_mask, MaskParams};
use crate::tensorio::{write_pgm, write_ppm};

/// Plus-cells of the six balanced 2x2 sign patterns.
const PATTERNS: [[(usize, usize); 2]; 6] = [
    [(0, 0), (0, 1)],
    [(1, 0), (1, 1)],
    [(0, 0), (1, 0)],
    [(0, 1), (1, 1)],
    [(0, 0), (1, 1)],
    [(0, 1), (1, 0)],
];

/// Channel subsets carrying the pattern, for palettes beyond six tokens.
const CHANNEL_MASKS: [[bool; 3]; 7] = [
    [true, true, true],
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
];

pub const MAX_PALETTE: usize = PATTERNS.len() * CHANNEL_MASKS.len();

const GUTTER: f32 = 0.5;
const BLOB_COLOR: [f32; 3] = [0.95, 0.8, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Normal,
    Permute,
    Blob,
}

impl SampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Permute => "permute",
            Self::Blob => "blob",
        }
    }
}

impl std::str::FromStr for SampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "permute" => Ok(Self::Permute),
            "blob" => Ok(Self::Blob),
            _ => Err(invalid(format!("unknown sample kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    /// Cells per side.
    pub grid: usize,
    /// Pixels per cell side.
    pub cell_px: usize,
    /// Pixels per token core side.
    pub core_px: usize,
    pub palette: usize,
    /// Deviation of textured pixels from mid-gray.
    pub amplitude: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_permute: usize,
    pub n_test_blob: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            grid: 8,
            cell_px: 8,
            core_px: 4,
            palette: 4,
            amplitude: 0.2,
            noise: 0.02,
            n_train: 60,
            n_test_normal: 16,
            n_test_permute: 12,
            n_test_blob: 12,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn image_px(&self) -> usize {
        self.grid * self.cell_px
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.grid * self.grid < 2 {
            return bad("the grid needs at least two regions".into());
        }
        if self.palette < 2 || self.palette > MAX_PALETTE {
            return bad(format!("palette must hold 2..={MAX_PALETTE} tokens"));
        }
        if self.palette > self.grid {
            return bad(format!("{} tokens do not fit {} row bands", self.palette, self.grid));
        }
        if self.core_px == 0 || self.core_px % 2 != 0 || self.core_px >= self.cell_px {
            return bad("token core must be even and smaller than a cell".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 0.5) {
            return bad("amplitude must lie in (0, 0.5]".into());
        }
        if !(self.noise >= 0.0 && self.noise < 2.0 * self.amplitude) {
            return bad("noise must stay below the token separation".into());
        }
        if self.n_train == 0 {
            return bad("at least one training image is required".into());
        }
        if self.n_test_permute > 0 && eligible_pairs(self).is_empty() {
            return bad("no pair of cells can be swapped without a neighboring token".into());
        }
        Ok(())
    }

    /// Token of every cell, row-major.
    pub fn layout(&self) -> Vec<usize> {
        (0..self.grid * self.grid)
            .map(|i| (i / self.grid) * self.palette / self.grid)
            .collect()
    }
}

/// Tokens present in the 3x3 cell neighborhood of `cell`, itself included.
fn neighborhood_tokens(spec: &BenchSpec, layout: &[usize], cell: usize) -> Vec<usize> {
    let g = spec.grid as isize;
    let (r, c) = ((cell / spec.grid) as isize, (cell % spec.grid) as isize);
    let mut out = Vec::new();
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (rr, cc) = (r + dr, c + dc);
            if rr >= 0 && cc >= 0 && rr < g && cc < g {
                out.push(layout[(rr * g + cc) as usize]);
            }
        }
    }
    out
}

/// Cell pairs `(a, b)`, `a < b`, where neither token occurs around the other.
pub fn eligible_pairs(spec: &BenchSpec) -> Vec<(usize, usize)> {
    let layout = spec.layout();
    let hoods: Vec<Vec<usize>> = (0..layout.len())
        .map(|c| neighborhood_tokens(spec, &layout, c))
        .collect();
    let mut pairs = Vec::new();
    for a in 0..layout.len() {
        for b in a + 1..layout.len() {
            if !hoods[a].contains(&layout[b]) && !hoods[b].contains(&layout[a]) {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSample {
    pub image: RgbImage,
    /// Binary ground truth at image resolution.
    pub mask: ScoreMap,
    pub kind: SampleKind,
}

impl BenchSample {
    pub fn is_anomalous(&self) -> bool {
        self.kind != SampleKind::Normal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchSpec,
    pub train: Vec<RgbImage>,
    pub test: Vec<BenchSample>,
}

fn token_value(token: usize, y: usize, x: usize, channel: usize, amplitude: f32) -> f32 {
    let pattern = &PATTERNS[token % PATTERNS.len()];
    if !CHANNEL_MASKS[token / PATTERNS.len()][channel] {
        return GUTTER;
    }
    if pattern.contains(&(y % 2, x % 2)) {
        GUTTER + amplitude
    } else {
        GUTTER - amplitude
    }
}

/// Noise-free rendering of a token layout.
pub fn render_layout(spec: &BenchSpec, layout: &[usize]) -> RgbImage {
    let side = spec.image_px();
    let mut img = RgbImage::filled(side, side, [GUTTER; 3]);
    let amp = spec.amplitude as f32;
    for (cell, &token) in layout.iter().enumerate() {
        let (y0, x0) = ((cell / spec.grid) * spec.cell_px, (cell % spec.grid) * spec.cell_px);
        for y in 0..spec.core_px {
            for x in 0..spec.core_px {
                for c in 0..3 {
                    img.set(y0 + y, x0 + x, c, token_value(token, y, x, c, amp));
                }
            }
        }
    }
    img
}

fn add_noise(img: &mut RgbImage, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                let v = img.get(y, x, c) + normal.sample(rng) as f32;
                img.set(y, x, c, v);
            }
        }
    }
}

/// Pixels covered by the token core of `cell`.
pub fn core_mask(spec: &BenchSpec, cells: &[usize]) -> ScoreMap {
    let side = spec.image_px();
    let mut mask = ScoreMap::zeros(side, side);
    for &cell in cells {
        let (y0, x0) = ((cell / spec.grid) * spec.cell_px, (cell % spec.grid) * spec.cell_px);
        for y in 0..spec.core_px {
            for x in 0..spec.core_px {
                mask.set(y0 + y, x0 + x, 1.0);
            }
        }
    }
    mask
}

fn blob_params(spec: &BenchSpec) -> MaskParams {
    // Radii of roughly half a cell to one cell.
    let cell_frac = spec.cell_px as f64 / spec.image_px() as f64;
    MaskParams {
        n_patterns: (1, 1),
        scale: (0.5 * cell_frac, cell_frac),
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_benchmark(spec: &BenchSpec) -> Result<Benchmark> {
    spec.validate()?;
    let layout = spec.layout();
    let clean = render_layout(spec, &layout);
    let side = spec.image_px();
    let pairs = eligible_pairs(spec);

    let train = (0..spec.n_train)
        .map(|i| {
            let mut img = clean.clone();
            add_noise(&mut img, spec.noise, &mut sample_rng(spec.seed, i as u64));
            img
        })
        .collect();

    let kinds = std::iter::repeat_n(SampleKind::Normal, spec.n_test_normal)
        .chain(std::iter::repeat_n(SampleKind::Permute, spec.n_test_permute))
        .chain(std::iter::repeat_n(SampleKind::Blob, spec.n_test_blob));
    let mut test = Vec::new();
    for (i, kind) in kinds.enumerate() {
        let mut rng = sample_rng(spec.seed, (1 << 32) + i as u64);
        let (mut img, mask) = match kind {
            SampleKind::Normal => (clean.clone(), ScoreMap::zeros(side, side)),
            SampleKind::Permute => {
                let &(a, b) = pairs.choose(&mut rng).expect("validated");
                let mut swapped = layout.clone();
                swapped.swap(a, b);
                (render_layout(spec, &swapped), core_mask(spec, &[a, b]))
            }
            SampleKind::Blob => {
                let mask = generate_defect_mask(&mut rng, side, side, &blob_params(spec))?;
                let mut img = clean.clone();
                for y in 0..side {
                    for x in 0..side {
                        if mask.get(y, x) == 1.0 {
                            for (c, &v) in BLOB_COLOR.iter().enumerate() {
                                img.set(y, x, c, v);
                            }
                        }
                    }
                }
                (img, mask)
            }
        };
        add_noise(&mut img, spec.noise, &mut rng);
        test.push(BenchSample { image: img, mask, kind });
    }
    Ok(Benchmark {
        spec: *spec,
        train,
        test,
    })
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub kind: String,
    pub label: u8,
    pub image: String,
    /// Empty when there is no mask.
    pub mask: String,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "split\tkind\tlabel\timage\tmask";

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        let mask = if e.mask.is_empty() { "-" } else { &e.mask };
        writeln!(out, "{}\t{}\t{}\t{}\t{}", e.split, e.kind, e.label, e.image, mask).unwrap();
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(invalid("manifest header missing or malformed"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(invalid(format!("manifest row {} has {} fields", i + 1, f.len())));
            }
            let label = match f[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(invalid(format!("manifest row {}: bad label `{other}`", i + 1))),
            };
            Ok(ManifestEntry {
                split: f[0].into(),
                kind: f[1].into(),
                label,
                image: f[3].into(),
                mask: if f[4] == "-" { String::new() } else { f[4].into() },
            })
        })
        .collect()
}

impl Benchmark {
    /// Writes `train/*.ppm`, `test/*.ppm`, `masks/*.pgm` and the manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
        let dir = dir.as_ref();
        for sub in ["train", "test", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::new();
        for (i, img) in self.train.iter().enumerate() {
            let name = format!("train/train_{i:03}.ppm");
            write_ppm(dir.join(&name), img)?;
            entries.push(ManifestEntry {
                split: "train".into(),
                kind: "normal".into(),
                label: 0,
                image: name,
                mask: String::new(),
            });
        }
        for (i, s) in self.test.iter().enumerate() {
            let name = format!("test/test_{i:03}.ppm");
            let mask_name = format!("masks/test_{i:03}.pgm");
            write_ppm(dir.join(&name), &s.image)?;
            let gray: Vec<f32> = s.mask.data().iter().map(|&v| v as f32).collect();
            write_pgm(
                dir.join(&mask_name),
                &crate::image::GrayImage::new(s.mask.height(), s.mask.width(), gray)?,
            )?;
            entries.push(ManifestEntry {
                split: "test".into(),
                kind: s.kind.as_str().into(),
                label: s.is_anomalous() as u8,
                image: name,
                mask: mask_name,
            });
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
        Ok(entries)
    }
}
