use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pni_core::benchmark::{generate_benchmark, parse_manifest, MANIFEST_FILE};
use pni_core::config::PipelineConfig;
use pni_core::eval::{EvalReport, LabeledScores};
use pni_core::features::FeatureMap;
use pni_core::image::RgbImage;
use pni_core::map::ScoreMap;
use pni_core::pipeline::{
    fit, load_hierarchy, prepare_image, read_key_values, synthesize_defects, FeaturePipeline, FittedModel, ScoreSettings,
};
use pni_core::refine::{apply_refiner, fuse_refined, normalize_map, FileBridgeRefiner};
use pni_core::scoring::ensemble_average;
use pni_core::tensorio::{read_gray, read_map, read_rgb, write_map, write_map_image};

const SCORES_FILE: &str = "scores.tsv";
const SCORES_HEADER: &str = "name\timage_score\tlabel\tkind\tmask";
const RUN_FILE: &str = "run.txt";

/// Position and neighborhood conditioned anomaly detection.
#[derive(Parser)]
#[command(name = "pni", version)]
struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings for synth and fit: `desk` or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct FeatureInput {
    /// Read exported `<stem>_l<level>.pnit` feature files instead of images.
    #[arg(long)]
    features: bool,
    /// Preprocessed image size `HxW` that maps are resized to (features only).
    #[arg(long, value_parser = parse_size)]
    input_size: Option<(usize, usize)>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit coresets, the position histogram and the neighborhood MLP.
    Fit {
        /// Dataset directory (its manifest's train split) or a folder of images.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: FeatureInput,
    },
    /// Write anomaly maps, heatmaps and image scores.
    Score {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (its manifest's test split) or a folder of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        features: FeatureInput,
    },
    /// Detection and localization metrics for a score directory.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Dataset holding the masks; defaults to the one recorded at scoring.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report directory; defaults to the score directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average normalized maps from several score directories.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit synthetic image, mask and estimate triples for refiner training.
    RefineData {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (train split) or a folder of clean images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').unwrap_or((s, s));
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size `{s}`"));
    Ok((num(h)?, num(w)?))
}

struct Ctx {
    workdir: PathBuf,
    config: Option<PathBuf>,
    preset: Option<String>,
    set: Vec<String>,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    /// Preset (or `base`), then the config file, then `--set`, then `--seed`.
    fn config(&self, base: Option<PipelineConfig>) -> Result<PipelineConfig> {
        let mut cfg = match (&self.preset, base) {
            (Some(_), Some(_)) => bail!("--preset only applies to synth, fit and refine-data"),
            (Some(name), None) => PipelineConfig::preset(name)?,
            (None, Some(base)) => base,
            (None, None) => PipelineConfig::desk(),
        };
        if let Some(file) = &self.config {
            let path = self.path(file);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One input image (or exported feature set) with its optional labels.
struct Item {
    /// Path relative to the input directory, extension removed.
    stem: String,
    image: String,
    label: Option<u8>,
    kind: String,
    mask: Option<String>,
}

impl Item {
    fn name(&self) -> &str {
        self.stem.rsplit('/').next().unwrap_or(&self.stem)
    }
}

fn strip_ext(p: &str) -> String {
    match p.rsplit_once('.') {
        Some((stem, ext)) if !ext.contains('/') => stem.to_string(),
        _ => p.to_string(),
    }
}

fn list_inputs(dir: &Path, split: &str, features: bool, first_level: usize) -> Result<Vec<Item>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest)?;
        return Ok(parse_manifest(&text)?
            .into_iter()
            .filter(|e| e.split == split)
            .map(|e| Item {
                stem: strip_ext(&e.image),
                label: Some(e.label),
                kind: e.kind,
                mask: (!e.mask.is_empty()).then_some(e.mask),
                image: e.image,
            })
            .collect());
    }
    let suffix = format!("_l{first_level}.pnit");
    let mut items: Vec<Item> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|name| {
            let stem = if features {
                name.strip_suffix(&suffix)?.to_string()
            } else if name.ends_with(".ppm") || name.ends_with(".pgm") {
                strip_ext(&name)
            } else {
                return None;
            };
            Some(Item {
                stem,
                image: name,
                label: None,
                kind: "-".into(),
                mask: None,
            })
        })
        .collect();
    items.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(items)
}

fn load_image(path: &Path) -> Result<RgbImage> {
    let is_gray = path.extension().is_some_and(|e| e == "pgm");
    let img = if is_gray { read_gray(path)?.to_rgb() } else { read_rgb(path)? };
    Ok(img)
}

/// Features for one item plus the preprocessed image when it is available.
fn item_features(
    fp: &FeaturePipeline,
    dir: &Path,
    item: &Item,
    features: bool,
    levels: &[usize],
) -> Result<(FeatureMap, Option<RgbImage>)> {
    if features {
        let hier = load_hierarchy(dir, &item.stem, levels)
            .with_context(|| format!("loading features for {}", item.stem))?;
        let image_path = dir.join(&item.image);
        let image = if image_path.extension().is_some_and(|e| e == "ppm" || e == "pgm") && image_path.exists() {
            Some(fp.prepare(&load_image(&image_path)?)?)
        } else {
            None
        };
        Ok((fp.hierarchy_features(&hier)?, image))
    } else {
        let (fm, pre) = fp
            .image_features(&load_image(&dir.join(&item.image))?)
            .with_context(|| format!("extracting features for {}", item.image))?;
        Ok((fm, Some(pre)))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(ctx: &Ctx, out: &Path) -> Result<()> {
    let cfg = ctx.config(None)?;
    let bench = generate_benchmark(&cfg.bench)?;
    let out = ctx.path(out);
    let entries = bench.write(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} train and {} test images to {} (seed {})",
        bench.train.len(),
        bench.test.len(),
        out.display(),
        cfg.seed
    );
    debug_assert_eq!(entries.len(), bench.train.len() + bench.test.len());
    Ok(())
}

fn cmd_fit(ctx: &Ctx, train: &Path, model_dir: &Path, input: FeatureInput) -> Result<()> {
    let cfg = ctx.config(None)?;
    let train = ctx.path(train);
    let fp = FeaturePipeline::from_config(&cfg)?;
    let items = list_inputs(&train, "train", input.features, cfg.levels[0])?;
    if items.is_empty() {
        bail!("no training inputs in {}", train.display());
    }
    let mut maps = Vec::with_capacity(items.len());
    let mut size = input.input_size;
    for item in &items {
        let (fm, pre) = item_features(&fp, &train, item, input.features, &cfg.levels)?;
        if !input.features {
            size = pre.map(|p| (p.height(), p.width()));
        }
        maps.push(fm);
    }
    let size = size.ok_or_else(|| anyhow!("--input-size is required with --features"))?;
    let model = fit(&cfg, &maps, size)?;
    let model_dir = ctx.path(model_dir);
    model.save(&model_dir)?;
    println!(
        "fitted on {} inputs: bank {}, embedding coreset {}, distribution coreset {}, position {}, neighbor {} (seed {})",
        maps.len(),
        model.bank_size,
        model.c_emb.len(),
        model.c_dist.len(),
        model.histogram.is_some(),
        model.mlp.is_some(),
        cfg.seed
    );
    Ok(())
}

fn load_model(ctx: &Ctx, dir: &Path) -> Result<FittedModel> {
    let dir = ctx.path(dir);
    FittedModel::load(&dir).with_context(|| format!("loading model from {}", dir.display()))
}

struct ScoreRow {
    name: String,
    score: f64,
    label: Option<u8>,
    kind: String,
    mask: Option<String>,
}

fn format_scores(rows: &[ScoreRow]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for r in rows {
        let label = r.label.map_or("-".to_string(), |l| l.to_string());
        writeln!(out, "{}\t{:?}\t{label}\t{}\t{}", r.name, r.score, r.kind, r.mask.as_deref().unwrap_or("-")).unwrap();
    }
    out
}

fn parse_scores(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        bail!("scores file header missing");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                bail!("scores row `{l}` has {} fields", f.len());
            }
            Ok(ScoreRow {
                name: f[0].into(),
                score: f[1].parse().with_context(|| format!("bad score in `{l}`"))?,
                label: match f[2] {
                    "-" => None,
                    v => Some(v.parse().with_context(|| format!("bad label in `{l}`"))?),
                },
                kind: f[3].into(),
                mask: (f[4] != "-").then(|| f[4].to_string()),
            })
        })
        .collect()
}

fn run_field<'a>(run: &'a [(String, String)], key: &str) -> Result<&'a str> {
    run.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| anyhow!("{RUN_FILE} lacks `{key}`"))
}

/// Default configuration carrying the seed recorded in a run file.
fn recorded_seed(run: &[(String, String)]) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::desk();
    cfg.set("seed", run_field(run, "seed")?)?;
    Ok(cfg)
}

fn write_outputs(out: &Path, name: &str, map: &ScoreMap, lo: f64, hi: f64) -> Result<()> {
    write_map(out.join("maps").join(format!("{name}.pnit")), map)?;
    write_map_image(out.join("heatmaps").join(format!("{name}.ppm")), map, lo, hi)?;
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    for sub in ["maps", "heatmaps"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn cmd_score(ctx: &Ctx, model_dir: &Path, input: &Path, out: &Path, feat: FeatureInput) -> Result<()> {
    let model = load_model(ctx, model_dir)?;
    let cfg = ctx.config(Some(model.config.clone()))?;
    let fp = FeaturePipeline::from_config(&model.config)?;
    let settings = ScoreSettings {
        use_position: cfg.use_position,
        use_neighbor: cfg.use_neighbor,
        params: cfg.score_params(model.c_dist.len()),
    };
    let input = ctx.path(input);
    let out = ctx.path(out);
    create_out(&out)?;
    let refiner = FileBridgeRefiner::from_env(out.join("bridge"));
    if let Some(r) = &refiner {
        fs::create_dir_all(&r.bridge_dir)?;
    }
    let (norm_lo, norm_hi) = (model.norm.min, model.norm.max.max(model.norm.min + f64::EPSILON));
    let (out_lo, out_hi) = if refiner.is_some() { (0.0, 1.0) } else { (norm_lo, norm_hi) };

    let items = list_inputs(&input, "test", feat.features, model.config.levels[0])?;
    if items.is_empty() {
        bail!("no inputs in {}", input.display());
    }
    let mut rows = Vec::with_capacity(items.len());
    for item in &items {
        let (fm, pre) = item_features(&fp, &input, item, feat.features, &model.config.levels)?;
        let scored = model.score(&fm, &settings)?;
        let (map, score) = match &refiner {
            Some(r) => {
                let image = pre.ok_or_else(|| anyhow!("the refiner needs the image for {}", item.stem))?;
                let estimate = normalize_map(&scored.full, norm_lo, norm_hi)?;
                let refined = apply_refiner(r, &image, &estimate)?;
                let fused = fuse_refined(&estimate, &refined, cfg.fuse_ratio)?;
                let top = fused.max();
                (fused, top)
            }
            None => {
                let score = scored.image_score();
                (scored.full, score)
            }
        };
        write_outputs(&out, item.name(), &map, out_lo, out_hi)?;
        rows.push(ScoreRow {
            name: item.name().into(),
            score,
            label: item.label,
            kind: item.kind.clone(),
            mask: item.mask.clone(),
        });
    }
    write_text(&out.join(SCORES_FILE), &format_scores(&rows))?;
    let p = &settings.params;
    write_text(
        &out.join(RUN_FILE),
        &format!(
            "seed = {}\ninput = {}\nrefiner = {}\nuse_position = {}\nuse_neighbor = {}\neq7_mode = {}\n\
             lambda = {:?}\ntau = {:?}\nsigma = {:?}\nfuse_ratio = {:?}\nresize = {}\ncrop = {}\n\
             norm_min = {out_lo:?}\nnorm_max = {out_hi:?}\n",
            cfg.seed,
            input.display(),
            refiner.as_ref().map_or("identity", |_| "bridge"),
            settings.use_position,
            settings.use_neighbor,
            p.eq7_mode,
            p.lambda,
            p.tau,
            p.sigma,
            cfg.fuse_ratio,
            model.config.resize,
            model.config.crop,
        ),
    )?;
    println!("scored {} inputs into {} (seed {})", rows.len(), out.display(), cfg.seed);
    Ok(())
}

/// Binary ground truth at the map's resolution.
fn mask_labels(path: &Path, shape: (usize, usize), resize: usize, crop: usize) -> Result<Vec<bool>> {
    let mut img = read_gray(path)?.to_rgb();
    if (img.height(), img.width()) != shape {
        img = prepare_image(&img, resize, crop)?;
    }
    if (img.height(), img.width()) != shape {
        bail!("mask {} does not match the map size", path.display());
    }
    Ok(img.channel(0).iter().map(|&v| v > 0.5).collect())
}

fn cmd_eval(ctx: &Ctx, scores: &Path, dataset: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let scores = ctx.path(scores);
    let rows = parse_scores(&fs::read_to_string(scores.join(SCORES_FILE)).context("reading scores")?)?;
    let run = read_key_values(&scores.join(RUN_FILE))?;
    let cfg = ctx.config(Some(recorded_seed(&run)?))?;
    let dataset = match dataset {
        Some(d) => ctx.path(d),
        None => PathBuf::from(run_field(&run, "input")?),
    };
    let resize: usize = run_field(&run, "resize")?.parse()?;
    let crop: usize = run_field(&run, "crop")?.parse()?;
    let mut images = LabeledScores::new(vec![], vec![])?;
    let mut pixels = LabeledScores::new(vec![], vec![])?;
    for r in &rows {
        let label = r.label.ok_or_else(|| anyhow!("{} has no label", r.name))?;
        images.extend(&[r.score], &[label == 1])?;
        let map = read_map(scores.join("maps").join(format!("{}.pnit", r.name)))?;
        let truth = match &r.mask {
            Some(m) => mask_labels(&dataset.join(m), map.shape(), resize, crop)?,
            None if label == 0 => vec![false; map.data().len()],
            None => bail!("anomalous input {} has no mask", r.name),
        };
        pixels.extend(map.data(), &truth)?;
    }
    let report = EvalReport::compute(&images, &pixels)?;
    let text = format!(
        "seed = {}\nimages = {}\nanomalous_images = {}\npixels = {}\n{}",
        cfg.seed,
        images.len(),
        images.positives(),
        pixels.len(),
        report.to_key_value()
    );
    let out = out.map_or(scores.clone(), |o| ctx.path(o));
    fs::create_dir_all(&out)?;
    write_text(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ensemble(ctx: &Ctx, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut members = Vec::new();
    for dir in inputs {
        let dir = ctx.path(dir);
        let rows = parse_scores(&fs::read_to_string(dir.join(SCORES_FILE)).context("reading scores")?)?;
        let run = read_key_values(&dir.join(RUN_FILE))?;
        let lo: f64 = run_field(&run, "norm_min")?.parse()?;
        let hi: f64 = run_field(&run, "norm_max")?.parse()?;
        members.push((dir, rows, run, lo, hi));
    }
    let (_, first_rows, first_run, _, _) = &members[0];
    let cfg = ctx.config(Some(recorded_seed(first_run)?))?;
    for (dir, rows, ..) in &members[1..] {
        let same = rows.len() == first_rows.len() && rows.iter().zip(first_rows).all(|(a, b)| a.name == b.name);
        if !same {
            bail!("{} does not list the same inputs", dir.display());
        }
    }
    let out = ctx.path(out);
    create_out(&out)?;
    let mut rows = Vec::new();
    for (i, row) in first_rows.iter().enumerate() {
        let mut maps = Vec::new();
        let mut score = 0.0;
        for (dir, rows, _, lo, hi) in &members {
            let map = read_map(dir.join("maps").join(format!("{}.pnit", row.name)))?;
            maps.push(normalize_map(&map, *lo, *hi)?);
            score += ((rows[i].score - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        write_outputs(&out, &row.name, &ensemble_average(&maps)?, 0.0, 1.0)?;
        rows.push(ScoreRow {
            name: row.name.clone(),
            score: score / members.len() as f64,
            label: row.label,
            kind: row.kind.clone(),
            mask: row.mask.clone(),
        });
    }
    write_text(&out.join(SCORES_FILE), &format_scores(&rows))?;
    let mut run = format!("seed = {}\nmembers = {}\n", cfg.seed, members.len());
    for key in ["input", "resize", "crop"] {
        writeln!(run, "{key} = {}", run_field(first_run, key)?).unwrap();
    }
    run.push_str("norm_min = 0.0\nnorm_max = 1.0\n");
    write_text(&out.join(RUN_FILE), &run)?;
    println!("averaged {} maps from {} directories into {}", rows.len(), members.len(), out.display());
    Ok(())
}

fn cmd_refine_data(ctx: &Ctx, model_dir: &Path, input: &Path, out: &Path, count: Option<usize>) -> Result<()> {
    let model = load_model(ctx, model_dir)?;
    let cfg = ctx.config(Some(model.config.clone()))?;
    let fp = FeaturePipeline::from_config(&model.config)?;
    let input = ctx.path(input);
    let items = list_inputs(&input, "train", false, 0)?;
    let clean = items
        .iter()
        .map(|i| load_image(&input.join(&i.image)))
        .collect::<Result<Vec<_>>>()?;
    let count = count.unwrap_or(cfg.refine_samples);
    let samples = synthesize_defects(&model, &fp, &clean, count, &cfg.mask, cfg.seed)?;
    let out = ctx.path(out);
    fs::create_dir_all(&out)?;
    let mut index = format!("seed = {}\ncount = {count}\n", cfg.seed);
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("sample_{i:04}");
        s.save(&out, &stem)?;
        writeln!(index, "sample = {stem}").unwrap();
    }
    write_text(&out.join("samples.txt"), &index)?;
    println!("wrote {count} defect samples to {} (seed {})", out.display(), cfg.seed);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = Ctx {
        workdir: cli.workdir,
        config: cli.config,
        preset: cli.preset,
        set: cli.set,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Synth { out } => cmd_synth(&ctx, out),
        Command::Fit { train, model, input } => cmd_fit(&ctx, train, model, *input),
        Command::Score {
            model,
            input,
            out,
            features,
        } => cmd_score(&ctx, model, input, out, *features),
        Command::Eval { scores, dataset, out } => cmd_eval(&ctx, scores, dataset.as_deref(), out.as_deref()),
        Command::Ensemble { inputs, out } => cmd_ensemble(&ctx, inputs, out),
        Command::RefineData {
            model,
            input,
            out,
            count,
        } => cmd_refine_data(&ctx, model, input, out, *count),
    }
}
