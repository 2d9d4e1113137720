//! Acceptance suite: one PASS/FAIL line per criterion.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pni_core::benchmark::{generate_benchmark, SampleKind};
use pni_core::config::PipelineConfig;
use pni_core::coreset::{assign_voronoi, kcenter_greedy, nearest, DistributionCoreset, EmbeddingCoreset, VectorSet};
use pni_core::distmodel::{MlpShape, NeighborhoodMlp};
use pni_core::eval::{auroc, LabeledScores};
use pni_core::image::RgbImage;
use pni_core::map::ScoreMap;
use pni_core::pipeline::{fit, FeaturePipeline, FittedModel};
use pni_core::refine::{composite_anomaly, fuse_refined, refine_loss};
use pni_core::scoring::{
    full_resolution, gaussian_kernel, gaussian_smooth, upsample_bilinear, Eq7Mode, ScoreParams, ScoringIndex,
};
use pni_core::tensorio::{read_tensor, write_tensor, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> VectorSet {
    let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    VectorSet::new(dim, data).unwrap()
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}

fn brute_greedy(points: &[Vec<f32>], k: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut best = (0, -1.0);
        for i in 0..points.len() {
            let mut m = f64::INFINITY;
            for &c in &chosen {
                m = m.min(dist2(&points[i], &points[c]));
            }
            if m > best.1 {
                best = (i, m);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

fn coreset_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let set = random_set(&mut rng, 100, 2);
    let points: Vec<Vec<f32>> = set.rows().map(|r| r.to_vec()).collect();
    for k in [5, 10, 25] {
        for seed in 0..4u64 {
            let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
            let got = kcenter_greedy(&set, k, seed, None).map_err(|e| e.to_string())?;
            let want = brute_greedy(&points, k, first);
            check(got == want, || format!("k={k} seed={seed}: {got:?} != {want:?}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("k in {5,10,25} x 4 seeds".into())
}

fn nn_voronoi_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let set = random_set(&mut rng, 500, 64);
    let queries = random_set(&mut rng, 200, 64);
    for q in queries.rows().chain(set.rows().take(20)) {
        let (mut bi, mut bd) = (0, f64::INFINITY);
        for (i, r) in set.rows().enumerate() {
            let d = dist2(q, r);
            if d < bd {
                (bi, bd) = (i, d);
            }
        }
        let (gi, gd) = nearest(q, &set).map_err(|e| e.to_string())?;
        check(gi == bi && gd == bd.sqrt(), || format!("nearest {gi}/{gd} vs {bi}/{}", bd.sqrt()))?;
    }
    let mut members: Vec<usize> = (0..500).filter(|_| rng.random_bool(0.1)).collect();
    members.sort_unstable();
    let voronoi = assign_voronoi(&set, &members).map_err(|e| e.to_string())?;
    for (i, r) in set.rows().enumerate() {
        let want = match members.iter().position(|&m| m == i) {
            Some(own) => own,
            None => {
                let mut best = (0, f64::INFINITY);
                for (o, &m) in members.iter().enumerate() {
                    let d = dist2(r, set.row(m));
                    if d < best.1 {
                        best = (o, d);
                    }
                }
                best.0
            }
        };
        check(voronoi[i] == want, || format!("vector {i}: cell {} vs {want}", voronoi[i]))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("220 queries, {} cells", members.len()))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut mlp = NeighborhoodMlp::init(6, 4, MlpShape { layers: 3, width: 12 }, 2.0, seed).map_err(|e| e.to_string())?;
        let n = mlp.param_count();
        check(n <= 1000, || format!("{n} parameters"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut base = mlp.params_flat();
        for p in &mut base {
            *p += rng.random_range(-0.2..0.2);
        }
        mlp.set_params_flat(&base).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..16 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..4)).collect();
        let (_, grad) = mlp.batch_loss_and_grad(&x, &labels).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let mut probe = mlp.clone();
        for i in 0..n {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params_flat(&p).map_err(|e| e.to_string())?;
            let up = probe.batch_loss(&x, &labels).map_err(|e| e.to_string())?;
            p[i] = base[i] - h;
            probe.set_params_flat(&p).map_err(|e| e.to_string())?;
            let down = probe.batch_loss(&x, &labels).map_err(|e| e.to_string())?;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            check(rel <= 1e-3, || format!("seed {seed} param {i}: {} vs {numeric}", grad[i]))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("worst relative error {worst:.2e}"))
}

fn likelihood_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vectors = random_set(&mut rng, 40, 8);
    let c_emb = EmbeddingCoreset {
        bank_indices: (0..40).collect(),
        provenance: vec![Default::default(); 40],
        vectors: vectors.clone(),
    };
    let members: Vec<usize> = (0..40).step_by(4).collect();
    let c_dist = DistributionCoreset::new(&c_emb, members.clone()).map_err(|e| e.to_string())?;
    let k = members.len();
    let index = ScoringIndex::new(&vectors, &c_dist).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for draw in 0..10_000 {
        let mode = if draw % 2 == 0 { Eq7Mode::Voronoi } else { Eq7Mode::Literal };
        let params = ScoreParams {
            eq7_mode: mode,
            ..ScoreParams::for_classes(k)
        };
        let phi: Vec<f32> = (0..8).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        let mut prior: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(4)).collect();
        let total: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= total);
        check(prior.iter().any(|&p| p > params.tau), || format!("draw {draw}: empty threshold"))?;
        let lik = index.feature_likelihood(&phi, &prior, &params).map_err(|e| e.to_string())?;
        check(lik > 0.0 && lik <= 1.0, || format!("draw {draw}: likelihood {lik}"))?;
        let score = index.feature_score(&phi, &prior, &params).map_err(|e| e.to_string())?;
        worst = worst.max((score + lik.ln()).abs());
        check((score + lik.ln()).abs() <= 1e-9, || format!("draw {draw}: {score} vs {}", -lik.ln()))?;
        if mode == Eq7Mode::Voronoi {
            let mut best: f64 = 0.0;
            for (o, &c) in prior.iter().enumerate() {
                if c <= params.tau {
                    continue;
                }
                for (i, row) in vectors.rows().enumerate() {
                    if c_dist.voronoi[i] == o {
                        best = best.max((-params.lambda * dist2(&phi, row).sqrt()).exp());
                    }
                }
            }
            check((best - lik).abs() <= 1e-12, || format!("draw {draw}: brute force {best} vs {lik}"))?;
        }
    }
    Ok(format!("10000 draws, max |S + ln p| = {worst:.1e}"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scores: Vec<f64> = (0..200).map(|_| (rng.random_range(0..50) as f64) / 10.0).collect();
    let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..200 {
        for j in 0..200 {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    let got = auroc(&LabeledScores::new(scores, labels).unwrap()).map_err(|e| e.to_string())?;
    check((got - wins / pairs).abs() <= 1e-12, || format!("{got} vs pairwise {}", wins / pairs))?;
    let ex = auroc(&LabeledScores::from_binary(vec![0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap()).unwrap();
    check(ex == 0.75, || format!("example gave {ex}"))?;
    Ok(format!("pairwise {got:.6}, example 0.75"))
}

struct Ablation {
    detection: [f64; 4],
    permute: [f64; 4],
    blob: [f64; 4],
}

/// Detection and per-subset pixel AUROC for baseline, position-only,
/// neighbor-only and full scoring of one seeded benchmark.
fn run_ablation(seed: u64) -> Ablation {
    let mut cfg = PipelineConfig::desk();
    cfg.set("seed", &seed.to_string()).unwrap();
    let bench = generate_benchmark(&cfg.bench).unwrap();
    let fp = FeaturePipeline::from_config(&cfg).unwrap();
    let mut maps = Vec::new();
    let mut size = (0, 0);
    for img in &bench.train {
        let (fm, pre) = fp.image_features(img).unwrap();
        size = (pre.height(), pre.width());
        maps.push(fm);
    }
    let model = fit(&cfg, &maps, size).unwrap();
    let test: Vec<_> = bench.test.iter().map(|s| fp.image_features(&s.image).unwrap().0).collect();
    let mut out = Ablation {
        detection: [0.0; 4],
        permute: [0.0; 4],
        blob: [0.0; 4],
    };
    let switches = [(false, false), (true, false), (false, true), (true, true)];
    for (a, &(pos, nbr)) in switches.iter().enumerate() {
        let settings = model.ablation(pos, nbr);
        let empty = || LabeledScores::new(vec![], vec![]).unwrap();
        let (mut det, mut perm, mut blob) = (empty(), empty(), empty());
        for (s, fm) in bench.test.iter().zip(&test) {
            let r = model.score(fm, &settings).unwrap();
            det.extend(&[r.image_score()], &[s.is_anomalous()]).unwrap();
            let labels: Vec<bool> = s.mask.data().iter().map(|&v| v > 0.5).collect();
            match s.kind {
                SampleKind::Permute => perm.extend(r.full.data(), &labels).unwrap(),
                SampleKind::Blob => blob.extend(r.full.data(), &labels).unwrap(),
                SampleKind::Normal => {}
            }
        }
        out.detection[a] = auroc(&det).unwrap();
        out.permute[a] = auroc(&perm).unwrap();
        out.blob[a] = auroc(&blob).unwrap();
    }
    out
}

fn central_claim() -> Outcome {
    let start = Instant::now();
    let runs: Vec<Ablation> = (0..5).map(run_ablation).collect();
    let first = &runs[0];
    let (base, full) = (0, 3);
    check(first.permute[full] >= 0.90, || format!("full permute AUROC {:.3}", first.permute[full]))?;
    check(first.permute[base] <= 0.60, || format!("baseline permute AUROC {:.3}", first.permute[base]))?;
    check(first.blob[full] >= 0.90 && first.blob[base] >= 0.90, || {
        format!("blob AUROC full {:.3} baseline {:.3}", first.blob[full], first.blob[base])
    })?;
    let ordered = runs
        .iter()
        .filter(|r| {
            let d = r.detection;
            d[0] < d[1] && d[0] < d[2] && d[1] <= d[3] && d[2] <= d[3]
        })
        .count();
    check(ordered >= 3, || format!("ablation ordering held on {ordered}/5 seeds"))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "permute full {:.3} baseline {:.3}; blob full {:.3} baseline {:.3}; ordering {ordered}/5; detection {:?}",
        first.permute[full],
        first.permute[base],
        first.blob[full],
        first.blob[base],
        runs.iter().map(|r| r.detection.map(|v| (v * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
    ))
}

fn post_processing() -> Outcome {
    for sigma in [0.5, 1.0, 2.0, 4.0, 8.0, 13.7] {
        let sum: f64 = gaussian_kernel(sigma).iter().sum();
        check((sum - 1.0).abs() <= 1e-9, || format!("sigma {sigma}: kernel sums to {sum}"))?;
    }
    let constant = ScoreMap::filled(7, 11, 0.37);
    for sigma in [0.0, 1.0, 8.0] {
        let s = gaussian_smooth(&constant, sigma).unwrap();
        check(s.data().iter().all(|v| (v - 0.37).abs() <= 1e-6), || format!("smoothing sigma {sigma} moved a constant"))?;
    }
    for (h, w) in [(7, 11), (20, 9), (64, 64)] {
        let u = upsample_bilinear(&constant, h, w).unwrap();
        check(u.data().iter().all(|v| (v - 0.37).abs() <= 1e-6), || format!("upsampling to {h}x{w} moved a constant"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = ScoreMap::from_fn(9, 6, |_, _| rng.random());
    let same = upsample_bilinear(&m, 9, 6).unwrap();
    let dev = m.data().iter().zip(same.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(dev <= 1e-12, || format!("same-size upsample deviates by {dev}"))?;
    let full = full_resolution(&constant, 28, 44, 8.0).unwrap();
    check(full.data().iter().all(|v| (v - 0.37).abs() <= 1e-6), || "full-resolution map moved a constant".into())?;
    Ok(format!("same-size deviation {dev:.1e}"))
}

fn refinement_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = ScoreMap::from_fn(6, 5, |_, _| rng.random());
    let l = refine_loss(&a, &a).unwrap();
    check((l.reg, l.grad, l.total) == (0.0, 0.0, 0.0), || format!("self loss {l:?}"))?;
    let refined = ScoreMap::new(1, 2, vec![1.0, 0.0]).unwrap();
    let target = ScoreMap::zeros(1, 2);
    let l = refine_loss(&refined, &target).unwrap();
    check(l.total == 1.0, || format!("1x2 case total {}", l.total))?;

    let clean = RgbImage::new(4, 3, (0..36).map(|i| i as f32 / 36.0).collect()).unwrap();
    let defect = RgbImage::filled(4, 3, [0.9, 0.1, 0.5]);
    let out = composite_anomaly(&clean, &defect, &ScoreMap::zeros(4, 3)).unwrap();
    check(
        out.data().iter().zip(clean.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        || "composite with empty mask changed the image".into(),
    )?;

    let fused = fuse_refined(&ScoreMap::filled(3, 3, 0.5), &ScoreMap::filled(3, 3, 1.0), 0.1).unwrap();
    check(fused.data().iter().all(|v| (v - 0.55).abs() <= 1e-12), || "fusion of 0.5 and 1.0 is not 0.55".into())?;

    let mask = ScoreMap::from_fn(24, 24, |y, x| f64::from((8..14).contains(&y) && (5..15).contains(&x)));
    let blurred = gaussian_smooth(&mask, 3.0).unwrap();
    let estimate = ScoreMap::from_fn(24, 24, |y, x| 0.6 * blurred.get(y, x) + 0.4 * rng.random::<f64>());
    let labels: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let before = auroc(&LabeledScores::new(estimate.data().to_vec(), labels.clone()).unwrap()).unwrap();
    let after_map = fuse_refined(&estimate, &mask, 0.1).unwrap();
    let after = auroc(&LabeledScores::new(after_map.data().to_vec(), labels).unwrap()).unwrap();
    check(after > before, || format!("fusion AUROC {after} not above {before}"))?;
    Ok(format!("ground-truth fusion AUROC {before:.3} -> {after:.3}"))
}

fn fit_and_save(dir: &Path) {
    let mut cfg = PipelineConfig::desk();
    cfg.bench.n_train = 12;
    cfg.epochs = 3;
    let bench = generate_benchmark(&cfg.bench).unwrap();
    let fp = FeaturePipeline::from_config(&cfg).unwrap();
    let mut maps = Vec::new();
    let mut size = (0, 0);
    for img in &bench.train {
        let (fm, pre) = fp.image_features(img).unwrap();
        size = (pre.height(), pre.width());
        maps.push(fm);
    }
    fit(&cfg, &maps, size).unwrap().save(dir).unwrap();
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fit_and_save(a.path());
    fit_and_save(b.path());
    let mut names: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for required in ["c_emb.idx", "c_dist.idx", "c_emb.pnit", "histogram.pnit", "mlp.header", "mlp_out_weight.pnit"] {
        check(names.iter().any(|n| n == required), || format!("{required} missing"))?;
    }
    for name in &names {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        check(x == y, || format!("{name} differs between runs"))?;
    }
    FittedModel::load(a.path()).map_err(|e| e.to_string())?;
    Ok(format!("{} files byte-identical", names.len()))
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..100 {
        let rank = 1 + i % 4;
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
        let len = dims.iter().product();
        let data: Vec<f32> = (0..len)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let t = Tensor::new(dims, data).unwrap();
        let path = dir.path().join(format!("t{i}.pnit"));
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        check(back.dims() == t.dims(), || format!("tensor {i}: dims changed"))?;
        check(
            back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("tensor {i}: payload changed"),
        )?;
    }
    Ok("100 tensors, ranks 1-4".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("coreset oracle equivalence", coreset_oracle),
        ("nearest neighbor and voronoi oracle", nn_voronoi_oracle),
        ("mlp gradient check", gradient_check),
        ("likelihood contract", likelihood_contract),
        ("auroc metric oracle", metric_oracle),
        ("central claim at desk scale", central_claim),
        ("post-processing", post_processing),
        ("refinement math", refinement_math),
        ("fit determinism", determinism),
        ("pnit serialization", serialization),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        match run() {
            Ok(detail) => println!("PASS  {name} ({detail}) [{:.2?}]", start.elapsed()),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
