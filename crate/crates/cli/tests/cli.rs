use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pni_core::map::ScoreMap;
use pni_core::pipeline::{read_key_values, FittedModel};
use pni_core::scoring::ensemble_average;
use pni_core::tensorio::{read_map, write_map};

const SMALL: &[&str] = &[
    "--set", "bench_train=10",
    "--set", "bench_test_normal=4",
    "--set", "bench_test_permute=3",
    "--set", "bench_test_blob=3",
    "--set", "epochs=2",
    "--set", "mlp_width=16",
];

fn pni(workdir: &Path, args: &[&str]) -> Output {
    pni_env(workdir, args, None)
}

fn pni_env(workdir: &Path, args: &[&str], bridge: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pni"));
    cmd.arg("--workdir").arg(workdir).args(args).env_remove("PNI_BRIDGE_CMD");
    if let Some(b) = bridge {
        cmd.env("PNI_BRIDGE_CMD", b);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = SMALL.to_vec();
    v.extend_from_slice(args);
    v
}

fn key(path: &Path, k: &str) -> String {
    read_key_values(path)
        .unwrap()
        .into_iter()
        .find(|(key, _)| key == k)
        .unwrap_or_else(|| panic!("{k} missing in {}", path.display()))
        .1
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_default_benchmark_deterministically() {
    let w = tempfile::tempdir().unwrap();
    ok(pni(w.path(), &["synth", "--out", "a"]));
    ok(pni(w.path(), &["synth", "--out", "b"]));
    let manifest = fs::read_to_string(w.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("train\t")).count(), 60);
    assert_eq!(manifest.lines().filter(|l| l.starts_with("test\t")).count(), 40);
    for sub in ["", "train", "test", "masks"] {
        assert_eq!(dir_bytes(&w.path().join("a").join(sub)), dir_bytes(&w.path().join("b").join(sub)));
    }
    ok(pni(w.path(), &["--seed", "5", "synth", "--out", "c"]));
    assert_eq!(key(&w.path().join("c/config.txt"), "seed"), "5");
    assert_ne!(dir_bytes(&w.path().join("a/train")), dir_bytes(&w.path().join("c/train")));
}

#[test]
fn synth_rejects_infeasible_and_unknown_settings() {
    let w = tempfile::tempdir().unwrap();
    let out = pni(w.path(), &["--set", "bench_grid=1", "synth", "--out", "x"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = pni(w.path(), &["--set", "no_such_key=1", "synth", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn fit_score_eval_round_trip() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    ok(pni(p, &with_small(&["synth", "--out", "data"])));
    ok(pni(p, &with_small(&["fit", "--train", "data", "--model", "m1"])));
    ok(pni(p, &with_small(&["fit", "--train", "data", "--model", "m2"])));
    assert_eq!(dir_bytes(&p.join("m1")), dir_bytes(&p.join("m2")));
    let model = FittedModel::load(p.join("m1")).unwrap();
    assert!(model.mlp.is_some() && model.histogram.is_some());

    ok(pni(p, &["score", "--model", "m1", "--input", "data", "--out", "s"]));
    let scores = fs::read_to_string(p.join("s/scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), 11);
    let map = read_map(p.join("s/maps/test_000.pnit")).unwrap();
    assert_eq!(map.shape(), (64, 64));
    assert!(p.join("s/heatmaps/test_000.ppm").exists());
    assert_eq!(key(&p.join("s/run.txt"), "refiner"), "identity");

    ok(pni(p, &["eval", "--scores", "s"]));
    let report = p.join("s/report.txt");
    for k in ["image_auroc", "pixel_auroc", "f1_threshold", "f1", "fpr", "fnr"] {
        let v: f64 = key(&report, k).parse().unwrap();
        assert!((0.0..=1.0).contains(&v) || k == "f1_threshold", "{k} = {v}");
    }
    assert_eq!(key(&report, "seed"), "0");
}

#[test]
fn ablated_fit_is_recorded_and_baseline_ranking_matches() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    ok(pni(p, &with_small(&["synth", "--out", "data"])));
    ok(pni(p, &with_small(&["--set", "use_neighbor=false", "--set", "use_position=false", "fit", "--train", "data", "--model", "base"])));
    assert_eq!(key(&p.join("base/manifest.txt"), "neighbor_model"), "false");
    assert!(!p.join("base/mlp.header").exists());
    ok(pni(p, &with_small(&["fit", "--train", "data", "--model", "full"])));
    ok(pni(p, &["score", "--model", "base", "--input", "data", "--out", "sb"]));
    ok(pni(
        p,
        &["--set", "use_position=false", "--set", "use_neighbor=false", "score", "--model", "full", "--input", "data", "--out", "sf"],
    ));
    let order = |dir: &str| {
        let text = fs::read_to_string(p.join(dir).join("scores.tsv")).unwrap();
        let mut rows: Vec<(f64, String)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                (f[1].parse().unwrap(), f[0].to_string())
            })
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        rows.into_iter().map(|r| r.1).collect::<Vec<_>>()
    };
    assert_eq!(order("sb"), order("sf"));
    let out = pni(p, &["--set", "use_neighbor=true", "score", "--model", "base", "--input", "data", "--out", "bad"]);
    assert!(!out.status.success());
}

#[test]
fn missing_model_file_is_an_error() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    ok(pni(p, &with_small(&["synth", "--out", "data"])));
    ok(pni(p, &with_small(&["fit", "--train", "data", "--model", "m"])));
    fs::remove_file(p.join("m/c_dist.idx")).unwrap();
    let out = pni(p, &["score", "--model", "m", "--input", "data", "--out", "s"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("c_dist.idx"));
}

/// A score directory whose maps are given directly.
fn fake_scores(dir: &Path, maps: &[(&str, ScoreMap, f64, u8)]) {
    fs::create_dir_all(dir.join("maps")).unwrap();
    let mut tsv = String::from("name\timage_score\tlabel\tkind\tmask\n");
    for (name, map, score, label) in maps {
        write_map(dir.join("maps").join(format!("{name}.pnit")), map).unwrap();
        let mask = if *label == 1 { format!("masks/{name}.pgm") } else { "-".into() };
        tsv.push_str(&format!("{name}\t{score:?}\t{label}\tx\t{mask}\n"));
    }
    fs::write(dir.join("scores.tsv"), tsv).unwrap();
    fs::write(
        dir.join("run.txt"),
        "seed = 3\ninput = unused\nresize = 0\ncrop = 0\nnorm_min = 0.0\nnorm_max = 1.0\n",
    )
    .unwrap();
}

#[test]
fn eval_of_oracle_maps_is_perfect() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    fs::create_dir_all(p.join("ds/masks")).unwrap();
    let mask = ScoreMap::from_fn(8, 8, |y, x| f64::from(y < 3 && x > 4));
    let gray = pni_core::image::GrayImage::new(8, 8, mask.data().iter().map(|&v| v as f32).collect()).unwrap();
    pni_core::tensorio::write_pgm(p.join("ds/masks/a.pgm"), &gray).unwrap();
    fake_scores(
        &p.join("s"),
        &[("a", mask.clone(), 1.0, 1), ("b", ScoreMap::zeros(8, 8), 0.0, 0)],
    );
    ok(pni(p, &["eval", "--scores", "s", "--dataset", "ds", "--out", "r"]));
    assert_eq!(key(&p.join("r/report.txt"), "image_auroc"), "1");
    assert_eq!(key(&p.join("r/report.txt"), "pixel_auroc"), "1");
    assert_eq!(key(&p.join("r/report.txt"), "seed"), "3");
}

#[test]
fn ensemble_cases() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    let maps = |f: &dyn Fn(usize, usize) -> f64| ScoreMap::from_fn(5, 4, |y, x| f(y, x));
    let a = maps(&|y, x| ((y + x) % 2) as f64);
    let b = maps(&|y, x| 1.0 - ((y + x) % 2) as f64);
    let c = maps(&|y, x| (y * 4 + x) as f64 / 19.0);
    fake_scores(&p.join("a"), &[("m", a.clone(), 0.2, 0)]);
    fake_scores(&p.join("b"), &[("m", b.clone(), 0.6, 0)]);
    fake_scores(&p.join("c"), &[("m", c.clone(), 1.0, 0)]);

    ok(pni(p, &["ensemble", "--inputs", "a", "--out", "e1"]));
    assert_eq!(read_map(p.join("e1/maps/m.pnit")).unwrap(), a);
    ok(pni(p, &["ensemble", "--inputs", "a", "b", "--out", "e2"]));
    assert!(read_map(p.join("e2/maps/m.pnit")).unwrap().data().iter().all(|&v| v == 0.5));
    ok(pni(p, &["ensemble", "--inputs", "a", "b", "c", "--out", "e3"]));
    let oracle = ensemble_average(&[a, b, c]).unwrap();
    let got = read_map(p.join("e3/maps/m.pnit")).unwrap();
    assert!(got.data().iter().zip(oracle.data()).all(|(x, y)| (x - y).abs() <= 1e-6));
    let score: f64 = fs::read_to_string(p.join("e3/scores.tsv")).unwrap().lines().nth(1).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((score - 0.6).abs() <= 1e-12);
}

#[test]
fn bridge_refiner_is_applied_and_fused() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    ok(pni(p, &with_small(&["synth", "--out", "data"])));
    ok(pni(p, &with_small(&["fit", "--train", "data", "--model", "m"])));
    let script = p.join("bridge.sh");
    fs::write(
        &script,
        "#!/bin/sh\nset -e\ntest -f \"$1/input_image.pnit\"\ncp \"$1/input_map.pnit\" \"$1/refined_map.pnit\"\n",
    )
    .unwrap();
    let cmd = format!("sh {}", script.display());
    ok(pni_env(p, &["score", "--model", "m", "--input", "data", "--out", "s"], Some(&cmd)));
    assert_eq!(key(&p.join("s/run.txt"), "refiner"), "bridge");
    let map = read_map(p.join("s/maps/test_000.pnit")).unwrap();
    assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));

    ok(pni(p, &["score", "--model", "m", "--input", "data", "--out", "raw"]));
    let raw = read_map(p.join("raw/maps/test_000.pnit")).unwrap();
    let model = FittedModel::load(p.join("m")).unwrap();
    let want = pni_core::refine::normalize_map(&raw, model.norm.min, model.norm.max).unwrap();
    assert!(map.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() <= 1e-6));

    let out = pni_env(p, &["score", "--model", "m", "--input", "data", "--out", "f"], Some("false"));
    assert!(!out.status.success());
}

#[test]
fn refine_data_emits_triples() {
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    ok(pni(p, &with_small(&["synth", "--out", "data"])));
    ok(pni(p, &with_small(&["fit", "--train", "data", "--model", "m"])));
    ok(pni(p, &["--seed", "9", "refine-data", "--model", "m", "--input", "data", "--out", "r", "--count", "3"]));
    for i in 0..3 {
        for part in ["image", "mask", "estimate"] {
            assert!(p.join(format!("r/sample_{i:04}_{part}.pnit")).exists());
        }
    }
    assert_eq!(key(&p.join("r/samples.txt"), "seed"), "9");
    let est = read_map(p.join("r/sample_0000_estimate.pnit")).unwrap();
    assert!(est.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn exported_features_flow_through_fit_and_score() {
    use pni_core::features::FeatureExtractor;
    let w = tempfile::tempdir().unwrap();
    let p = w.path();
    ok(pni(p, &with_small(&["synth", "--out", "data"])));
    let cfg = pni_core::config::PipelineConfig::desk();
    let ex = pni_core::features::ToyExtractor::new(cfg.seed, cfg.toy_channels).unwrap();
    fs::create_dir_all(p.join("feat")).unwrap();
    for i in 0..6 {
        let img = pni_core::tensorio::read_rgb(p.join(format!("data/train/train_{i:03}.ppm"))).unwrap();
        for l in ex.extract(&img).unwrap().levels() {
            let path = pni_core::pipeline::level_path(&p.join("feat"), &format!("img{i}"), l.level);
            pni_core::tensorio::write_tensor(path, &l.map.to_tensor()).unwrap();
        }
    }
    ok(pni(p, &with_small(&["fit", "--features", "--input-size", "64x64", "--train", "feat", "--model", "m"])));
    ok(pni(p, &["score", "--features", "--model", "m", "--input", "feat", "--out", "s"]));
    assert_eq!(read_map(p.join("s/maps/img0.pnit")).unwrap().shape(), (64, 64));
    let out = pni(p, &with_small(&["fit", "--features", "--train", "feat", "--model", "m2"]));
    assert!(!out.status.success());
}
