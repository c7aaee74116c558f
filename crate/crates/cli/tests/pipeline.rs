use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use segperf::frameio::{self, DepthMap, ImageTensor, SegMap, SparseDepthMap};
use segperf::samples::{self, Manifest, ManifestEntry};
use segperf::timeagg::PredictedSample;
use segperf_cli::{run, Cli};

fn segperf(args: &[&str]) -> anyhow::Result<String> {
    let cli = Cli::try_parse_from(std::iter::once("segperf").chain(args.iter().copied()))?;
    let mut out = Vec::new();
    run(&cli, &mut out)?;
    Ok(String::from_utf8(out)?)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Frames whose predictions equal the ground truth.
fn perfect_manifest(dir: &Path, frames: usize) -> PathBuf {
    let (h, w, k) = (8, 10, 4);
    let mut entries = Vec::new();
    for f in 0..frames {
        let labels: Vec<u8> = (0..h * w).map(|i| ((i + f) % k) as u8).collect();
        let seg = SegMap::new(h, w, k, labels).unwrap();
        let depth: Vec<f64> = (0..h * w).map(|i| 1.0 + (i % 7) as f64).collect();
        let img = ImageTensor::new(
            h,
            w,
            3,
            (0..h * w * 3).map(|i| (i % 255) as f64 / 255.0).collect(),
        )
        .unwrap();
        let id = format!("f{f:03}");
        frameio::save_image(&img, dir.join(format!("{id}_img.png"))).unwrap();
        frameio::save_seg_map(&seg, dir.join(format!("{id}_seg.png"))).unwrap();
        frameio::save_depth_map(
            &SparseDepthMap::dense(h, w, depth.clone()).unwrap(),
            dir.join(format!("{id}_dgt.png")),
        )
        .unwrap();
        frameio::save_depth_prediction(
            &DepthMap::new(h, w, depth).unwrap(),
            dir.join(format!("{id}_dpred.png")),
        )
        .unwrap();
        entries.push(ManifestEntry {
            frame_id: id.clone(),
            image: format!("{id}_img.png"),
            seg_gt: Some(format!("{id}_seg.png")),
            seg_pred: Some(format!("{id}_seg.png")),
            depth_pred: Some(format!("{id}_dpred.png")),
            depth_gt: Some(format!("{id}_dgt.png")),
            perturbation: None,
            epsilon_255: None,
            num_classes: Some(k),
        });
    }
    let path = dir.join("manifest.jsonl");
    Manifest::write(&path, &entries).unwrap();
    path
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = perfect_manifest(dir.path(), 3);
    let csv = dir.path().join("s.csv");
    let report = segperf(&[
        "evaluate",
        "--manifest",
        s(&m),
        "--scale-from",
        s(&m),
        "--out",
        s(&csv),
    ])
    .unwrap();
    assert!(report.contains("clean mIoU: 100.00%"), "{report}");
    let got = samples::read_samples(&csv).unwrap();
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|x| x.miou == 1.0 && x.acc == 1.0));
}

#[test]
fn perturb_counts_and_clean_copies() {
    let dir = tempfile::tempdir().unwrap();
    let m = perfect_manifest(dir.path(), 3);
    let out = dir.path().join("pert");
    segperf(&[
        "perturb",
        "--manifest",
        s(&m),
        "--out",
        s(&out),
        "--eps-255",
        "0,4,16",
        "--seed",
        "5",
    ])
    .unwrap();
    let pm = Manifest::read(out.join("manifest.jsonl")).unwrap();
    let perturbed: Vec<&ManifestEntry> = pm
        .entries
        .iter()
        .filter(|e| e.perturbation.is_some())
        .collect();
    assert_eq!(perturbed.len(), 2 * 3 * 3);
    for e in perturbed.iter().filter(|e| e.epsilon_255 == Some(0.0)) {
        let src = frameio::load_image(dir.path().join(format!("{}_img.png", e.frame_id))).unwrap();
        assert_eq!(frameio::load_image(pm.resolve(&e.image)).unwrap(), src);
    }
    let noisy = perturbed
        .iter()
        .find(|e| e.epsilon_255 == Some(16.0))
        .unwrap();
    let src = frameio::load_image(dir.path().join(format!("{}_img.png", noisy.frame_id))).unwrap();
    assert_ne!(frameio::load_image(pm.resolve(&noisy.image)).unwrap(), src);

    let again = dir.path().join("pert2");
    segperf(&[
        "perturb",
        "--manifest",
        s(&m),
        "--out",
        s(&again),
        "--eps-255",
        "0,4,16",
        "--seed",
        "5",
    ])
    .unwrap();
    for e in &perturbed {
        assert_eq!(
            fs::read(out.join(&e.image)).unwrap(),
            fs::read(again.join(&e.image)).unwrap()
        );
    }
    assert_eq!(
        fs::read(out.join("manifest.jsonl")).unwrap(),
        fs::read(again.join("manifest.jsonl")).unwrap()
    );
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn full_run(val: usize, test: usize, eps: &str, seed: &str, delta_n: &str) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let sim = root.join("sim");
    let p = |name: &str| root.join(name);
    segperf(&[
        "simulate",
        "--out",
        s(&sim),
        "--val-frames",
        &val.to_string(),
        "--test-frames",
        &test.to_string(),
        "--eps-255",
        eps,
        "--seed",
        seed,
    ])
    .unwrap();
    let val_m = sim.join("val.jsonl");
    let test_m = sim.join("test.jsonl");
    segperf(&[
        "evaluate",
        "--manifest",
        s(&val_m),
        "--scale-from",
        s(&val_m),
        "--out",
        s(&p("val.csv")),
    ])
    .unwrap();
    segperf(&[
        "evaluate",
        "--manifest",
        s(&test_m),
        "--scale-from",
        s(&val_m),
        "--out",
        s(&p("test.csv")),
    ])
    .unwrap();
    segperf(&[
        "calibrate",
        "--samples",
        s(&p("val.csv")),
        "--out",
        s(&p("model.json")),
    ])
    .unwrap();
    segperf(&[
        "predict",
        "--model",
        s(&p("model.json")),
        "--samples",
        s(&p("test.csv")),
        "--out",
        s(&p("pred.csv")),
        "--val-samples",
        s(&p("val.csv")),
    ])
    .unwrap();
    segperf(&[
        "report",
        "--predictions",
        s(&p("pred.csv")),
        "--out-dir",
        s(&p("report")),
        "--delta-n",
        delta_n,
        "--window",
        "random",
        "--seed",
        seed,
    ])
    .unwrap();
    Run { _dir: dir, root }
}

fn aggregation_mae(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn sample_count_includes_clean_level_per_kind() {
    let r = full_run(4, 5, "2,8,32", "1", "1,3,5");
    let test = samples::read_samples(r.root.join("test.csv")).unwrap();
    assert_eq!(test.len(), 5 * 2 * (3 + 1));
    let val = samples::read_samples(r.root.join("val.csv")).unwrap();
    assert_eq!(val.len(), 4 * 2 * (3 + 1));
    // re-ingesting the written CSV reproduces it byte for byte
    let again = r.root.join("again.csv");
    samples::write_samples(&again, &test).unwrap();
    assert_eq!(
        fs::read(&again).unwrap(),
        fs::read(r.root.join("test.csv")).unwrap()
    );
    let rows = fs::read_to_string(r.root.join("report/aggregation.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3);
}

#[test]
fn full_pipeline_is_byte_deterministic() {
    let a = full_run(4, 6, "4,16", "9", "1,3,5");
    let b = full_run(4, 6, "4,16", "9", "1,3,5");
    for f in [
        "val.csv",
        "test.csv",
        "model.json",
        "pred.csv",
        "report/summary.csv",
        "report/aggregation.csv",
    ] {
        assert_eq!(
            fs::read(a.root.join(f)).unwrap(),
            fs::read(b.root.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn end_to_end_mae_decreases_with_window_size() {
    let r = full_run(
        50,
        150,
        "0.25,0.5,1,2,4,8,12,16,20,24,28,32",
        "2024",
        "1,3,5,11",
    );
    let mae = aggregation_mae(&r.root.join("report/aggregation.csv"));
    assert_eq!(mae.len(), 4);
    assert!(mae.windows(2).all(|w| w[1] <= w[0]), "{mae:?}");
    assert!(mae[3] <= 0.7 * mae[0], "{mae:?}");
}

#[test]
fn regression_beats_the_mean_predictor_on_its_split() {
    let r = full_run(8, 1, "2,8,16,32", "3", "1");
    let p = |n: &str| r.root.join(n);
    segperf(&[
        "predict",
        "--model",
        s(&p("model.json")),
        "--samples",
        s(&p("val.csv")),
        "--out",
        s(&p("vp.csv")),
    ])
    .unwrap();
    let preds = samples::read_predictions(p("vp.csv")).unwrap();
    let mean = preds.iter().map(|x| x.sample.miou).sum::<f64>() / preds.len() as f64;
    let mae = |f: &dyn Fn(&PredictedSample) -> f64| {
        preds
            .iter()
            .map(|x| (f(x) - x.sample.miou).abs())
            .sum::<f64>()
            / preds.len() as f64
    };
    assert!(mae(&|x| x.miou_pred) <= mae(&|_| mean));
}

#[test]
fn exact_predictions_have_zero_aggregated_error() {
    let r = full_run(3, 4, "4", "4", "1,3");
    let mut preds = samples::read_predictions(r.root.join("pred.csv")).unwrap();
    for x in &mut preds {
        x.miou_pred = x.sample.miou;
    }
    let exact = r.root.join("exact.csv");
    samples::write_predictions(&exact, &preds).unwrap();
    let agg = r.root.join("agg.csv");
    let table = segperf(&[
        "aggregate",
        "--predictions",
        s(&exact),
        "--out",
        s(&agg),
        "--delta-n",
        "1,3",
        "--k",
        "1",
    ])
    .unwrap();
    assert!(table.contains("0.00%"), "{table}");
    assert!(aggregation_mae(&agg).iter().all(|&m| m.abs() < 1e-12));
}

#[test]
fn overlapping_splits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = perfect_manifest(dir.path(), 2);
    let copy = dir.path().join("copy.jsonl");
    fs::copy(&m, &copy).unwrap();
    let csv = dir.path().join("s.csv");
    let err = segperf(&[
        "evaluate",
        "--manifest",
        s(&m),
        "--scale-from",
        s(&copy),
        "--out",
        s(&csv),
    ])
    .unwrap_err();
    assert!(
        err.to_string().contains("both validation and test"),
        "{err}"
    );

    segperf(&[
        "evaluate",
        "--manifest",
        s(&m),
        "--scale",
        "1",
        "--out",
        s(&csv),
    ])
    .unwrap();
    let fake_model = dir.path().join("model.json");
    fs::write(&fake_model, r#"{"theta":[0,1,0],"k_set":[0,1,2]}"#).unwrap();
    let err = segperf(&[
        "predict",
        "--model",
        s(&fake_model),
        "--samples",
        s(&csv),
        "--out",
        s(&dir.path().join("p.csv")),
        "--val-samples",
        s(&csv),
    ])
    .unwrap_err();
    assert!(
        err.to_string().contains("both validation and test"),
        "{err}"
    );
}

#[test]
fn missing_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = perfect_manifest(dir.path(), 1);
    let csv = dir.path().join("s.csv");
    segperf(&[
        "evaluate",
        "--manifest",
        s(&m),
        "--scale",
        "1",
        "--out",
        s(&csv),
    ])
    .unwrap();
    let missing = dir.path().join("nope.json");
    assert!(segperf(&[
        "predict",
        "--model",
        s(&missing),
        "--samples",
        s(&csv),
        "--out",
        s(&csv)
    ])
    .is_err());
}

#[test]
fn undefined_frames_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let m = perfect_manifest(dir.path(), 2);
    let (h, w) = (8, 10);
    frameio::save_depth_map(
        &SparseDepthMap::new(h, w, vec![0.0; h * w], vec![false; h * w]).unwrap(),
        dir.path().join("f001_dgt.png"),
    )
    .unwrap();
    let csv = dir.path().join("s.csv");
    let report = segperf(&[
        "evaluate",
        "--manifest",
        s(&m),
        "--scale",
        "1",
        "--out",
        s(&csv),
    ])
    .unwrap();
    assert!(report.contains("skipped 1 sample(s)"), "{report}");
    assert_eq!(samples::read_samples(&csv).unwrap().len(), 1);
}

#[test]
fn simulated_manifest_matches_real_format() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    segperf(&[
        "simulate",
        "--out",
        s(&sim),
        "--val-frames",
        "1",
        "--test-frames",
        "1",
        "--eps-255",
        "8",
    ])
    .unwrap();
    let m = Manifest::read(sim.join("test.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 1 + 2);
    let mut kinds = BTreeMap::new();
    for e in &m.entries {
        let rec = m.load_frame(e, 19).unwrap();
        assert!(rec.seg_pred.is_some() && rec.depth_pred.is_some() && rec.depth_gt.is_some());
        *kinds.entry(e.perturbation.clone()).or_insert(0) += 1;
    }
    assert_eq!(kinds.len(), 3);
}
