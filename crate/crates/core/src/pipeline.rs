//! In-memory orchestration: evaluate, calibrate, predict, aggregate.
//!
//! The CLI reads and writes files around these functions; the synthetic run
//! chains all of them without touching the disk.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frameio::{DepthMap, FrameRecord, ImageTensor, SegMap, SparseDepthMap};
use crate::metrics::{self, ErrorSummary, MetricSample, ScaleMode};
use crate::perturb::{self, PerturbationKind, PerturbationSpec};
use crate::regress::{self, RegressionModel};
use crate::samples::{Manifest, ManifestEntry};
use crate::seed;
use crate::synthmodel::{self, DegradationConfig, SceneConfig, SyntheticScene};
use crate::timeagg::{
    self, AggregationConfig, AggregationRow, PredictedSample, SeriesGrid, WindowMode,
};

/// Tag of the mean row in per-kind summaries.
pub const MEAN_ROW: &str = "mean";

/// Strengths with `0` first and duplicates removed, otherwise in input order.
pub fn epsilon_levels(eps_255: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0];
    for &e in eps_255 {
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// `(mIoU, ACC)` of one frame's predictions.
pub fn evaluate_outputs(
    seg_pred: &SegMap,
    seg_gt: &SegMap,
    depth_pred: &DepthMap,
    depth_gt: &SparseDepthMap,
    scale: f64,
) -> Result<(f64, f64)> {
    Ok((
        metrics::miou(seg_pred, seg_gt)?,
        metrics::depth_acc(depth_pred, depth_gt, scale)?,
    ))
}

fn member<'a, T>(value: &'a Option<T>, frame: &str, name: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Missing(format!("frame {frame} has no {name}")))
}

pub fn evaluate_frame(record: &FrameRecord, scale: f64) -> Result<(f64, f64)> {
    let id = &record.frame_id;
    evaluate_outputs(
        member(&record.seg_pred, id, "seg_pred")?,
        member(&record.seg_gt, id, "seg_gt")?,
        member(&record.depth_pred, id, "depth_pred")?,
        member(&record.depth_gt, id, "depth_gt")?,
        scale,
    )
}

/// One unit of evaluation work: a manifest entry scored under a tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub entry: usize,
    pub n: usize,
    pub perturbation: String,
    pub epsilon_255: f64,
}

/// Expands a manifest into evaluation tasks.
///
/// Entries with a perturbation tag are scored under that tag. Untagged
/// (clean) entries are scored once per kind at `ε = 0`, so each kind's
/// series includes the clean frame. `kinds` defaults to the tags found in
/// the manifest, or `none` when the manifest is clean only.
pub fn plan_evaluation(manifest: &Manifest, kinds: &[String]) -> Vec<EvalTask> {
    let index: BTreeMap<String, usize> = manifest
        .frame_ids()
        .into_iter()
        .enumerate()
        .map(|(n, id)| (id, n))
        .collect();
    let mut kinds: Vec<String> = kinds.to_vec();
    if kinds.is_empty() {
        let tags: BTreeSet<&str> = manifest
            .entries
            .iter()
            .filter_map(|e| e.perturbation.as_deref())
            .collect();
        kinds = tags.into_iter().map(String::from).collect();
    }
    if kinds.is_empty() {
        kinds.push("none".into());
    }
    let mut tasks = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let n = index[&e.frame_id];
        match &e.perturbation {
            Some(tag) => {
                if kinds.contains(tag) {
                    tasks.push(EvalTask {
                        entry: i,
                        n,
                        perturbation: tag.clone(),
                        epsilon_255: e.epsilon_255(),
                    });
                }
            }
            _ => tasks.extend(kinds.iter().map(|k| EvalTask {
                entry: i,
                n,
                perturbation: k.clone(),
                epsilon_255: 0.0,
            })),
        }
    }
    tasks
}

/// Samples in task order plus a message per skipped task.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub samples: Vec<MetricSample>,
    pub skipped: Vec<String>,
}

impl Evaluation {
    pub fn clean_miou(&self) -> Option<f64> {
        clean_miou(&self.samples)
    }
}

fn is_undefined(e: &Error) -> bool {
    matches!(e, Error::UndefinedMetric(_) | Error::EmptyGroundTruth)
}

/// Loads and scores every task in parallel. Frames with undefined metrics are
/// skipped and reported; any other error aborts.
pub fn evaluate_manifest(
    manifest: &Manifest,
    tasks: &[EvalTask],
    num_classes: usize,
    scale: f64,
) -> Result<Evaluation> {
    let entries: BTreeSet<usize> = tasks.iter().map(|t| t.entry).collect();
    let scored: BTreeMap<usize, Result<(f64, f64)>> = entries
        .into_par_iter()
        .map(|i| {
            let r = manifest
                .load_frame(&manifest.entries[i], num_classes)
                .and_then(|rec| evaluate_frame(&rec, scale));
            (i, r)
        })
        .collect();
    let mut out = Evaluation::default();
    for t in tasks {
        let entry = &manifest.entries[t.entry];
        match &scored[&t.entry] {
            Ok((miou, acc)) => out.samples.push(MetricSample {
                frame_id: entry.frame_id.clone(),
                n: t.n,
                perturbation: t.perturbation.clone(),
                epsilon_255: t.epsilon_255,
                miou: *miou,
                acc: *acc,
            }),
            Err(e) if is_undefined(e) => out.skipped.push(format!(
                "{} ({}, ε={}/255): {e}",
                entry.frame_id, t.perturbation, t.epsilon_255
            )),
            Err(e) => return Err(Error::Invalid(format!("{}: {e}", entry.frame_id))),
        }
    }
    Ok(out)
}

/// Clean performance: mean `ε = 0` mIoU, each frame counted once.
pub fn clean_miou(samples: &[MetricSample]) -> Option<f64> {
    let mut seen = BTreeSet::new();
    let clean: Vec<f64> = samples
        .iter()
        .filter(|s| s.epsilon_255 == 0.0 && seen.insert(s.frame_id.as_str()))
        .map(|s| s.miou)
        .collect();
    (!clean.is_empty()).then(|| clean.iter().sum::<f64>() / clean.len() as f64)
}

/// Global depth scale from the clean entries of a validation manifest.
pub fn calibrate_scale_from_manifest(
    manifest: &Manifest,
    num_classes: usize,
    mode: ScaleMode,
) -> Result<f64> {
    let mut seen = BTreeSet::new();
    let clean: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.epsilon_255() == 0.0 && seen.insert(e.frame_id.clone()))
        .collect();
    let pairs = clean
        .par_iter()
        .map(|e| {
            let rec = manifest.load_frame(e, num_classes)?;
            let id = rec.frame_id.clone();
            Ok((
                member(&rec.depth_pred, &id, "depth_pred")?.clone(),
                member(&rec.depth_gt, &id, "depth_gt")?.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::calibrate_global_scale(&pairs, mode)
}

pub fn predict(model: &RegressionModel, samples: &[MetricSample]) -> Vec<PredictedSample> {
    samples
        .iter()
        .map(|s| PredictedSample {
            sample: s.clone(),
            miou_pred: regress::predict_miou(model, s.acc),
        })
        .collect()
}

/// MAE and RMSE of `m̂IoU − mIoU` plus the mIoU–ACC correlation.
pub fn summarize(predictions: &[PredictedSample]) -> Result<ErrorSummary> {
    let pred: Vec<f64> = predictions.iter().map(|p| p.miou_pred).collect();
    let actual: Vec<f64> = predictions.iter().map(|p| p.sample.miou).collect();
    let acc: Vec<f64> = predictions.iter().map(|p| p.sample.acc).collect();
    let mut s = metrics::error_summary(&pred, &actual)?;
    s.rho = metrics::pearson_slices(&actual, &acc).ok();
    Ok(s)
}

/// One summary per perturbation tag, followed by the mean over tags.
pub fn kind_summaries(predictions: &[PredictedSample]) -> Result<Vec<(String, ErrorSummary)>> {
    let mut groups: BTreeMap<&str, Vec<PredictedSample>> = BTreeMap::new();
    for p in predictions {
        groups
            .entry(p.sample.perturbation.as_str())
            .or_default()
            .push(p.clone());
    }
    let mut rows = groups
        .into_iter()
        .map(|(k, v)| Ok((k.to_string(), summarize(&v)?)))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Invalid("no predictions to summarize".into()));
    }
    let m = rows.len() as f64;
    let rhos: Vec<f64> = rows.iter().filter_map(|(_, s)| s.rho).collect();
    let mean = ErrorSummary {
        mae: rows.iter().map(|(_, s)| s.mae).sum::<f64>() / m,
        rmse: rows.iter().map(|(_, s)| s.rmse).sum::<f64>() / m,
        rho: (rhos.len() == rows.len()).then(|| rhos.iter().sum::<f64>() / m),
        count: rows.iter().map(|(_, s)| s.count).sum(),
    };
    rows.push((MEAN_ROW.to_string(), mean));
    Ok(rows)
}

/// Settings of a fully synthetic run.
#[derive(Debug, Clone)]
pub struct SyntheticRunConfig {
    pub val_frames: usize,
    pub test_frames: usize,
    pub scene: SceneConfig,
    pub degradation: DegradationConfig,
    pub kinds: Vec<PerturbationKind>,
    pub eps_255: Vec<f64>,
    pub delta_n: Vec<usize>,
    pub k: usize,
    pub fps: f64,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl Default for SyntheticRunConfig {
    fn default() -> Self {
        Self {
            val_frames: 50,
            test_frames: 150,
            scene: SceneConfig::default(),
            degradation: DegradationConfig {
                clean_seg_error: 0.03,
                clean_depth_error: 0.05,
                ..DegradationConfig::default()
            },
            kinds: PerturbationKind::ALL.to_vec(),
            eps_255: perturb::DEFAULT_EPS_255.to_vec(),
            delta_n: timeagg::DEFAULT_DELTA_N.to_vec(),
            k: timeagg::DEFAULT_K,
            fps: timeagg::DEFAULT_FPS,
            scale_mode: ScaleMode::default(),
            seed: 0,
        }
    }
}

/// Perceiver output for one input variant of a synthetic frame.
#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub kind: Option<PerturbationKind>,
    pub epsilon_255: f64,
    /// RMS of the applied change `x_ε − x`, in 1/255 units.
    pub effective_epsilon_255: f64,
    pub image: ImageTensor,
    pub seg_pred: SegMap,
    pub depth_pred: DepthMap,
}

/// A scene with its clean output and one output per `(kind, ε > 0)`.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub scene: SyntheticScene,
    pub clean: SyntheticOutput,
    pub perturbed: Vec<SyntheticOutput>,
}

/// Frame `index` of a synthetic run, deterministic in `(config, index)`.
pub fn synthesize_frame(config: &SyntheticRunConfig, index: usize) -> Result<SyntheticFrame> {
    let base = config.seed;
    let scene = synthmodel::generate_scene(&SceneConfig {
        seed: seed::derive_seed(base, &format!("scene/{index}")),
        ..config.scene.clone()
    })?;
    let perceiver = synthmodel::Perceiver::new(
        &scene,
        &config.degradation,
        seed::derive_seed(base, &format!("degrade/{index}")),
    )?;
    let output =
        |kind: Option<PerturbationKind>, eps: f64, image: ImageTensor| -> Result<SyntheticOutput> {
            let change: Vec<f64> = image
                .data()
                .iter()
                .zip(scene.record.image.data())
                .map(|(a, b)| a - b)
                .collect();
            let effective = perturb::rms(&change);
            let (seg_pred, depth_pred) = perceiver.outputs(effective)?;
            Ok(SyntheticOutput {
                kind,
                epsilon_255: eps,
                effective_epsilon_255: effective * 255.0,
                image,
                seg_pred,
                depth_pred,
            })
        };
    let clean = output(None, 0.0, scene.record.image.clone())?;
    let mut perturbed = Vec::new();
    for &kind in &config.kinds {
        for &eps in epsilon_levels(&config.eps_255).iter().skip(1) {
            let spec = PerturbationSpec::new(
                kind,
                eps,
                seed::derive_seed(base, &format!("perturb/{index}/{kind}/{eps}")),
            )?;
            let image = perturb::perturb_image(&scene.record.image, &spec)?;
            perturbed.push(output(Some(kind), eps, image)?);
        }
    }
    Ok(SyntheticFrame {
        scene,
        clean,
        perturbed,
    })
}

/// Samples of a synthetic frame: the clean output once per kind, then every
/// perturbed output, all under frame index `n`.
pub fn synthetic_samples(
    frame: &SyntheticFrame,
    kinds: &[PerturbationKind],
    n: usize,
    scale: f64,
) -> Result<Vec<MetricSample>> {
    let rec = &frame.scene.record;
    let id = &rec.frame_id;
    let seg_gt = member(&rec.seg_gt, id, "seg_gt")?;
    let depth_gt = member(&rec.depth_gt, id, "depth_gt")?;
    let score = |o: &SyntheticOutput, tag: PerturbationKind| -> Result<MetricSample> {
        let (miou, acc) = evaluate_outputs(&o.seg_pred, seg_gt, &o.depth_pred, depth_gt, scale)?;
        Ok(MetricSample {
            frame_id: id.clone(),
            n,
            perturbation: tag.to_string(),
            epsilon_255: o.epsilon_255,
            miou,
            acc,
        })
    };
    let mut out = Vec::new();
    for &kind in kinds {
        out.push(score(&frame.clean, kind)?);
    }
    for o in &frame.perturbed {
        out.push(score(o, o.kind.expect("perturbed output has a kind"))?);
    }
    Ok(out)
}

/// Everything a synthetic run produces.
#[derive(Debug, Clone)]
pub struct SyntheticReport {
    pub scale: f64,
    pub model: RegressionModel,
    pub val_samples: Vec<MetricSample>,
    pub test_samples: Vec<MetricSample>,
    pub predictions: Vec<PredictedSample>,
    pub summaries: Vec<(String, ErrorSummary)>,
    pub aggregation: Vec<AggregationRow>,
}

/// Generates, calibrates on the validation frames and evaluates on the test
/// frames. Test frames are i.i.d., so windows are drawn at random.
pub fn run_synthetic(config: &SyntheticRunConfig) -> Result<SyntheticReport> {
    if config.val_frames == 0 || config.test_frames == 0 {
        return Err(Error::Config(
            "synthetic run needs validation and test frames".into(),
        ));
    }
    let total = config.val_frames + config.test_frames;
    let frames = (0..total)
        .into_par_iter()
        .map(|i| synthesize_frame(config, i))
        .collect::<Result<Vec<_>>>()?;
    let (val, test) = frames.split_at(config.val_frames);

    let pairs: Vec<(DepthMap, SparseDepthMap)> = val
        .iter()
        .map(|f| {
            let gt = member(
                &f.scene.record.depth_gt,
                &f.scene.record.frame_id,
                "depth_gt",
            )?;
            Ok((f.clean.depth_pred.clone(), gt.clone()))
        })
        .collect::<Result<_>>()?;
    let scale = metrics::calibrate_global_scale(&pairs, config.scale_mode)?;

    let collect = |set: &[SyntheticFrame]| -> Result<Vec<MetricSample>> {
        let per_frame = set
            .par_iter()
            .enumerate()
            .map(|(n, f)| synthetic_samples(f, &config.kinds, n, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(per_frame.into_iter().flatten().collect())
    };
    let val_samples = collect(val)?;
    let test_samples = collect(test)?;

    let model = regress::fit_quadratic(&val_samples)?;
    let predictions = predict(&model, &test_samples);
    let summaries = kind_summaries(&predictions)?;
    let grid = SeriesGrid::from_samples(&predictions, None)?;
    let configs = config
        .delta_n
        .iter()
        .map(|&d| AggregationConfig::new(d, config.k, config.fps))
        .collect::<Result<Vec<_>>>()?;
    let mode = WindowMode::Random {
        seed: seed::derive_seed(config.seed, "window"),
    };
    let aggregation = timeagg::aggregation_report(&grid, &configs, mode)?;
    Ok(SyntheticReport {
        scale,
        model,
        val_samples,
        test_samples,
        predictions,
        summaries,
        aggregation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticRunConfig {
        SyntheticRunConfig {
            val_frames: 6,
            test_frames: 8,
            eps_255: vec![4.0, 16.0],
            delta_n: vec![1, 3],
            ..SyntheticRunConfig::default()
        }
    }

    #[test]
    fn epsilon_levels_prepend_zero() {
        assert_eq!(epsilon_levels(&[2.0, 0.0, 2.0, 1.0]), vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn synthetic_sample_count() {
        let cfg = small();
        let r = run_synthetic(&cfg).unwrap();
        assert_eq!(r.test_samples.len(), 8 * 2 * 3);
        assert_eq!(r.val_samples.len(), 6 * 2 * 3);
        assert_eq!(r.aggregation.len(), 2);
        assert_eq!(r.summaries.last().unwrap().0, MEAN_ROW);
    }

    #[test]
    fn synthetic_run_is_deterministic() {
        let a = run_synthetic(&small()).unwrap();
        let b = run_synthetic(&small()).unwrap();
        assert_eq!(a.test_samples, b.test_samples);
        assert_eq!(a.model, b.model);
        assert_eq!(a.aggregation, b.aggregation);
    }

    #[test]
    fn clean_outputs_are_shared_across_kinds() {
        let r = run_synthetic(&small()).unwrap();
        let clean: Vec<&MetricSample> = r
            .test_samples
            .iter()
            .filter(|s| s.n == 0 && s.epsilon_255 == 0.0)
            .collect();
        assert_eq!(clean.len(), 2);
        assert_eq!((clean[0].miou, clean[0].acc), (clean[1].miou, clean[1].acc));
        assert_ne!(clean[0].perturbation, clean[1].perturbation);
    }

    #[test]
    fn perfect_predictor_scores_zero_error() {
        let r = run_synthetic(&small()).unwrap();
        let exact: Vec<PredictedSample> = r
            .test_samples
            .iter()
            .map(|s| PredictedSample {
                sample: s.clone(),
                miou_pred: s.miou,
            })
            .collect();
        let s = summarize(&exact).unwrap();
        assert_eq!((s.mae, s.rmse), (0.0, 0.0));
    }

    #[test]
    fn regression_beats_mean_predictor_in_sample() {
        let mut cfg = small();
        cfg.test_frames = 1;
        cfg.delta_n = vec![1];
        let r = run_synthetic(&cfg).unwrap();
        let fitted = predict(&r.model, &r.val_samples);
        let mean = r.val_samples.iter().map(|s| s.miou).sum::<f64>() / r.val_samples.len() as f64;
        let constant: Vec<PredictedSample> = r
            .val_samples
            .iter()
            .map(|s| PredictedSample {
                sample: s.clone(),
                miou_pred: mean,
            })
            .collect();
        assert!(summarize(&fitted).unwrap().rmse <= summarize(&constant).unwrap().rmse);
    }

    #[test]
    fn clean_miou_counts_frames_once() {
        let s = |id: &str, eps: f64, miou: f64| MetricSample {
            frame_id: id.into(),
            n: 0,
            perturbation: "gaussian".into(),
            epsilon_255: eps,
            miou,
            acc: 1.0,
        };
        let samples = vec![
            s("a", 0.0, 0.5),
            s("a", 0.0, 0.5),
            s("b", 0.0, 1.0),
            s("a", 4.0, 0.0),
        ];
        assert_eq!(clean_miou(&samples), Some(0.75));
    }
}
