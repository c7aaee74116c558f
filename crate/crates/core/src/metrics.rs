//! Segmentation, depth, correlation and loss metrics.
//!
//! Everything here works in `[0, 1]` units; percent conversion is left to
//! reporting code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::{
    DepthMap, ImageTensor, ProbMap, SegMap, SparseDepthMap, DEPTH_MAX, DEPTH_MIN, IGNORE,
};

/// Threshold of the δ < 1.25 accuracy metric.
pub const ACC_THRESHOLD: f64 = 1.25;

/// Floor applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weight between the SSIM and L1 terms of the photometric loss.
pub const PHOTOMETRIC_ALPHA: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: Vec<u64>,
    pub false_pos: Vec<u64>,
    pub false_neg: Vec<u64>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.true_pos.len()
    }

    pub fn class_present(&self, class: usize) -> bool {
        self.true_pos[class] + self.false_pos[class] + self.false_neg[class] > 0
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.true_pos[class] + self.false_pos[class] + self.false_neg[class];
        (denom > 0).then(|| self.true_pos[class] as f64 / denom as f64)
    }
}

/// Per-class TP/FP/FN over every pixel whose ground truth is not IGNORE.
pub fn confusion_counts(pred: &SegMap, gt: &SegMap) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::Shape(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    let k = gt.num_classes();
    let mut counts = ConfusionCounts {
        true_pos: vec![0; k],
        false_pos: vec![0; k],
        false_neg: vec![0; k],
    };
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == IGNORE {
            continue;
        }
        if p == g {
            counts.true_pos[g as usize] += 1;
        } else {
            counts.false_neg[g as usize] += 1;
            if p != IGNORE {
                counts.false_pos[p as usize] += 1;
            }
        }
    }
    Ok(counts)
}

/// Single-image mIoU: mean IoU over the classes present in prediction or
/// ground truth. Classes with `tp + fp + fn = 0` are left out of the mean.
pub fn miou_image(counts: &ConfusionCounts) -> Result<f64> {
    let ious: Vec<f64> = (0..counts.num_classes())
        .filter_map(|s| counts.iou(s))
        .collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class present in prediction or ground truth".into(),
        ));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Convenience wrapper around [`confusion_counts`] and [`miou_image`].
pub fn miou(pred: &SegMap, gt: &SegMap) -> Result<f64> {
    miou_image(&confusion_counts(pred, gt)?)
}

/// How a per-image depth scale factor is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `median_i(gt_i / pred_i)`
    #[default]
    MedianRatio,
    /// `median(gt) / median(pred)` over valid pixels
    RatioOfMedians,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median-ratio" => Ok(Self::MedianRatio),
            "ratio-of-medians" => Ok(Self::RatioOfMedians),
            other => Err(Error::Config(format!("unknown scale mode {other:?}"))),
        }
    }
}

/// Median with the midpoint convention for even lengths. Sorts in place.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

fn check_depth_shapes(pred: &DepthMap, gt: &SparseDepthMap) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "depth prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

pub fn depth_scale_factor(pred: &DepthMap, gt: &SparseDepthMap, mode: ScaleMode) -> Result<f64> {
    check_depth_shapes(pred, gt)?;
    let d = pred.depth();
    let scale = match mode {
        ScaleMode::MedianRatio => {
            let mut ratios: Vec<f64> = gt.iter_valid().map(|(i, g)| g / d[i]).collect();
            median(&mut ratios)
        }
        ScaleMode::RatioOfMedians => {
            let mut g: Vec<f64> = gt.iter_valid().map(|(_, g)| g).collect();
            let mut p: Vec<f64> = gt.iter_valid().map(|(i, _)| d[i]).collect();
            median(&mut g).zip(median(&mut p)).map(|(g, p)| g / p)
        }
    };
    scale.ok_or(Error::EmptyGroundTruth)
}

/// Global scale: median of the per-frame factors over a validation set.
pub fn calibrate_global_scale(
    val_frames: &[(DepthMap, SparseDepthMap)],
    mode: ScaleMode,
) -> Result<f64> {
    if val_frames.is_empty() {
        return Err(Error::Calibration(
            "no validation frames for depth scale".into(),
        ));
    }
    let mut factors = val_frames
        .iter()
        .map(|(p, g)| depth_scale_factor(p, g, mode))
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(&mut factors).expect("non-empty"))
}

/// Fraction of valid ground-truth pixels with `max(d/g, g/d) < 1.25`, after
/// scaling the prediction and clamping it to the valid depth range.
pub fn depth_acc(pred: &DepthMap, gt: &SparseDepthMap, scale: f64) -> Result<f64> {
    check_depth_shapes(pred, gt)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Range(format!(
            "depth scale {scale} must be positive"
        )));
    }
    let d = pred.depth();
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, g) in gt.iter_valid() {
        let p = (d[i] * scale).clamp(DEPTH_MIN, DEPTH_MAX);
        let ratio = (p / g).max(g / p);
        if ratio < ACC_THRESHOLD {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(hits as f64 / total as f64)
}

/// Class weights `w_s = 1 / ln(1.02 + p_s)` where `p_s`
/// is the share of non-IGNORE pixels labelled `s`.
pub fn class_weights(gt: &SegMap) -> Vec<f64> {
    let k = gt.num_classes();
    let mut hist = vec![0u64; k];
    for &l in gt.labels() {
        if l != IGNORE {
            hist[l as usize] += 1;
        }
    }
    let total: u64 = hist.iter().sum();
    hist.iter()
        .map(|&c| {
            let p = if total > 0 {
                c as f64 / total as f64
            } else {
                0.0
            };
            1.0 / (1.02 + p).ln()
        })
        .collect()
}

/// Weighted pixel-averaged cross-entropy.
pub fn cross_entropy_loss(
    probs: &ProbMap,
    gt_onehot: &ProbMap,
    class_weights: &[f64],
) -> Result<f64> {
    if (probs.height(), probs.width(), probs.num_classes())
        != (
            gt_onehot.height(),
            gt_onehot.width(),
            gt_onehot.num_classes(),
        )
    {
        return Err(Error::Shape(
            "probability map vs one-hot ground truth".into(),
        ));
    }
    if class_weights.len() != probs.num_classes() {
        return Err(Error::Shape(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            probs.num_classes()
        )));
    }
    let pixels = probs.height() * probs.width();
    let mut sum = 0.0;
    for i in 0..pixels {
        for ((&y, &t), &w) in probs
            .pixel(i)
            .iter()
            .zip(gt_onehot.pixel(i))
            .zip(class_weights)
        {
            if t != 0.0 {
                sum += w * t * y.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(-sum / pixels as f64)
}

fn check_image_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-pixel SSIM on 3×3 box windows with replicate padding, averaged over
/// channels. Returned row-major, `height * width` values in `[-1, 1]`.
pub fn ssim_map(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f64>> {
    check_image_shapes(a, b)?;
    let (h, w, c) = a.shape();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    for dx in -1i64..=1 {
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let va = a.get(yy, xx, ch);
                        let vb = b.get(yy, xx, ch);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let mu_a = sa / 9.0;
                let mu_b = sb / 9.0;
                let var_a = saa / 9.0 - mu_a * mu_a;
                let var_b = sbb / 9.0 - mu_b * mu_b;
                let cov = sab / 9.0 - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
            }
            out[y * w + x] = (acc / c as f64).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Minimum-reprojection photometric loss. `warped` holds the source frames
/// already warped into the target view.
pub fn photometric_loss(target: &ImageTensor, warped: &[ImageTensor]) -> Result<f64> {
    if warped.is_empty() {
        return Err(Error::Missing(
            "photometric loss needs at least one warped frame".into(),
        ));
    }
    let (h, w, c) = target.shape();
    let mut best = vec![f64::INFINITY; h * w];
    for candidate in warped {
        let ssim = ssim_map(target, candidate)?;
        for (i, slot) in best.iter_mut().enumerate() {
            let l1: f64 = (0..c)
                .map(|ch| (target.data()[i * c + ch] - candidate.data()[i * c + ch]).abs())
                .sum::<f64>()
                / c as f64;
            let dissim = ((1.0 - ssim[i]) / 2.0).clamp(0.0, 1.0);
            let err = PHOTOMETRIC_ALPHA * dissim + (1.0 - PHOTOMETRIC_ALPHA) * l1;
            *slot = slot.min(err);
        }
    }
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

/// Edge-aware smoothness of the mean-normalized inverse depth. The caller
/// applies the loss weight.
pub fn smoothness_loss(depth: &DepthMap, image: &ImageTensor) -> Result<f64> {
    let (h, w, c) = image.shape();
    if (depth.height(), depth.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "depth {}x{} vs image {h}x{w}",
            depth.height(),
            depth.width()
        )));
    }
    let disp: Vec<f64> = depth.depth().iter().map(|d| 1.0 / d).collect();
    let mean = disp.iter().sum::<f64>() / disp.len() as f64;
    let norm: Vec<f64> = disp.iter().map(|d| d / mean).collect();
    let img_grad = |i: usize, j: usize| -> f64 {
        (0..c)
            .map(|ch| (image.data()[i * c + ch] - image.data()[j * c + ch]).abs())
            .sum::<f64>()
            / c as f64
    };

    let mut gx = (0.0, 0usize);
    let mut gy = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx.0 += (norm[i + 1] - norm[i]).abs() * (-img_grad(i, i + 1)).exp();
                gx.1 += 1;
            }
            if y + 1 < h {
                gy.0 += (norm[i + w] - norm[i]).abs() * (-img_grad(i, i + w)).exp();
                gy.1 += 1;
            }
        }
    }
    let mean_of = |(s, n): (f64, usize)| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(mean_of(gx) + mean_of(gy))
}

/// One `(frame, perturbation, strength)` evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub frame_id: String,
    pub n: usize,
    pub perturbation: String,
    /// Perturbation strength in gray-value units of 1/255.
    pub epsilon_255: f64,
    pub miou: f64,
    pub acc: f64,
}

impl MetricSample {
    pub fn epsilon(&self) -> f64 {
        self.epsilon_255 / 255.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mae: f64,
    pub rmse: f64,
    pub rho: Option<f64>,
    pub count: usize,
}

/// Pearson correlation between mIoU (`a`) and ACC (`b`) across samples.
pub fn pearson(samples: &[MetricSample]) -> Result<f64> {
    let a: Vec<f64> = samples.iter().map(|s| s.miou).collect();
    let b: Vec<f64> = samples.iter().map(|s| s.acc).collect();
    pearson_slices(&a, &b)
}

pub fn pearson_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 samples, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - mu_a, y - mu_b);
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::UndefinedCorrelation("constant sequence".into()));
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

/// `Δ = predicted − actual`.
pub fn differences(predicted: &[f64], actual: &[f64]) -> Result<Vec<f64>> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    Ok(predicted.iter().zip(actual).map(|(p, a)| p - a).collect())
}

pub fn summarize_differences(deltas: &[f64]) -> Result<ErrorSummary> {
    if deltas.is_empty() {
        return Err(Error::Missing("no samples to summarize".into()));
    }
    let n = deltas.len() as f64;
    let mae = deltas.iter().map(|d| d.abs()).sum::<f64>() / n;
    let rmse = (deltas.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    Ok(ErrorSummary {
        mae,
        // rounding can leave rmse a hair under mae when all |Δ| are equal
        rmse: rmse.max(mae),
        rho: None,
        count: deltas.len(),
    })
}

/// MAE and RMSE of predicted against actual; `rho` is left unset.
pub fn error_summary(predicted: &[f64], actual: &[f64]) -> Result<ErrorSummary> {
    summarize_differences(&differences(predicted, actual)?)
}
