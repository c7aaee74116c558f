//! Temporal aggregation of actual and predicted performance.
//!
//! For a centre frame `n`, a window holds `ΔN` frames spaced `K` apart,
//! `{n − K(ΔN−1)/2, …, n, …, n + K(ΔN−1)/2}`. Actual and predicted mIoU are
//! both averaged over the window before their difference is scored, which
//! costs a decision latency of `(ΔN−1)/2 · K / f` seconds.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::SegMap;
use crate::metrics::{self, ErrorSummary, MetricSample};
use crate::seed;

/// Default camera frame rate in 1/s.
pub const DEFAULT_FPS: f64 = 10.0;
/// Default frame spacing inside a window.
pub const DEFAULT_K: usize = 100;
/// Window sizes reported by default.
pub const DEFAULT_DELTA_N: [usize; 7] = [1, 3, 5, 11, 21, 51, 101];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    delta_n: usize,
    k: usize,
    fps: f64,
}

impl AggregationConfig {
    pub fn new(delta_n: usize, k: usize, fps: f64) -> Result<Self> {
        if delta_n == 0 || delta_n.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window size {delta_n} must be odd and >= 1"
            )));
        }
        if k == 0 {
            return Err(Error::Config("subsampling factor K must be >= 1".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("frame rate {fps} must be > 0")));
        }
        Ok(Self { delta_n, k, fps })
    }

    pub fn delta_n(&self) -> usize {
        self.delta_n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    fn half(&self) -> i64 {
        ((self.delta_n - 1) / 2) as i64
    }
}

/// Frame indices of the window centred on `n`, in increasing order. Indices
/// may fall outside the recorded series; callers decide how to treat them.
pub fn window_indices(config: &AggregationConfig, n: i64) -> Vec<i64> {
    let half = config.half();
    let k = config.k as i64;
    (-half..=half).map(|j| n + j * k).collect()
}

/// Mean of `values` over `indices`.
pub fn aggregate_window(values: &[Option<f64>], indices: &[i64]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Coverage("empty window".into()));
    }
    let mut sum = 0.0;
    for &i in indices {
        let v = usize::try_from(i)
            .ok()
            .and_then(|i| values.get(i).copied().flatten())
            .ok_or_else(|| Error::Coverage(format!("frame {i} has no value")))?;
        sum += v;
    }
    Ok(sum / indices.len() as f64)
}

/// Seconds between a frame being captured and its aggregated estimate being
/// available.
pub fn decision_latency(config: &AggregationConfig) -> f64 {
    ((config.delta_n - 1) / 2) as f64 * config.k as f64 / config.fps
}

/// How window members are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// True frame indices of an ordered sequence; windows crossing the series
    /// boundary are dropped.
    Sequential,
    /// For unordered test sets: the centre frame plus `ΔN − 1` other frames
    /// drawn without replacement, seeded per centre frame.
    Random { seed: u64 },
}

/// A metric sample together with its predicted mIoU.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedSample {
    pub sample: MetricSample,
    pub miou_pred: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Point {
    actual: f64,
    predicted: f64,
    acc: f64,
}

/// Samples arranged as one frame-indexed series per `(perturbation, ε)`.
#[derive(Debug, Clone, Default)]
pub struct SeriesGrid {
    frames: usize,
    slices: BTreeMap<(String, i64), Vec<Option<Point>>>,
}

fn eps_key(eps_255: f64) -> i64 {
    (eps_255 * 1e6).round() as i64
}

impl SeriesGrid {
    /// Groups samples by `(perturbation, ε)`. With `eps_filter`, only the
    /// listed strengths (in 1/255 units) are kept.
    pub fn from_samples(samples: &[PredictedSample], eps_filter: Option<&[f64]>) -> Result<Self> {
        let keep: Option<Vec<i64>> = eps_filter.map(|e| e.iter().map(|&v| eps_key(v)).collect());
        let frames = samples.iter().map(|s| s.sample.n + 1).max().unwrap_or(0);
        let mut slices: BTreeMap<(String, i64), Vec<Option<Point>>> = BTreeMap::new();
        for s in samples {
            let key = eps_key(s.sample.epsilon_255);
            if keep.as_ref().is_some_and(|k| !k.contains(&key)) {
                continue;
            }
            let slot = slices
                .entry((s.sample.perturbation.clone(), key))
                .or_insert_with(|| vec![None; frames]);
            let point = &mut slot[s.sample.n];
            if point.is_some() {
                return Err(Error::Invalid(format!(
                    "duplicate sample for frame {} ({}, ε={}/255)",
                    s.sample.n, s.sample.perturbation, s.sample.epsilon_255
                )));
            }
            *point = Some(Point {
                actual: s.sample.miou,
                predicted: s.miou_pred,
                acc: s.sample.acc,
            });
        }
        Ok(Self { frames, slices })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }
}

/// Scores of one window size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationRow {
    pub delta_n: usize,
    pub latency_s: f64,
    pub summary: ErrorSummary,
}

fn random_window(
    config: &AggregationConfig,
    n: usize,
    present: &[usize],
    base: u64,
) -> Option<Vec<i64>> {
    let others: Vec<usize> = present.iter().copied().filter(|&i| i != n).collect();
    let need = config.delta_n - 1;
    if others.len() < need {
        return None;
    }
    let mut rng = seed::rng(seed::derive_seed(
        base,
        &format!("window/{}/{n}", config.delta_n),
    ));
    let mut window: Vec<i64> = index::sample(&mut rng, others.len(), need)
        .into_iter()
        .map(|j| others[j] as i64)
        .collect();
    window.push(n as i64);
    window.sort_unstable();
    Some(window)
}

/// Aggregated differences `Δ = mean(pred) − mean(actual)` over every complete
/// window of every slice, scored with MAE and RMSE. `rho` is the Pearson
/// correlation between aggregated mIoU and aggregated ACC.
pub fn evaluate_aggregated(
    grid: &SeriesGrid,
    config: &AggregationConfig,
    mode: WindowMode,
) -> Result<AggregationRow> {
    let mut deltas = Vec::new();
    let mut agg_miou = Vec::new();
    let mut agg_acc = Vec::new();
    for series in grid.slices.values() {
        let actual: Vec<Option<f64>> = series.iter().map(|p| p.map(|p| p.actual)).collect();
        let predicted: Vec<Option<f64>> = series.iter().map(|p| p.map(|p| p.predicted)).collect();
        let acc: Vec<Option<f64>> = series.iter().map(|p| p.map(|p| p.acc)).collect();
        let present: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
        for &n in &present {
            let window = match mode {
                WindowMode::Sequential => window_indices(config, n as i64),
                WindowMode::Random { seed } => match random_window(config, n, &present, seed) {
                    Some(w) => w,
                    None => continue,
                },
            };
            let (Ok(a), Ok(p), Ok(b)) = (
                aggregate_window(&actual, &window),
                aggregate_window(&predicted, &window),
                aggregate_window(&acc, &window),
            ) else {
                continue;
            };
            deltas.push(p - a);
            agg_miou.push(a);
            agg_acc.push(b);
        }
    }
    if deltas.is_empty() {
        return Err(Error::Coverage(format!(
            "no complete window for ΔN={} K={} over {} frames",
            config.delta_n, config.k, grid.frames
        )));
    }
    let mut summary = metrics::summarize_differences(&deltas)?;
    summary.rho = metrics::pearson_slices(&agg_miou, &agg_acc).ok();
    Ok(AggregationRow {
        delta_n: config.delta_n,
        latency_s: decision_latency(config),
        summary,
    })
}

/// One row per window size, evaluated in parallel, in input order.
pub fn aggregation_report(
    grid: &SeriesGrid,
    configs: &[AggregationConfig],
    mode: WindowMode,
) -> Result<Vec<AggregationRow>> {
    configs
        .par_iter()
        .map(|c| evaluate_aggregated(grid, c, mode))
        .collect()
}

/// Mean mIoU between frames `K` apart, plus the mean over all pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCurve {
    pub per_k: Vec<(usize, f64)>,
    pub all_pairs: f64,
}

fn mean_defined(values: impl Iterator<Item = Result<f64>>) -> Result<Option<f64>> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        match v {
            Ok(v) => {
                sum += v;
                count += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Similarity of segmentation maps as a function of their temporal distance.
/// The later map of a pair plays the prediction, the earlier one the ground
/// truth.
pub fn pairwise_miou_curve(seg_maps: &[SegMap], k_values: &[usize]) -> Result<PairwiseCurve> {
    let len = seg_maps.len();
    if len < 2 {
        return Err(Error::Coverage(format!("need at least 2 maps, got {len}")));
    }
    let per_k = k_values
        .iter()
        .map(|&k| {
            if k == 0 || k >= len {
                return Err(Error::Coverage(format!(
                    "K={k} leaves no pair among {len} maps"
                )));
            }
            let mean = mean_defined(
                (0..len - k)
                    .into_par_iter()
                    .map(|i| metrics::miou(&seg_maps[i + k], &seg_maps[i]))
                    .collect::<Vec<_>>()
                    .into_iter(),
            )?
            .ok_or_else(|| Error::UndefinedMetric(format!("no defined pair at K={k}")))?;
            Ok((k, mean))
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<Result<f64>> = (0..len)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..len).map(move |j| (i, j)))
        .map(|(i, j)| metrics::miou(&seg_maps[j], &seg_maps[i]))
        .collect();
    let all_pairs = mean_defined(all.into_iter())?
        .ok_or_else(|| Error::UndefinedMetric("no defined pair".into()))?;
    Ok(PairwiseCurve { per_k, all_pairs })
}
