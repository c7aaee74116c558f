//! Record formats on disk.
//!
//! - manifest: JSON Lines, one [`ManifestEntry`] per frame, paths relative
//!   to the manifest file
//! - samples CSV: `frame_id,n,perturbation,epsilon_255,miou,acc`
//! - predictions CSV: the sample columns plus `miou_pred`
//! - aggregation CSV: `delta_n,latency_s,rho,mae,rmse`
//! - summary CSV: `perturbation,count,rho,mae,rmse`

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::{self, FrameRecord};
use crate::metrics::{ErrorSummary, MetricSample};
use crate::timeagg::{AggregationRow, PredictedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_gt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_pred: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_pred: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_gt: Option<String>,
    /// Perturbation tag; absent on clean source frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<String>,
    /// Strength in 1/255 units; absent means 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_255: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl ManifestEntry {
    pub fn epsilon_255(&self) -> f64 {
        self.epsilon_255.unwrap_or(0.0)
    }
}

/// A parsed manifest and the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::Missing(format!("manifest {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            entries.push(entry);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, entries })
    }

    pub fn write(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for e in entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    /// Frame ids in first-appearance order; the position is the frame index `n`.
    pub fn frame_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.frame_id.clone()))
            .map(|e| e.frame_id.clone())
            .collect()
    }

    /// Loads every raster referenced by `entry`.
    pub fn load_frame(&self, entry: &ManifestEntry, num_classes: usize) -> Result<FrameRecord> {
        let classes = entry.num_classes.unwrap_or(num_classes);
        let seg = |p: &Option<String>| {
            p.as_ref()
                .map(|p| frameio::load_seg_map(self.resolve(p), classes))
                .transpose()
        };
        let record = FrameRecord {
            frame_id: entry.frame_id.clone(),
            image: frameio::load_image(self.resolve(&entry.image))?,
            seg_gt: seg(&entry.seg_gt)?,
            seg_pred: seg(&entry.seg_pred)?,
            depth_pred: entry
                .depth_pred
                .as_ref()
                .map(|p| frameio::load_depth_prediction(self.resolve(p)))
                .transpose()?,
            depth_gt: entry
                .depth_gt
                .as_ref()
                .map(|p| frameio::load_depth_map(self.resolve(p)))
                .transpose()?,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Fails when the two manifests share a frame id.
pub fn check_disjoint(val: &Manifest, test: &Manifest) -> Result<()> {
    let val_ids: BTreeSet<String> = val.frame_ids().into_iter().collect();
    if let Some(shared) = test.frame_ids().into_iter().find(|id| val_ids.contains(id)) {
        return Err(Error::Invalid(format!(
            "frame {shared:?} appears in both validation and test manifests"
        )));
    }
    Ok(())
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[MetricSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<MetricSample>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Missing(format!("samples {}: {e}", path.display())))?;
    let samples = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricSample>, _>>()?;
    for s in &samples {
        if !(0.0..=1.0).contains(&s.miou) || !(0.0..=1.0).contains(&s.acc) {
            return Err(Error::Range(format!(
                "sample {} ({}, ε={}): metrics outside [0, 1]",
                s.frame_id, s.perturbation, s.epsilon_255
            )));
        }
        if s.epsilon_255 < 0.0 {
            return Err(Error::Range(format!("negative epsilon for {}", s.frame_id)));
        }
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    frame_id: String,
    n: usize,
    perturbation: String,
    epsilon_255: f64,
    miou: f64,
    acc: f64,
    miou_pred: f64,
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &[PredictedSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in predictions {
        w.serialize(PredictionRow {
            frame_id: p.sample.frame_id.clone(),
            n: p.sample.n,
            perturbation: p.sample.perturbation.clone(),
            epsilon_255: p.sample.epsilon_255,
            miou: p.sample.miou,
            acc: p.sample.acc,
            miou_pred: p.miou_pred,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictedSample>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Missing(format!("predictions {}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| {
            let row: PredictionRow = row?;
            Ok(PredictedSample {
                sample: MetricSample {
                    frame_id: row.frame_id,
                    n: row.n,
                    perturbation: row.perturbation,
                    epsilon_255: row.epsilon_255,
                    miou: row.miou,
                    acc: row.acc,
                },
                miou_pred: row.miou_pred,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AggregationCsvRow {
    delta_n: usize,
    latency_s: f64,
    rho: Option<f64>,
    mae: f64,
    rmse: f64,
}

pub fn write_aggregation(path: impl AsRef<Path>, rows: &[AggregationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(AggregationCsvRow {
            delta_n: r.delta_n,
            latency_s: r.latency_s,
            rho: r.summary.rho,
            mae: r.summary.mae,
            rmse: r.summary.rmse,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryCsvRow<'a> {
    perturbation: &'a str,
    count: usize,
    rho: Option<f64>,
    mae: f64,
    rmse: f64,
}

pub fn write_summaries(path: impl AsRef<Path>, rows: &[(String, ErrorSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (name, s) in rows {
        w.serialize(SummaryCsvRow {
            perturbation: name,
            count: s.count,
            rho: s.rho,
            mae: s.mae,
            rmse: s.rmse,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample(frame: &str, n: usize, eps: f64) -> MetricSample {
        MetricSample {
            frame_id: frame.into(),
            n,
            perturbation: "salt_pepper".into(),
            epsilon_255: eps,
            miou: 0.625,
            acc: 0.8125,
        }
    }

    #[test]
    fn samples_csv_header_and_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let samples = vec![sample("a", 0, 0.0), sample("b", 1, 0.25)];
        write_samples(&p, &samples).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "frame_id,n,perturbation,epsilon_255,miou,acc"
        );
        assert_eq!(read_samples(&p).unwrap(), samples);
    }

    #[test]
    fn samples_outside_unit_range_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(
            &p,
            "frame_id,n,perturbation,epsilon_255,miou,acc\na,0,fgsm,4,1.5,0.5\n",
        )
        .unwrap();
        assert!(matches!(read_samples(&p), Err(Error::Range(_))));
    }

    #[test]
    fn external_attack_tags_are_accepted() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(
            &p,
            "frame_id,n,perturbation,epsilon_255,miou,acc\na,0,pgd,4,0.4,0.7\n",
        )
        .unwrap();
        assert_eq!(read_samples(&p).unwrap()[0].perturbation, "pgd");
    }

    #[test]
    fn predictions_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let preds = vec![PredictedSample {
            sample: sample("a", 3, 8.0),
            miou_pred: 0.5,
        }];
        write_predictions(&p, &preds).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("frame_id,n,perturbation,epsilon_255,miou,acc,miou_pred\n"));
        assert_eq!(read_predictions(&p).unwrap(), preds);
    }

    #[test]
    fn manifest_fields_and_optional_members() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let entry = ManifestEntry {
            frame_id: "000001".into(),
            image: "img/000001.png".into(),
            seg_gt: Some("seg/000001.png".into()),
            seg_pred: None,
            depth_pred: None,
            depth_gt: Some("depth/000001.png".into()),
            perturbation: None,
            epsilon_255: None,
            num_classes: None,
        };
        Manifest::write(&p, std::slice::from_ref(&entry)).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            line.trim(),
            r#"{"frame_id":"000001","image":"img/000001.png","seg_gt":"seg/000001.png","depth_gt":"depth/000001.png"}"#
        );
        let m = Manifest::read(&p).unwrap();
        assert_eq!(m.entries, vec![entry]);
        assert_eq!(m.resolve("x.png"), dir.path().join("x.png"));
    }

    #[test]
    fn disjointness_check() {
        let mk = |ids: &[&str]| Manifest {
            base_dir: PathBuf::new(),
            entries: ids
                .iter()
                .map(|id| ManifestEntry {
                    frame_id: id.to_string(),
                    image: String::new(),
                    seg_gt: None,
                    seg_pred: None,
                    depth_pred: None,
                    depth_gt: None,
                    perturbation: None,
                    epsilon_255: None,
                    num_classes: None,
                })
                .collect(),
        };
        assert!(check_disjoint(&mk(&["a", "b"]), &mk(&["c", "c"])).is_ok());
        assert!(check_disjoint(&mk(&["a", "b"]), &mk(&["c", "b"])).is_err());
        assert_eq!(mk(&["b", "a", "b"]).frame_ids(), vec!["b", "a"]);
    }
}
