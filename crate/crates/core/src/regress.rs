//! Quadratic regression from depth accuracy to segmentation mIoU.
//!
//! `mIoU ≈ θ₀ + θ₁·ACC + θ₂·ACC²`, fitted by least squares over every
//! `(frame, perturbation, ε)` sample of a calibration split. ACC values pile
//! up close to 1, which makes the Vandermonde matrix poorly conditioned, so
//! the system is solved via a Householder QR factorization instead of the
//! normal equations.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricSample;

/// Polynomial exponents of the model.
pub const K_SET: [u32; 3] = [0, 1, 2];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub sample_count: usize,
    pub perturbations: Vec<String>,
    pub eps_255: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub theta: [f64; 3],
    pub meta: CalibrationMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    theta: Vec<f64>,
    k_set: Vec<u32>,
    #[serde(default)]
    meta: CalibrationMeta,
}

impl RegressionModel {
    pub fn new(theta: [f64; 3]) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid(format!("non-finite coefficients {theta:?}")));
        }
        Ok(Self {
            theta,
            meta: CalibrationMeta::default(),
        })
    }

    /// Polynomial value without clamping.
    pub fn evaluate(&self, acc: f64) -> f64 {
        let [t0, t1, t2] = self.theta;
        t0 + acc * (t1 + acc * t2)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            theta: self.theta.to_vec(),
            k_set: K_SET.to_vec(),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.k_set != K_SET {
            return Err(Error::Invalid(format!(
                "model k_set {:?}, expected {:?}",
                file.k_set, K_SET
            )));
        }
        let theta: [f64; 3] = file.theta.as_slice().try_into().map_err(|_| {
            Error::Invalid(format!(
                "model has {} coefficients, expected 3",
                file.theta.len()
            ))
        })?;
        let mut model = Self::new(theta)?;
        model.meta = file.meta;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("model file {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Least-squares fit of a quadratic in `x` to `y`.
pub fn fit_quadratic_xy(x: &[f64], y: &[f64]) -> Result<[f64; 3]> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite regression input".into()));
    }
    let distinct: BTreeSet<u64> = x.iter().map(|v| v.to_bits()).collect();
    if distinct.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "{} distinct ACC values among {} samples, need at least 3",
            distinct.len(),
            x.len()
        )));
    }

    let design = DMatrix::from_fn(x.len(), 3, |i, k| x[i].powi(k as i32));
    let target = DVector::from_column_slice(y);
    let qr = design.qr();
    let r = qr.r();
    let max_diag = (0..3).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    if (0..3).any(|k| r[(k, k)].abs() <= 1e-13 * max_diag) {
        return Err(Error::DegenerateFit(
            "design matrix is numerically rank deficient".into(),
        ));
    }
    let qty = qr.q().transpose() * target;
    let theta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::DegenerateFit("singular triangular factor".into()))?;
    Ok([theta[0], theta[1], theta[2]])
}

/// Fits `mIoU ~ ACC` over pooled samples (all perturbation kinds together).
pub fn fit_quadratic(samples: &[MetricSample]) -> Result<RegressionModel> {
    let acc: Vec<f64> = samples.iter().map(|s| s.acc).collect();
    let miou: Vec<f64> = samples.iter().map(|s| s.miou).collect();
    let theta = fit_quadratic_xy(&acc, &miou)?;
    let perturbations: BTreeSet<&str> = samples.iter().map(|s| s.perturbation.as_str()).collect();
    let mut eps: Vec<f64> = samples.iter().map(|s| s.epsilon_255).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let mut model = RegressionModel::new(theta)?;
    model.meta = CalibrationMeta {
        sample_count: samples.len(),
        perturbations: perturbations.into_iter().map(String::from).collect(),
        eps_255: eps,
    };
    Ok(model)
}

/// Predicted mIoU, clamped to `[0, 1]`.
pub fn predict_miou(model: &RegressionModel, acc: f64) -> f64 {
    model.evaluate(acc).clamp(0.0, 1.0)
}
