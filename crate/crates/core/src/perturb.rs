//! Strength-normalized input perturbations.
//!
//! Strength `ε` is the RMS amplitude of the additive perturbation `r`, in
//! gray-value units of 1/255, for every kind. The perturbed image is
//! `clip(x + r, 0, 1)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::ImageTensor;
use crate::seed;

/// Strengths (in 1/255 units) used to sweep the whole performance range.
pub const DEFAULT_EPS_255: [f64; 12] = [
    0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0, 24.0, 28.0, 32.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Gaussian,
    SaltPepper,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 2] =
        [PerturbationKind::Gaussian, PerturbationKind::SaltPepper];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Gaussian => "gaussian",
            PerturbationKind::SaltPepper => "salt_pepper",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "salt_pepper" => Ok(Self::SaltPepper),
            other => Err(Error::Config(format!(
                "unknown perturbation {other:?} (expected gaussian or salt_pepper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// RMS strength in gray-value units of 1/255.
    pub epsilon_255: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, epsilon_255: f64, seed: u64) -> Result<Self> {
        if !(epsilon_255 >= 0.0 && epsilon_255.is_finite()) {
            return Err(Error::Config(format!("epsilon {epsilon_255} must be >= 0")));
        }
        Ok(Self {
            kind,
            epsilon_255,
            seed,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_255 / 255.0
    }
}

/// Additive perturbation tensor with values in `[-1, 1]`, laid out like
/// [`ImageTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Perturbation {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn rms(&self) -> f64 {
        rms(&self.data)
    }
}

pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Gaussian noise rescaled so its empirical RMS is exactly `ε`.
///
/// Values are clipped to `[-1, 1]` afterwards; at the strengths of
/// [`DEFAULT_EPS_255`] clipping never triggers in practice.
pub fn gaussian_perturbation(
    spec: &PerturbationSpec,
    height: usize,
    width: usize,
    channels: usize,
) -> Perturbation {
    let mut out = Perturbation::zeros(height, width, channels);
    let eps = spec.epsilon();
    if eps == 0.0 || out.data.is_empty() {
        return out;
    }
    let mut rng = seed::rng(spec.seed);
    for v in out.data.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let current = rms(&out.data);
    if current > 0.0 {
        let gain = eps / current;
        for v in out.data.iter_mut() {
            *v = (*v * gain).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Salt-and-pepper noise written as an additive perturbation.
///
/// A pixel is hit with probability `ρ`; a hit pixel is driven to 0 or 1 in all
/// channels with equal odds, i.e. `r = target − x`. `ρ = ε² / D` with
/// `D = mean over elements of (x² + (1 − x)²) / 2`, which makes the expected
/// mean square of `r` equal `ε²`. The number of hit pixels is `ρ·P` with
/// stochastic rounding of the fractional part.
pub fn salt_pepper_perturbation(spec: &PerturbationSpec, image: &ImageTensor) -> Perturbation {
    let (h, w, c) = image.shape();
    let mut out = Perturbation::zeros(h, w, c);
    let eps = spec.epsilon();
    let pixels = h * w;
    if eps == 0.0 || pixels == 0 || c == 0 {
        return out;
    }
    let x = image.data();
    let d = x
        .iter()
        .map(|v| (v * v + (1.0 - v) * (1.0 - v)) / 2.0)
        .sum::<f64>()
        / x.len() as f64;
    let rate = (eps * eps / d).min(1.0);

    let mut rng = seed::rng(spec.seed);
    let expected = rate * pixels as f64;
    let mut hits = expected.floor() as usize;
    if rng.random::<f64>() < expected - expected.floor() {
        hits += 1;
    }
    let hits = hits.min(pixels);
    let chosen = index::sample(&mut rng, pixels, hits);
    let mut chosen: Vec<usize> = chosen.into_iter().collect();
    chosen.sort_unstable();
    for p in chosen {
        let target = if rng.random::<bool>() { 1.0 } else { 0.0 };
        for ch in 0..c {
            let i = p * c + ch;
            out.data[i] = target - x[i];
        }
    }
    out
}

/// Draws the perturbation for `image`. Gaussian noise only uses the shape;
/// salt-and-pepper depends on the pixel values.
pub fn generate_perturbation(spec: &PerturbationSpec, image: &ImageTensor) -> Perturbation {
    match spec.kind {
        PerturbationKind::Gaussian => {
            let (h, w, c) = image.shape();
            gaussian_perturbation(spec, h, w, c)
        }
        PerturbationKind::SaltPepper => salt_pepper_perturbation(spec, image),
    }
}

/// `clip(x + r, 0, 1)`.
pub fn apply_perturbation(image: &ImageTensor, perturbation: &Perturbation) -> Result<ImageTensor> {
    let shape = (
        perturbation.height,
        perturbation.width,
        perturbation.channels,
    );
    if image.shape() != shape {
        return Err(Error::Shape(format!(
            "image {:?} vs perturbation {:?}",
            image.shape(),
            shape
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(&perturbation.data)
        .map(|(x, r)| (x + r).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(image.height(), image.width(), image.channels(), data)
}

pub fn perturb_image(image: &ImageTensor, spec: &PerturbationSpec) -> Result<ImageTensor> {
    apply_perturbation(image, &generate_perturbation(spec, image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: PerturbationKind, eps: f64, seed: u64) -> PerturbationSpec {
        PerturbationSpec::new(kind, eps, seed).unwrap()
    }

    fn textured(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = seed::rng(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    #[test]
    fn zero_strength_is_zero_tensor() {
        let img = textured(8, 8, 3, 1);
        for kind in PerturbationKind::ALL {
            let r = generate_perturbation(&spec(kind, 0.0, 9), &img);
            assert!(r.data.iter().all(|&v| v == 0.0));
            assert_eq!(apply_perturbation(&img, &r).unwrap(), img);
        }
    }

    #[test]
    fn gaussian_rms_is_exact() {
        let r = gaussian_perturbation(&spec(PerturbationKind::Gaussian, 4.0, 3), 256, 256, 3);
        assert!((r.rms() - 4.0 / 255.0).abs() < 1e-9);
        assert!(r.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_spec_same_tensor() {
        let img = textured(16, 16, 3, 2);
        for kind in PerturbationKind::ALL {
            let s = spec(kind, 8.0, 77);
            assert_eq!(
                generate_perturbation(&s, &img),
                generate_perturbation(&s, &img)
            );
        }
        let a = gaussian_perturbation(&spec(PerturbationKind::Gaussian, 8.0, 1), 4, 4, 1);
        let b = gaussian_perturbation(&spec(PerturbationKind::Gaussian, 8.0, 2), 4, 4, 1);
        assert_ne!(a, b);
    }

    #[test]
    fn gaussian_channel_means_are_near_zero() {
        let (h, w, c) = (128, 128, 3);
        let eps = 16.0;
        let r = gaussian_perturbation(&spec(PerturbationKind::Gaussian, eps, 5), h, w, c);
        let bound = 3.0 * (eps / 255.0) / ((h * w * c) as f64).sqrt();
        for ch in 0..c {
            let mean = r.data.iter().skip(ch).step_by(c).sum::<f64>() / (h * w) as f64;
            assert!(mean.abs() < bound, "channel {ch}: {mean} vs {bound}");
        }
    }

    #[test]
    fn salt_pepper_drives_pixels_to_extremes() {
        let img = textured(32, 32, 3, 4);
        let r = salt_pepper_perturbation(&spec(PerturbationKind::SaltPepper, 32.0, 5), &img);
        let out = apply_perturbation(&img, &r).unwrap();
        let mut hit = 0;
        for p in 0..32 * 32 {
            let px = &out.data()[p * 3..p * 3 + 3];
            if r.data[p * 3..p * 3 + 3].iter().any(|&v| v != 0.0) {
                hit += 1;
                assert!(px.iter().all(|&v| v == 0.0) || px.iter().all(|&v| v == 1.0));
            }
        }
        assert!(hit > 0);
    }

    #[test]
    fn application_examples() {
        let img = ImageTensor::new(1, 2, 1, vec![0.9, 0.5]).unwrap();
        let r = Perturbation {
            height: 1,
            width: 2,
            channels: 1,
            data: vec![0.3, -0.2],
        };
        let out = apply_perturbation(&img, &r).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert!((out.data()[1] - 0.3).abs() < 1e-15);
        let wrong = Perturbation::zeros(2, 2, 1);
        assert!(matches!(
            apply_perturbation(&img, &wrong),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kind_names_roundtrip() {
        for kind in PerturbationKind::ALL {
            assert_eq!(kind.as_str().parse::<PerturbationKind>().unwrap(), kind);
        }
        assert!("fgsm".parse::<PerturbationKind>().is_err());
        assert!(PerturbationSpec::new(PerturbationKind::Gaussian, -1.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn perturbed_images_stay_in_unit_range(
            seed in any::<u64>(),
            eps in 0.0f64..64.0,
            sp in any::<bool>(),
        ) {
            let kind = if sp { PerturbationKind::SaltPepper } else { PerturbationKind::Gaussian };
            let img = textured(6, 7, 3, seed ^ 1);
            let out = perturb_image(&img, &spec(kind, eps, seed)).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
