//! Procedural scenes and a synthetic perceiver.
//!
//! Scenes are layered random shapes over a ground-plane background, each with
//! a class label and a depth. The perceiver produces segmentation and depth
//! predictions whose quality drops with the perturbation strength. A per-frame
//! severity draw is shared between the two tasks with weight `coupling`, so
//! the correlation between the two degradations is controllable.
//!
//! Per-pixel random numbers are drawn independently of `ε`, so raising `ε`
//! only ever adds corrupted pixels and widens the depth noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::{
    DepthMap, FrameRecord, ImageTensor, SegMap, SparseDepthMap, DEPTH_MAX, DEPTH_MIN,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_objects: usize,
    /// Near and far limit of scene depth in meters.
    pub depth_range: (f64, f64),
    /// Fraction of pixels carrying a ground-truth depth measurement.
    pub gt_sparsity: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 64,
            num_classes: 6,
            num_objects: 6,
            depth_range: (2.0, 80.0),
            gt_sparsity: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(2..255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..255, got {}",
                self.num_classes
            )));
        }
        let (near, far) = self.depth_range;
        if !(DEPTH_MIN <= near && near < far && far <= DEPTH_MAX) {
            return Err(Error::Config(format!(
                "depth range ({near}, {far}) must be increasing within [{DEPTH_MIN}, {DEPTH_MAX}]"
            )));
        }
        if !(self.gt_sparsity > 0.0 && self.gt_sparsity <= 1.0) {
            return Err(Error::Config(format!(
                "gt_sparsity {} must be in (0, 1]",
                self.gt_sparsity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Label-flip rate per unit ε (ε as a fraction of the gray range).
    pub seg_sensitivity: f64,
    /// Log-depth noise scale per unit ε.
    pub depth_sensitivity: f64,
    /// Weight of the severity draw shared by both tasks, in `[0, 1]`.
    pub coupling: f64,
    /// Mean label-flip rate on clean inputs, drawn independently per frame.
    pub clean_seg_error: f64,
    /// Mean log-depth noise on clean inputs, drawn independently per frame.
    pub clean_depth_error: f64,
    /// Unknown global factor applied to predicted depth (monocular scale).
    pub global_scale: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            seg_sensitivity: 6.0,
            depth_sensitivity: 6.0,
            coupling: 0.9,
            clean_seg_error: 0.0,
            clean_depth_error: 0.0,
            global_scale: 1.0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!(
                "coupling {} outside [0, 1]",
                self.coupling
            )));
        }
        for (name, v) in [
            ("seg_sensitivity", self.seg_sensitivity),
            ("depth_sensitivity", self.depth_sensitivity),
            ("clean_seg_error", self.clean_seg_error),
            ("clean_depth_error", self.clean_depth_error),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        if !(self.global_scale > 0.0 && self.global_scale.is_finite()) {
            return Err(Error::Config(format!(
                "global_scale {} must be > 0",
                self.global_scale
            )));
        }
        Ok(())
    }
}

/// A generated frame plus its dense depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub record: FrameRecord,
    pub depth: DepthMap,
}

enum Shape {
    Rect,
    Ellipse,
}

struct Object {
    class: u8,
    shape: Shape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    depth: f64,
}

impl Object {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.shape {
            Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

fn class_color(class: u8) -> [f64; 3] {
    let h = seed::splitmix64(u64::from(class) + 1);
    let c = |shift: u32| 0.15 + 0.7 * ((h >> shift) & 0xff) as f64 / 255.0;
    [c(0), c(8), c(16)]
}

/// Renders a deterministic scene. `frame_id` is `scene_<seed>`.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let (near, far) = config.depth_range;
    let span = far - near;
    let mut rng = seed::rng(config.seed);

    let mut objects: Vec<Object> = (0..config.num_objects)
        .map(|_| Object {
            class: rng.random_range(1..config.num_classes) as u8,
            shape: if rng.random::<bool>() {
                Shape::Rect
            } else {
                Shape::Ellipse
            },
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            ry: rng.random_range(0.08..0.3) * h as f64,
            rx: rng.random_range(0.08..0.3) * w as f64,
            depth: near + span * rng.random_range(0.02..0.6),
        })
        .collect();
    // painter's order: far objects first
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut labels = vec![0u8; h * w];
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        // ground plane receding toward the top of the image
        let t = y as f64 / (h - 1) as f64;
        let background = far - (far - near) * (0.2 + 0.75 * t);
        for x in 0..w {
            let i = y * w + x;
            labels[i] = 0;
            depth[i] = background;
            for obj in &objects {
                if obj.covers(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[i] = obj.class;
                    depth[i] = obj.depth;
                }
            }
        }
    }

    let mut image = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let color = class_color(labels[i]);
        let shade = 0.55 + 0.45 * (1.0 - (depth[i] - near) / span);
        for c in color {
            let texture = 0.04 * (rng.random::<f64>() - 0.5);
            image.push((c * shade + texture).clamp(0.0, 1.0));
        }
    }

    let mut valid: Vec<bool> = (0..h * w)
        .map(|_| rng.random::<f64>() < config.gt_sparsity)
        .collect();
    if !valid.iter().any(|v| *v) {
        valid[rng.random_range(0..h * w)] = true;
    }

    let dense = DepthMap::new(h, w, depth.clone())?;
    let record = FrameRecord {
        frame_id: format!("scene_{}", config.seed),
        image: ImageTensor::new(h, w, 3, image)?,
        seg_gt: Some(SegMap::new(h, w, config.num_classes, labels)?),
        seg_pred: None,
        depth_pred: None,
        depth_gt: Some(SparseDepthMap::new(h, w, depth, valid)?),
    };
    Ok(SyntheticScene {
        record,
        depth: dense,
    })
}

/// Per-frame severities `(segmentation, depth)`.
fn severities(deg: &DegradationConfig, seed_value: u64) -> (f64, f64, f64, f64) {
    let mut rng = seed::rng(seed::derive_seed(seed_value, "severity"));
    let mut draw = || rng.random_range(0.25..1.75);
    let (shared, own_seg, own_depth) = (draw(), draw(), draw());
    let c = deg.coupling;
    let z_seg = c * shared + (1.0 - c) * own_seg;
    let z_depth = c * shared + (1.0 - c) * own_depth;
    let mut clean = seed::rng(seed::derive_seed(seed_value, "clean"));
    let base_seg = deg.clean_seg_error * clean.random_range(0.0..2.0);
    let base_depth = deg.clean_depth_error * clean.random_range(0.0..2.0);
    (z_seg, z_depth, base_seg, base_depth)
}

/// The synthetic perceiver of one frame: severities and per-pixel draws are
/// fixed at construction, so outputs at different strengths share them.
#[derive(Debug, Clone)]
pub struct Perceiver<'a> {
    scene: &'a SyntheticScene,
    deg: DegradationConfig,
    z_seg: f64,
    z_depth: f64,
    base_seg: f64,
    base_depth: f64,
    /// `(flip draw, confusion draw, depth noise)` per pixel.
    draws: Vec<(f64, f64, f64)>,
    /// Confusion targets per ground-truth class.
    pools: Vec<Vec<u8>>,
}

impl<'a> Perceiver<'a> {
    pub fn new(
        scene: &'a SyntheticScene,
        deg: &DegradationConfig,
        seed_value: u64,
    ) -> Result<Self> {
        deg.validate()?;
        let gt = scene.record.seg_gt.as_ref().ok_or_else(|| {
            Error::Missing(format!("frame {} has no seg_gt", scene.record.frame_id))
        })?;
        let (h, w, k) = (gt.height(), gt.width(), gt.num_classes());
        if (scene.depth.height(), scene.depth.width()) != (h, w) {
            return Err(Error::Shape("dense depth vs segmentation".into()));
        }
        let (z_seg, z_depth, base_seg, base_depth) = severities(deg, seed_value);

        let mut present = vec![false; k];
        for &l in gt.labels() {
            if (l as usize) < k {
                present[l as usize] = true;
            }
        }
        let present: Vec<u8> = (0..k as u8).filter(|&c| present[c as usize]).collect();
        // confusions go to another class of the same scene when possible
        let pools = (0..k as u8)
            .map(|truth| {
                if present.len() > 1 {
                    present.iter().copied().filter(|&c| c != truth).collect()
                } else {
                    (0..k as u8).filter(|&c| c != truth).collect()
                }
            })
            .collect();

        let mut rng = seed::rng(seed::derive_seed(seed_value, "pixels"));
        let draws = (0..h * w)
            .map(|_| (rng.random(), rng.random(), rng.sample(StandardNormal)))
            .collect();
        Ok(Self {
            scene,
            deg: deg.clone(),
            z_seg,
            z_depth,
            base_seg,
            base_depth,
            draws,
            pools,
        })
    }

    /// Degraded `(segmentation, depth)` at strength `epsilon` (a fraction of
    /// the gray range, i.e. `ε_255 / 255`).
    pub fn outputs(&self, epsilon: f64) -> Result<(SegMap, DepthMap)> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {epsilon} must be >= 0")));
        }
        let gt = self.scene.record.seg_gt.as_ref().expect("checked in new");
        let (h, w, k) = (gt.height(), gt.width(), gt.num_classes());
        let flip_rate = (self.base_seg + self.deg.seg_sensitivity * epsilon * self.z_seg).min(1.0);
        let sigma = self.base_depth + self.deg.depth_sensitivity * epsilon * self.z_depth;

        let mut labels = Vec::with_capacity(h * w);
        let mut depth = Vec::with_capacity(h * w);
        for ((&truth, &d), &(u, pick, g)) in gt
            .labels()
            .iter()
            .zip(self.scene.depth.depth())
            .zip(&self.draws)
        {
            let label = if u < flip_rate && (truth as usize) < k {
                let pool = &self.pools[truth as usize];
                pool[((pick * pool.len() as f64) as usize).min(pool.len() - 1)]
            } else {
                truth
            };
            labels.push(label);
            depth.push(d * (sigma * g).exp() * self.deg.global_scale);
        }
        Ok((
            SegMap::new(h, w, k, labels)?,
            DepthMap::clamped(h, w, depth)?,
        ))
    }
}

/// Degraded `(segmentation, depth)` predictions at strength `epsilon` (a
/// fraction of the gray range, i.e. `ε_255 / 255`).
pub fn degrade_outputs(
    scene: &SyntheticScene,
    epsilon: f64,
    deg: &DegradationConfig,
    seed_value: u64,
) -> Result<(SegMap, DepthMap)> {
    Perceiver::new(scene, deg, seed_value)?.outputs(epsilon)
}
