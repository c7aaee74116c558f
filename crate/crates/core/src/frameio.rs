//! Raster types and their PNG storage.
//!
//! Storage follows the KITTI conventions:
//! - images: 8-bit gray or RGB, value `v` maps to `v / 255`
//! - segmentation: 8-bit gray, class index per pixel, 255 = [`IGNORE`]
//! - depth: 16-bit gray, `depth_m = raw / 256`, raw 0 = no measurement

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};

/// Reserved label for pixels excluded from evaluation.
pub const IGNORE: u8 = 255;

/// Lower bound of predicted depth in meters.
pub const DEPTH_MIN: f64 = 0.1;
/// Upper bound of predicted depth in meters.
pub const DEPTH_MAX: f64 = 100.0;

/// Depth quantization: one raw unit is 1/256 m.
pub const DEPTH_UNITS_PER_METER: f64 = 256.0;

/// Normalized image, row-major, channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label count {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if num_classes == 0 || num_classes > IGNORE as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=255, got {num_classes}"
            )));
        }
        for (i, &value) in labels.iter().enumerate() {
            if value != IGNORE && value as usize >= num_classes {
                return Err(Error::LabelRange {
                    x: i % width,
                    y: i / width,
                    value,
                    num_classes,
                });
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// Per-pixel class probabilities, stored pixel-major (`[pixel][class]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * num_classes {
            return Err(Error::Shape(format!(
                "probability length {} != {}x{}x{}",
                probs.len(),
                height,
                width,
                num_classes
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (i, pixel) in probs.chunks(num_classes).enumerate() {
            if pixel.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Range(format!(
                    "probability outside [0, 1] at pixel {i}"
                )));
            }
            let sum: f64 = pixel.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "probabilities at pixel {i} sum to {sum}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    /// One-hot encoding of a label map. IGNORE pixels become all-zero rows, so
    /// they contribute nothing to the cross-entropy.
    pub fn one_hot(seg: &SegMap) -> Self {
        let k = seg.num_classes;
        let mut probs = vec![0.0; seg.labels.len() * k];
        for (i, &label) in seg.labels.iter().enumerate() {
            if label != IGNORE {
                probs[i * k + label as usize] = 1.0;
            }
        }
        Self {
            height: seg.height,
            width: seg.width,
            num_classes: k,
            probs,
        }
    }

    pub fn uniform(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            probs: vec![1.0 / num_classes as f64; height * width * num_classes],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Dense predicted depth in meters, every value in `[DEPTH_MIN, DEPTH_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::Shape(format!(
                "depth length {} != {}x{}",
                depth.len(),
                height,
                width
            )));
        }
        if let Some(d) = depth.iter().find(|d| !(DEPTH_MIN..=DEPTH_MAX).contains(*d)) {
            return Err(Error::Range(format!(
                "depth {d} outside [{DEPTH_MIN}, {DEPTH_MAX}]"
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
        })
    }

    /// Builds a map after clamping every value into the valid depth range.
    pub fn clamped(height: usize, width: usize, mut depth: Vec<f64>) -> Result<Self> {
        for d in depth.iter_mut() {
            if d.is_nan() {
                return Err(Error::Range("depth is NaN".into()));
            }
            *d = d.clamp(DEPTH_MIN, DEPTH_MAX);
        }
        Self::new(height, width, depth)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }
}

/// Sparse ground-truth depth; `depth[i]` is meaningful only where `valid[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl SparseDepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != height * width {
            return Err(Error::Shape(format!(
                "sparse depth buffers ({}, {}) != {}x{}",
                depth.len(),
                valid.len(),
                height,
                width
            )));
        }
        for (i, (&d, &v)) in depth.iter().zip(&valid).enumerate() {
            if v && !(d > 0.0 && d.is_finite()) {
                return Err(Error::Range(format!(
                    "valid depth {d} at pixel {i} is not > 0"
                )));
            }
        }
        let depth = depth
            .into_iter()
            .zip(&valid)
            .map(|(d, &v)| if v { d } else { 0.0 })
            .collect();
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    /// Every pixel valid.
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depth.len()];
        Self::new(height, width, depth, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// `(pixel index, depth)` for valid pixels.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| (i, self.depth[i]))
    }
}

/// One frame and whatever annotations or predictions exist for it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub image: ImageTensor,
    pub seg_gt: Option<SegMap>,
    pub seg_pred: Option<SegMap>,
    pub depth_pred: Option<DepthMap>,
    pub depth_gt: Option<SparseDepthMap>,
}

impl FrameRecord {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        let mut dims = Vec::new();
        if let Some(m) = &self.seg_gt {
            dims.push(("seg_gt", m.height(), m.width()));
        }
        if let Some(m) = &self.seg_pred {
            dims.push(("seg_pred", m.height(), m.width()));
        }
        if let Some(m) = &self.depth_pred {
            dims.push(("depth_pred", m.height(), m.width()));
        }
        if let Some(m) = &self.depth_gt {
            dims.push(("depth_gt", m.height(), m.width()));
        }
        for (name, mh, mw) in dims {
            if (mh, mw) != (h, w) {
                return Err(Error::Shape(format!(
                    "frame {}: {name} is {mh}x{mw}, image is {h}x{w}",
                    self.frame_id
                )));
            }
        }
        Ok(())
    }
}

fn decode_png(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                property: format!("container format {other:?} (expected PNG)"),
            })
        }
    }
    Ok(reader.decode()?)
}

fn describe(img: &DynamicImage) -> String {
    let color = img.color();
    format!(
        "layout: {} channel(s) at {} bits",
        color.channel_count(),
        color.bits_per_pixel() / u16::from(color.channel_count())
    )
}

fn format_error(path: &Path, img: &DynamicImage, expected: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        property: format!("{} (expected {expected})", describe(img)),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => return Err(format_error(path, &other, "8-bit gray or RGB")),
    };
    let data = raw.into_iter().map(|v| f64::from(v) / 255.0).collect();
    ImageTensor::new(h, w, channels, data)
}

fn quantize_u8(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Range(format!("image value {v} outside [0, 1]")));
    }
    Ok((v * 255.0).round() as u8)
}

/// Writes an 8-bit PNG. Values are rounded to the nearest of 256 levels, so a
/// reload differs from the original by at most `1 / 510`.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let raw = image
        .data
        .iter()
        .map(|&v| quantize_u8(v))
        .collect::<Result<Vec<u8>>>()?;
    let (w, h) = (image.width as u32, image.height as u32);
    match image.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw)
            .expect("buffer length checked by constructor")
            .save_with_format(path, ImageFormat::Png)?,
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw)
            .expect("buffer length checked by constructor")
            .save_with_format(path, ImageFormat::Png)?,
        c => {
            return Err(Error::Range(format!(
                "cannot store {c}-channel image as PNG (1 or 3 supported)"
            )))
        }
    }
    Ok(())
}

pub fn load_seg_map(path: impl AsRef<Path>, num_classes: usize) -> Result<SegMap> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => return Err(format_error(path, &other, "8-bit single channel")),
    };
    SegMap::new(h, w, num_classes, raw)
}

pub fn save_seg_map(seg: &SegMap, path: impl AsRef<Path>) -> Result<()> {
    ImageBuffer::<Luma<u8>, _>::from_raw(seg.width as u32, seg.height as u32, seg.labels.clone())
        .expect("buffer length checked by constructor")
        .save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

fn load_depth_raw(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(buf) => Ok((h, w, buf.into_raw())),
        other => Err(format_error(path, &other, "16-bit single channel")),
    }
}

fn save_depth_raw(path: &Path, height: usize, width: usize, raw: Vec<u16>) -> Result<()> {
    ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, raw)
        .expect("buffer length checked by constructor")
        .save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

fn quantize_depth(d: f64) -> Result<u16> {
    let raw = (d * DEPTH_UNITS_PER_METER).round();
    if !(1.0..=f64::from(u16::MAX)).contains(&raw) {
        return Err(Error::Range(format!(
            "depth {d} m not representable in 16-bit 1/256 m units"
        )));
    }
    Ok(raw as u16)
}

/// Loads KITTI-style sparse depth: raw 0 is "no measurement".
pub fn load_depth_map(path: impl AsRef<Path>) -> Result<SparseDepthMap> {
    let (h, w, raw) = load_depth_raw(path.as_ref())?;
    let valid: Vec<bool> = raw.iter().map(|&r| r > 0).collect();
    let depth = raw
        .iter()
        .map(|&r| f64::from(r) / DEPTH_UNITS_PER_METER)
        .collect();
    SparseDepthMap::new(h, w, depth, valid)
}

pub fn save_depth_map(depth: &SparseDepthMap, path: impl AsRef<Path>) -> Result<()> {
    let raw = depth
        .depth
        .iter()
        .zip(&depth.valid)
        .map(|(&d, &v)| if v { quantize_depth(d) } else { Ok(0) })
        .collect::<Result<Vec<u16>>>()?;
    save_depth_raw(path.as_ref(), depth.height, depth.width, raw)
}

/// Loads a dense depth prediction stored in the same 16-bit convention.
/// Every pixel must decode into `[DEPTH_MIN, DEPTH_MAX]`.
pub fn load_depth_prediction(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let (h, w, raw) = load_depth_raw(path)?;
    let depth = raw
        .iter()
        .map(|&r| f64::from(r) / DEPTH_UNITS_PER_METER)
        .collect();
    DepthMap::new(h, w, depth).map_err(|e| match e {
        Error::Range(msg) => Error::Range(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_depth_prediction(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let raw = depth
        .depth
        .iter()
        .map(|&d| quantize_depth(d))
        .collect::<Result<Vec<u16>>>()?;
    save_depth_raw(path.as_ref(), depth.height, depth.width, raw)
}
