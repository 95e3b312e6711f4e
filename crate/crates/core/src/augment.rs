//! Deterministic image-and-box augmentations: horizontal flip, BT.601
//! grayscale and separable Gaussian blur.
//!
//! Whether a transform fires for a given sample is decided by a counter-based
//! draw keyed on `(seed, draw_index, transform)`, so results do not depend on
//! the order in which samples are processed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, Dataset};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("buffer of {width}x{height}x{channels} needs {expected} samples, got {actual}")]
    BufferSize {
        width: u32,
        height: u32,
        channels: u8,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(u8),
    #[error("box {index} {bbox:?} exceeds the {width}x{height} image")]
    BoxOutOfBounds {
        index: usize,
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("grayscale needs a 3-channel image; input is already single-channel")]
    AlreadyGray,
    #[error("blur sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("blur radius must be at least 1, got {0}")]
    Radius(usize),
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("image {path}: {source}")]
    Raster {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image {path} is {actual_w}x{actual_h}, annotations say {expected_w}x{expected_h}")]
    SizeMismatch {
        path: PathBuf,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("malformed augmentation spec {path}: {source}")]
    Spec {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major 8-bit raster with interleaved channels (R, G, B for colour).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, samples: Vec<u8>) -> Result<Self, AugmentError> {
        if channels != 1 && channels != 3 {
            return Err(AugmentError::Channels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if samples.len() != expected {
            return Err(AugmentError::BufferSize {
                width,
                height,
                channels,
                expected,
                actual: samples.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, AugmentError> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width as usize * height as usize * channels as usize],
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    /// Same geometry, new samples of the same length.
    fn with_samples(&self, samples: Vec<u8>) -> ImageBuffer {
        debug_assert_eq!(samples.len(), self.samples.len());
        ImageBuffer { width: self.width, height: self.height, channels: self.channels, samples }
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.samples[o..o + self.channels as usize]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let o = self.offset(x, y);
        let c = self.channels as usize;
        &mut self.samples[o..o + c]
    }
}

/// Mirrors the image left-to-right and remaps boxes to `(W - x - w, y, w, h)`.
pub fn hflip(img: &ImageBuffer, boxes: &[BoundingBox]) -> Result<(ImageBuffer, Vec<BoundingBox>), AugmentError> {
    let (w, h) = (f64::from(img.width), f64::from(img.height));
    for (index, b) in boxes.iter().enumerate() {
        if !b.fits_within(w, h) {
            return Err(AugmentError::BoxOutOfBounds {
                index,
                bbox: b.to_array(),
                width: img.width,
                height: img.height,
            });
        }
    }

    let c = img.channels as usize;
    let row_len = img.width as usize * c;
    let mut samples = Vec::with_capacity(img.samples.len());
    for row in img.samples.chunks_exact(row_len.max(1)) {
        for px in row.chunks_exact(c).rev() {
            samples.extend_from_slice(px);
        }
    }
    let flipped = img.with_samples(samples);
    let boxes = boxes
        .iter()
        .map(|b| BoundingBox::new(w - (b.x + b.w), b.y, b.w, b.h))
        .collect();
    Ok((flipped, boxes))
}

/// BT.601 luma replicated into all three channels, rounded half up.
pub fn grayscale(img: &ImageBuffer) -> Result<ImageBuffer, AugmentError> {
    if img.channels != 3 {
        return Err(AugmentError::AlreadyGray);
    }
    let samples = img
        .samples
        .chunks_exact(3)
        .flat_map(|px| {
            let [r, g, b] = [px[0], px[1], px[2]].map(u32::from);
            let y = ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8;
            [y, y, y]
        })
        .collect();
    Ok(img.with_samples(samples))
}

/// Normalized taps `g(-radius..=radius)` with `g(i) ∝ exp(-i² / 2σ²)`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>, AugmentError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AugmentError::Sigma(sigma));
    }
    if radius == 0 {
        return Err(AugmentError::Radius(radius));
    }
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Reflect-101 index into `[0, n)`: `-1 -> 1`, `n -> n - 2`.
fn reflect101(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur, horizontal then vertical, with reflect-101
/// borders. Intermediate values stay in double precision; the result is
/// rounded once at the end. Symmetric taps are summed in pairs, so the
/// filter commutes exactly with [`hflip`].
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64, radius: usize) -> Result<ImageBuffer, AugmentError> {
    let kernel = gaussian_kernel(sigma, radius)?;
    let taps = &kernel[radius..];
    let (w, h, c) = (img.width as usize, img.height as usize, img.channels as usize);
    let at = |x: usize, y: usize, ch: usize| (y * w + x) * c + ch;

    let mut horizontal = vec![0.0f64; img.samples.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = taps[0] * f64::from(img.samples[at(x, y, ch)]);
                for (i, &g) in taps.iter().enumerate().skip(1) {
                    let left = reflect101(x as i64 - i as i64, w as i64);
                    let right = reflect101(x as i64 + i as i64, w as i64);
                    acc += g * (f64::from(img.samples[at(left, y, ch)]) + f64::from(img.samples[at(right, y, ch)]));
                }
                horizontal[at(x, y, ch)] = acc;
            }
        }
    }

    let mut samples = vec![0u8; img.samples.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = taps[0] * horizontal[at(x, y, ch)];
                for (i, &g) in taps.iter().enumerate().skip(1) {
                    let up = reflect101(y as i64 - i as i64, h as i64);
                    let down = reflect101(y as i64 + i as i64, h as i64);
                    acc += g * (horizontal[at(x, up, ch)] + horizontal[at(x, down, ch)]);
                }
                samples[at(x, y, ch)] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(img.with_samples(samples))
}

// ---------------------------------------------------------------------------
// Randomized pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub flip_probability: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma: f64,
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            grayscale_probability: 0.5,
            blur_probability: 0.5,
            blur_sigma: 1.0,
            blur_radius: 3,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Checks ranges; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, AugmentError> {
        for (name, value) in [
            ("flip_probability", self.flip_probability),
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AugmentError::Probability { name, value });
            }
        }
        gaussian_kernel(self.blur_sigma, self.blur_radius)?;
        let mut warnings = Vec::new();
        let recommended = (2.0 * self.blur_sigma).ceil() as usize;
        if self.blur_radius < recommended {
            warnings.push(format!(
                "blur_radius {} is below ceil(2*sigma) = {recommended}; the kernel is truncated",
                self.blur_radius
            ));
        }
        Ok(warnings)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AugmentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AugmentError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| AugmentError::Spec { path: path.to_path_buf(), source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    HorizontalFlip,
    Grayscale,
    GaussianBlur { sigma: f64, radius: usize },
}

impl AugmentOp {
    fn stream_slot(&self) -> u128 {
        match self {
            AugmentOp::HorizontalFlip => 0,
            AugmentOp::Grayscale => 1,
            AugmentOp::GaussianBlur { .. } => 2,
        }
    }
}

/// What fired, in application order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedOps(pub Vec<AugmentOp>);

impl AppliedOps {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: ImageBuffer,
    pub boxes: Vec<BoundingBox>,
    pub applied: AppliedOps,
}

/// Uniform `[0, 1)` draw for one transform of one sample.
pub fn uniform_draw(seed: u64, draw_index: u64, op: &AugmentOp) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    // one 64-byte block per transform slot
    rng.set_word_pos(op.stream_slot() * 16);
    rng.random::<f64>()
}

/// Runs flip -> grayscale -> blur, each gated by its own draw.
///
/// Single-channel inputs skip grayscale instead of failing, since SAR
/// imagery is commonly stored as one channel.
pub fn apply(
    spec: &AugmentSpec,
    img: &ImageBuffer,
    boxes: &[BoundingBox],
    draw_index: u64,
) -> Result<Augmented, AugmentError> {
    spec.validate()?;
    let fires = |op: &AugmentOp, p: f64| uniform_draw(spec.seed, draw_index, op) < p;

    let mut image = img.clone();
    let mut boxes = boxes.to_vec();
    let mut applied = Vec::new();

    let op = AugmentOp::HorizontalFlip;
    if fires(&op, spec.flip_probability) {
        (image, boxes) = hflip(&image, &boxes)?;
        applied.push(op);
    }
    let op = AugmentOp::Grayscale;
    if image.channels() == 3 && fires(&op, spec.grayscale_probability) {
        image = grayscale(&image)?;
        applied.push(op);
    }
    let op = AugmentOp::GaussianBlur {
        sigma: spec.blur_sigma,
        radius: spec.blur_radius,
    };
    if fires(&op, spec.blur_probability) {
        image = gaussian_blur(&image, spec.blur_sigma, spec.blur_radius)?;
        applied.push(op);
    }

    Ok(Augmented {
        image,
        boxes,
        applied: AppliedOps(applied),
    })
}

// ---------------------------------------------------------------------------
// Raster files

/// Loads PNG or binary PPM/PGM. Gray inputs stay single-channel; anything
/// else is converted to RGB (alpha dropped).
pub fn load_raster(path: impl AsRef<Path>) -> Result<ImageBuffer, AugmentError> {
    let path = path.as_ref();
    let raster_err = |source| AugmentError::Raster {
        path: path.to_path_buf(),
        source,
    };
    let dynamic = image::open(path).map_err(raster_err)?;
    let (w, h) = (dynamic.width(), dynamic.height());
    match dynamic.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => {
            ImageBuffer::new(w, h, 1, dynamic.into_luma8().into_raw())
        }
        _ => ImageBuffer::new(w, h, 3, dynamic.into_rgb8().into_raw()),
    }
}

/// Writes the buffer; the format follows the file extension.
pub fn save_raster(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), AugmentError> {
    let path = path.as_ref();
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &img.samples, img.width, img.height, color).map_err(|source| {
        AugmentError::Raster {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Per-image record of what [`augment_dataset`] applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOps {
    pub image_id: u64,
    pub file_name: String,
    pub applied: AppliedOps,
}

/// Augments every image of `ds` found under `images_dir`, writes the rasters
/// to `out_dir` under the same relative names and returns the dataset with
/// remapped boxes. The image id is the draw index.
pub fn augment_dataset(
    ds: &Dataset,
    images_dir: &Path,
    spec: &AugmentSpec,
    out_dir: &Path,
) -> Result<(Dataset, Vec<ImageOps>), AugmentError> {
    spec.validate()?;
    let mut out = ds.clone();
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, ann) in ds.annotations.iter().enumerate() {
        by_image.entry(ann.image_id).or_default().push(i);
    }

    let mut log = Vec::with_capacity(ds.images.len());
    for record in &ds.images {
        let src = images_dir.join(&record.file_name);
        let img = load_raster(&src)?;
        if (img.width(), img.height()) != (record.width, record.height) {
            return Err(AugmentError::SizeMismatch {
                path: src,
                expected_w: record.width,
                expected_h: record.height,
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        let indices = by_image.get(&record.id).cloned().unwrap_or_default();
        let boxes: Vec<BoundingBox> = indices.iter().map(|&i| ds.annotations[i].bbox).collect();
        let result = apply(spec, &img, &boxes, record.id)?;
        for (&i, b) in indices.iter().zip(&result.boxes) {
            out.annotations[i].bbox = *b;
        }

        let dst = out_dir.join(&record.file_name);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|source| AugmentError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        save_raster(&result.image, &dst)?;
        log.push(ImageOps {
            image_id: record.id,
            file_name: record.file_name.clone(),
            applied: result.applied,
        });
    }
    Ok((out, log))
}
