//! Synthetic scene generation, image standardization, and raster I/O.
//!
//! Scenes are either "rosettes" (elliptical petals radiating from a shared
//! center, so adjacent petals touch and occlude) or scattered "blobs".
//! Generation is a pure function of the config, including its RNG seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-channel raster with `f32` intensities, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.idx(row, col, ch)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig(format!(
                "image must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::Contract("image buffer size mismatch".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("image contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Integer instance-ID raster; id 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            ids: vec![0; height * width],
        }
    }

    pub fn from_ids(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape_mismatch(
                "LabelMap::from_ids",
                height * width,
                ids.len(),
            ));
        }
        Ok(LabelMap { height, width, ids })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, id: u32) {
        self.ids[row * self.width + col] = id;
    }

    /// Number of instances, assuming canonical contiguous ids `1..=C`.
    pub fn num_instances(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Whether the nonzero ids are exactly `{1..=C}`.
    pub fn is_canonical(&self) -> bool {
        let mut distinct: Vec<u32> = self.ids.iter().copied().filter(|&id| id != 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        distinct
            .iter()
            .enumerate()
            .all(|(i, &id)| id == i as u32 + 1)
    }

    /// Remaps sparse ids onto `1..=C` (sorted by old id) and reports the
    /// `(old, new)` mapping so callers can index arrays by id.
    pub fn canonicalize(&self) -> (LabelMap, Vec<(u32, u32)>) {
        let mut distinct: Vec<u32> = self.ids.iter().copied().filter(|&id| id != 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mapping: Vec<(u32, u32)> = distinct
            .iter()
            .enumerate()
            .map(|(i, &old)| (old, i as u32 + 1))
            .collect();
        let mut out = LabelMap::new(self.height, self.width);
        for (dst, &src) in out.ids.iter_mut().zip(self.ids.iter()) {
            if src != 0 {
                let pos = distinct.binary_search(&src).expect("id present");
                *dst = mapping[pos].1;
            }
        }
        (out, mapping)
    }

    /// Per-instance pixel counts, indexed by `id - 1`. Requires canonical ids.
    pub fn instance_pixel_counts(&self) -> Vec<usize> {
        let c = self.num_instances() as usize;
        let mut counts = vec![0usize; c];
        for &id in &self.ids {
            if id != 0 {
                counts[id as usize - 1] += 1;
            }
        }
        counts
    }
}

/// Binary foreground mask (true where any instance is present).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl ForegroundMask {
    pub fn from_labels(labels: &LabelMap) -> Self {
        ForegroundMask {
            height: labels.height,
            width: labels.width,
            mask: labels.ids.iter().map(|&id| id != 0).collect(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Shape family for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Elliptical petals around a shared center; adjacent petals touch,
    /// reproducing the boundary/midvein ambiguity at toy scale.
    Rosette,
    /// Scattered ellipses with margin-controlled spacing.
    Blobs,
}

/// Configuration for one synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub family: ShapeFamily,
    /// Extra spacing between shapes, in pixels. 0 lets shapes touch/occlude.
    #[serde(default)]
    pub margin: f64,
    /// Stddev of additive Gaussian pixel noise on [0,1] intensities.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::InvalidConfig(format!(
                "bad object count range [{}, {}]",
                self.min_objects, self.max_objects
            )));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::InvalidConfig("margin must be >= 0".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct EllipseShape {
    cy: f64,
    cx: f64,
    /// Rotation of the major axis, radians.
    theta: f64,
    /// Semi-major / semi-minor axes, pixels.
    a: f64,
    b: f64,
    /// Base brightness (gray) or hue index (rgb).
    tone: f64,
}

impl EllipseShape {
    /// Normalized elliptical radius: <= 1 inside, 0 at the center.
    #[inline]
    fn rho(&self, row: f64, col: f64) -> f64 {
        let dy = row - self.cy;
        let dx = col - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }
}

const LAYOUT_ATTEMPTS: usize = 32;
const MIN_PIXELS_PER_INSTANCE: usize = 6;

/// Generates one synthetic scene: rendered image, instance labels, and the
/// foreground mask. Later-drawn shapes occlude earlier ones, so instances
/// never share a pixel; every requested instance must survive occlusion with
/// at least a few pixels or the layout is retried.
pub fn synth_generate(cfg: &SceneConfig) -> Result<(Image, LabelMap, ForegroundMask)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);

    for _ in 0..LAYOUT_ATTEMPTS {
        let shapes = match cfg.family {
            ShapeFamily::Rosette => rosette_layout(cfg, count, &mut rng),
            ShapeFamily::Blobs => blobs_layout(cfg, count, &mut rng),
        };
        let Some(shapes) = shapes else { continue };

        let labels = paint(cfg, &shapes);
        let counts = labels.instance_pixel_counts();
        if counts.len() != count || counts.iter().any(|&n| n < MIN_PIXELS_PER_INSTANCE) {
            continue;
        }

        let image = render(cfg, &labels, &shapes, &mut rng);
        let mask = ForegroundMask::from_labels(&labels);
        return Ok((image, labels, mask));
    }
    Err(Error::PlacementFailure {
        requested: count,
        attempts: LAYOUT_ATTEMPTS,
    })
}

fn rosette_layout(cfg: &SceneConfig, count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<EllipseShape>> {
    let side = cfg.height.min(cfg.width) as f64;
    let scale = side / 64.0;
    let cy = cfg.height as f64 / 2.0 + rng.gen_range(-2.0..2.0) * scale;
    let cx = cfg.width as f64 / 2.0 + rng.gen_range(-2.0..2.0) * scale;
    let pitch = std::f64::consts::TAU / count as f64;
    let r0 = 1.5 * scale + cfg.margin;
    let max_extent = side / 2.0 - 2.0;

    let mut shapes = Vec::with_capacity(count);
    for k in 0..count {
        let theta = pitch * k as f64 + rng.gen_range(-0.2..0.2) * pitch;
        let mut len = side * rng.gen_range(0.30..0.42);
        if r0 + len > max_extent {
            len = max_extent - r0;
        }
        if len < 4.0 {
            return None;
        }
        let half_w = len * rng.gen_range(0.17..0.25);
        let d = r0 + len / 2.0;
        shapes.push(EllipseShape {
            cy: cy + d * theta.sin(),
            cx: cx + d * theta.cos(),
            theta,
            a: len / 2.0,
            b: half_w.max(1.2),
            tone: rng.gen_range(0.45..0.95),
        });
    }
    Some(shapes)
}

fn blobs_layout(cfg: &SceneConfig, count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<EllipseShape>> {
    let side = cfg.height.min(cfg.width) as f64;
    let mut shapes: Vec<EllipseShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..64 {
            let a = side * rng.gen_range(0.09..0.16);
            let b = a * rng.gen_range(0.55..1.0);
            let cy = rng.gen_range(a + 1.0..cfg.height as f64 - a - 1.0);
            let cx = rng.gen_range(a + 1.0..cfg.width as f64 - a - 1.0);
            let candidate = EllipseShape {
                cy,
                cx,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
                a,
                b,
                tone: rng.gen_range(0.45..0.95),
            };
            let ok = cfg.margin <= 0.0
                || shapes.iter().all(|s| {
                    let dy = s.cy - candidate.cy;
                    let dx = s.cx - candidate.cx;
                    (dy * dy + dx * dx).sqrt() >= s.a + candidate.a + cfg.margin
                });
            if ok {
                shapes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(shapes)
}

/// Painter's algorithm: shape k gets id k+1 and overwrites anything below.
fn paint(cfg: &SceneConfig, shapes: &[EllipseShape]) -> LabelMap {
    let mut labels = LabelMap::new(cfg.height, cfg.width);
    for (k, shape) in shapes.iter().enumerate() {
        let id = k as u32 + 1;
        let extent = shape.a.max(shape.b) + 1.0;
        let r_lo = ((shape.cy - extent).floor().max(0.0)) as usize;
        let r_hi = ((shape.cy + extent).ceil().min(cfg.height as f64 - 1.0)) as usize;
        let c_lo = ((shape.cx - extent).floor().max(0.0)) as usize;
        let c_hi = ((shape.cx + extent).ceil().min(cfg.width as f64 - 1.0)) as usize;
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                if shape.rho(r as f64, c as f64) <= 1.0 {
                    labels.set(r, c, id);
                }
            }
        }
    }
    labels
}

const BACKGROUND_LEVEL: f32 = 0.10;

fn render(cfg: &SceneConfig, labels: &LabelMap, shapes: &[EllipseShape], rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(cfg.height, cfg.width, cfg.channels);
    let colors: Vec<[f32; 3]> = shapes
        .iter()
        .map(|s| {
            if cfg.channels == 3 {
                let mut c = [
                    rng.gen_range(0.2..1.0) as f32,
                    rng.gen_range(0.2..1.0) as f32,
                    rng.gen_range(0.2..1.0) as f32,
                ];
                // keep overall brightness near the shape tone
                let norm = (c[0] + c[1] + c[2]) / 3.0;
                for v in &mut c {
                    *v *= s.tone as f32 / norm.max(1e-3);
                }
                c
            } else {
                [s.tone as f32; 3]
            }
        })
        .collect();

    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let id = labels.get(r, c);
            if id == 0 {
                for ch in 0..cfg.channels {
                    let i = img.idx(r, c, ch);
                    img.data[i] = BACKGROUND_LEVEL;
                }
                continue;
            }
            let shape = &shapes[id as usize - 1];
            let rho = shape.rho(r as f64, c as f64).min(1.0) as f32;
            // brighter along the ridge, darker toward the boundary
            let shade = 1.0 - 0.45 * rho * rho;
            for (ch, &base) in colors[id as usize - 1].iter().take(cfg.channels).enumerate() {
                let i = img.idx(r, c, ch);
                img.data[i] = base * shade;
            }
        }
    }

    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise");
        for v in &mut img.data {
            *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    img
}

/// Linearly rescales an image to zero mean and unit variance over all
/// pixel-channels. A constant image maps to all zeros.
pub fn standardize_image(img: &Image) -> Image {
    let n = img.data.len() as f64;
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let mut out = img.clone();
    if var < 1e-12 {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    let std = var.sqrt();
    for v in &mut out.data {
        *v = ((*v as f64 - mean) / std) as f32;
    }
    out
}

#[cfg(feature = "png")]
pub mod png_io {
    use std::path::Path;

    use super::*;

    /// Saves a label map as 16-bit grayscale PNG with pixel value == id.
    pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
        if let Some(&max) = map.ids.iter().max() {
            if max > u16::MAX as u32 {
                return Err(Error::Format(format!(
                    "label id {max} exceeds the 16-bit PNG limit of 65535"
                )));
            }
        }
        let buf: Vec<u16> = map.ids.iter().map(|&id| id as u16).collect();
        let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(map.width as u32, map.height as u32, buf)
                .ok_or_else(|| Error::Contract("label buffer size mismatch".into()))?;
        img.save(path.as_ref())
            .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))
    }

    /// Loads a 16-bit grayscale PNG label map, canonicalizes sparse ids to a
    /// contiguous range, and returns the (old, new) id mapping.
    pub fn load_label_map(path: impl AsRef<Path>) -> Result<(LabelMap, Vec<(u32, u32)>)> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)?
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let img = match decoded {
            image::DynamicImage::ImageLuma16(img) => img,
            other => {
                return Err(Error::Format(format!(
                    "{}: label maps must be 16-bit grayscale PNG, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let ids: Vec<u32> = img.into_raw().into_iter().map(|v| v as u32).collect();
        let raw = LabelMap::from_ids(h, w, ids)?;
        let (canonical, mapping) = raw.canonicalize();
        Ok((canonical, mapping))
    }

    /// Saves a foreground mask as 16-bit grayscale PNG with values {0, 1}.
    pub fn save_mask(mask: &ForegroundMask, path: impl AsRef<Path>) -> Result<()> {
        let map = LabelMap {
            height: mask.height,
            width: mask.width,
            ids: mask.mask.iter().map(|&b| u32::from(b)).collect(),
        };
        save_label_map(&map, path)
    }

    pub fn load_mask(path: impl AsRef<Path>) -> Result<ForegroundMask> {
        let (map, _) = load_label_map(path)?;
        Ok(ForegroundMask {
            height: map.height,
            width: map.width,
            mask: map.ids.iter().map(|&id| id != 0).collect(),
        })
    }

    /// Saves an image as 8-bit PNG (grayscale or RGB), clamping to [0,1].
    pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let path = path.as_ref();
        match img.channels {
            1 => {
                let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
                let out: image::GrayImage =
                    image::ImageBuffer::from_raw(img.width as u32, img.height as u32, buf)
                        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
                out.save(path)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
            }
            3 => {
                let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
                let out: image::RgbImage =
                    image::ImageBuffer::from_raw(img.width as u32, img.height as u32, buf)
                        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
                out.save(path)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
            }
            c => Err(Error::InvalidConfig(format!("cannot save {c}-channel image"))),
        }
    }

    /// Loads an 8-bit grayscale or RGB PNG into an [0,1] float image.
    pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)?
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (img, channels) = match decoded {
            image::DynamicImage::ImageLuma8(img) => {
                let (w, h) = (img.width() as usize, img.height() as usize);
                let data: Vec<f32> = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                (
                    Image {
                        height: h,
                        width: w,
                        channels: 1,
                        data,
                    },
                    1,
                )
            }
            image::DynamicImage::ImageRgb8(img) => {
                let (w, h) = (img.width() as usize, img.height() as usize);
                let data: Vec<f32> = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                (
                    Image {
                        height: h,
                        width: w,
                        channels: 3,
                        data,
                    },
                    3,
                )
            }
            other => {
                return Err(Error::Format(format!(
                    "{}: images must be 8-bit grayscale or RGB PNG, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        debug_assert_eq!(img.channels, channels);
        Ok(img)
    }
}

#[cfg(feature = "png")]
pub use png_io::{load_image, load_label_map, load_mask, save_image, save_label_map, save_mask};
