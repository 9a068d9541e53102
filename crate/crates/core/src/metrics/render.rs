//! Rank-to-colour attention rendering: map 1 → red, 2 → green, 3 → blue,
//! each cell's intensity proportional to its weight times the feature norm.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage as ImageBuffer};

use crate::npa::{AttentionStack, FeatureVolume};

use super::sparsity::check_extents;
use super::MetricsError;

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// An [`RgbImage`] whose channel `k` encodes attention map rank `k + 1`.
pub type RenderedAttention = RgbImage;

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, MetricsError> {
        if pixels.len() != width * height * 3 {
            return Err(MetricsError::ImageSize {
                expected: (width, height),
                actual: (pixels.len() / 3, 1),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Nearest-neighbour resize; cells stay hard-edged.
    pub fn upscale(&self, width: usize, height: usize) -> Result<Self, MetricsError> {
        if width == 0 || height == 0 {
            return Err(MetricsError::ImageSize {
                expected: (width, height),
                actual: (self.width, self.height),
            });
        }
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                pixels.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>, MetricsError> {
        let buf = self.to_buffer()?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| MetricsError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    fn to_buffer(&self) -> Result<ImageBuffer, MetricsError> {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| MetricsError::Encode("pixel buffer size".into()))
    }

    /// Decodes PNG or PNM bytes into RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, MetricsError> {
        let img =
            image::load_from_memory(bytes).map_err(|e| MetricsError::Encode(e.to_string()))?;
        let rgb = img.to_rgb8();
        Ok(Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            pixels: rgb.into_raw(),
        })
    }

    /// Writes PPM or PNG depending on the extension (`.png` → PNG).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let path = path.as_ref();
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => self.to_png()?,
            _ => self.to_ppm(),
        };
        std::fs::write(path, bytes).map_err(|e| MetricsError::Encode(e.to_string()))
    }

    /// Grayscale `1×H×W` image in `[0, 1]` (values clamped) to RGB.
    pub fn from_gray(width: usize, height: usize, values: &[f64]) -> Result<Self, MetricsError> {
        if values.len() != width * height {
            return Err(MetricsError::ImageSize {
                expected: (width, height),
                actual: (values.len(), 1),
            });
        }
        let pixels = values
            .iter()
            .flat_map(|v| {
                let b = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
                [b, b, b]
            })
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Renders up to three maps into the red, green and blue channels.
///
/// Channel `k` at cell `i` is `round(255 · clamp(w_k(i)·‖f_i‖ / z, 0, 1))`
/// where `z` is the largest `w·‖f‖` over all maps and cells of the image.
pub fn render(
    stack: &AttentionStack,
    volume: &FeatureVolume,
) -> Result<RenderedAttention, MetricsError> {
    check_extents(stack, volume)?;
    if stack.len() > 3 {
        return Err(MetricsError::TooManyMaps { n: stack.len() });
    }
    let norms = volume.norms();
    let hw = stack.positions();
    let products: Vec<Vec<f64>> = stack
        .maps
        .iter()
        .map(|m| m.weights.iter().zip(&norms).map(|(w, n)| w * n).collect())
        .collect();
    let z = products.iter().flatten().copied().fold(0.0_f64, f64::max);
    let mut pixels = vec![0u8; hw * 3];
    if z > 0.0 {
        for (k, p) in products.iter().enumerate() {
            for i in 0..hw {
                pixels[i * 3 + k] = (255.0 * (p[i] / z).clamp(0.0, 1.0)).round() as u8;
            }
        }
    }
    RgbImage::new(stack.width, stack.height, pixels)
}

/// `out = (1 − blend)·image + blend·rendered`, per channel, rounded.
pub fn overlay(
    image: &RgbImage,
    rendered: &RenderedAttention,
    blend: f64,
) -> Result<RgbImage, MetricsError> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(MetricsError::InvalidBlend(blend));
    }
    if image.width != rendered.width || image.height != rendered.height {
        return Err(MetricsError::ImageSize {
            expected: (image.width, image.height),
            actual: (rendered.width, rendered.height),
        });
    }
    let pixels = image
        .pixels
        .iter()
        .zip(&rendered.pixels)
        .map(|(a, b)| ((1.0 - blend) * *a as f64 + blend * *b as f64).round() as u8)
        .collect();
    Ok(RgbImage {
        width: image.width,
        height: image.height,
        pixels,
    })
}
