//! Synthetic three-class shapes dataset.
//!
//! Each grayscale image holds one filled disk, square or equilateral
//! triangle on a noisy, cluttered background. All three shapes of a given
//! scale have the same area (that of a disk with diameter `scale·size`), so
//! only the outline distinguishes them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    /// Image side in pixels.
    pub size: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Upper bound of the per-sample clutter level in `[0, 1]`.
    pub max_clutter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 300,
            test: 150,
            size: 32,
            min_scale: 0.3,
            max_scale: 0.7,
            max_clutter: 1.0,
            noise: 0.05,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let classes = ShapeKind::ALL.len();
        if self.train < classes || self.test < classes {
            return Err(DataError::InvalidSpec(format!(
                "split sizes must be at least {classes}, got train={} test={}",
                self.train, self.test
            )));
        }
        if self.size < 8 {
            return Err(DataError::InvalidSpec(format!(
                "image size {} below 8",
                self.size
            )));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "scale range [{}, {}] must satisfy 0 < min ≤ max ≤ 1",
                self.min_scale, self.max_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.max_clutter) {
            return Err(DataError::InvalidSpec(format!(
                "max_clutter {} outside [0, 1]",
                self.max_clutter
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "noise {} must be nonnegative",
                self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1×size×size` grayscale image.
    pub image: Tensor,
    pub label: usize,
    /// Row-major foreground mask.
    pub mask: Vec<bool>,
    pub scale: f64,
    pub rotation: f64,
    pub clutter: f64,
}

impl Sample {
    pub fn kind(&self) -> ShapeKind {
        ShapeKind::ALL[self.label]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    pub spec: ShapesSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ShapesDataset {
    pub fn classes(&self) -> usize {
        ShapeKind::ALL.len()
    }

    /// Little-endian dump of every image, label and mask; identical seeds
    /// give identical streams.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in self.train.iter().chain(&self.test) {
            out.push(s.label as u8);
            for v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend(s.mask.iter().map(|m| *m as u8));
        }
        out
    }
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, radius: f64, rotation: f64) -> bool {
    // Rotate the offset into the shape frame.
    let (s, c) = rotation.sin_cos();
    let x = c * dx + s * dy;
    let y = -s * dx + c * dy;
    let area = PI * radius * radius;
    match kind {
        ShapeKind::Disk => x * x + y * y <= radius * radius,
        ShapeKind::Square => {
            let half = area.sqrt() / 2.0;
            x.abs() <= half && y.abs() <= half
        }
        ShapeKind::Triangle => {
            // Equilateral with the same area: side = sqrt(4·area/√3); the
            // inradius is side/(2√3). Three half-planes at 120° apart.
            let side = (4.0 * area / 3f64.sqrt()).sqrt();
            let inradius = side / (2.0 * 3f64.sqrt());
            (0..3).all(|k| {
                let theta = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                x * theta.cos() + y * theta.sin() >= -inradius
            })
        }
    }
}

fn circumradius(kind: ShapeKind, radius: f64) -> f64 {
    let area = PI * radius * radius;
    match kind {
        ShapeKind::Disk => radius,
        ShapeKind::Square => area.sqrt() / 2.0 * 2f64.sqrt(),
        ShapeKind::Triangle => (4.0 * area / 3f64.sqrt()).sqrt() / 3f64.sqrt(),
    }
}

fn render_sample(spec: &ShapesSpec, kind: ShapeKind, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.size;
    let nf = n as f64;
    let scale = rng.random_range(spec.min_scale..=spec.max_scale);
    let rotation = rng.random_range(0.0..2.0 * PI);
    let clutter = rng.random_range(0.0..=spec.max_clutter);
    let radius = scale * nf / 2.0;
    let reach = circumradius(kind, radius).min(nf / 2.0);
    let cx = rng.random_range(reach..=nf - reach);
    let cy = rng.random_range(reach..=nf - reach);

    let background = rng.random_range(0.0..0.15);
    let foreground = rng.random_range(0.6..1.0);
    let mut pixels = vec![background; n * n];

    let specks = (clutter * 12.0).round() as usize;
    for _ in 0..specks {
        let w = rng.random_range(1..=3usize);
        let h = rng.random_range(1..=3usize);
        let x0 = rng.random_range(0..n - w);
        let y0 = rng.random_range(0..n - h);
        let v = rng.random_range(0.3..0.8);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                pixels[y * n + x] = v;
            }
        }
    }

    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if inside(kind, dx, dy, radius, rotation) {
                mask[y * n + x] = true;
                pixels[y * n + x] = foreground;
            }
        }
    }

    if spec.noise > 0.0 {
        let noise = Normal::new(0.0, spec.noise).expect("validated noise");
        for p in pixels.iter_mut() {
            *p += noise.sample(rng);
        }
    }

    Sample {
        image: Tensor::new(vec![1, n, n], pixels).expect("n×n pixels"),
        label: kind.label(),
        mask,
        scale,
        rotation,
        clutter,
    }
}

fn split(spec: &ShapesSpec, count: usize, stream: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut kinds: Vec<ShapeKind> = (0..count).map(|i| ShapeKind::ALL[i % 3]).collect();
    // Fisher–Yates with the split's own generator.
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    kinds
        .into_iter()
        .map(|k| render_sample(spec, k, &mut rng))
        .collect()
}

pub fn generate_shapes(spec: &ShapesSpec) -> Result<ShapesDataset, DataError> {
    spec.validate()?;
    Ok(ShapesDataset {
        spec: spec.clone(),
        train: split(spec, spec.train, 0),
        test: split(spec, spec.test, 1),
    })
}
