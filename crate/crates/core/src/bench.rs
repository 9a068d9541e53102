//! Wall-clock comparison of representative extraction against the
//! learned-attention head on identical volumes, single-threaded.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::autograd::Tensor;
use crate::net::{learned_attention_head, LearnedAttentionParams, NetError};
use crate::npa::{extract_representatives, FeatureVolume, NpaConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub iters: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl Timing {
    /// Nearest-rank percentiles over the recorded samples.
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank =
            |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Some(Self {
            iters: sorted.len(),
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub shape: [usize; 3],
    pub n: usize,
    pub iters: usize,
    pub npa: Option<Timing>,
    pub learned_attention: Option<Timing>,
    pub hardware: String,
}

/// CPU model string from the OS, when available.
pub fn hardware_description() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| format!("{} {}", std::env::consts::OS, std::env::consts::ARCH))
}

fn rectified_volume(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureVolume {
    let data = (0..c * h * w)
        .map(|_| StandardNormal.sample(rng))
        .map(|v: f64| v.max(0.0))
        .collect();
    FeatureVolume::new(c, h, w, data).expect("positive extents")
}

fn he(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Times `iters` runs of each method on one seeded rectified-normal volume
/// of shape `(C, H, W)`. `iters = 0` yields a report with no timings.
pub fn run_bench(
    shape: (usize, usize, usize),
    n: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchReport, NetError> {
    let (c, h, w) = shape;
    let mut report = BenchReport {
        shape: [c, h, w],
        n,
        iters,
        npa: None,
        learned_attention: None,
        hardware: hardware_description(),
    };
    if iters == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let volume = rectified_volume(&mut rng, c, h, w);
    let config = NpaConfig::default().with_n(n);
    config.validate()?;
    let params = LearnedAttentionParams {
        conv1: he(&mut rng, vec![c, c, 3, 3], c * 9),
        conv2: he(&mut rng, vec![c, c, 3, 3], c * 9),
        proj: he(&mut rng, vec![n, c, 1, 1], c),
    };

    let mut npa = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let ex = extract_representatives(&volume, &config)?;
        npa.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(ex);
    }
    let mut baseline = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = learned_attention_head(&volume, &params)?;
        baseline.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    report.npa = Timing::from_samples(&npa);
    report.learned_attention = Timing::from_samples(&baseline);
    Ok(report)
}
