//! Reference implementations written from the algorithm descriptions, with
//! no code shared with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line extraction on a volume given as `[c][h·w]` planes.
/// Returns (rows, maps, anchors, fallbacks, score history).
pub struct OracleOut {
    pub rows: Vec<Vec<f64>>,
    pub maps: Vec<Vec<f64>>,
    pub anchors: Vec<usize>,
    pub fallback: Vec<bool>,
    pub scores: Vec<Vec<f64>>,
}

pub struct OracleConfig {
    pub n: usize,
    pub random: bool,
    pub refine: bool,
    pub floor: f64,
    pub eps: f64,
    pub seed: u64,
}

impl OracleConfig {
    pub fn new(n: usize, random: bool, refine: bool, seed: u64) -> Self {
        Self {
            n,
            random,
            refine,
            floor: 0.0,
            eps: 1e-12,
            seed,
        }
    }
}

pub fn oracle_extract(c: usize, hw: usize, data: &[f64], cfg: &OracleConfig) -> OracleOut {
    let vec_at = |i: usize| -> Vec<f64> { (0..c).map(|k| data[k * hw + i]).collect() };
    let dot = |x: &[f64], y: &[f64]| -> f64 {
        let mut s = 0.0;
        for k in 0..x.len() {
            s += x[k] * y[k];
        }
        s
    };
    let vectors: Vec<Vec<f64>> = (0..hw).map(vec_at).collect();
    let mut a: Vec<f64> = vectors.iter().map(|v| dot(v, v)).collect();
    let norm: Vec<f64> = a.iter().map(|x| x.sqrt()).collect();
    let mut taken = vec![false; hw];
    // random anchors: uniform index into the ascending list of free positions
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = OracleOut {
        rows: vec![],
        maps: vec![],
        anchors: vec![],
        fallback: vec![],
        scores: vec![a.clone()],
    };
    for _ in 0..cfg.n {
        let mut exhausted = false;
        let anchor = if cfg.random {
            let free: Vec<usize> = (0..hw).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        } else {
            let mut best = usize::MAX;
            for i in 0..hw {
                if taken[i] {
                    continue;
                }
                if best == usize::MAX || a[i] > a[best] {
                    best = i;
                }
            }
            if a[best] <= 0.0 {
                exhausted = true;
                (0..hw).find(|&i| !taken[i]).unwrap()
            } else {
                best
            }
        };
        taken[anchor] = true;

        let mut w = vec![0.0; hw];
        let mut fell_back = exhausted;
        let mut refined = false;
        if cfg.refine && !exhausted && norm[anchor] > cfg.eps {
            let mut s = vec![0.0; hw];
            for i in 0..hw {
                let cos = if i == anchor {
                    1.0
                } else {
                    dot(&vectors[i], &vectors[anchor])
                        / (norm[i].max(cfg.eps) * norm[anchor].max(cfg.eps))
                };
                s[i] = cos.max(cfg.floor);
            }
            let total: f64 = s.iter().sum();
            if total > cfg.eps {
                for i in 0..hw {
                    w[i] = s[i] / total;
                }
                refined = true;
            } else {
                fell_back = true;
            }
        } else if cfg.refine {
            fell_back = true;
        }
        let row = if refined {
            let mut r = vec![0.0; c];
            for i in 0..hw {
                for k in 0..c {
                    r[k] += w[i] * vectors[i][k];
                }
            }
            r
        } else {
            w[anchor] = 1.0;
            vectors[anchor].clone()
        };
        for i in 0..hw {
            a[i] *= 1.0 - w[i];
        }
        out.rows.push(row);
        out.maps.push(w);
        out.anchors.push(anchor);
        out.fallback.push(fell_back);
        out.scores.push(a.clone());
    }
    out
}

/// Two-pass sparsity: weighted mean map, then max over mean.
pub fn oracle_sparsity(maps: &[Vec<f64>], norms: &[f64]) -> f64 {
    let hw = norms.len();
    let mut m = vec![0.0; hw];
    for map in maps {
        for i in 0..hw {
            m[i] += map[i] * norms[i];
        }
    }
    for v in &mut m {
        *v /= maps.len() as f64;
    }
    let max = m.iter().cloned().fold(f64::MIN, f64::max);
    let mean = m.iter().sum::<f64>() / hw as f64;
    max / mean
}

/// Double-double arithmetic (~106-bit significand).
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (h, l) = two_sum(hi, lo);
        Self { hi: h, lo: l }
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        Self::norm(s, e + self.lo + o.lo)
    }

    pub fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Self) -> Self {
        self.add(o.neg())
    }

    pub fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        Self::norm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Self::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Self::from(q2)));
        let q3 = r.hi / o.hi;
        Self::from(q1).add(Self::from(q2)).add(Self::from(q3))
    }

    /// Taylor series on x/2¹⁰, then ten squarings.
    pub fn exp(self) -> Self {
        let r = self.mul(Self::from(1.0 / 1024.0));
        let mut term = Self::from(1.0);
        let mut sum = Self::from(1.0);
        for k in 1..30 {
            term = term.mul(r).div(Self::from(k as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        sum
    }

    /// Newton iterations on exp(y) = x from the f64 logarithm.
    pub fn ln(self) -> Self {
        let mut y = Self::from(self.hi.ln());
        for _ in 0..3 {
            let e = y.exp();
            y = y.add(Self::from(2.0).mul(self.sub(e)).div(self.add(e)));
        }
        y
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// log Σ exp(x_i) in double-double.
pub fn dd_logsumexp(x: &[f64]) -> Dd {
    x.iter()
        .fold(Dd::from(0.0), |acc, v| acc.add(Dd::from(*v).exp()))
        .ln()
}

pub fn dd_cross_entropy(logits: &[f64], label: usize) -> Dd {
    dd_logsumexp(logits).sub(Dd::from(logits[label]))
}

/// KL(softmax(p) ‖ softmax(q)).
pub fn dd_kl(p: &[f64], q: &[f64]) -> Dd {
    let (lp, lq) = (dd_logsumexp(p), dd_logsumexp(q));
    let mut total = Dd::from(0.0);
    for i in 0..p.len() {
        let log_p = Dd::from(p[i]).sub(lp);
        let log_q = Dd::from(q[i]).sub(lq);
        total = total.add(log_p.exp().mul(log_p.sub(log_q)));
    }
    total
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
