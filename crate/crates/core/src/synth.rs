//! Synthetic manifolds with exact geodesic oracles, plus the evaluation
//! metrics used to check geometric fidelity at desk scale.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    SwissRoll,
    Circles,
}

impl Generator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Generator::SwissRoll => "swiss_roll",
            Generator::Circles => "circles",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "swiss_roll" => Some(Generator::SwissRoll),
            "circles" => Some(Generator::Circles),
            _ => None,
        }
    }
}

/// A generated point cloud with per-sample intrinsic coordinates from which
/// true geodesic distances are computable in closed form.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    /// Swiss roll: (s, h); circles: (nominal radius, angle).
    pub intrinsic: Array2<f64>,
    pub generator: Generator,
    pub seed: u64,
}

impl SyntheticSet {
    /// Exact manifold geodesic between two same-class samples. None when the
    /// pair spans classes (no common manifold).
    pub fn geodesic(&self, i: usize, j: usize) -> Option<f64> {
        if self.labels[i] != self.labels[j] {
            return None;
        }
        match self.generator {
            Generator::SwissRoll => {
                let a = swiss_arclen(self.intrinsic[[i, 0]]) - swiss_arclen(self.intrinsic[[j, 0]]);
                let h = self.intrinsic[[i, 1]] - self.intrinsic[[j, 1]];
                Some(a.hypot(h))
            }
            Generator::Circles => {
                let r = self.intrinsic[[i, 0]];
                let mut dt = (self.intrinsic[[i, 1]] - self.intrinsic[[j, 1]]).abs() % (2.0 * PI);
                if dt > PI {
                    dt = 2.0 * PI - dt;
                }
                Some(r * dt)
            }
        }
    }
}

/// Arc length of the spiral (s cos s, s sin s) from 0 to s:
/// integral of sqrt(1 + u^2) du.
pub fn swiss_arclen(s: f64) -> f64 {
    0.5 * (s * (1.0 + s * s).sqrt() + s.asinh())
}

/// Swiss roll: (s cos s, h, s sin s) with s uniform on [1.5 pi, 4.5 pi] and
/// h uniform on [0, 21], plus isotropic Gaussian noise.
pub fn gen_swiss_roll(n: usize, noise: f64, seed: u64) -> SyntheticSet {
    assert!(n >= 10, "swiss roll needs at least 10 samples");
    assert!(noise >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, 3));
    let mut intrinsic = Array2::zeros((n, 2));
    for i in 0..n {
        let s = rng.random_range(1.5 * PI..4.5 * PI);
        let h = rng.random_range(0.0..21.0);
        intrinsic[[i, 0]] = s;
        intrinsic[[i, 1]] = h;
        features[[i, 0]] = s * s.cos() + noise * gaussian(&mut rng);
        features[[i, 1]] = h + noise * gaussian(&mut rng);
        features[[i, 2]] = s * s.sin() + noise * gaussian(&mut rng);
    }
    SyntheticSet {
        features,
        labels: vec![1; n],
        intrinsic,
        generator: Generator::SwissRoll,
        seed,
    }
}

/// Two concentric circles: class 1 on radius r1, class 2 on radius r2,
/// angles uniform, Gaussian noise in the plane. `n` must be even; each class
/// gets exactly n/2 samples.
pub fn gen_circles(n: usize, radii: [f64; 2], noise: f64, seed: u64) -> SyntheticSet {
    assert!(n % 2 == 0, "n must be even for exact label balance");
    assert!(radii[0] > 0.0 && radii[0] < radii[1]);
    assert!(noise >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut features = Array2::zeros((n, 2));
    let mut intrinsic = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (class, r) = if i < half {
            (1, radii[0])
        } else {
            (2, radii[1])
        };
        let theta = rng.random_range(0.0..2.0 * PI);
        intrinsic[[i, 0]] = r;
        intrinsic[[i, 1]] = theta;
        features[[i, 0]] = r * theta.cos() + noise * gaussian(&mut rng);
        features[[i, 1]] = r * theta.sin() + noise * gaussian(&mut rng);
        labels.push(class);
    }
    SyntheticSet {
        features,
        labels,
        intrinsic,
        generator: Generator::Circles,
        seed,
    }
}

/// Standard normal via Box-Muller, fully determined by the rng stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2);
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap().then(i.cmp(&j)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidConfig(
            "spearman undefined for constant input".into(),
        ));
    }
    Ok(num / (va * vb).sqrt())
}

/// Expected calibration error over equal-width confidence bins; empty bins
/// are skipped.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> f64 {
    assert_eq!(confidences.len(), correct.len());
    assert!(bins >= 1);
    assert!(confidences.iter().all(|&c| (0.0..=1.0).contains(&c)));
    let n = confidences.len();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let w = count[b] as f64 / n as f64;
        let conf = conf_sum[b] / count[b] as f64;
        let acc = acc_sum[b] / count[b] as f64;
        total += w * (acc - conf).abs();
    }
    total
}
