//! Reference distributions and goodness-of-fit distances.

use statrs::function::gamma;

/// Standard normal CDF, through `P(|Z| > |x|) = Q(1/2, x^2/2)`.
pub fn normal_cdf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let tail = 0.5 * gamma::gamma_ur(0.5, 0.5 * x * x);
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// CDF of the chi-square law with `df` degrees of freedom; `df = 0` is the
/// point mass at zero.
pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return if df == 0.0 { 1.0 } else { 0.0 };
    }
    if df == 0.0 {
        return 1.0;
    }
    gamma::gamma_lr(df / 2.0, x / 2.0)
}

/// Asymptotic Kolmogorov tail `P(sup |B| > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-transformed series, fast for small lambda
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let mut s = 0.0;
        let mut k = 1;
        loop {
            let term = y.powi(k * k);
            s += term;
            if term < 1e-17 || k > 50 {
                break;
            }
            k += 2;
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-17 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Kolmogorov-Smirnov statistic and p-value.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KsResult {
    pub distance: f64,
    pub p_value: f64,
}

fn ks_p(distance: f64, effective_n: f64) -> f64 {
    let root = effective_n.sqrt();
    kolmogorov_tail((root + 0.12 + 0.11 / root) * distance)
}

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Supremum distance between the empirical CDF of `sample` and `cdf`.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let v = sorted(sample);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let distance = ks_distance(sample, cdf);
    KsResult {
        distance,
        p_value: ks_p(distance, sample.len() as f64),
    }
}

/// Supremum distance between two empirical CDFs.
pub fn ks_two_distance(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let distance = ks_two_distance(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    KsResult {
        distance,
        p_value: ks_p(distance, na * nb / (na + nb)),
    }
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` between two samples of
/// vectors, after scaling every coordinate by its pooled standard deviation.
/// Only the first `cap` rows of each sample are used.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>], cap: usize) -> f64 {
    let a = &a[..a.len().min(cap)];
    let b = &b[..b.len().min(cap)];
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let dim = a[0].len();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let pooled: Vec<f64> = a.iter().chain(b).map(|r| r[j]).collect();
            let (_, var) = crate::numeric::mean_var(&pooled);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let dist = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .zip(&scale)
            .map(|((p, q), s)| ((p - q) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mean_pair = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut acc = crate::numeric::CompensatedSum::new();
        for p in x {
            for q in y {
                acc.add(dist(p, q));
            }
        }
        acc.value() / (x.len() * y.len()) as f64
    };
    2.0 * mean_pair(a, b) - mean_pair(a, a) - mean_pair(b, b)
}
