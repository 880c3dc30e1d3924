//! Seeded randomness, the Shapiro-Wilk normality test and the interquartile
//! band used to exclude output bits.
//!
//! The test follows Royston's AS R94 algorithm: polynomial approximations for
//! the coefficients and for the null distribution of `ln(1 - W)`, valid for
//! 3 <= n <= 5000.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// ChaCha20 seeded from a 64-bit value via `SeedableRng::seed_from_u64`.
pub type SeededRng = ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Inclusive flip-count band `(floor(n/4), n - floor(n/4))`; 30 gives (7, 23).
pub fn iqr_bounds(n_trials: usize) -> (usize, usize) {
    let q = n_trials / 4;
    (q, n_trials - q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityResult {
    pub w_statistic: f64,
    pub p_value: f64,
    pub sample_size: usize,
    /// All values equal; the test is undefined and `p_value` is 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("sample size {0} outside 3..=5000")]
    SampleSize(usize),
    #[error("sample contains a non-finite value")]
    NonFinite,
}

pub const SW_MIN_N: usize = 3;
pub const SW_MAX_N: usize = 5000;

const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];
const SMALL: f64 = 1e-19;

/// `cc[0] + cc[1] x + ... + cc[k-1] x^(k-1)`.
fn poly(cc: &[f64], x: f64) -> f64 {
    cc.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Antisymmetric coefficients `a[0..n/2]` for the upper half of the sorted sample.
fn coefficients(n: usize) -> Vec<f64> {
    let nn2 = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let norm = std_normal();
    let an = n as f64;
    let an25 = an + 0.25;
    let m: Vec<f64> = (1..=nn2).map(|i| norm.inverse_cdf((i as f64 - 0.375) / an25)).collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / an.sqrt();
    let a1 = poly(&C1, rsn) - m[0] / ssumm2;
    let mut a: Vec<f64> = m.clone();
    let (first_scaled, fac) = if n > 5 {
        let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
        a[1] = a2;
        (2, fac)
    } else {
        let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
        (1, fac)
    };
    a[0] = a1;
    for v in &mut a[first_scaled..] {
        *v /= -fac;
    }
    a
}

pub fn shapiro_wilk(sample: &[f64]) -> Result<NormalityResult, StatsError> {
    let n = sample.len();
    if !(SW_MIN_N..=SW_MAX_N).contains(&n) {
        return Err(StatsError::SampleSize(n));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range < SMALL {
        return Ok(NormalityResult { w_statistic: 1.0, p_value: 0.0, sample_size: n, degenerate: true });
    }
    let half = coefficients(n);
    // Full coefficient vector aligned with the sorted sample.
    let coef = |i: usize| -> f64 {
        let j = n - 1 - i;
        match i.cmp(&j) {
            std::cmp::Ordering::Less => -half[i],
            std::cmp::Ordering::Greater => half[j],
            std::cmp::Ordering::Equal => 0.0,
        }
    };
    let an = n as f64;
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let sx = xs.iter().sum::<f64>() / an;
    let sa = (0..n).map(coef).sum::<f64>() / an;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (i, &xi) in xs.iter().enumerate() {
        let asa = coef(i) - sa;
        let xsx = xi - sx;
        ssa += asa * asa;
        ssx += xsx * xsx;
        sax += asa * xsx;
    }
    // 1 - W, computed to avoid cancellation for W near 1.
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    let p_value = if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        p.max(0.0)
    } else {
        let y = w1.ln();
        let (y, m, s) = if n <= 11 {
            let gamma = poly(&G, an);
            if y >= gamma {
                return Ok(NormalityResult { w_statistic: w, p_value: 1e-99, sample_size: n, degenerate: false });
            }
            (-(gamma - y).ln(), poly(&C3, an), poly(&C4, an).exp())
        } else {
            let lx = an.ln();
            (y, poly(&C5, lx), poly(&C6, lx).exp())
        };
        Normal::new(m, s).expect("positive scale").sf(y)
    };
    Ok(NormalityResult { w_statistic: w, p_value, sample_size: n, degenerate: false })
}
