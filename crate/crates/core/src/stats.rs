//! Small numerical helpers shared across modules.

use std::f64::consts::PI;

/// `ln √(2π)`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln σ(x)` without overflow.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Linearly interpolated quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Silverman's rule-of-thumb bandwidth, `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let sd = variance(&v).sqrt();
    let iqr = quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (v.len() as f64).powf(-0.2)
}

/// Gaussian kernel density evaluated on an evenly spaced grid spanning the sample.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityGrid {
    pub fn estimate(xs: &[f64], points: usize) -> DensityGrid {
        assert!(points >= 2 && !xs.is_empty());
        let bw = silverman_bandwidth(xs);
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(bw > 0.0) || hi <= lo {
            return DensityGrid {
                x: vec![lo; points],
                density: vec![f64::INFINITY; points],
                bandwidth: 0.0,
            };
        }
        let step = (hi - lo) / (points - 1) as f64;
        let norm = 1.0 / (xs.len() as f64 * bw * (2.0 * PI).sqrt());
        let x: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
        let density = x
            .iter()
            .map(|&g| {
                norm * xs
                    .iter()
                    .map(|&s| {
                        let z = (g - s) / bw;
                        (-0.5 * z * z).exp()
                    })
                    .sum::<f64>()
            })
            .collect();
        DensityGrid {
            x,
            density,
            bandwidth: bw,
        }
    }

    /// Grid location of the largest density value.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| {
                if d > acc.1 {
                    (i, d)
                } else {
                    acc
                }
            });
        self.x[i]
    }
}

/// Kernel-density mode on a 2048-point grid.
pub fn kde_mode(xs: &[f64]) -> f64 {
    DensityGrid::estimate(xs, 2048).mode()
}
