//! Binned Gaussian kernel density estimation in one dimension.

use crate::error::{Error, Result};
use crate::stats;

const GRID: usize = 512;
const KERNEL_REACH: f64 = 6.0;

/// Gaussian KDE evaluated on a regular grid and linearly interpolated.
#[derive(Debug, Clone)]
pub struct GaussianKde {
    lo: f64,
    step: f64,
    bandwidth: f64,
    grid: Vec<f64>,
}

/// Silverman's rule of thumb `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    let sd = stats::variance(samples).sqrt();
    let mut scratch = samples.to_vec();
    let iqr = stats::quantile_select(&mut scratch, 0.75) - stats::quantile_select(&mut scratch, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, true) => iqr / 1.34,
        (false, false) => 1e-3 * samples[0].abs().max(1.0),
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

impl GaussianKde {
    pub fn fit(samples: &[f64]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput("density estimation needs at least two samples".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite sample in density estimate".into()));
        }
        Ok(Self::with_bandwidth(samples, silverman_bandwidth(samples)))
    }

    pub fn with_bandwidth(samples: &[f64], bandwidth: f64) -> Self {
        let (min, max) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let lo = min - 3.0 * bandwidth;
        let hi = max + 3.0 * bandwidth;
        let step = (hi - lo) / (GRID - 1) as f64;

        let mut counts = vec![0.0; GRID];
        for &x in samples {
            let pos = (x - lo) / step;
            let i = (pos.floor() as usize).min(GRID - 2);
            let frac = pos - i as f64;
            counts[i] += 1.0 - frac;
            counts[i + 1] += frac;
        }

        let reach = ((KERNEL_REACH * bandwidth / step).ceil() as usize).min(GRID - 1);
        let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let kernel: Vec<f64> = (0..=reach)
            .map(|d| {
                let u = d as f64 * step / bandwidth;
                (-0.5 * u * u).exp() * norm
            })
            .collect();
        let mut grid = vec![0.0; GRID];
        for (j, &c) in counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let a = j.saturating_sub(reach);
            let b = (j + reach).min(GRID - 1);
            for (i, g) in grid.iter_mut().enumerate().take(b + 1).skip(a) {
                *g += c * kernel[i.abs_diff(j)];
            }
        }
        Self { lo, step, bandwidth, grid }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Grid point of highest estimated density.
    pub fn mode(&self) -> f64 {
        let i = (0..GRID).max_by(|&a, &b| self.grid[a].total_cmp(&self.grid[b])).unwrap_or(0);
        self.lo + i as f64 * self.step
    }

    /// Estimated density at `x` (zero outside the grid).
    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        let pos = (x - self.lo) / self.step;
        if !(pos >= 0.0) || pos > (GRID - 1) as f64 {
            return 0.0;
        }
        let i = (pos.floor() as usize).min(GRID - 2);
        let frac = pos - i as f64;
        self.grid[i] * (1.0 - frac) + self.grid[i + 1] * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_sample(n: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::stream(s, &[]);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn silverman_on_known_spread() {
        let x: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let sd = stats::variance(&x).sqrt();
        let iqr = 499.5;
        let expected = 0.9 * sd.min(iqr / 1.34) * 1000f64.powf(-0.2);
        assert!((silverman_bandwidth(&x) - expected).abs() < 1e-9);
    }

    #[test]
    fn binned_estimate_matches_exact_sum() {
        let x = normal_sample(2000, 1);
        let kde = GaussianKde::fit(&x).unwrap();
        let h = kde.bandwidth();
        for &t in &[-2.5, -1.0, -0.1, 0.0, 0.7, 1.9] {
            let exact: f64 = x.iter().map(|xi| (-0.5 * ((t - xi) / h).powi(2)).exp()).sum::<f64>()
                / (x.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
            assert!((kde.density(t) - exact).abs() < 2e-3 * exact.max(0.05), "t={t}: {} vs {exact}", kde.density(t));
        }
    }

    #[test]
    fn density_integrates_to_one_and_vanishes_outside() {
        let x = normal_sample(5000, 2);
        let kde = GaussianKde::fit(&x).unwrap();
        let (a, b, m) = (-8.0, 8.0, 16_000);
        let dx = (b - a) / m as f64;
        let total: f64 = (0..m).map(|i| kde.density(a + (i as f64 + 0.5) * dx) * dx).sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        assert_eq!(kde.density(1e3), 0.0);
        assert_eq!(kde.density(-1e3), 0.0);
    }
}
