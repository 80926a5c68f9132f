//! Small statistical helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid standard normal")
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Upper tail `P(Z > x)`, accurate in the far tail.
pub fn normal_sf(x: f64) -> f64 {
    std_normal().sf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n - 1` denominator.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Linear-interpolation quantile of already sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Same as [`quantile_sorted`] on an unsorted slice, reordering it by selection.
pub fn quantile_select(values: &mut [f64], prob: f64) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let (_, &mut a, upper) = values.select_nth_unstable_by(lo, |x, y| x.total_cmp(y));
    if lo + 1 >= n {
        return a;
    }
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    a + (h - lo as f64) * (b - a)
}

/// Kolmogorov-Smirnov statistic of a sample against Uniform(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    ks_sorted(&v, |x| x.clamp(0.0, 1.0))
}

/// Kolmogorov-Smirnov statistic of sorted data against a continuous CDF.
pub fn ks_sorted(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let upper = (i + 1) as f64 / n - f;
            let lower = f - i as f64 / n;
            upper.max(lower)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the one-sample KS statistic `d` at sample size `n`
/// (Kolmogorov series with Stephens' small-sample correction).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_tail_values() {
        assert!((normal_sf(1.959963984540054) - 0.025).abs() < 1e-10);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_sf(3.0) - 0.0013498980316301).abs() < 1e-12);
    }

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let d = ks_uniform(&v);
        assert!((d - 0.0005).abs() < 1e-12);
        assert!(ks_pvalue(d, 1000) > 0.99);
    }

    #[test]
    fn ks_pvalue_matches_known_critical_value() {
        // Asymptotic 1% critical value of sqrt(n) D is 1.6276.
        let n = 10_000;
        let d = 1.6276 / (n as f64).sqrt();
        let p = ks_pvalue(d, n);
        assert!((p - 0.01).abs() < 5e-4, "p = {p}");
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    }

    #[test]
    fn selection_matches_sorted_quantile() {
        let v: Vec<f64> = (0..1001).map(|i| ((i * 7919) % 1009) as f64 * 0.37 - 50.0).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for &p in &[0.0, 0.05, 0.25, 0.5, 0.731, 0.95, 1.0] {
            let mut w = v.clone();
            assert_eq!(quantile_select(&mut w, p), quantile_sorted(&sorted, p));
        }
    }
}
