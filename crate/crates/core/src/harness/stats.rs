//! Statistics helpers for the experiment harness: deterministic pairwise
//! reduction, moment estimates with variance-of-variance standard errors,
//! weighted least squares slope tests, Mann-Kendall trend test and the
//! two-sample Kolmogorov-Smirnov test.

/// Pairwise (cascade) summation: numerically stable and independent of any
/// parallel execution order, since it is always evaluated over the slice in
/// index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Central moments of a sample: mean, m2 and m4 (biased, 1/R norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
    pub m4: f64,
}

impl Moments {
    pub fn from_sample(xs: &[f64]) -> Moments {
        let n = xs.len();
        assert!(n > 0, "empty sample");
        let mean = pairwise_sum(xs) / n as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let m2 = pairwise_sum(&sq) / n as f64;
        let quarts: Vec<f64> = sq.iter().map(|s| s * s).collect();
        let m4 = pairwise_sum(&quarts) / n as f64;
        Moments { n, mean, m2, m4 }
    }

    /// Standard error of the sample variance via the fourth central moment:
    /// `sqrt((m4 - m2^2) / n)`.
    pub fn variance_se(&self) -> f64 {
        ((self.m4 - self.m2 * self.m2).max(0.0) / self.n as f64).sqrt()
    }

    /// Standard error of the sample mean.
    pub fn mean_se(&self) -> f64 {
        (self.m2 / self.n as f64).sqrt()
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error below 1.5e-7, ample for trend and slope p-values).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(z))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Weighted least squares fit `y = a + b x` with known per-point standard
/// errors. Returns the slope, its standard error, and the two-sided normal
/// p-value against slope zero.
#[derive(Debug, Clone, Copy)]
pub struct SlopeTest {
    pub slope: f64,
    pub se: f64,
    pub p_two_sided: f64,
    pub p_positive: f64,
}

pub fn wls_slope(x: &[f64], y: &[f64], se: &[f64]) -> SlopeTest {
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), se.len());
    assert!(x.len() >= 3, "need at least 3 points for a slope test");
    let w: Vec<f64> = se
        .iter()
        .map(|s| {
            let s = s.max(1e-300);
            1.0 / (s * s)
        })
        .collect();
    let sw = pairwise_sum(&w);
    let xw = pairwise_sum(&w.iter().zip(x).map(|(wi, xi)| wi * xi).collect::<Vec<_>>()) / sw;
    let yw = pairwise_sum(&w.iter().zip(y).map(|(wi, yi)| wi * yi).collect::<Vec<_>>()) / sw;
    let sxx = pairwise_sum(
        &w.iter().zip(x).map(|(wi, xi)| wi * (xi - xw) * (xi - xw)).collect::<Vec<_>>(),
    );
    let sxy = pairwise_sum(
        &w.iter()
            .zip(x.iter().zip(y))
            .map(|(wi, (xi, yi))| wi * (xi - xw) * (yi - yw))
            .collect::<Vec<_>>(),
    );
    let slope = sxy / sxx;
    let se_slope = (1.0 / sxx).sqrt();
    let z = slope / se_slope;
    SlopeTest {
        slope,
        se: se_slope,
        p_two_sided: 2.0 * (1.0 - normal_cdf(z.abs())),
        p_positive: 1.0 - normal_cdf(z),
    }
}

/// Ordinary least squares slope (used for log-log decay rates).
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let xm = pairwise_sum(x) / n;
    let ym = pairwise_sum(y) / n;
    let sxx: f64 = x.iter().map(|xi| (xi - xm) * (xi - xm)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - xm) * (yi - ym)).sum();
    sxy / sxx
}

/// Mann-Kendall trend test with tie correction.
#[derive(Debug, Clone, Copy)]
pub struct MannKendall {
    pub s: i64,
    pub z: f64,
    /// One-sided p-value for an upward trend.
    pub p_upward: f64,
}

pub fn mann_kendall(xs: &[f64]) -> MannKendall {
    let n = xs.len();
    assert!(n >= 3, "need at least 3 points for a trend test");
    let mut s: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += match xs[j].partial_cmp(&xs[i]).expect("finite values") {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    // Tie groups reduce the variance of S.
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut tie_term = 0i64;
    let mut run = 1i64;
    for i in 1..n {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            tie_term += run * (run - 1) * (2 * run + 5);
            run = 1;
        }
    }
    tie_term += run * (run - 1) * (2 * run + 5);
    let n_i = n as i64;
    let var = ((n_i * (n_i - 1) * (2 * n_i + 5) - tie_term) as f64) / 18.0;
    let z = if var <= 0.0 {
        0.0
    } else if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    MannKendall { s, z, p_upward: 1.0 - normal_cdf(z) }
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
#[derive(Debug, Clone, Copy)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsTest {
    assert!(!a.is_empty() && !b.is_empty());
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    let (na, nb) = (a.len(), b.len());
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        let xa = a[i];
        let xb = b[j];
        let x = xa.min(xb);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    KsTest { statistic: d, p_value: kolmogorov_sf(lambda) }
}

fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1.0f64).powi(k as i32 + 1) * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_benign_data() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    #[test]
    fn moments_of_known_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let m = Moments::from_sample(&xs);
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.m2, 1.25);
        assert!(m.variance_se() > 0.0);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(1.959963985) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(-1.0) - 0.15865525).abs() < 1e-6);
    }

    #[test]
    fn wls_detects_a_clear_slope() {
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|xi| 2.0 + 0.5 * xi).collect();
        let se = vec![0.01; 8];
        let t = wls_slope(&x, &y, &se);
        assert!((t.slope - 0.5).abs() < 1e-9);
        assert!(t.p_positive < 1e-6);

        let flat = vec![3.0; 8];
        let t = wls_slope(&x, &flat, &se);
        assert!(t.p_two_sided > 0.9);
    }

    #[test]
    fn mann_kendall_trends() {
        let up: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(mann_kendall(&up).p_upward < 0.01);
        let flat = [1.0, 0.9, 1.05, 1.0, 0.95, 1.02, 0.97, 1.01];
        assert!(mann_kendall(&flat).p_upward > 0.05);
        let down: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        assert!(mann_kendall(&down).p_upward > 0.95);
    }

    #[test]
    fn ks_same_distribution_has_high_p() {
        let a: Vec<f64> = (0..800).map(|i| crate::rng::unit_f64(1, &[i])).collect();
        let b: Vec<f64> = (0..800).map(|i| crate::rng::unit_f64(2, &[i])).collect();
        let t = ks_two_sample(&a, &b);
        assert!(t.p_value > 0.01, "p = {}", t.p_value);

        let shifted: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        let t = ks_two_sample(&a, &shifted);
        assert!(t.p_value < 1e-6);
    }

    #[test]
    fn ols_slope_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        assert!((ols_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
