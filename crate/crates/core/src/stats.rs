//! Small numeric helpers: compensated summation, ordinary least squares,
//! binomial confidence intervals, scalar minimization, and a stable hash.

/// Neumaier-compensated running sum.
///
/// Used wherever many small terms accumulate (Birkhoff sums, quadrature)
/// so that results stay deterministic and accurate at long horizons.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Ordinary least squares of `y` on `x`.
///
/// Returns `(slope, intercept, r_squared)`. Degenerate inputs (fewer than
/// two points, zero x-variance) return NaN slopes; callers validate first.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - xm) * (xi - xm);
        sxy += (xi - xm) * (yi - ym);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let e = yi - (intercept + slope * xi);
        ss_res += e * e;
        ss_tot += (yi - ym) * (yi - ym);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Wilson 95% score interval for a binomial proportion.
///
/// Well-behaved at zero and full hit counts, which rare-event cells
/// routinely produce.
pub fn wilson_ci(hits: u64, trials: u64) -> (f64, f64) {
    assert!(trials >= 1, "wilson_ci needs at least one trial");
    let z = 1.959963984540054_f64; // 97.5% normal quantile
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Binomial standard error of a proportion estimate.
pub fn binomial_stderr(hits: u64, trials: u64) -> f64 {
    let n = trials as f64;
    let p = hits as f64 / n;
    (p * (1.0 - p) / n).sqrt()
}

/// Golden-section minimization of a unimodal scalar function on `[lo, hi]`.
pub fn golden_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    debug_assert!(lo < hi);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..300 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
        if b - a < tol {
            break;
        }
    }
    0.5 * (a + b)
}

/// FNV-1a 64-bit hash, used for stable run-configuration fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_beats_naive_on_small_terms() {
        let mut k = KahanSum::new();
        let mut naive = 0.0_f64;
        k.add(1e16);
        naive += 1e16;
        for _ in 0..10_000 {
            k.add(0.1);
            naive += 0.1;
        }
        let exact = 1e16 + 1000.0;
        assert!((k.value() - exact).abs() < 1.0);
        assert!((naive - exact).abs() > (k.value() - exact).abs());
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 3.0 * v - 2.0).collect();
        let (s, i, r2) = ols(&x, &y);
        assert!((s - 3.0).abs() < 1e-12);
        assert!((i + 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilson_contains_p_hat_and_handles_extremes() {
        let (lo, hi) = wilson_ci(50, 100);
        assert!(lo < 0.5 && 0.5 < hi);
        let (lo, hi) = wilson_ci(0, 100);
        assert!(lo == 0.0 && hi > 0.0);
        let (lo, hi) = wilson_ci(100, 100);
        assert!(lo < 1.0 && hi == 1.0);
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let m = golden_min(|x| (x - 1.25) * (x - 1.25), 0.0, 3.0, 1e-12);
        assert!((m - 1.25).abs() < 1e-9);
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), fnv1a64(b"a"));
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }
}
