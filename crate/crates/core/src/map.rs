//! The interval map family, its inverse branches, return times to the base
//! `Y = (1/2, 1]`, and the log-domain backward orbit of 1/2.
//!
//! The family is `T(x) = x(1 + c/|log x|^beta)` on `(0, 1/2]` and `2x - 1`
//! on `(1/2, 1]`, with `beta = 1/gamma - 1` and `c = (log 2)^beta` so that
//! `T(1/2) = 1`. `gamma = 1` is the doubling map, the exact test oracle.

use crate::error::{Error, Result};
use crate::stats::{self, KahanSum};
use serde::Serialize;

/// Tolerance for bisection residuals in the linear domain.
const LINEAR_TOL: f64 = 1e-14;
/// Absolute tolerance for bisection in the `u = -log y` domain.
const U_TOL: f64 = 1e-13;
/// Iteration cap for all bisections.
const BISECT_CAP: usize = 200;
/// Smallest x reachable by an orbit started in (1/2, 1): the resolution of
/// `2y - 1` just above `y = 1/2`. Orbits never get closer to 0 than this,
/// which keeps double precision safe for all forward iteration.
pub const FLOAT_FLOOR: f64 = 1e-16;

/// One member of the map family, pinned by `gamma`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MapParams {
    gamma: f64,
    beta: f64,
    c: f64,
}

impl MapParams {
    /// Build parameters for `gamma` in `(0, 1]`.
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "gamma must lie in (0, 1], got {gamma}"
            )));
        }
        let beta = 1.0 / gamma - 1.0;
        let c = std::f64::consts::LN_2.powf(beta);
        Ok(Self { gamma, beta, c })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// `u^beta` with fast paths for the doubling map (`beta = 0`) and the
    /// `gamma = 1/2` workhorse (`beta = 1`), which dominate hot loops.
    #[inline(always)]
    fn upow(&self, u: f64) -> f64 {
        if self.beta == 0.0 {
            1.0
        } else if self.beta == 1.0 {
            u
        } else {
            u.powf(self.beta)
        }
    }

    /// One forward step; caller guarantees `0 < x <= 1`.
    #[inline(always)]
    pub fn step(&self, x: f64) -> f64 {
        if x <= 0.5 {
            let u = -x.ln();
            x * (1.0 + self.c / self.upow(u))
        } else {
            2.0 * x - 1.0
        }
    }

    /// Apply the map with domain checking.
    ///
    /// `x = 1` maps to 1 (fixed point of the right branch); callers that
    /// iterate must treat it as degenerate.
    pub fn apply(&self, x: f64) -> Result<f64> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(Error::Domain(format!("map argument {x} outside (0, 1]")));
        }
        Ok(self.step(x))
    }

    /// Derivative of the map; caller guarantees `0 < x <= 1`.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        if x <= 0.5 {
            let u = -x.ln();
            let ub = self.upow(u);
            1.0 + self.c / ub + self.c * self.beta / (ub * u)
        } else {
            2.0
        }
    }

    /// Inverse of the left branch: the unique `x` in `(0, 1/2]` with
    /// `T(x) = y`, found by bracketed bisection.
    ///
    /// The residual satisfies `|T(x) - y| <= 1e-14 * max(y, 1e-30)`.
    pub fn left_inverse(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y <= 1.0) {
            return Err(Error::Domain(format!(
                "left_inverse argument {y} outside (0, 1]"
            )));
        }
        if self.beta == 0.0 {
            // doubling map: the left branch is exactly 2x
            return Ok(0.5 * y);
        }
        // T(x) <= 2x on (0, 1/2] because c/|log x|^beta <= c/(log 2)^beta = 1,
        // and T(x) >= x, so the root is bracketed by [y/2, min(y, 1/2)].
        let mut lo = 0.5 * y;
        let mut hi = y.min(0.5);
        let tol = LINEAR_TOL * y.max(1e-30);
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..BISECT_CAP {
            mid = 0.5 * (lo + hi);
            let r = self.step(mid) - y;
            if r.abs() <= tol {
                return Ok(mid);
            }
            if r > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        let r = self.step(mid) - y;
        if r.abs() <= tol * 4.0 {
            Ok(mid)
        } else {
            Err(Error::Convergence(format!(
                "left_inverse bisection stalled at y={y}, residual {r:.3e}"
            )))
        }
    }
}

/// Inverse of the right branch `2x - 1`, mapping `(0, 1]` into `(1/2, 1]`.
pub fn right_inverse(y: f64) -> Result<f64> {
    if !(y > 0.0 && y <= 1.0) {
        return Err(Error::Domain(format!(
            "right_inverse argument {y} outside (0, 1]"
        )));
    }
    Ok(0.5 * y + 0.5)
}

/// Backward orbit of 1/2 under the left branch, held as `u[n] = -log y_n`.
///
/// The recurrence `u[n+1] = u[n] + log(1 + c / u[n+1]^beta)` is solved in
/// the log domain so the sequence stays representable long after `y_n`
/// underflows linear doubles.
#[derive(Clone, Debug)]
pub struct GeometrySequence {
    params: MapParams,
    u: Vec<f64>,
}

impl GeometrySequence {
    /// Compute `u[0..=max_index]`.
    pub fn compute(params: MapParams, max_index: usize) -> Result<Self> {
        if max_index < 1 {
            return Err(Error::Config("geometry needs max_index >= 1".into()));
        }
        let mut u = Vec::with_capacity(max_index + 1);
        u.push(std::f64::consts::LN_2);
        for n in 0..max_index {
            let un = u[n];
            let gap = (params.c / params.upow(un)).ln_1p();
            let mut lo = un;
            let mut hi = un + gap;
            // g(v) = v - un - log(1 + c/v^beta) is increasing with
            // g(lo) < 0 < g(hi); bisect to U_TOL.
            let mut converged = false;
            for _ in 0..BISECT_CAP {
                let mid = 0.5 * (lo + hi);
                let g = mid - un - (params.c / params.upow(mid)).ln_1p();
                if g > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= U_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::Convergence(format!(
                    "geometry recurrence failed to bracket u[{}]",
                    n + 1
                )));
            }
            u.push(0.5 * (lo + hi));
        }
        Ok(Self { params, u })
    }

    pub fn params(&self) -> &MapParams {
        &self.params
    }

    pub fn max_index(&self) -> usize {
        self.u.len() - 1
    }

    /// `u[n] = -log y_n`.
    pub fn u(&self, n: usize) -> f64 {
        self.u[n]
    }

    /// `y_n` in the linear domain (0 once it underflows).
    pub fn y(&self, n: usize) -> f64 {
        (-self.u[n]).exp()
    }

    /// Right endpoint of `J_n = (1/2, y_n/2 + 1/2]`, the set of base points
    /// whose next `n` iterates stay at or below 1/2.
    pub fn j_right(&self, n: usize) -> f64 {
        0.5 + 0.5 * self.y(n)
    }

    /// Endpoints of the return-time cell `{R = n}`, an interval
    /// `(lo, hi]` inside the base; `{R = 1} = (3/4, 1]`.
    pub fn cell_bounds(&self, n: usize) -> Result<(f64, f64)> {
        if n == 0 {
            return Err(Error::Domain("return-time cells start at n = 1".into()));
        }
        if n > self.max_index() + 1 {
            return Err(Error::Domain(format!(
                "cell {n} needs geometry index {}, have {}",
                n - 1,
                self.max_index()
            )));
        }
        let hi = if n == 1 { 1.0 } else { self.j_right(n - 2) };
        let lo = self.j_right(n - 1);
        Ok((lo, hi))
    }

    /// OLS slope of `log u[n]` against `log n` over `n in [n_min, max]`;
    /// the growth exponent of the backward orbit.
    pub fn growth_exponent(&self, n_min: usize) -> f64 {
        let xs: Vec<f64> = (n_min..=self.max_index()).map(|n| (n as f64).ln()).collect();
        let ys: Vec<f64> = (n_min..=self.max_index()).map(|n| self.u[n].ln()).collect();
        stats::ols(&xs, &ys).0
    }

    /// Smallest `u[n] / n^gamma` over `n >= 1`: the fitted constant of the
    /// lower envelope `y_n <= exp(-upsilon2 * n^gamma)`.
    pub fn envelope_lower(&self) -> f64 {
        (1..=self.max_index())
            .map(|n| self.u[n] / (n as f64).powf(self.params.gamma))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exact base-measure tail `m(R >= n)` under normalized Lebesgue measure on
/// `(1/2, 1]`: equal to 1 for `n <= 1` and to `y_{n-2}` for `n >= 2`, since
/// `{R >= n} = (1/2, y_{n-2}/2 + 1/2]`.
pub fn return_tail_exact(geometry: &GeometrySequence, n: u32) -> Result<f64> {
    if n <= 1 {
        return Ok(1.0);
    }
    let idx = (n - 2) as usize;
    if idx > geometry.max_index() {
        return Err(Error::Domain(format!(
            "tail index {n} exceeds geometry range {}",
            geometry.max_index() + 2
        )));
    }
    Ok(geometry.y(idx))
}

/// One first-return observation: start, return time, landing point.
#[derive(Clone, Copy, Debug)]
pub struct InducedSample {
    pub start: f64,
    pub return_time: u32,
    pub landing: f64,
}

/// Safety cap for return-time iteration, derived from the float floor.
fn return_cap(params: &MapParams) -> u64 {
    let u_floor = -FLOAT_FLOOR.ln();
    (10.0 * u_floor.powf(1.0 + params.beta()) / params.c()).ceil() as u64
}

/// First return to the base `Y = (1/2, 1]`.
///
/// `y = 1` is rejected: it is a fixed point and has no return time.
pub fn return_time(params: &MapParams, y: f64) -> Result<InducedSample> {
    if !(y > 0.5 && y < 1.0) {
        return Err(Error::Domain(format!(
            "return_time start {y} outside (1/2, 1)"
        )));
    }
    let cap = return_cap(params);
    let mut x = 2.0 * y - 1.0;
    let mut k = 1u64;
    while x <= 0.5 {
        if x <= 0.0 {
            return Err(Error::OrbitDegenerate(0.0));
        }
        if k >= cap {
            return Err(Error::OrbitTrapped { start: y, steps: k });
        }
        x = params.step(x);
        k += 1;
    }
    Ok(InducedSample {
        start: y,
        return_time: k as u32,
        landing: x,
    })
}

/// Empirical check of the induced-map axioms on pairs sampled inside
/// single return-time cells.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct InducedAxiomsReport {
    pub pairs: usize,
    /// Minimum of `|F(y) - F(x)| / |y - x|` over sampled pairs.
    pub min_expansion: f64,
    /// Maximum of `|log F'(y) - log F'(x)| / |F(y) - F(x)|`; the empirical
    /// distortion constant, reported but never asserted against a value.
    pub max_distortion: f64,
    pub max_return_time: u32,
    pub cells_visited: usize,
}

/// Induced map value and log-derivative along the orbit, by the chain rule.
fn induced_value_and_logderiv(params: &MapParams, y: f64) -> Result<(f64, f64)> {
    let sample = return_time(params, y)?;
    let mut logd = KahanSum::new();
    let mut x = y;
    for _ in 0..sample.return_time {
        logd.add(params.derivative(x).ln());
        x = params.step(x);
    }
    Ok((sample.landing, logd.value()))
}

/// Sample pairs inside return-time cells and measure expansion and
/// distortion of the induced map `F = T^R`.
pub fn verify_induced_axioms(
    params: &MapParams,
    geometry: &GeometrySequence,
    pair_samples: usize,
    rng_seed: u64,
) -> Result<InducedAxiomsReport> {
    use rand::{Rng, SeedableRng};
    if pair_samples < 1 {
        return Err(Error::Config("pair_samples must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let mut min_expansion = f64::INFINITY;
    let mut max_distortion: f64 = 0.0;
    let mut max_return_time = 0u32;
    let mut cells = std::collections::BTreeSet::new();
    let mut done = 0usize;
    while done < pair_samples {
        let y1 = 0.5 + 0.5 * rng.gen::<f64>();
        if y1 <= 0.5 || y1 >= 1.0 {
            continue;
        }
        let first = return_time(params, y1)?;
        let n = first.return_time as usize;
        if n + 1 > geometry.max_index() {
            continue; // cell endpoints unavailable this deep; vanishing mass
        }
        let (lo, hi) = geometry.cell_bounds(n)?;
        // second point strictly inside the same cell
        let t = rng.gen::<f64>().clamp(1e-9, 1.0 - 1e-9);
        let y2 = lo + t * (hi - lo);
        if (y2 - y1).abs() < 1e-13 {
            continue;
        }
        let second = return_time(params, y2)?;
        if second.return_time != first.return_time {
            return Err(Error::Internal(format!(
                "pair ({y1}, {y2}) straddles cells {} and {}",
                first.return_time, second.return_time
            )));
        }
        let (f1, ld1) = induced_value_and_logderiv(params, y1)?;
        let (f2, ld2) = induced_value_and_logderiv(params, y2)?;
        let df = (f2 - f1).abs();
        let dy = (y2 - y1).abs();
        min_expansion = min_expansion.min(df / dy);
        if df > 1e-12 {
            max_distortion = max_distortion.max((ld2 - ld1).abs() / df);
        }
        max_return_time = max_return_time.max(first.return_time);
        cells.insert(first.return_time);
        done += 1;
    }
    Ok(InducedAxiomsReport {
        pairs: done,
        min_expansion,
        max_distortion,
        max_return_time,
        cells_visited: cells.len(),
    })
}
