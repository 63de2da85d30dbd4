//! Rate-exponent fits and pass/fail bound checks on probability series.

use crate::error::{Error, Result};
use crate::map::GeometrySequence;
use crate::sim::DeviationRecord;
use crate::stats::{golden_min, ols};
use crate::transfer::DensityEstimate;
use serde::Serialize;
use std::fmt;

/// Window rule: drop cells below this `n` before fitting; small-n
/// transients dominate otherwise.
pub const MIN_FIT_N: u32 = 10;
/// Window rule: drop cells with fewer hits than this; binomial noise
/// dominates otherwise.
pub const MIN_FIT_HITS: u64 = 30;

/// A fitted stretched-exponential rate `p ~ exp(-exp(c) * n^exponent)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RateFit {
    pub exponent: f64,
    pub log_prefactor: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points_used: usize,
}

/// Ordinary least squares of `log(-log p)` against `log n`.
///
/// Exact (residual at rounding level) whenever `p_n = exp(-a n^b)`.
pub fn fit_stretched_exponent(series: &[(f64, f64)]) -> Result<RateFit> {
    for &(n, p) in series {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InsufficientPoints(format!(
                "p must lie strictly in (0, 1); got p={p} at n={n}"
            )));
        }
    }
    if series.len() < 4 {
        return Err(Error::InsufficientPoints(format!(
            "stretched-exponent fit needs >= 4 points, got {}",
            series.len()
        )));
    }
    let xs: Vec<f64> = series.iter().map(|&(n, _)| n.ln()).collect();
    let ys: Vec<f64> = series.iter().map(|&(_, p)| (-p.ln()).ln()).collect();
    let (slope, intercept, r2) = ols(&xs, &ys);
    let lo = series.iter().map(|&(n, _)| n).fold(f64::INFINITY, f64::min);
    let hi = series.iter().map(|&(n, _)| n).fold(0.0f64, f64::max);
    Ok(RateFit {
        exponent: slope,
        log_prefactor: intercept,
        r_squared: r2,
        window: (lo, hi),
        points_used: series.len(),
    })
}

/// Apply the window rule to Monte Carlo records, then fit.
pub fn fit_deviation_records(
    records: &[DeviationRecord],
    min_n: u32,
    min_hits: u64,
) -> Result<RateFit> {
    let series: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.n >= min_n && r.hits >= min_hits && r.p_hat > 0.0 && r.p_hat < 1.0)
        .map(|r| (r.n as f64, r.p_hat))
        .collect();
    fit_stretched_exponent(&series)
}

/// Fit of `p = A * t^poly * exp(-B t^exponent)` for tail series whose
/// prefactor varies slowly (the invariant density contributes a
/// polynomial-in-t factor to observable tails). Exactly recovers pure
/// stretched exponentials with `poly = 0`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailFit {
    pub exponent: f64,
    pub rate: f64,
    pub log_prefactor: f64,
    pub poly_power: f64,
    pub sse: f64,
}

pub fn fit_exponential_tail(series: &[(f64, f64)]) -> Result<TailFit> {
    for &(t, p) in series {
        if !(p > 0.0 && p < 1.0) || !(t > 0.0) {
            return Err(Error::InsufficientPoints(format!(
                "tail fit needs t > 0 and p in (0, 1); got ({t}, {p})"
            )));
        }
    }
    if series.len() < 5 {
        return Err(Error::InsufficientPoints(format!(
            "prefactor tail fit needs >= 5 points, got {}",
            series.len()
        )));
    }
    let ts: Vec<f64> = series.iter().map(|&(t, _)| t).collect();
    let logp: Vec<f64> = series.iter().map(|&(_, p)| p.ln()).collect();
    let logt: Vec<f64> = ts.iter().map(|&t| t.ln()).collect();
    // for fixed exponent e, (log A, poly, -B) solve a 3x3 least-squares
    // system in the design (1, log t, t^e)
    let solve = |e: f64| -> (f64, [f64; 3]) {
        let te: Vec<f64> = ts.iter().map(|&t| t.powf(e)).collect();
        let cols: [&[f64]; 3] = [&vec![1.0; ts.len()], &logt, &te];
        let mut ata = [[0.0f64; 3]; 3];
        let mut atb = [0.0f64; 3];
        for r in 0..ts.len() {
            let row = [cols[0][r], cols[1][r], cols[2][r]];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * logp[r];
            }
        }
        let coef = solve3(ata, atb);
        let mut sse = 0.0;
        for r in 0..ts.len() {
            let fit = coef[0] + coef[1] * logt[r] + coef[2] * te[r];
            sse += (logp[r] - fit) * (logp[r] - fit);
        }
        (sse, coef)
    };
    let e = golden_min(|e| solve(e).0, 0.05, 2.5, 1e-12);
    let (sse, coef) = solve(e);
    Ok(TailFit {
        exponent: e,
        rate: -coef[2],
        log_prefactor: coef[0],
        poly_power: coef[1],
        sse,
    })
}

/// Gaussian elimination on a 3x3 system; inputs here are tiny normal
/// matrices from the tail fit.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in (row + 1)..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

/// One lower-bound comparison row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundRow {
    pub n: u32,
    pub p_hat: f64,
    pub slack: f64,
    pub reference: f64,
    pub pass: bool,
}

/// Large-deviation check for the bounded ramp observable: the fitted tail
/// exponent must sit near gamma, and every cell must dominate the ν-mass
/// of the laminar window `J_n` that forces the event.
#[derive(Clone, Debug, Serialize)]
pub struct BoundedDeviationReport {
    pub gamma: f64,
    pub nu_mean: f64,
    pub fit: RateFit,
    pub exponent_window: (f64, f64),
    pub exponent_pass: bool,
    pub lower_bounds: Vec<BoundRow>,
    pub lower_bound_pass: bool,
    pub pass: bool,
}

pub fn check_bounded_deviation(
    geometry: &GeometrySequence,
    density: &DensityEstimate,
    records: &[DeviationRecord],
    nu_mean: f64,
) -> Result<BoundedDeviationReport> {
    let gamma = geometry.params().gamma();
    let eligible: Vec<DeviationRecord> = records
        .iter()
        .copied()
        .filter(|r| (r.n as f64) > 2.0 / nu_mean)
        .collect();
    let fit = fit_deviation_records(&eligible, MIN_FIT_N, MIN_FIT_HITS)?;
    let exponent_window = (gamma - 0.15, gamma + 0.15);
    let exponent_pass = fit.exponent >= exponent_window.0 && fit.exponent <= exponent_window.1;
    let mut lower_bounds = Vec::with_capacity(eligible.len());
    for r in &eligible {
        if (r.n as usize) > geometry.max_index() {
            return Err(Error::Config(format!(
                "geometry too short for record n={}",
                r.n
            )));
        }
        let nu_jn = density.mass_interval(0.5, geometry.j_right(r.n as usize));
        let slack = 4.0 * r.stderr();
        lower_bounds.push(BoundRow {
            n: r.n,
            p_hat: r.p_hat,
            slack,
            reference: nu_jn,
            pass: r.p_hat + slack >= nu_jn,
        });
    }
    let lower_bound_pass = lower_bounds.iter().all(|b| b.pass);
    Ok(BoundedDeviationReport {
        gamma,
        nu_mean,
        pass: exponent_pass && lower_bound_pass,
        fit,
        exponent_window,
        exponent_pass,
        lower_bounds,
        lower_bound_pass,
    })
}

/// Margin added to the mean in the laminar-window index formula; any value
/// above 1 makes the forced Birkhoff sum exceed the threshold `n`.
pub const UNBOUNDED_EPSILON: f64 = 1.2;

/// Degraded-exponent check for the unbounded log-power observable.
#[derive(Clone, Debug, Serialize)]
pub struct UnboundedDeviationReport {
    pub gamma: f64,
    pub delta: f64,
    pub target_exponent: f64,
    pub fit: RateFit,
    pub exponent_window: (f64, f64),
    pub exponent_pass: bool,
    pub lower_bounds: Vec<BoundRow>,
    pub lower_bound_pass: bool,
    pub pass: bool,
}

pub fn check_unbounded_deviation(
    geometry: &GeometrySequence,
    density: &DensityEstimate,
    records: &[DeviationRecord],
    delta: f64,
    nu_mean: f64,
) -> Result<UnboundedDeviationReport> {
    let gamma = geometry.params().gamma();
    let target = gamma / (1.0 + gamma * delta);
    let fit = fit_deviation_records(records, MIN_FIT_N, MIN_FIT_HITS)?;
    let exponent_window = (target - 0.12, target + 0.12);
    let exponent_pass = fit.exponent >= exponent_window.0 && fit.exponent <= exponent_window.1;
    let upsilon2 = geometry.envelope_lower();
    let mut lower_bounds = Vec::new();
    for r in records.iter().filter(|r| r.n >= MIN_FIT_N) {
        let n = r.n as f64;
        let m = (((1.0 + gamma * delta) / upsilon2.powf(delta)
            * (nu_mean + UNBOUNDED_EPSILON)
            * n)
            .powf(1.0 / (1.0 + gamma * delta)))
        .floor() as usize;
        if m < 1 || m > geometry.max_index() {
            return Err(Error::Config(format!(
                "geometry too short for laminar index m={m} at n={}",
                r.n
            )));
        }
        // verify the inclusion actually forces the event: points of I_m
        // accumulate at least sum_{j} u_j^delta before centering
        let steps = m.min(r.n as usize);
        let mut forced = 0.0;
        for j in (m - steps + 1)..=m {
            forced += geometry.u(j).powf(delta);
        }
        if forced - n * nu_mean <= n {
            // floor effects defeated the margin; skip rather than compare
            continue;
        }
        let nu_im = density.mass_below(geometry.y(m));
        let slack = 4.0 * r.stderr();
        lower_bounds.push(BoundRow {
            n: r.n,
            p_hat: r.p_hat,
            slack,
            reference: nu_im,
            pass: nu_im <= r.p_hat + slack,
        });
    }
    if lower_bounds.is_empty() {
        return Err(Error::InsufficientPoints(
            "no record admitted a valid laminar lower bound".into(),
        ));
    }
    let lower_bound_pass = lower_bounds.iter().all(|b| b.pass);
    Ok(UnboundedDeviationReport {
        gamma,
        delta,
        target_exponent: target,
        pass: exponent_pass && lower_bound_pass,
        fit,
        exponent_window,
        exponent_pass,
        lower_bounds,
        lower_bound_pass,
    })
}

/// Verdict of the moderate-deviation trend check. Never silent: the trend
/// table is always part of the report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MdpVerdict {
    Pass,
    AsymptoticsNotReached,
    Fail,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MdpRow {
    pub n: u32,
    pub a_n: f64,
    pub hits: u64,
    pub p_hat: f64,
    /// `a_n log p_hat`; absent when the cell saw no hits.
    pub scaled_log_p: Option<f64>,
    pub qualifies: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModerateDeviationReport {
    pub sigma2: f64,
    pub x: f64,
    pub target: f64,
    pub rows: Vec<MdpRow>,
    /// `a_n log p_hat / target` at the largest qualifying n.
    pub final_ratio: Option<f64>,
    pub trend_toward_target: bool,
    pub verdict: MdpVerdict,
}

/// Minimum hit count for a cell to anchor the final-ratio check.
pub const MDP_MIN_HITS: u64 = 100;

pub fn check_moderate_deviation(
    cells: &[(f64, DeviationRecord)],
    sigma2: f64,
    x: f64,
) -> Result<ModerateDeviationReport> {
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!(
            "moderate-deviation check needs sigma2 > 0, got {sigma2}"
        )));
    }
    if cells.is_empty() {
        return Err(Error::InsufficientPoints("no moderate-deviation cells".into()));
    }
    let target = -x * x / (2.0 * sigma2);
    let mut rows = Vec::with_capacity(cells.len());
    for &(a_n, r) in cells {
        let scaled = if r.hits > 0 {
            Some(a_n * r.p_hat.ln())
        } else {
            None
        };
        rows.push(MdpRow {
            n: r.n,
            a_n,
            hits: r.hits,
            p_hat: r.p_hat,
            scaled_log_p: scaled,
            qualifies: r.hits >= MDP_MIN_HITS,
        });
    }
    rows.sort_by_key(|r| r.n);
    let qualifying: Vec<&MdpRow> = rows.iter().filter(|r| r.qualifies).collect();
    let final_ratio = qualifying
        .last()
        .and_then(|r| r.scaled_log_p)
        .map(|v| v / target);
    let trend_toward_target = qualifying.len() >= 2
        && qualifying
            .windows(2)
            .all(|w| match (w[0].scaled_log_p, w[1].scaled_log_p) {
                (Some(a), Some(b)) => (b - target).abs() <= (a - target).abs() + 1e-12,
                _ => false,
            });
    let verdict = match final_ratio {
        Some(ratio) if (0.5..=2.0).contains(&ratio) => MdpVerdict::Pass,
        Some(_) if trend_toward_target => MdpVerdict::AsymptoticsNotReached,
        Some(_) => MdpVerdict::Fail,
        None => MdpVerdict::AsymptoticsNotReached,
    };
    Ok(ModerateDeviationReport {
        sigma2,
        x,
        target,
        rows,
        final_ratio,
        trend_toward_target,
        verdict,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConcentrationRow {
    pub t: f64,
    pub p_hat: f64,
    pub hits: u64,
    /// `t^2 / (D_t log(2/p))`: the kappa this cell alone would need.
    pub kappa_needed: f64,
}

/// Shape check of the running-max concentration tail against
/// `2 exp(-t^2 / (kappa (n L^2 + 1 + t^(2-gamma))))`.
#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationReport {
    pub gamma: f64,
    pub n: u32,
    pub lipschitz: f64,
    /// Smallest kappa with zero bound violations across the grid.
    pub kappa_fit: f64,
    pub violations: usize,
    /// r² of `log p` against `t²` on the small-t half.
    pub quadratic_r2: f64,
    /// OLS slope of `log(-log p)` vs `log t` on the small-t half.
    pub slope_low: f64,
    /// Same on the large-t half.
    pub slope_high: f64,
    /// Slope starts near 2 and decreases at large t.
    pub bending: bool,
    pub rows: Vec<ConcentrationRow>,
}

/// Margin used by the bending comparison.
pub const BENDING_MARGIN: f64 = 0.25;

pub fn check_concentration(
    records: &[DeviationRecord],
    n: u32,
    lipschitz: f64,
    gamma: f64,
) -> Result<ConcentrationReport> {
    let usable: Vec<&DeviationRecord> = records
        .iter()
        .filter(|r| r.p_hat > 0.0 && r.p_hat < 1.0)
        .collect();
    if usable.len() < 4 {
        return Err(Error::InsufficientPoints(format!(
            "concentration shape check needs >= 4 usable t-points, got {}",
            usable.len()
        )));
    }
    let denom = |t: f64| n as f64 * lipschitz * lipschitz + 1.0 + t.powf(2.0 - gamma);
    let mut kappa_fit = 0.0f64;
    let mut rows = Vec::with_capacity(usable.len());
    for r in &usable {
        let t = r.threshold;
        let needed = t * t / (denom(t) * (2.0 / r.p_hat).ln());
        kappa_fit = kappa_fit.max(needed);
        rows.push(ConcentrationRow {
            t,
            p_hat: r.p_hat,
            hits: r.hits,
            kappa_needed: needed,
        });
    }
    let violations = rows
        .iter()
        .filter(|row| {
            row.p_hat > 2.0 * (-row.t * row.t / (kappa_fit * denom(row.t))).exp() + 1e-12
        })
        .count();
    let half = usable.len() / 2;
    let (lo, hi) = usable.split_at(half);
    let fit_half = |part: &[&DeviationRecord]| -> (f64, f64) {
        let lt: Vec<f64> = part.iter().map(|r| r.threshold.ln()).collect();
        let z: Vec<f64> = part.iter().map(|r| (-r.p_hat.ln()).ln()).collect();
        let t2: Vec<f64> = part.iter().map(|r| r.threshold * r.threshold).collect();
        let lp: Vec<f64> = part.iter().map(|r| r.p_hat.ln()).collect();
        let (slope, _, _) = ols(&lt, &z);
        let (_, _, r2) = ols(&t2, &lp);
        (slope, r2)
    };
    let (slope_low, quadratic_r2) = fit_half(lo);
    let (slope_high, _) = fit_half(hi);
    let bending = (1.5..=2.5).contains(&slope_low)
        && slope_high < slope_low - BENDING_MARGIN
        && slope_high < 2.0;
    Ok(ConcentrationReport {
        gamma,
        n,
        lipschitz,
        kappa_fit,
        violations,
        quadratic_r2,
        slope_low,
        slope_high,
        bending,
        rows,
    })
}

impl fmt::Display for RateFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "exponent {:7.4}  prefactor(log) {:8.4}  r2 {:8.6}  window [{}, {}]  points {}",
            self.exponent,
            self.log_prefactor,
            self.r_squared,
            self.window.0,
            self.window.1,
            self.points_used
        )
    }
}

impl fmt::Display for ModerateDeviationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>10} {:>10} {:>12} {:>14} {:>9}",
            "n", "a_n", "hits", "p_hat", "a_n*log(p)", "qualifies"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>8} {:>10.5} {:>10} {:>12.5e} {:>14} {:>9}",
                r.n,
                r.a_n,
                r.hits,
                r.p_hat,
                r.scaled_log_p
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                r.qualifies
            )?;
        }
        write!(
            f,
            "target {:.4}; final ratio {}; trend-toward-target {}; verdict {:?}",
            self.target,
            self.final_ratio
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
            self.trend_toward_target,
            self.verdict
        )
    }
}
