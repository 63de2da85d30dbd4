//! Ulam discretization of the transfer operator, the invariant density,
//! ν-integrals, correlation decay, and the variance constants.

use crate::error::{Error, Result};
use crate::map::{right_inverse, MapParams};
use crate::observable::Observable;
use crate::stats::KahanSum;
use serde::Serialize;

/// Default lower edge of the geometric part of the grid. The invariant
/// density has an integrable log-power singularity at 0; the ν-mass below
/// this floor is far under 1e-10 and is assigned to the first cell.
pub const DEFAULT_GRID_FLOOR: f64 = 1e-12;
/// Power-iteration convergence: successive L1 change below this.
pub const DENSITY_TOL: f64 = 1e-12;
const POWER_ITERATION_CAP: usize = 1_000_000;
const ROW_SUM_TOL: f64 = 1e-12;

/// Partition of `(0, 1]` used by the Ulam scheme: geometric spacing on
/// `(floor, 1/2]` (the density diverges like a log power at 0, so uniform
/// cells would waste resolution) and uniform spacing on `[1/2, 1]`.
#[derive(Clone, Debug)]
pub struct UlamGrid {
    breakpoints: Vec<f64>,
    floor: f64,
}

impl UlamGrid {
    /// Geometric-uniform hybrid grid with `m` cells (`m` even, >= 256).
    pub fn geometric(m: usize, floor: f64) -> Result<Self> {
        Self::validate_m(m)?;
        if !(floor > 0.0 && floor < 1e-3) {
            return Err(Error::Config(format!(
                "grid floor must lie in (0, 1e-3), got {floor}"
            )));
        }
        let half = m / 2;
        let mut b = Vec::with_capacity(m + 1);
        let lf = floor.ln();
        let lh = 0.5_f64.ln();
        for k in 0..half {
            b.push((lf + (lh - lf) * k as f64 / half as f64).exp());
        }
        b.push(0.5);
        for k in 1..half {
            b.push(0.5 + 0.5 * k as f64 / half as f64);
        }
        b.push(1.0);
        Ok(Self {
            breakpoints: b,
            floor,
        })
    }

    /// Uniform grid with `m` cells (`m` even so that 1/2 is a breakpoint).
    /// Exact for doubling-map oracles.
    pub fn uniform(m: usize) -> Result<Self> {
        Self::validate_m(m)?;
        let b = (0..=m).map(|k| k as f64 / m as f64).collect();
        Ok(Self {
            breakpoints: b,
            floor: 0.0,
        })
    }

    fn validate_m(m: usize) -> Result<()> {
        if m < 256 || m % 2 != 0 {
            return Err(Error::Config(format!(
                "grid needs an even cell count >= 256, got {m}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn breakpoint(&self, j: usize) -> f64 {
        self.breakpoints[j]
    }

    /// Cell `i` is `(b_i, b_{i+1}]`.
    pub fn cell(&self, i: usize) -> (f64, f64) {
        (self.breakpoints[i], self.breakpoints[i + 1])
    }

    pub fn width(&self, i: usize) -> f64 {
        self.breakpoints[i + 1] - self.breakpoints[i]
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.breakpoints[i] + self.breakpoints[i + 1])
    }

    /// Cell index containing `x`; everything at or below the floor belongs
    /// to the first cell.
    pub fn locate(&self, x: f64) -> usize {
        let k = self.breakpoints.partition_point(|&v| v < x);
        k.saturating_sub(1).min(self.len() - 1)
    }
}

/// Sparse row-stochastic Ulam matrix: `P[i][j]` is the fraction of cell `i`
/// mapped into cell `j`.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    grid: UlamGrid,
    rows: Vec<Vec<(u32, f64)>>,
}

impl UlamOperator {
    pub fn grid(&self) -> &UlamGrid {
        &self.grid
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Push a mass vector one step forward: `out[j] = Σ_i m[i] P[i][j]`.
    /// Fixed summation order keeps results bit-stable.
    pub fn push_forward(&self, masses: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let m = masses[i];
            if m == 0.0 {
                continue;
            }
            for &(j, p) in row {
                out[j as usize] += m * p;
            }
        }
    }
}

/// Build the Ulam operator from exact preimage intervals of each cell:
/// `T^{-1}(cell_j)` is one interval per inverse branch.
pub fn build_ulam(params: &MapParams, grid: UlamGrid) -> Result<UlamOperator> {
    let m = grid.len();
    // branch images of every breakpoint
    let mut s = Vec::with_capacity(m + 1);
    let mut u = Vec::with_capacity(m + 1);
    for j in 0..=m {
        let b = grid.breakpoint(j);
        s.push(params.left_inverse(b)?);
        u.push(right_inverse(b)?);
    }
    // ensure strict monotonicity of the computed inverses
    for j in 0..m {
        if s[j + 1] <= s[j] || u[j + 1] <= u[j] {
            return Err(Error::Internal(format!(
                "inverse-branch breakpoints not increasing at j={j}"
            )));
        }
    }
    // the first cell absorbs everything below the floor, so its preimage
    // starts at the branch bottoms
    s[0] = 0.0;
    u[0] = 0.5;

    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); m];
    for bounds in [&s, &u] {
        // two-pointer walk: both the preimage intervals and the source
        // cells are increasing in x
        let mut i = 0usize;
        for j in 0..m {
            let (lo, hi) = (bounds[j], bounds[j + 1]);
            while i + 1 < m && grid.breakpoint(i + 1) <= lo {
                i += 1;
            }
            let mut k = i;
            loop {
                let (clo, chi) = grid.cell(k);
                let ov = hi.min(chi) - lo.max(clo);
                if ov > 0.0 {
                    rows[k].push((j as u32, ov / grid.width(k)));
                }
                if chi >= hi || k + 1 >= m {
                    break;
                }
                k += 1;
            }
        }
    }
    // merge duplicate targets and check row sums
    for (i, row) in rows.iter_mut().enumerate() {
        row.sort_unstable_by_key(|&(j, _)| j);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(row.len());
        for &(j, p) in row.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += p,
                _ => merged.push((j, p)),
            }
        }
        let sum: f64 = merged.iter().map(|&(_, p)| p).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Internal(format!(
                "row {i} sums to {sum}, off by {:.3e}",
                sum - 1.0
            )));
        }
        *row = merged;
    }
    Ok(UlamOperator { grid, rows })
}

/// Piecewise-constant invariant density on the grid.
#[derive(Clone, Debug)]
pub struct DensityEstimate {
    grid: UlamGrid,
    values: Vec<f64>,
    masses: Vec<f64>,
    pub iterations: usize,
}

impl DensityEstimate {
    pub fn grid(&self) -> &UlamGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// ν-mass of `(0, cutoff]` with a partial last cell.
    pub fn mass_below(&self, cutoff: f64) -> f64 {
        let mut acc = KahanSum::new();
        for i in 0..self.grid.len() {
            let (lo, hi) = self.grid.cell(i);
            if hi <= cutoff {
                acc.add(self.masses[i]);
            } else {
                if cutoff > lo {
                    acc.add(self.values[i] * (cutoff - lo));
                }
                break;
            }
        }
        acc.value()
    }

    /// ν-mass of `(a, b]` by quadrature with partial end cells.
    pub fn mass_interval(&self, a: f64, b: f64) -> f64 {
        self.mass_below(b) - self.mass_below(a)
    }

    /// Minimum density value over cells intersecting `[lo, hi]`.
    pub fn min_density_over(&self, lo: f64, hi: f64) -> f64 {
        let mut out = f64::INFINITY;
        for i in 0..self.grid.len() {
            let (clo, chi) = self.grid.cell(i);
            if chi > lo && clo < hi {
                out = out.min(self.values[i]);
            }
        }
        out
    }
}

/// Invariant density by deterministic power iteration on cell masses,
/// starting from normalized Lebesgue measure.
pub fn invariant_density(op: &UlamOperator, tol: f64) -> Result<DensityEstimate> {
    let m = op.grid().len();
    let total: f64 = (0..m).map(|i| op.grid().width(i)).sum();
    let mut mass: Vec<f64> = (0..m).map(|i| op.grid().width(i) / total).collect();
    let mut next = vec![0.0f64; m];
    let mut iterations = 0;
    loop {
        op.push_forward(&mass, &mut next);
        let delta: f64 = mass
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        std::mem::swap(&mut mass, &mut next);
        iterations += 1;
        if delta < tol {
            break;
        }
        if iterations >= POWER_ITERATION_CAP {
            return Err(Error::Convergence(format!(
                "power iteration still changing by {delta:.3e} after {iterations} steps"
            )));
        }
    }
    // normalize away accumulated rounding and convert to density values
    let sum: f64 = mass.iter().sum();
    let values: Vec<f64> = mass
        .iter()
        .enumerate()
        .map(|(i, &v)| v / sum / op.grid().width(i))
        .collect();
    let masses: Vec<f64> = mass.iter().map(|&v| v / sum).collect();
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::Internal("negative density value".into()));
    }
    Ok(DensityEstimate {
        grid: op.grid().clone(),
        values,
        masses,
        iterations,
    })
}

/// Midpoint-rule integral of an observable against the density.
///
/// Errors when the observable varies by more than 10% of its grid-wide
/// scale across a cell carrying mass above 1e-6: that grid cannot resolve
/// the integrand (log powers near 0 on coarse grids).
pub fn integrate(obs: &Observable, density: &DensityEstimate) -> Result<f64> {
    let grid = density.grid();
    let m = grid.len();
    let mut scale = 0.0f64;
    let mut endpoint = Vec::with_capacity(m + 1);
    for j in 0..=m {
        let x = grid.breakpoint(j).max(1e-300);
        let v = obs.eval(x);
        scale = scale.max(v.abs());
        endpoint.push(v);
    }
    let mut acc = KahanSum::new();
    for i in 0..m {
        let variation = (endpoint[i + 1] - endpoint[i]).abs();
        if density.masses()[i] > 1e-6 && variation > 0.1 * scale.max(1e-300) {
            let (lo, hi) = grid.cell(i);
            return Err(Error::Resolution(format!(
                "observable varies by {variation:.3e} (>10% of scale {scale:.3e}) \
                 across cell ({lo:.3e}, {hi:.3e}] with mass {:.3e}",
                density.masses()[i]
            )));
        }
        acc.add(obs.eval(grid.midpoint(i)) * density.masses()[i]);
    }
    Ok(acc.value())
}

/// Integrate and store the result as the observable's ν-mean.
pub fn attach_mean(obs: &mut Observable, density: &DensityEstimate) -> Result<f64> {
    let m = integrate(obs, density)?;
    obs.nu_mean = Some(m);
    Ok(m)
}

/// `cov_ν(f, f ∘ T^k)` for `k = 0..=n_max`: the centered signed measure
/// `(f - ν(f)) dν` is pushed through the operator and integrated against
/// `f` after each step. `k = 0` is the variance.
pub fn correlation_series(
    op: &UlamOperator,
    density: &DensityEstimate,
    obs: &Observable,
    n_max: usize,
) -> Result<Vec<f64>> {
    let grid = op.grid();
    let m = grid.len();
    let mean = integrate(obs, density)?;
    let fmid: Vec<f64> = (0..m).map(|i| obs.eval(grid.midpoint(i))).collect();
    let mut signed: Vec<f64> = (0..m)
        .map(|i| (fmid[i] - mean) * density.masses()[i])
        .collect();
    let mut next = vec![0.0f64; m];
    let mut out = Vec::with_capacity(n_max + 1);
    for k in 0..=n_max {
        let mut acc = KahanSum::new();
        for i in 0..m {
            acc.add(signed[i] * fmid[i]);
        }
        out.push(acc.value());
        if k < n_max {
            op.push_forward(&signed, &mut next);
            std::mem::swap(&mut signed, &mut next);
        }
    }
    Ok(out)
}

/// Single correlation value `cov_ν(f, f ∘ T^n)`.
pub fn correlation(
    op: &UlamOperator,
    density: &DensityEstimate,
    obs: &Observable,
    n: usize,
) -> Result<f64> {
    Ok(correlation_series(op, density, obs, n)?[n])
}

/// `V = Var + 2 Σ |cov_i|` and `σ² = Var + 2 Σ cov_i`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VarianceConstants {
    pub v: f64,
    pub sigma2: f64,
    /// Index after which the series was truncated.
    pub n_used: usize,
    /// Magnitude of the last correlation kept.
    pub last_cov: f64,
}

/// Sum the correlation series with the truncation rule: stop at the first
/// index with three consecutive `|cov|` below `1e-10 * cov_0`.
pub fn variance_constants(
    op: &UlamOperator,
    density: &DensityEstimate,
    obs: &Observable,
    n_max: usize,
) -> Result<VarianceConstants> {
    let series = correlation_series(op, density, obs, n_max)?;
    let cov0 = series[0];
    if cov0 <= 0.0 {
        // constant observable: zero variance, zero correlations
        return Ok(VarianceConstants {
            v: 0.0,
            sigma2: 0.0,
            n_used: 0,
            last_cov: 0.0,
        });
    }
    let cut = 1e-10 * cov0;
    let mut abs_sum = KahanSum::new();
    let mut signed_sum = KahanSum::new();
    let mut below = 0;
    let mut n_used = 0;
    let mut last_cov = cov0;
    for (i, &c) in series.iter().enumerate().skip(1) {
        abs_sum.add(c.abs());
        signed_sum.add(c);
        last_cov = c;
        n_used = i;
        below = if c.abs() < cut { below + 1 } else { 0 };
        if below >= 3 {
            break;
        }
    }
    if below < 3 {
        return Err(Error::Convergence(format!(
            "correlation tail not negligible: |cov_{n_used}| = {:.3e} vs cutoff {cut:.3e}",
            last_cov.abs()
        )));
    }
    Ok(VarianceConstants {
        v: cov0 + 2.0 * abs_sum.value(),
        sigma2: cov0 + 2.0 * signed_sum.value(),
        n_used,
        last_cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::GeometrySequence;

    fn doubling_op(m: usize) -> UlamOperator {
        let p = MapParams::new(1.0).unwrap();
        build_ulam(&p, UlamGrid::uniform(m).unwrap()).unwrap()
    }

    #[test]
    fn grid_shapes() {
        let g = UlamGrid::geometric(512, 1e-12).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!(g.breakpoint(0), 1e-12);
        assert_eq!(g.breakpoint(256), 0.5);
        assert_eq!(g.breakpoint(512), 1.0);
        for i in 0..512 {
            assert!(g.width(i) > 0.0);
        }
        assert!(UlamGrid::geometric(100, 1e-12).is_err());
        assert!(UlamGrid::geometric(513, 1e-12).is_err());
        assert!(UlamGrid::uniform(256).is_ok());
    }

    #[test]
    fn locate_respects_half_open_cells() {
        let g = UlamGrid::uniform(256).unwrap();
        assert_eq!(g.locate(1.0 / 256.0), 0); // right endpoint belongs left
        assert_eq!(g.locate(1.0 / 256.0 + 1e-12), 1);
        assert_eq!(g.locate(0.0), 0);
        assert_eq!(g.locate(1.0), 255);
    }

    #[test]
    fn doubling_rows_are_two_halves() {
        let op = doubling_op(256);
        for i in 0..256 {
            let row = op.row(i);
            assert_eq!(row.len(), 2, "row {i} has {} entries", row.len());
            for &(_, p) in row {
                assert_eq!(p, 0.5, "row {i} entry {p}");
            }
        }
    }

    #[test]
    fn rows_are_stochastic_for_general_gamma() {
        for gamma in [0.4, 0.5, 0.7] {
            let p = MapParams::new(gamma).unwrap();
            let op = build_ulam(&p, UlamGrid::geometric(1024, 1e-12).unwrap()).unwrap();
            for i in 0..op.grid().len() {
                let sum: f64 = op.row(i).iter().map(|&(_, v)| v).sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-12,
                    "gamma={gamma} row {i} sum {sum}"
                );
                assert!(op.row(i).iter().all(|&(_, v)| v >= 0.0));
            }
        }
    }

    #[test]
    fn doubling_density_is_lebesgue() {
        // uniform grid
        let d = invariant_density(&doubling_op(512), 1e-12).unwrap();
        for i in 0..512 {
            assert!((d.value(i) - 1.0).abs() < 1e-9, "cell {i}: {}", d.value(i));
        }
        // geometric grid: Lebesgue is still the exact fixed point
        let p = MapParams::new(1.0).unwrap();
        let op = build_ulam(&p, UlamGrid::geometric(512, 1e-12).unwrap()).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        for i in 0..512 {
            assert!((d.value(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let p = MapParams::new(0.5).unwrap();
        let op = build_ulam(&p, UlamGrid::geometric(1024, 1e-12).unwrap()).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        let total: f64 = d.masses().iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(d.values().iter().all(|&v| v >= 0.0));
        assert!(d.min_density_over(1e-6, 1.0) > 0.0);
    }

    #[test]
    fn density_log_divergence_ratio() {
        // gamma = 1/2: values / |log x| bounded above and below near 0
        let p = MapParams::new(0.5).unwrap();
        let op = build_ulam(&p, UlamGrid::geometric(4096, 1e-12).unwrap()).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        let mut ratio_min = f64::INFINITY;
        let mut ratio_max = 0.0f64;
        for i in 0..d.grid().len() {
            let x = d.grid().midpoint(i);
            if (1e-8..=1e-2).contains(&x) {
                let r = d.value(i) / x.ln().abs();
                ratio_min = ratio_min.min(r);
                ratio_max = ratio_max.max(r);
            }
        }
        assert!(
            ratio_max / ratio_min <= 10.0,
            "ratio spread {}",
            ratio_max / ratio_min
        );
    }

    #[test]
    fn integrate_known_values() {
        let d = invariant_density(&doubling_op(4096), 1e-12).unwrap();
        let id = Observable::piecewise_linear(vec![(0.0, 0.0), (1.0, 1.0)]).unwrap();
        assert!((integrate(&id, &d).unwrap() - 0.5).abs() < 1e-6);
        // Lebesgue mean of |log x| is 1, but a uniform grid cannot resolve
        // the singularity: must refuse
        let lp = Observable::log_power(1.0).unwrap();
        assert!(matches!(
            integrate(&lp, &d),
            Err(Error::Resolution(_))
        ));
        // the geometric grid resolves it
        let p = MapParams::new(1.0).unwrap();
        let op = build_ulam(&p, UlamGrid::geometric(4096, 1e-12).unwrap()).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        assert!((integrate(&lp, &d).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attach_mean_fills_observable() {
        let p = MapParams::new(0.5).unwrap();
        let geom = GeometrySequence::compute(p, 50).unwrap();
        let op = build_ulam(&p, UlamGrid::geometric(1024, 1e-12).unwrap()).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        let mut f = Observable::base_ramp(&geom);
        let m = attach_mean(&mut f, &d).unwrap();
        assert_eq!(f.nu_mean, Some(m));
        // mean of the ramp dominates the base mass and stays below 1
        assert!(m >= d.mass_interval(0.5, 1.0) && m <= 1.0);
    }

    #[test]
    fn doubling_correlations_geometric_decay() {
        // cov_n = 2^-n / 12 for x - 1/2 under the doubling map; the Ulam
        // estimate carries a 2^n/(12 M^2) information-loss error, so a
        // 2^18-cell grid holds 1e-6 accuracy through n = 20
        let op = doubling_op(1 << 18);
        let d = invariant_density(&op, 1e-12).unwrap();
        let f = Observable::centered_coordinate();
        let series = correlation_series(&op, &d, &f, 20).unwrap();
        for (n, &c) in series.iter().enumerate() {
            let exact = 2f64.powi(-(n as i32)) / 12.0;
            assert!(
                (c - exact).abs() < 1e-6,
                "cov_{n} = {c} vs {exact}, err {:.2e}",
                (c - exact).abs()
            );
        }
    }

    #[test]
    fn doubling_sigma2_quarter() {
        let op = doubling_op(1 << 18);
        let d = invariant_density(&op, 1e-12).unwrap();
        let f = Observable::centered_coordinate();
        let vc = variance_constants(&op, &d, &f, 200).unwrap();
        assert!(
            (vc.sigma2 - 0.25).abs() < 1e-5,
            "sigma2 = {}, err {:.2e}",
            vc.sigma2,
            (vc.sigma2 - 0.25).abs()
        );
        assert!(vc.v >= vc.sigma2 - 1e-12);
    }

    #[test]
    fn constant_observable_has_zero_variance() {
        let op = doubling_op(256);
        let d = invariant_density(&op, 1e-12).unwrap();
        let c = Observable::piecewise_linear(vec![(0.0, 3.0), (1.0, 3.0)]).unwrap();
        let vc = variance_constants(&op, &d, &c, 50).unwrap();
        assert_eq!(vc.v, 0.0);
        assert_eq!(vc.sigma2, 0.0);
    }

    #[test]
    fn correlation_cauchy_schwarz() {
        let p = MapParams::new(0.5).unwrap();
        let geom = GeometrySequence::compute(p, 50).unwrap();
        let op = build_ulam(&p, UlamGrid::geometric(1024, 1e-12).unwrap()).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        let f = Observable::base_ramp(&geom);
        let series = correlation_series(&op, &d, &f, 40).unwrap();
        let cov0 = series[0];
        assert!(cov0 > 0.0);
        for &c in &series {
            assert!(c.abs() <= cov0 + 1e-12);
        }
    }
}
