//! Observables on `(0, 1]` with their regularity metadata (Lipschitz,
//! Hölder, bounded-variation norms) and the ν-mean once a density is known.

use crate::error::{Error, Result};
use crate::map::GeometrySequence;
use crate::transfer::DensityEstimate;
use serde::Serialize;

/// Guard below which log-type observables refuse to evaluate.
const EVAL_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, Serialize)]
pub enum ObservableKind {
    /// Lipschitz ramp interpolating the indicator of the base `(1/2, 1]`:
    /// value 1 there, 0 on `(0, y1]`, linear in between. Stores the `y1`
    /// it was built from so observable and geometry cannot drift apart.
    BaseRamp { y1: f64 },
    /// `|log x|^delta`, unbounded as `x -> 0+`, zero at `x = 1`.
    LogPower { delta: f64 },
    /// `|log x|^delta` truncated: constant `(log(1/eps))^delta` on `(0, eps]`.
    TruncatedLogPower { delta: f64, eps: f64 },
    /// User-supplied piecewise-linear interpolation through `knots`.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
}

/// An observable plus the regularity data the deviation and concentration
/// machinery needs.
#[derive(Clone, Debug, Serialize)]
pub struct Observable {
    pub kind: ObservableKind,
    /// Best Lipschitz constant, when finite.
    pub lipschitz: Option<f64>,
    /// `(eta, constant)` with `|f(x) - f(y)| <= constant * |x - y|^eta`.
    pub holder: Option<(f64, f64)>,
    /// `sup|f| + total variation`, when finite.
    pub bv_norm: Option<f64>,
    /// `∫ f dν`, filled by the transfer module.
    pub nu_mean: Option<f64>,
}

impl Observable {
    /// The Lipschitz extension of the base indicator; its ramp foot sits at
    /// `y1 = S(1/2)` from the supplied geometry.
    pub fn base_ramp(geometry: &GeometrySequence) -> Self {
        let y1 = geometry.y(1);
        let lip = 1.0 / (0.5 - y1);
        Observable {
            kind: ObservableKind::BaseRamp { y1 },
            lipschitz: Some(lip),
            holder: Some((1.0, lip)),
            // sup 1, one monotone rise of size 1
            bv_norm: Some(2.0),
            nu_mean: None,
        }
    }

    /// `|log x|^delta` for `delta > 0`.
    pub fn log_power(delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("delta must be > 0, got {delta}")));
        }
        Ok(Observable {
            kind: ObservableKind::LogPower { delta },
            lipschitz: None,
            holder: None,
            bv_norm: None,
            nu_mean: None,
        })
    }

    /// Truncation of `log_power` at height `(log(1/eps))^delta`.
    ///
    /// Lipschitz with constant `eps^-1 * delta * |log eps|^(delta-1)` for
    /// `delta >= 1`; `delta`-Hölder with constant `eps^-delta` otherwise.
    pub fn truncated_log_power(delta: f64, eps: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("delta must be > 0, got {delta}")));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {eps}")));
        }
        let sup = (1.0 / eps).ln().powf(delta);
        let (lipschitz, holder) = if delta >= 1.0 {
            let l = delta * eps.ln().abs().powf(delta - 1.0) / eps;
            (Some(l), Some((1.0, l)))
        } else {
            (None, Some((delta, eps.powf(-delta))))
        };
        Ok(Observable {
            kind: ObservableKind::TruncatedLogPower { delta, eps },
            lipschitz,
            holder,
            // monotone decrease from sup to 0
            bv_norm: Some(2.0 * sup),
            nu_mean: None,
        })
    }

    /// Piecewise-linear interpolation through strictly increasing knots;
    /// constant extrapolation outside the knot range.
    pub fn piecewise_linear(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config("need at least two knots".into()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("knot abscissae must strictly increase".into()));
        }
        let mut lip: f64 = 0.0;
        let mut var = 0.0;
        let mut sup: f64 = knots[0].1.abs();
        for w in knots.windows(2) {
            let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            lip = lip.max(slope.abs());
            var += (w[1].1 - w[0].1).abs();
            sup = sup.max(w[1].1.abs());
        }
        Ok(Observable {
            kind: ObservableKind::PiecewiseLinear { knots },
            lipschitz: Some(lip),
            holder: Some((1.0, lip)),
            bv_norm: Some(sup + var),
            nu_mean: None,
        })
    }

    /// The centered coordinate `x - 1/2`, the doubling-map test observable.
    pub fn centered_coordinate() -> Self {
        Self::piecewise_linear(vec![(0.0, -0.5), (1.0, 0.5)])
            .expect("static knots are valid")
    }

    /// Evaluate at `x`; caller guarantees `0 < x <= 1` (checked variant
    /// below). Hot path for the trajectory engine.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match &self.kind {
            ObservableKind::BaseRamp { y1 } => {
                if x > 0.5 {
                    1.0
                } else if x <= *y1 {
                    0.0
                } else {
                    (x - y1) / (0.5 - y1)
                }
            }
            ObservableKind::LogPower { delta } => {
                let u = -x.ln();
                if *delta == 1.0 {
                    u
                } else {
                    u.powf(*delta)
                }
            }
            ObservableKind::TruncatedLogPower { delta, eps } => {
                let u = -x.max(*eps).ln();
                if *delta == 1.0 {
                    u
                } else {
                    u.powf(*delta)
                }
            }
            ObservableKind::PiecewiseLinear { knots } => {
                let k = knots.partition_point(|&(kx, _)| kx < x);
                if k == 0 {
                    knots[0].1
                } else if k == knots.len() {
                    knots[knots.len() - 1].1
                } else {
                    let (x0, f0) = knots[k - 1];
                    let (x1, f1) = knots[k];
                    f0 + (f1 - f0) * (x - x0) / (x1 - x0)
                }
            }
        }
    }

    /// Evaluate with domain checking.
    pub fn eval_checked(&self, x: f64) -> Result<f64> {
        if !(x > 0.0 && x <= 1.0) || x < EVAL_FLOOR {
            return Err(Error::Domain(format!(
                "observable argument {x} outside [{EVAL_FLOOR}, 1]"
            )));
        }
        Ok(self.eval(x))
    }

    /// ν-mean, or a configuration error when not yet attached.
    pub fn mean(&self) -> Result<f64> {
        self.nu_mean
            .ok_or_else(|| Error::Config("observable has no nu_mean attached; integrate first".into()))
    }

    pub fn is_lipschitz(&self) -> bool {
        self.lipschitz.is_some()
    }

    /// Short label for reports and CSV headers.
    pub fn label(&self) -> String {
        match &self.kind {
            ObservableKind::BaseRamp { .. } => "base-ramp".into(),
            ObservableKind::LogPower { delta } => format!("log-power(delta={delta})"),
            ObservableKind::TruncatedLogPower { delta, eps } => {
                format!("truncated-log-power(delta={delta},eps={eps})")
            }
            ObservableKind::PiecewiseLinear { .. } => "piecewise-linear".into(),
        }
    }
}

/// `ν(|f| > t)` for the log-power observable: the ν-mass of
/// `(0, exp(-t^(1/delta)))`, by quadrature of the density estimate.
pub fn tail_mass(obs: &Observable, density: &DensityEstimate, t: f64) -> Result<f64> {
    let delta = match &obs.kind {
        ObservableKind::LogPower { delta } => *delta,
        _ => {
            return Err(Error::Config(
                "tail_mass is defined for the log-power observable".into(),
            ))
        }
    };
    if !(t > 0.0) {
        return Err(Error::Config(format!("tail threshold must be > 0, got {t}")));
    }
    let cutoff = (-t.powf(1.0 / delta)).exp();
    // the grid must resolve the region below the cutoff
    if density.grid().breakpoint(4) > cutoff {
        return Err(Error::Resolution(format!(
            "grid too coarse near 0: fewer than 4 cells below cutoff {cutoff:.3e}"
        )));
    }
    Ok(density.mass_below(cutoff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::MapParams;
    use crate::transfer::{build_ulam, invariant_density, UlamGrid};

    fn geom(gamma: f64) -> GeometrySequence {
        GeometrySequence::compute(MapParams::new(gamma).unwrap(), 50).unwrap()
    }

    #[test]
    fn ramp_values() {
        let g = geom(0.5);
        let f = Observable::base_ramp(&g);
        assert_eq!(f.eval(0.8), 1.0);
        let y1 = g.y(1);
        // midpoint of the ramp
        assert!((f.eval((y1 + 0.5) / 2.0) - 0.5).abs() < 1e-12);
        assert_eq!(f.eval(y1 * 0.5), 0.0);
        // continuity at the joints
        assert!((f.eval(y1 + 1e-12) - 0.0).abs() < 1e-9);
        assert!((f.eval(0.5) - 1.0).abs() < 1e-9);
        assert!((f.eval(0.5 + 1e-12) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ramp_lipschitz_constant_is_sharp() {
        let g = geom(0.5);
        let f = Observable::base_ramp(&g);
        let lip = f.lipschitz.unwrap();
        let mut max_slope: f64 = 0.0;
        let n = 200_000;
        let mut prev = f.eval(1e-6);
        for i in 1..=n {
            let x = 1e-6 + (1.0 - 1e-6) * i as f64 / n as f64;
            let v = f.eval(x);
            let h = (1.0 - 1e-6) / n as f64;
            max_slope = max_slope.max((v - prev).abs() / h);
            prev = v;
        }
        assert!(max_slope <= lip + 1e-6, "slope {max_slope} above {lip}");
        assert!(max_slope >= lip - 1e-2 * lip, "sweep never saw the ramp");
    }

    #[test]
    fn log_power_values() {
        let f = Observable::log_power(1.0).unwrap();
        assert!((f.eval((-1.0_f64).exp()) - 1.0).abs() < 1e-12);
        assert_eq!(f.eval(1.0), 0.0);
        assert!(f.eval_checked(0.0).is_err());
        assert!(f.eval_checked(-1.0).is_err());
        let f2 = Observable::log_power(2.0).unwrap();
        assert!((f2.eval((-3.0_f64).exp()) - 9.0).abs() < 1e-10);
    }

    #[test]
    fn truncated_log_power_shape() {
        let f = Observable::truncated_log_power(1.0, 0.01).unwrap();
        let cap = 100.0_f64.ln();
        assert!((f.eval(1e-5) - cap).abs() < 1e-12);
        assert!((f.eval(0.01) - cap).abs() < 1e-12);
        assert!((f.eval(0.5) - 2.0_f64.ln()).abs() < 1e-12);
        assert!((f.lipschitz.unwrap() - 100.0).abs() < 1e-9);
        // delta < 1 is Hölder, not Lipschitz
        let h = Observable::truncated_log_power(0.5, 0.01).unwrap();
        assert!(h.lipschitz.is_none());
        let (eta, c) = h.holder.unwrap();
        assert!((eta - 0.5).abs() < 1e-15);
        assert!((c - 0.01_f64.powf(-0.5)).abs() < 1e-9);
    }

    #[test]
    fn truncation_converges_pointwise() {
        let f = Observable::log_power(1.5).unwrap();
        for &a in &[0.05, 0.2, 0.7] {
            let mut prev_err = f64::INFINITY;
            for &eps in &[1e-2, 1e-4, 1e-6] {
                let t = Observable::truncated_log_power(1.5, eps).unwrap();
                let err = (t.eval(a) - f.eval(a)).abs();
                assert!(err <= prev_err);
                prev_err = err;
            }
            assert!(prev_err < 1e-12);
        }
    }

    #[test]
    fn piecewise_linear_and_centered() {
        let f = Observable::centered_coordinate();
        assert!((f.eval(0.25) + 0.25).abs() < 1e-15);
        assert!((f.eval(1.0) - 0.5).abs() < 1e-15);
        assert!((f.lipschitz.unwrap() - 1.0).abs() < 1e-15);
        assert!(Observable::piecewise_linear(vec![(0.0, 0.0)]).is_err());
        assert!(Observable::piecewise_linear(vec![(0.5, 0.0), (0.5, 1.0)]).is_err());
    }

    #[test]
    fn tail_mass_doubling_is_lebesgue() {
        // gamma = 1: density is Lebesgue, so the tail is exp(-t)
        let p = MapParams::new(1.0).unwrap();
        let grid = UlamGrid::geometric(4096, 1e-12).unwrap();
        let op = build_ulam(&p, grid).unwrap();
        let d = invariant_density(&op, 1e-12).unwrap();
        let f = Observable::log_power(1.0).unwrap();
        for &t in &[0.5, 1.0, 2.0, 5.0, 10.0] {
            let m = tail_mass(&f, &d, t).unwrap();
            assert!(
                (m - (-t).exp()).abs() < 1e-6,
                "tail({t}) = {m} vs {}",
                (-t).exp()
            );
        }
        // t -> 0+ gives everything
        assert!((tail_mass(&f, &d, 1e-9).unwrap() - 1.0).abs() < 1e-6);
        // coarse-grid refusal: cutoff below the resolved region
        let err = tail_mass(&f, &d, 40.0);
        assert!(matches!(err, Err(Error::Resolution(_))));
    }
}
