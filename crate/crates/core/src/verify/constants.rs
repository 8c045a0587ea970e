//! Closed-form decoupling-constant bounds, evaluated in log space.
//!
//! The parabola constant is modeled as max(1, (ln 1/δ)^c_gmw). Big-O factors in
//! the exponents are taken to be 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormulaId {
    /// Headline bound for the moment surface.
    Moment,
    /// Per-annulus bound when the ladder runs for about n steps.
    AnnulusLong,
    /// Per-annulus bound when the ladder has O(1) steps.
    AnnulusShort,
    /// Induction-on-scales bound for a general nondegenerate curve.
    Curve,
}

impl FormulaId {
    pub const ALL: [FormulaId; 4] = [FormulaId::Moment, FormulaId::AnnulusLong, FormulaId::AnnulusShort, FormulaId::Curve];

    pub fn name(self) -> &'static str {
        match self {
            FormulaId::Moment => "moment",
            FormulaId::AnnulusLong => "annulus-long",
            FormulaId::AnnulusShort => "annulus-short",
            FormulaId::Curve => "curve",
        }
    }
}

impl std::str::FromStr for FormulaId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FormulaId::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown formula {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantInputs {
    pub n: usize,
    pub delta: f64,
    pub eps: f64,
    pub kappa: f64,
    pub c_gmw: f64,
    /// Curve-dependent base B of the induction bound.
    pub b: f64,
}

impl ConstantInputs {
    pub fn new(n: usize, delta: f64, eps: f64) -> Self {
        ConstantInputs { n, delta, eps, kappa: 1.0, c_gmw: 1.0, b: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return bad(format!("δ must lie in (0, 1/2), got {}", self.delta));
        }
        if !(self.eps > 0.0 && self.eps <= 0.25) {
            return bad(format!("ε must lie in (0, 1/4], got {}", self.eps));
        }
        if !(self.kappa >= 1.0 && self.kappa.is_finite()) {
            return bad(format!("κ must be at least 1, got {}", self.kappa));
        }
        if !(self.c_gmw >= 1.0 && self.c_gmw.is_finite()) {
            return bad(format!("c_gmw must be at least 1, got {}", self.c_gmw));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return bad(format!("B must be positive, got {}", self.b));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantBound {
    pub formula_id: FormulaId,
    /// exp(log_value); infinite when it overflows f64.
    pub value: f64,
    /// Natural log of the bound.
    pub log_value: f64,
    pub inputs: ConstantInputs,
}

/// ln of the modeled parabola constant.
fn ln_parabola(inputs: &ConstantInputs) -> f64 {
    (inputs.c_gmw * (1.0 / inputs.delta).ln().ln()).max(0.0)
}

fn log_bound(id: FormulaId, x: &ConstantInputs) -> f64 {
    let n = x.n as f64;
    let ell = (1.0 / x.delta).ln();
    let ln_n = n.ln();
    let ln_kappa = x.kappa.ln();
    match id {
        FormulaId::Moment => {
            x.kappa * n / 2.0 * (60f64.ln() + x.eps / 2.0 * ell)
                + 0.5 * ln_n
                + x.kappa * n * ln_n / x.eps * (x.kappa * ell).ln()
        }
        FormulaId::AnnulusLong => {
            n / 2.0 * (30f64.ln() + 1.5 * x.eps * ell)
                + 0.5 * ln_n
                + 2.0 * n * ln_n / x.eps * (ln_kappa + ln_parabola(x))
        }
        FormulaId::AnnulusShort => {
            (30f64.ln() + 1.5 * x.eps * ell) + 0.5 * ln_n + ln_n / x.eps * (ln_kappa + ln_parabola(x))
        }
        FormulaId::Curve => {
            let lnl = ell.ln();
            let step = ((n + 2.0) / (n + 1.0)).ln();
            let bracket = x.b.ln() + 2.0 * n * ln_n / x.eps * ln_kappa + n * ln_n / x.eps * lnl;
            let mut acc = 2.0 * x.eps * n * n * ell + lnl * bracket / step;
            let mut ln_fact = 0.0;
            for j in 1..x.n {
                ln_fact += (j as f64).ln();
                acc += (ln_fact + j as f64 / (n + 1.0) * ell).ln() * lnl / step;
            }
            acc
        }
    }
}

pub fn theoretical_constant(formula_id: FormulaId, inputs: ConstantInputs) -> Result<ConstantBound> {
    inputs.validate()?;
    let log_value = log_bound(formula_id, &inputs);
    Ok(ConstantBound { formula_id, value: log_value.exp(), log_value, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for f in FormulaId::ALL {
            assert_eq!(f.name().parse::<FormulaId>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.name()));
        }
        assert!("nope".parse::<FormulaId>().is_err());
    }

    #[test]
    fn moment_small_case_by_hand() {
        // n = 3, δ = 2^-12, ε = 1/8, κ = 1:
        // (60 δ^{-1/16})^{3/2} · 3^{1/2} · (12 ln 2)^{24 ln 3}
        let d = 2f64.powi(-12);
        let direct = (60.0 * d.powf(-1.0 / 16.0)).powf(1.5) * 3f64.sqrt() * (12.0 * 2f64.ln()).powf(24.0 * 3f64.ln());
        let b = theoretical_constant(FormulaId::Moment, ConstantInputs::new(3, d, 0.125)).unwrap();
        assert!((b.value / direct - 1.0).abs() < 1e-12, "{} vs {direct}", b.value);
    }

    #[test]
    fn short_ladder_never_exceeds_long() {
        for n in 2..=8 {
            for e in [4, 8, 12, 20, 30] {
                for eps in [0.25, 0.125, 0.05] {
                    let x = ConstantInputs::new(n, 2f64.powi(-e), eps);
                    let long = theoretical_constant(FormulaId::AnnulusLong, x).unwrap();
                    let short = theoretical_constant(FormulaId::AnnulusShort, x).unwrap();
                    assert!(short.log_value <= long.log_value, "n={n} e={e} eps={eps}");
                }
            }
        }
    }

    #[test]
    fn domain_is_checked() {
        let ok = ConstantInputs::new(3, 0.01, 0.1);
        assert!(theoretical_constant(FormulaId::Moment, ConstantInputs { delta: 0.5, ..ok }).is_err());
        assert!(theoretical_constant(FormulaId::Moment, ConstantInputs { eps: 0.3, ..ok }).is_err());
        assert!(theoretical_constant(FormulaId::Moment, ConstantInputs { kappa: 0.5, ..ok }).is_err());
        assert!(theoretical_constant(FormulaId::Moment, ConstantInputs { c_gmw: 0.5, ..ok }).is_err());
        assert!(theoretical_constant(FormulaId::Curve, ConstantInputs { b: 0.0, ..ok }).is_err());
    }

    #[test]
    fn bounds_are_at_least_one_for_small_delta() {
        for f in FormulaId::ALL {
            for n in 2..=6 {
                for e in 2..=30 {
                    let b = theoretical_constant(f, ConstantInputs::new(n, 2f64.powi(-e), 0.125)).unwrap();
                    assert!(b.log_value >= 0.0, "{f:?} n={n} e={e}: {}", b.log_value);
                }
            }
        }
    }

    #[test]
    fn curve_exponent_grows_between_polylog_and_polynomial() {
        // Strip the δ^{-2εn²} factor; what remains is (ln 1/δ)^{E(δ)}.
        let (n, eps) = (3usize, 0.125);
        let exps: Vec<(f64, f64)> = (8..=20)
            .map(|e| {
                let d = 2f64.powi(-e);
                let ell = (1.0 / d).ln();
                let b = theoretical_constant(FormulaId::Curve, ConstantInputs::new(n, d, eps)).unwrap();
                let rest = b.log_value - 2.0 * eps * (n * n) as f64 * ell;
                (ell, rest / ell.ln())
            })
            .collect();
        // E increases, so the remainder is superlinear in ln ln(1/δ) ...
        assert!(exps.windows(2).all(|w| w[1].1 > w[0].1));
        // ... while E / ln ln(1/δ) stays in a narrow band: E = Θ(ln ln 1/δ), not a power of ln(1/δ).
        let per: Vec<f64> = exps.iter().map(|(ell, e)| e / ell.ln()).collect();
        let (lo, hi) = per.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 1.5, "band {lo}..{hi}");
    }
}
