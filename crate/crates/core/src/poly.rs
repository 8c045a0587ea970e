//! Polynomials with exact rational coefficients.

use std::collections::BTreeMap;

use num::traits::{One, Signed, Zero};
use num::{BigInt, Integer};
use serde::{Deserialize, Serialize};

use crate::exact::{qpow, to_f64, Q};

/// Univariate polynomial, coefficients from the constant term upward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poly {
    #[serde(with = "crate::exact::qvec")]
    pub coeffs: Vec<Q>,
}

impl Poly {
    pub fn new(mut coeffs: Vec<Q>) -> Self {
        while coeffs.last().is_some_and(|c| c.is_zero()) {
            coeffs.pop();
        }
        Poly { coeffs }
    }

    pub fn zero() -> Self {
        Poly { coeffs: Vec::new() }
    }

    pub fn monomial(deg: usize, c: Q) -> Self {
        let mut v = vec![Q::zero(); deg + 1];
        v[deg] = c;
        Poly::new(v)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Degree, with the zero polynomial reported as None.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    /// Horner over integers with t = a/b and one reduction at the end.
    pub fn eval(&self, t: &Q) -> Q {
        let Some(d) = self.degree() else { return Q::zero() };
        let lcm = self.coeffs.iter().fold(BigInt::one(), |l, c| l.lcm(c.denom()));
        let (a, b) = (t.numer(), t.denom());
        let mut bpow = BigInt::one();
        let mut scaled: Vec<BigInt> = Vec::with_capacity(d + 1);
        for c in self.coeffs.iter().rev() {
            // c_k L b^{d-k}, from the top coefficient down
            scaled.push(c.numer() * (&lcm / c.denom()) * &bpow);
            bpow *= b;
        }
        let acc = scaled.iter().fold(BigInt::zero(), |acc, c| acc * a + c);
        // after the loop bpow = b^{d+1}
        Q::new(acc, lcm * (bpow / b))
    }

    pub fn eval_f64(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + to_f64(c))
    }

    pub fn derivative(&self) -> Poly {
        Poly::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| c * Q::from_integer((k as i64).into()))
                .collect(),
        )
    }

    pub fn nth_derivative(&self, order: usize) -> Poly {
        (0..order).fold(self.clone(), |p, _| p.derivative())
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        Poly::new(
            (0..n)
                .map(|k| {
                    self.coeffs.get(k).cloned().unwrap_or_else(Q::zero)
                        + other.coeffs.get(k).cloned().unwrap_or_else(Q::zero)
                })
                .collect(),
        )
    }

    pub fn scale(&self, c: &Q) -> Poly {
        Poly::new(self.coeffs.iter().map(|a| a * c).collect())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        if self.is_zero() || other.is_zero() {
            return Poly::zero();
        }
        let mut v = vec![Q::zero(); self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                v[i + j] += a * b;
            }
        }
        Poly::new(v)
    }

    /// Bound on sup |p| over |t| <= radius from coefficient magnitudes.
    pub fn sup_bound(&self, radius: &Q) -> Q {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c.abs() * qpow(radius, k as i64))
            .fold(Q::zero(), |a, b| a + b)
    }

    /// Interpolation through exact, distinct nodes (Newton divided differences).
    pub fn interpolate(xs: &[Q], ys: &[Q]) -> Poly {
        assert_eq!(xs.len(), ys.len());
        let m = xs.len();
        let mut dd = ys.to_vec();
        for j in 1..m {
            for i in (j..m).rev() {
                dd[i] = (&dd[i] - &dd[i - 1]) / (&xs[i] - &xs[i - j]);
            }
        }
        // Horner in the Newton basis: p = dd[k] + (t - x_k) p.
        let mut coeffs: Vec<Q> = Vec::with_capacity(m);
        for k in (0..m).rev() {
            coeffs.insert(0, Q::zero());
            for i in 0..coeffs.len() - 1 {
                let v = &coeffs[i + 1] * &xs[k];
                coeffs[i] -= v;
            }
            coeffs[0] += &dd[k];
        }
        Poly::new(coeffs)
    }
}

/// Sparse multivariate polynomial keyed by exponent vectors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MPoly {
    pub nvars: usize,
    pub terms: BTreeMap<Vec<u16>, Q>,
}

impl MPoly {
    pub fn zero(nvars: usize) -> Self {
        MPoly { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: Q) -> Self {
        let mut p = MPoly::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    /// c + var_k
    pub fn shifted_var(nvars: usize, k: usize, c: Q) -> Self {
        let mut p = MPoly::constant(nvars, c);
        let mut e = vec![0; nvars];
        e[k] = 1;
        p.terms.insert(e, Q::one());
        p
    }

    fn insert(&mut self, e: Vec<u16>, c: Q) {
        let slot = self.terms.entry(e).or_insert_with(Q::zero);
        *slot += c;
        if slot.is_zero() {
            self.terms.retain(|_, v| !v.is_zero());
        }
    }

    pub fn add(&self, other: &MPoly) -> MPoly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.insert(e.clone(), c.clone());
        }
        out
    }

    pub fn scale(&self, c: &Q) -> MPoly {
        let mut out = MPoly::zero(self.nvars);
        if c.is_zero() {
            return out;
        }
        for (e, v) in &self.terms {
            out.terms.insert(e.clone(), v * c);
        }
        out
    }

    pub fn mul(&self, other: &MPoly) -> MPoly {
        let mut acc: BTreeMap<Vec<u16>, Q> = BTreeMap::new();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u16> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *acc.entry(e).or_insert_with(Q::zero) += ca * cb;
            }
        }
        acc.retain(|_, v| !v.is_zero());
        MPoly { nvars: self.nvars, terms: acc }
    }

    pub fn pow(&self, k: u32) -> MPoly {
        let mut out = MPoly::constant(self.nvars, Q::one());
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    pub fn constant_term(&self) -> Q {
        self.terms.get(&vec![0; self.nvars]).cloned().unwrap_or_else(Q::zero)
    }

    pub fn eval_f64(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| to_f64(c) * e.iter().zip(x).map(|(&k, &v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }

    pub fn eval(&self, x: &[Q]) -> Q {
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter().zip(x).fold(c.clone(), |acc, (&k, v)| acc * qpow(v, k as i64))
            })
            .fold(Q::zero(), |a, b| a + b)
    }

    /// Centered-form bound: |p(0)| + sum over non-constant terms of |c| * prod r^e.
    pub fn abs_bound(&self, radii: &[Q]) -> Q {
        let mut acc = self.constant_term().abs();
        for (e, c) in &self.terms {
            if e.iter().all(|&k| k == 0) {
                continue;
            }
            let mut m = c.abs();
            for (&k, r) in e.iter().zip(radii) {
                if k > 0 {
                    m *= qpow(r, k as i64);
                }
            }
            acc += m;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{qf, qi};

    #[test]
    fn derivative_and_eval() {
        let p = Poly::new(vec![qi(1), qi(0), qi(3)]);
        assert_eq!(p.eval(&qi(2)), qi(13));
        assert_eq!(p.derivative(), Poly::new(vec![qi(0), qi(6)]));
        assert!(p.nth_derivative(3).is_zero());
        assert_eq!(p.degree(), Some(2));
    }

    proptest::proptest! {
        #[test]
        fn integer_horner_matches_rational_horner(
            coeffs in proptest::collection::vec((-50i64..50, 1i64..12), 0..9),
            num in -40i64..40,
            den in 1i64..30,
        ) {
            let p = Poly::new(coeffs.iter().map(|&(a, b)| qf(a, b)).collect());
            let t = qf(num, den);
            let naive = p.coeffs.iter().rev().fold(Q::zero(), |acc, c| acc * &t + c);
            proptest::prop_assert_eq!(p.eval(&t), naive);
        }
    }

    #[test]
    fn interpolation_recovers_polynomial() {
        let p = Poly::new(vec![qf(1, 3), qi(-2), qi(0), qf(5, 7)]);
        let xs: Vec<Q> = (0..4).map(|k| qi(k - 1)).collect();
        let ys: Vec<Q> = xs.iter().map(|x| p.eval(x)).collect();
        assert_eq!(Poly::interpolate(&xs, &ys), p);
    }

    #[test]
    fn centered_bound_is_sound() {
        // (1 + u)^2 - 1 = 2u + u^2 on |u| <= 1/2 has sup 5/4
        let x = MPoly::shifted_var(1, 0, qi(1));
        let p = x.pow(2).add(&MPoly::constant(1, qi(-1)));
        assert_eq!(p.abs_bound(&[qf(1, 2)]), qf(5, 4));
    }
}
