//! Polynomial space curves, their Frenet-type matrices, and nondegeneracy certificates.

use num::traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exact::{factorial_q, from_f64, log2_floor, qi, to_f64, Q};
use crate::matrix::{min_singular_value, QMatrix};
use crate::poly::Poly;

/// Polynomial curve t -> (φ_1(t), ..., φ_{n+1}(t)) on a closed domain.
#[derive(Clone, Debug)]
pub struct Curve {
    pub n: usize,
    pub components: Vec<Poly>,
    pub domain: (Q, Q),
    pub certificate: Option<NondegeneracyCertificate>,
    /// derivs[k][r] = k-th derivative of component r, for k <= n + 2.
    derivs: Vec<Vec<Poly>>,
}

impl PartialEq for Curve {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.components == other.components && self.domain == other.domain
    }
}

/// Certified bounds on det Φ, derivative norms, and the smallest singular value of Φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondegeneracyCertificate {
    /// Lower bound on det Φ(t) over the domain.
    #[serde(with = "crate::exact::qser")]
    pub c: Q,
    pub c_f64: f64,
    /// Upper bound on ‖φ^{(i)}(t)‖ for 1 <= i <= n+2.
    #[serde(rename = "C")]
    pub big_c: f64,
    /// Upper bound on the Frobenius norm of Φ(t).
    pub c_phi: f64,
    pub sigma_lb: f64,
    pub grid_step: f64,
    /// Finest grid level used (2^level intervals).
    pub levels: u32,
    pub det_lipschitz: f64,
    pub sigma_sampled_min: f64,
}

impl Curve {
    /// Build a curve from n+1 component polynomials on [-1, 1].
    pub fn from_components(components: Vec<Poly>) -> Result<Curve> {
        if components.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 components (n >= 2), got {}",
                components.len()
            )));
        }
        let n = components.len() - 1;
        let mut derivs = vec![components.clone()];
        for k in 1..=(n + 2) {
            let next = derivs[k - 1].iter().map(Poly::derivative).collect();
            derivs.push(next);
        }
        Ok(Curve { n, components, domain: (qi(-1), qi(1)), certificate: None, derivs })
    }

    pub fn ambient_dim(&self) -> usize {
        self.n + 1
    }

    pub fn max_degree(&self) -> usize {
        self.components.iter().filter_map(Poly::degree).max().unwrap_or(0)
    }

    fn deriv_polys(&self, order: usize) -> Vec<Poly> {
        if order < self.derivs.len() {
            self.derivs[order].clone()
        } else {
            self.components.iter().map(|p| p.nth_derivative(order)).collect()
        }
    }

    pub fn eval(&self, t: &Q) -> Vec<Q> {
        self.derivative(0, t)
    }

    /// Exact value of the order-th derivative at t.
    pub fn derivative(&self, order: usize, t: &Q) -> Vec<Q> {
        if order < self.derivs.len() {
            self.derivs[order].iter().map(|p| p.eval(t)).collect()
        } else {
            self.deriv_polys(order).iter().map(|p| p.eval(t)).collect()
        }
    }

    pub fn derivative_f64(&self, order: usize, t: f64) -> Vec<f64> {
        if order < self.derivs.len() {
            self.derivs[order].iter().map(|p| p.eval_f64(t)).collect()
        } else {
            self.deriv_polys(order).iter().map(|p| p.eval_f64(t)).collect()
        }
    }

    /// Φ(t0): column j (1-based) is φ^{(j)}(t0)/j!.
    pub fn frenet_matrix(&self, t0: &Q) -> QMatrix {
        let cols: Vec<Vec<Q>> = (1..=self.n + 1)
            .map(|j| {
                let f = factorial_q(j as u32);
                self.derivative(j, t0).into_iter().map(|v| v / &f).collect()
            })
            .collect();
        QMatrix::from_columns(&cols)
    }

    pub fn frenet_matrix_f64(&self, t0: f64) -> nalgebra::DMatrix<f64> {
        let size = self.n + 1;
        let mut m = nalgebra::DMatrix::zeros(size, size);
        for j in 1..=size {
            let f = to_f64(&factorial_q(j as u32));
            for (r, v) in self.derivative_f64(j, t0).into_iter().enumerate() {
                m[(r, j - 1)] = v / f;
            }
        }
        m
    }

    /// Entry polynomials of Φ(t), row-major.
    fn frenet_entry_polys(&self) -> Vec<Poly> {
        let size = self.n + 1;
        let mut out = vec![Poly::zero(); size * size];
        for j in 1..=size {
            let f = factorial_q(j as u32).recip();
            for (r, p) in self.deriv_polys(j).iter().enumerate() {
                out[r * size + (j - 1)] = p.scale(&f);
            }
        }
        out
    }

    /// det Φ(t) as an exact polynomial, recovered by interpolation at exact nodes.
    pub fn det_poly(&self) -> Poly {
        let size = self.n + 1;
        let d = self.max_degree();
        // Column j has degree <= d - j, so the determinant has degree <= Σ_j max(0, d - j).
        let deg_bound = (1..=size).map(|j| d.saturating_sub(j)).sum::<usize>();
        let xs: Vec<Q> = (0..=deg_bound).map(|k| qi(k as i64) - qi(deg_bound as i64 / 2)).collect();
        let ys: Vec<Q> = xs.iter().map(|x| self.frenet_matrix(x).det()).collect();
        Poly::interpolate(&xs, &ys)
    }

    fn check_s(&self, s: &[Q]) -> Result<()> {
        if s.len() != self.n - 1 {
            return Err(Error::DimensionMismatch { expected: self.n - 1, got: s.len() });
        }
        Ok(())
    }

    /// y(t, s) = φ(t) + Σ s_j φ^{(j)}(t).
    pub fn surface_point(&self, t: &Q, s: &[Q]) -> Result<Vec<Q>> {
        self.surface_point_ext(t, &Q::one(), s)
    }

    /// s0 φ(t) + Σ s_j φ^{(j)}(t).
    pub fn surface_point_ext(&self, t: &Q, s0: &Q, s: &[Q]) -> Result<Vec<Q>> {
        self.check_s(s)?;
        let mut out: Vec<Q> = self.eval(t).into_iter().map(|v| v * s0).collect();
        for (j, sj) in s.iter().enumerate() {
            if sj.is_zero() {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.derivative(j + 1, t)) {
                *o += d * sj;
            }
        }
        Ok(out)
    }

    /// y(t, s) + v φ^{(n+1)}(t)/(n+1)! with |v| <= δ.
    pub fn neighborhood_point(&self, t: &Q, s: &[Q], v: &Q, delta: &Q) -> Result<Vec<Q>> {
        if v.abs() > *delta {
            return Err(Error::OutsideNeighborhood { v: to_f64(v), delta: to_f64(delta) });
        }
        let mut out = self.surface_point(t, s)?;
        let f = factorial_q(self.n as u32 + 1);
        for (o, d) in out.iter_mut().zip(self.derivative(self.n + 1, t)) {
            *o += d * v / &f;
        }
        Ok(out)
    }

    pub fn surface_point_f64(&self, t: f64, s: &[f64]) -> Vec<f64> {
        let mut out = self.derivative_f64(0, t);
        for (j, &sj) in s.iter().enumerate() {
            for (o, d) in out.iter_mut().zip(self.derivative_f64(j + 1, t)) {
                *o += sj * d;
            }
        }
        out
    }

    pub fn neighborhood_point_f64(&self, t: f64, s: &[f64], v: f64) -> Vec<f64> {
        let mut out = self.surface_point_f64(t, s);
        let f = to_f64(&factorial_q(self.n as u32 + 1));
        for (o, d) in out.iter_mut().zip(self.derivative_f64(self.n + 1, t)) {
            *o += v * d / f;
        }
        out
    }

    pub fn is_moment(&self) -> bool {
        self.components.iter().enumerate().all(|(r, p)| *p == Poly::monomial(r + 1, Q::one()))
    }

    pub fn with_certificate(mut self, grid_step: f64) -> Result<Curve> {
        let cert = certify_nondegeneracy(&self, grid_step)?;
        self.certificate = Some(cert);
        Ok(self)
    }
}

/// The moment curve (t, t², ..., t^{n+1}) with its certificate attached.
pub fn moment_curve(n: usize) -> Result<Curve> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("moment curve needs n >= 2, got {n}")));
    }
    let comps = (1..=n + 1).map(|k| Poly::monomial(k, Q::one())).collect();
    Curve::from_components(comps)?.with_certificate(1.0 / 64.0)
}

/// Order-th derivative at t, in exact arithmetic.
pub fn derivative(curve: &Curve, order: usize, t: &Q) -> Vec<Q> {
    curve.derivative(order, t)
}

pub fn frenet_matrix(curve: &Curve, t0: &Q) -> QMatrix {
    curve.frenet_matrix(t0)
}

pub fn surface_point(curve: &Curve, t: &Q, s: &[Q]) -> Result<Vec<Q>> {
    curve.surface_point(t, s)
}

pub fn surface_point_ext(curve: &Curve, t: &Q, s0: &Q, s: &[Q]) -> Result<Vec<Q>> {
    curve.surface_point_ext(t, s0, s)
}

pub fn neighborhood_point(curve: &Curve, t: &Q, s: &[Q], v: &Q, delta: &Q) -> Result<Vec<Q>> {
    curve.neighborhood_point(t, s, v, delta)
}

fn vec_sup_bound(polys: &[Poly], radius: &Q) -> f64 {
    polys.iter().map(|p| to_f64(&p.sup_bound(radius)).powi(2)).sum::<f64>().sqrt()
}

/// Certify det Φ >= c > 0 over the domain on a nested dyadic grid ladder.
///
/// Level l samples 2^l + 1 equispaced nodes and pads by (Lipschitz bound) * spacing / 2.
/// The reported c is the best level, so refining grid_step can only raise it.
pub fn certify_nondegeneracy(curve: &Curve, grid_step: f64) -> Result<NondegeneracyCertificate> {
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(Error::InvalidArgument(format!("grid_step must be positive, got {grid_step}")));
    }
    let (a, b) = curve.domain.clone();
    let len = &b - &a;
    let radius = if a.abs() > b.abs() { a.abs() } else { b.abs() };
    let h = from_f64(grid_step).unwrap();
    let ratio = &len / &h;
    let levels = if ratio <= Q::one() {
        0
    } else {
        let f = log2_floor(&ratio);
        if crate::exact::pow2(f) == ratio { f } else { f + 1 }
    } as u32;
    if levels > 20 {
        return Err(Error::InvalidArgument(format!("grid_step {grid_step} too fine")));
    }
    let finest = 1usize << levels;
    let nodes: Vec<Q> = (0..=finest).map(|k| &a + &len * Q::new(k.into(), finest.into())).collect();

    let det = curve.det_poly();
    let det_lip = det.derivative().sup_bound(&radius);
    let values: Vec<Q> = nodes.iter().map(|t| det.eval(t)).collect();
    let mut best: Option<Q> = None;
    for l in 0..=levels {
        let stride = 1usize << (levels - l);
        let spacing = &len / Q::from_integer((1u64 << l).into());
        let min = values.iter().step_by(stride).min().cloned().unwrap();
        let padded = min - &det_lip * &spacing / qi(2);
        if best.as_ref().map_or(true, |c| padded > *c) {
            best = Some(padded);
        }
    }
    let c = best.unwrap();
    if c <= Q::zero() {
        return Err(Error::Degenerate(format!(
            "certified lower bound on det Φ is {} <= 0",
            to_f64(&c)
        )));
    }
    let h_f = to_f64(&len) / finest as f64;
    let slack = 1.0 + 1e-12;

    // Derivative norms up to order n+2.
    let mut big_c: f64 = 0.0;
    for order in 1..=curve.n + 2 {
        let polys = curve.deriv_polys(order);
        let coeff_bound = vec_sup_bound(&polys, &radius);
        let next = curve.deriv_polys(order + 1);
        let lip = vec_sup_bound(&next, &radius);
        let sampled = nodes
            .iter()
            .map(|t| {
                let v = curve.derivative_f64(order, to_f64(t));
                v.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
            + lip * h_f / 2.0;
        big_c = big_c.max(coeff_bound.min(sampled));
    }
    big_c *= slack;

    // Frobenius norm of Φ and its derivative.
    let entries = curve.frenet_entry_polys();
    let entry_derivs: Vec<Poly> = entries.iter().map(Poly::derivative).collect();
    let phi_lip = vec_sup_bound(&entry_derivs, &radius);
    let phi_coeff = vec_sup_bound(&entries, &radius);
    let mut phi_sampled: f64 = 0.0;
    let mut sigma_min = f64::INFINITY;
    for t in &nodes {
        let m = curve.frenet_matrix_f64(to_f64(t));
        phi_sampled = phi_sampled.max(m.norm());
        sigma_min = sigma_min.min(min_singular_value(&m));
    }
    let c_phi = phi_coeff.min(phi_sampled + phi_lip * h_f / 2.0) * slack;

    // Singular-value inequality for a square matrix of size N = n+1:
    // σ_min >= |det| ((N-1)/‖Φ‖_F²)^{(N-1)/2}.
    let nn = curve.n as f64;
    let c_f64 = to_f64(&c) * (1.0 - 1e-12);
    let sigma_dy = c_f64 * (nn / (c_phi * c_phi)).powf(nn / 2.0);
    let sigma_sampled = sigma_min - phi_lip * h_f / 2.0 - 1e-12;
    let sigma_lb = sigma_dy.max(sigma_sampled);

    Ok(NondegeneracyCertificate {
        c,
        c_f64,
        big_c,
        c_phi,
        sigma_lb,
        grid_step,
        levels,
        det_lipschitz: to_f64(&det_lip),
        sigma_sampled_min: sigma_min,
    })
}

#[derive(Serialize, Deserialize)]
struct CurveJson {
    n: usize,
    components: Vec<Vec<(i64, i64)>>,
}

impl Serialize for Curve {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let components = self
            .components
            .iter()
            .map(|p| {
                p.coeffs
                    .iter()
                    .map(|c| (c.numer().to_i64().unwrap_or(0), c.denom().to_i64().unwrap_or(1)))
                    .collect()
            })
            .collect();
        CurveJson { n: self.n, components }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Curve {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = CurveJson::deserialize(d)?;
        if raw.components.len() != raw.n + 1 {
            return Err(serde::de::Error::custom(format!(
                "n = {} requires {} components, got {}",
                raw.n,
                raw.n + 1,
                raw.components.len()
            )));
        }
        let mut comps = Vec::new();
        for c in raw.components {
            let mut coeffs = Vec::new();
            for (num, den) in c {
                if den == 0 {
                    return Err(serde::de::Error::custom("zero denominator"));
                }
                coeffs.push(Q::new(num.into(), den.into()));
            }
            comps.push(Poly::new(coeffs));
        }
        Curve::from_components(comps).map_err(serde::de::Error::custom)
    }
}

/// Curve (t, t² + t³/20, t³, t⁴): a desk-scale perturbation of the n = 3 moment curve.
pub fn perturbed_moment_curve() -> Curve {
    let q = |v: i64| qi(v);
    let comps = vec![
        Poly::new(vec![q(0), q(1)]),
        Poly::new(vec![q(0), q(0), q(1), Q::new(1.into(), 20.into())]),
        Poly::new(vec![q(0), q(0), q(0), q(1)]),
        Poly::new(vec![q(0), q(0), q(0), q(0), q(1)]),
    ];
    Curve::from_components(comps).expect("valid curve")
}

/// Residual bound C σ^{-1} (|u|^{n+2}/(n+2)! + Σ |s_i| |u|^{n+2-i}/(n+2-i)!) of the curve map,
/// with C replaced by the sup of ‖φ^{(n+2)}‖ (zero for degree <= n+1).
pub fn taylor_residual_bound(curve: &Curve, u: f64, s_abs: &[f64]) -> f64 {
    let n = curve.n;
    let top = top_derivative_bound(curve);
    if top == 0.0 {
        return 0.0;
    }
    let sigma = curve.certificate.as_ref().map(|c| c.sigma_lb).unwrap_or(f64::NAN);
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let mut acc = u.abs().powi(n as i32 + 2) / fact(n + 2);
    for (i, s) in s_abs.iter().enumerate() {
        let i = i + 1;
        acc += s * u.abs().powi((n + 2 - i) as i32) / fact(n + 2 - i);
    }
    top / sigma * acc
}

/// sup over the domain of ‖φ^{(n+2)}‖ from coefficient bounds.
pub fn top_derivative_bound(curve: &Curve) -> f64 {
    let (a, b) = &curve.domain;
    let radius = if a.abs() > b.abs() { a.abs() } else { b.abs() };
    let polys = curve.deriv_polys(curve.n + 2);
    if polys.iter().all(Poly::is_zero) {
        return 0.0;
    }
    vec_sup_bound(&polys, &radius) * (1.0 + 1e-12)
}

/// sup of |p| bound used for exact powers of the domain radius.
pub fn domain_radius(curve: &Curve) -> Q {
    let (a, b) = &curve.domain;
    if a.abs() > b.abs() { a.abs() } else { b.abs() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::qf;

    #[test]
    fn moment_basics() {
        let c = moment_curve(3).unwrap();
        assert_eq!(c.eval(&qi(1)), vec![qi(1); 4]);
        assert_eq!(c.derivative(2, &qi(1)), vec![qi(0), qi(2), qi(6), qi(12)]);
        assert_eq!(c.derivative(5, &qf(3, 10)), vec![qi(0); 4]);
        assert!(c.frenet_matrix(&qi(0)).is_identity());
        assert!(moment_curve(1).is_err());
        let cert = c.certificate.unwrap();
        assert_eq!(cert.c, qi(1));
        assert!(cert.sigma_lb > 0.0);
    }

    #[test]
    fn degenerate_curve_rejected() {
        let comps = vec![
            Poly::monomial(1, qi(1)),
            Poly::monomial(2, qi(1)),
            Poly::monomial(2, qi(1)),
        ];
        let c = Curve::from_components(comps).unwrap();
        assert!(matches!(certify_nondegeneracy(&c, 1e-2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn json_round_trip() {
        let c = perturbed_moment_curve();
        let s = serde_json::to_string(&c).unwrap();
        let back: Curve = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
