//! Caps, s-boxes, affine maps, and the geometric predicates checked on every partition.

use std::cmp::Ordering;
use std::fmt;

use num::traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::curve::{taylor_residual_bound, Curve};
use crate::error::{Error, Result};
use crate::exact::{
    exact_log2, factorial_q, falling, fmt_q, parse_q, pow2, qf, qi, qmax, qmin, qpow, to_f64, Radical, Q,
};
use crate::matrix::QMatrix;
use crate::poly::MPoly;

/// Default multiplier for "≲ δ" acceptance checks.
pub const FLATNESS_TOLERANCE: i64 = 10;

/// Outer/inner side-ratio bound for almost rectangular caps, frozen after the
/// brute-force calibration in the rectangularity tests (observed maxima stay below 6).
pub const RECT_SIDE_RATIO_BOUND: f64 = 50.0;

/// Anchor candidates searched by the flatness deficit.
pub const FLATNESS_ANCHORS: usize = 33;

/// Grid points per active axis for sampled lower brackets.
pub const GRID_POINTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn factor(self) -> i64 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }

    pub fn q(self) -> Q {
        qi(self.factor())
    }

    /// All 2^m sign patterns in a fixed order.
    pub fn patterns(m: usize) -> Vec<Vec<Sign>> {
        (0..(1usize << m))
            .map(|bits| {
                (0..m)
                    .map(|j| if bits >> j & 1 == 0 { Sign::Plus } else { Sign::Minus })
                    .collect()
            })
            .collect()
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
        })
    }
}

/// Magnitude range of one s-coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SRange {
    /// [2^{-k}, 2^{1-k})
    Dyadic { k: u32 },
    /// [0, hi)
    Zero {
        #[serde(with = "crate::exact::qser")]
        hi: Q,
    },
    /// [lo, hi) produced by rescaling or splitting.
    Range {
        #[serde(with = "crate::exact::qser")]
        lo: Q,
        #[serde(with = "crate::exact::qser")]
        hi: Q,
    },
}

impl SRange {
    pub fn lo(&self) -> Q {
        match self {
            SRange::Dyadic { k } => pow2(-(*k as i64)),
            SRange::Zero { .. } => Q::zero(),
            SRange::Range { lo, .. } => lo.clone(),
        }
    }

    pub fn hi(&self) -> Q {
        match self {
            SRange::Dyadic { k } => pow2(1 - *k as i64),
            SRange::Zero { hi } => hi.clone(),
            SRange::Range { hi, .. } => hi.clone(),
        }
    }

    pub fn width(&self) -> Q {
        self.hi() - self.lo()
    }

    /// Multiply the magnitude range by a positive factor.
    pub fn scale(&self, f: &Q) -> SRange {
        if f.is_one() {
            return self.clone();
        }
        match self {
            SRange::Zero { hi } => SRange::Zero { hi: hi * f },
            _ => SRange::Range { lo: self.lo() * f, hi: self.hi() * f },
        }
    }

    /// Dyadic index k with hi = 2^{1-k}, for dyadic and zero-anchored ranges.
    pub fn dyadic_index(&self) -> Option<i64> {
        match self {
            SRange::Dyadic { k } => Some(*k as i64),
            SRange::Zero { hi } => exact_log2(hi).map(|e| 1 - e),
            SRange::Range { .. } => None,
        }
    }
}

/// Product of signed magnitude ranges for s_1, ..., s_{n-1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SBox {
    pub alpha: Vec<Sign>,
    pub ranges: Vec<SRange>,
}

impl SBox {
    pub fn new(alpha: Vec<Sign>, ranges: Vec<SRange>) -> Self {
        assert_eq!(alpha.len(), ranges.len());
        SBox { alpha, ranges }
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    /// Signed interval of s_j (1-based j).
    pub fn signed(&self, j: usize) -> (Q, Q) {
        let r = &self.ranges[j - 1];
        match self.alpha[j - 1] {
            Sign::Plus => (r.lo(), r.hi()),
            Sign::Minus => (-r.hi(), -r.lo()),
        }
    }

    pub fn hi(&self, j: usize) -> Q {
        self.ranges[j - 1].hi()
    }

    pub fn lo(&self, j: usize) -> Q {
        self.ranges[j - 1].lo()
    }

    pub fn volume(&self) -> Q {
        self.ranges.iter().map(SRange::width).fold(Q::one(), |a, b| a * b)
    }

    /// Signed midpoint of every coordinate.
    pub fn center(&self) -> Vec<Q> {
        (1..=self.dim())
            .map(|j| {
                let (a, b) = self.signed(j);
                (a + b) / qi(2)
            })
            .collect()
    }
}

/// A t-interval times an s-box patch of the (extended) moment parametrization.
#[derive(Clone, Debug, PartialEq)]
pub struct Cap {
    pub n: usize,
    pub delta: Q,
    pub t: (Q, Q),
    pub sbox: SBox,
    pub s0: Q,
    pub lineage: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CapJson {
    n: usize,
    #[serde(with = "crate::exact::qser")]
    delta: Q,
    #[serde(with = "crate::exact::qvec")]
    t: Vec<Q>,
    alpha: Vec<Sign>,
    s: Vec<SRange>,
    #[serde(with = "crate::exact::qser")]
    s0: Q,
    lineage: Vec<String>,
}

impl Serialize for Cap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CapJson {
            n: self.n,
            delta: self.delta.clone(),
            t: vec![self.t.0.clone(), self.t.1.clone()],
            alpha: self.sbox.alpha.clone(),
            s: self.sbox.ranges.clone(),
            s0: self.s0.clone(),
            lineage: self.lineage.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Cap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = CapJson::deserialize(d)?;
        if raw.t.len() != 2 || raw.t[0] > raw.t[1] {
            return Err(D::Error::custom("t must be an ordered pair"));
        }
        if raw.alpha.len() + 1 != raw.n || raw.s.len() + 1 != raw.n {
            return Err(D::Error::custom("alpha and s need n-1 entries"));
        }
        Ok(Cap {
            n: raw.n,
            delta: raw.delta,
            t: (raw.t[0].clone(), raw.t[1].clone()),
            sbox: SBox::new(raw.alpha, raw.s),
            s0: raw.s0,
            lineage: raw.lineage,
        })
    }
}

impl Cap {
    pub fn new(n: usize, delta: Q, t: (Q, Q), sbox: SBox) -> Self {
        assert_eq!(sbox.dim() + 1, n);
        Cap { n, delta, t, sbox, s0: Q::one(), lineage: Vec::new() }
    }

    pub fn t_len(&self) -> Q {
        &self.t.1 - &self.t.0
    }

    pub fn t_mid(&self) -> Q {
        (&self.t.0 + &self.t.1) / qi(2)
    }

    /// Same cap translated so its t-interval starts at 0 (exact, s unchanged).
    pub fn at_start(&self) -> Cap {
        let mut c = self.clone();
        c.t = (Q::zero(), self.t_len());
        c
    }

    pub fn volume(&self) -> Q {
        self.t_len() * self.sbox.volume()
    }
}

/// x_ext(t, s0, s) on the moment surface: component i is s0 t^i + Σ_j (i)_j s_j t^{i-j}.
pub fn moment_point_ext(n: usize, t: &Q, s0: &Q, s: &[Q]) -> Vec<Q> {
    let pows: Vec<Q> = (0..=n + 1).map(|k| qpow(t, k as i64)).collect();
    (1..=n + 1)
        .map(|i| {
            let mut v = s0 * &pows[i];
            for (j, sj) in s.iter().enumerate().take(i.min(n - 1)) {
                let j = j + 1;
                if j <= i && !sj.is_zero() {
                    v += falling(i as u32, j as u32) * sj * &pows[i - j];
                }
            }
            v
        })
        .collect()
}

pub fn moment_point_ext_f64(n: usize, t: f64, s0: f64, s: &[f64]) -> Vec<f64> {
    let mut pows = vec![1.0; n + 2];
    for k in 1..=n + 1 {
        pows[k] = pows[k - 1] * t;
    }
    (1..=n + 1)
        .map(|i| {
            let mut v = s0 * pows[i];
            let mut fall = 1.0;
            for j in 1..=i.min(n - 1) {
                fall *= (i + 1 - j) as f64;
                v += fall * s[j - 1] * pows[i - j];
            }
            v
        })
        .collect()
}

/// How a map acts on the (t, s0, s, δ) parameters of caps.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum ParamAction {
    #[default]
    Identity,
    /// t -> t + dt for caps carrying the given s0.
    Shift { dt: Q, s0: Q },
    /// t -> d t, s0 -> d^{-p} s0, s_j -> d^{j-p} s_j, δ -> d^{n+1-p} δ.
    Scale { d: Q, pivot: usize },
    /// Curve map at t0: t -> t - t0, exact up to the certified Taylor residual.
    CurveShift { t0: Q },
    /// Actions applied in order.
    Sequence(Vec<ParamAction>),
}

impl ParamAction {
    fn inverse(&self) -> ParamAction {
        match self {
            ParamAction::Identity => ParamAction::Identity,
            ParamAction::Shift { dt, s0 } => ParamAction::Shift { dt: -dt.clone(), s0: s0.clone() },
            ParamAction::Scale { d, pivot } => ParamAction::Scale { d: d.recip(), pivot: *pivot },
            ParamAction::CurveShift { t0 } => ParamAction::CurveShift { t0: -t0.clone() },
            ParamAction::Sequence(v) => ParamAction::Sequence(v.iter().rev().map(|a| a.inverse()).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    Translation,
    Dilation,
    CurveMap,
    Composite,
}

/// Affine map ξ -> matrix ξ + offset on R^{n+1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub n: usize,
    pub matrix: QMatrix,
    #[serde(with = "crate::exact::qvec")]
    pub offset: Vec<Q>,
    pub kind: MapKind,
    #[serde(with = "crate::exact::qser")]
    pub det: Q,
    pub id: String,
    #[serde(skip)]
    pub action: ParamAction,
}

impl AffineMap {
    pub fn apply(&self, x: &[Q]) -> Vec<Q> {
        self.matrix.mul_vec(x).into_iter().zip(&self.offset).map(|(a, b)| a + b).collect()
    }

    pub fn apply_f64(&self, x: &[f64]) -> Vec<f64> {
        let m = self.matrix.to_f64();
        let off: Vec<f64> = self.offset.iter().map(to_f64).collect();
        (0..x.len()).map(|i| (0..x.len()).map(|j| m[(i, j)] * x[j]).sum::<f64>() + off[i]).collect()
    }

    pub fn identity(n: usize) -> AffineMap {
        AffineMap {
            n,
            matrix: QMatrix::identity(n + 1),
            offset: vec![Q::zero(); n + 1],
            kind: MapKind::Composite,
            det: Q::one(),
            id: "I".into(),
            action: ParamAction::Identity,
        }
    }

    /// self ∘ other.
    pub fn compose(&self, other: &AffineMap) -> AffineMap {
        let matrix = self.matrix.mul(&other.matrix);
        let offset = self.apply(&other.offset);
        let mut seq = Vec::new();
        for a in [&other.action, &self.action] {
            match a {
                ParamAction::Identity => {}
                ParamAction::Sequence(v) => seq.extend(v.iter().cloned()),
                x => seq.push(x.clone()),
            }
        }
        AffineMap {
            n: self.n,
            det: &self.det * &other.det,
            matrix,
            offset,
            kind: MapKind::Composite,
            id: format!("{}∘{}", self.id, other.id),
            action: ParamAction::Sequence(seq),
        }
    }

    pub fn inverse(&self) -> Result<AffineMap> {
        let inv = self
            .matrix
            .inverse()
            .ok_or_else(|| Error::Singular(format!("map {} is not invertible", self.id)))?;
        let offset: Vec<Q> = inv.mul_vec(&self.offset).into_iter().map(|v| -v).collect();
        let id = inverse_id(&self.id);
        Ok(AffineMap {
            n: self.n,
            det: self.det.recip(),
            matrix: inv,
            offset,
            kind: self.kind,
            id,
            action: self.action.inverse(),
        })
    }

    /// Rebuild a translation or dilation from its identifier.
    pub fn from_id(n: usize, id: &str) -> Result<AffineMap> {
        let bad = || Error::Parse(format!("unrecognized map id {id:?}"));
        let field = |body: &str, key: &str| -> Result<Q> {
            let part = body
                .split(',')
                .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
                .ok_or_else(bad)?;
            parse_q(part)
        };
        if let Some(body) = id.strip_prefix("T(").and_then(|r| r.strip_suffix(')')) {
            return Ok(translation_map(n, &field(body, "t0")?, &field(body, "s0")?));
        }
        if let Some(body) = id.strip_prefix("D(").and_then(|r| r.strip_suffix(')')) {
            let pivot = field(body, "p")?;
            if !pivot.is_integer() || pivot.is_negative() {
                return Err(bad());
            }
            let p = pivot.to_integer().to_string().parse::<usize>().map_err(|_| bad())?;
            return dilation_map(n, &field(body, "d")?, p);
        }
        Err(bad())
    }
}

fn inverse_id(id: &str) -> String {
    // Translation and dilation inverses stay inside their families.
    if let Some(body) = id.strip_prefix("T(").and_then(|r| r.strip_suffix(')')) {
        if let (Some(t0), Some(s0)) = (
            body.split(',').find_map(|kv| kv.strip_prefix("t0=")),
            body.split(',').find_map(|kv| kv.strip_prefix("s0=")),
        ) {
            if let Ok(t0) = parse_q(t0) {
                return format!("T(t0={},s0={})", fmt_q(&-t0), s0);
            }
        }
    }
    if let Some(body) = id.strip_prefix("D(").and_then(|r| r.strip_suffix(')')) {
        if let (Some(d), Some(p)) = (
            body.split(',').find_map(|kv| kv.strip_prefix("d=")),
            body.split(',').find_map(|kv| kv.strip_prefix("p=")),
        ) {
            if let Ok(d) = parse_q(d) {
                return format!("D(d={},p={})", fmt_q(&d.recip()), p);
            }
        }
    }
    format!("inv({id})")
}

/// Moment-curve translation: A(ξ) = s0 φ(t0) + Σ_j φ^{(j)}(t0)/j! ξ_j.
///
/// Maps x_ext(t, s0, s) to x_ext(t + t0, s0, s); the matrix is the unit lower
/// triangular Pascal-type matrix Φ(t0).
pub fn translation_map(n: usize, t0: &Q, s0: &Q) -> AffineMap {
    let size = n + 1;
    let mut m = QMatrix::zeros(size);
    let pows: Vec<Q> = (0..=size).map(|k| qpow(t0, k as i64)).collect();
    for i in 1..=size {
        for j in 1..=i {
            // (i choose j) t0^{i-j}
            m.set(i - 1, j - 1, crate::exact::binomial(i as u32, j as u32) * &pows[i - j]);
        }
    }
    let offset: Vec<Q> = (1..=size).map(|i| s0 * &pows[i]).collect();
    let det = m.det();
    AffineMap {
        n,
        matrix: m,
        offset,
        kind: MapKind::Translation,
        det,
        id: format!("T(t0={},s0={})", fmt_q(t0), fmt_q(s0)),
        action: ParamAction::Shift { dt: t0.clone(), s0: s0.clone() },
    }
}

/// Diagonal dilation ξ_i -> d^{i - pivot} ξ_i.
pub fn dilation_map(n: usize, d: &Q, pivot: usize) -> Result<AffineMap> {
    if !d.is_positive() {
        return Err(Error::InvalidArgument(format!("dilation factor must be positive, got {}", fmt_q(d))));
    }
    if pivot > n {
        return Err(Error::InvalidArgument(format!("pivot {pivot} exceeds n = {n}")));
    }
    let entries: Vec<Q> = (1..=n + 1).map(|i| qpow(d, i as i64 - pivot as i64)).collect();
    let total: i64 = (1..=n as i64 + 1).map(|i| i - pivot as i64).sum();
    Ok(AffineMap {
        n,
        matrix: QMatrix::diagonal(&entries),
        offset: vec![Q::zero(); n + 1],
        kind: MapKind::Dilation,
        det: qpow(d, total),
        id: format!("D(d={},p={})", fmt_q(d), pivot),
        action: ParamAction::Scale { d: d.clone(), pivot },
    })
}

/// M(x) = Φ(t0)^{-1}(x - φ(t0)) together with its Taylor residual bound.
#[derive(Clone, Debug)]
pub struct CurveMap {
    pub map: AffineMap,
    pub t0: Q,
    /// sup ‖φ^{(n+2)}‖; zero when the curve has degree <= n+1.
    pub top_derivative: f64,
    pub sigma_lb: f64,
}

impl CurveMap {
    /// Certified bound on ‖M(y(t,s)) - x(t - t0, s)‖.
    pub fn residual_bound(&self, curve: &Curve, t: f64, s: &[f64]) -> f64 {
        if self.top_derivative == 0.0 {
            return 0.0;
        }
        let u = t - to_f64(&self.t0);
        let s_abs: Vec<f64> = s.iter().map(|v| v.abs()).collect();
        taylor_residual_bound(curve, u, &s_abs)
    }
}

pub fn curve_map(curve: &Curve, t0: &Q) -> Result<CurveMap> {
    let phi = curve.frenet_matrix(t0);
    let inv = phi
        .inverse()
        .ok_or_else(|| Error::Degenerate(format!("Φ({}) is singular", fmt_q(t0))))?;
    let base = curve.eval(t0);
    let offset: Vec<Q> = inv.mul_vec(&base).into_iter().map(|v| -v).collect();
    let det = inv.det();
    let top = crate::curve::top_derivative_bound(curve);
    let sigma = curve.certificate.as_ref().map(|c| c.sigma_lb).unwrap_or(f64::NAN);
    Ok(CurveMap {
        map: AffineMap {
            n: curve.n,
            matrix: inv,
            offset,
            kind: MapKind::CurveMap,
            det,
            id: format!("M(t0={})", fmt_q(t0)),
            action: ParamAction::CurveShift { t0: t0.clone() },
        },
        t0: t0.clone(),
        top_derivative: top,
        sigma_lb: sigma,
    })
}

fn apply_action(action: &ParamAction, cap: &mut Cap) -> Result<()> {
    match action {
        ParamAction::Identity => {}
        ParamAction::Shift { dt, s0 } => {
            if *s0 != cap.s0 {
                return Err(Error::CoordinateMismatch(format!(
                    "translation built for s0 = {} applied to cap with s0 = {}",
                    fmt_q(s0),
                    fmt_q(&cap.s0)
                )));
            }
            cap.t = (&cap.t.0 + dt, &cap.t.1 + dt);
        }
        ParamAction::Scale { d, pivot } => {
            let p = *pivot as i64;
            cap.t = (&cap.t.0 * d, &cap.t.1 * d);
            cap.s0 = &cap.s0 * qpow(d, -p);
            for (j, r) in cap.sbox.ranges.iter_mut().enumerate() {
                *r = r.scale(&qpow(d, j as i64 + 1 - p));
            }
            cap.delta = &cap.delta * qpow(d, cap.n as i64 + 1 - p);
        }
        ParamAction::CurveShift { t0 } => {
            cap.t = (&cap.t.0 - t0, &cap.t.1 - t0);
        }
        ParamAction::Sequence(v) => {
            for a in v {
                apply_action(a, cap)?;
            }
        }
    }
    Ok(())
}

/// Image of a cap under a translation, dilation, curve map, or composite.
pub fn apply_map(map: &AffineMap, cap: &Cap) -> Result<Cap> {
    if map.det.is_zero() {
        return Err(Error::Singular(format!("map {} has zero determinant", map.id)));
    }
    if map.n != cap.n {
        return Err(Error::DimensionMismatch { expected: cap.n, got: map.n });
    }
    let mut out = cap.clone();
    if matches!(map.action, ParamAction::Identity) {
        return Ok(out);
    }
    apply_action(&map.action, &mut out)?;
    out.lineage.push(map.id.clone());
    Ok(out)
}

/// Composition of all lineage maps (last applied is outermost).
pub fn compose_lineage(cap: &Cap) -> Result<AffineMap> {
    let mut acc = AffineMap::identity(cap.n);
    for id in &cap.lineage {
        acc = AffineMap::from_id(cap.n, id)?.compose(&acc);
    }
    Ok(acc)
}

/// c_i = (i+1)! / (2 (i!)^2).
pub fn c_constant(i: u32) -> Q {
    assert!(i >= 2, "c_i is defined for i >= 2");
    let f = factorial_q(i);
    factorial_q(i + 1) / (qi(2) * &f * &f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StandardForm {
    /// Interval length δ^ε/(30(i-1)!), |s_j| <= 2/j!, T <= δ^ε/(30(i+1)).
    Strict,
    /// Interval length <= δ^ε, |s_j| <= 2, T <= δ^ε.
    Relaxed,
}

impl StandardForm {
    pub fn for_dim(n: usize) -> Self {
        if n <= 4 { StandardForm::Relaxed } else { StandardForm::Strict }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub ok: bool,
    pub failed_clause: Option<String>,
    pub form: StandardForm,
}

pub fn is_standardized(cap: &Cap, i: usize, delta: &Q, eps: &Q) -> Standardization {
    is_standardized_with(cap, i, delta, eps, StandardForm::for_dim(cap.n))
}

/// Size normalization around c_i needed before a parabolic-cylinder step at component i.
pub fn is_standardized_with(cap: &Cap, i: usize, delta: &Q, eps: &Q, form: StandardForm) -> Standardization {
    assert!(i >= 2 && i <= cap.n, "standardization index out of range");
    let fail = |c: &str| Standardization { ok: false, failed_clause: Some(c.to_string()), form };
    let de = Radical::power(delta.clone(), eps);
    let fi1 = factorial_q(i as u32 - 1);
    let ci = c_constant(i as u32);
    let lo = cap.sbox.lo(i - 1);
    let hi = cap.sbox.hi(i - 1);
    let width = &hi - &lo;
    let window_ok = lo >= (qi(4) * &fi1).recip() && hi <= fi1.recip() && lo <= ci && ci <= hi;
    let width_ok = match form {
        StandardForm::Strict => de.scale(&(qi(30) * &fi1).recip()).ge_q(&width),
        StandardForm::Relaxed => de.ge_q(&width),
    };
    if !(window_ok && width_ok) {
        return fail("s_{i-1} interval");
    }
    for j in 1..i.saturating_sub(1) {
        let bound = match form {
            StandardForm::Strict => qi(2) / factorial_q(j as u32),
            StandardForm::Relaxed => qi(2),
        };
        if cap.sbox.hi(j) > bound {
            return fail("s_j bound");
        }
    }
    let t_ok = match form {
        StandardForm::Strict => de.scale(&qf(1, 30 * (i as i64 + 1))).ge_q(&cap.t_len()),
        StandardForm::Relaxed => de.ge_q(&cap.t_len()),
    };
    if !t_ok {
        return fail("T bound");
    }
    Standardization { ok: true, failed_clause: None, form }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundMethod {
    #[serde(rename = "interval-arithmetic")]
    IntervalArithmetic,
    #[serde(rename = "corner+grid")]
    CornerGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderError {
    pub component_index: usize,
    /// Certified upper bound on the sup.
    #[serde(with = "crate::exact::qser")]
    pub sup_error: Q,
    /// Exact value at the best grid sample.
    #[serde(with = "crate::exact::qser")]
    pub lower: Q,
    pub method: BoundMethod,
}

/// Symbolic ξ_{i+1}∘x - (ξ_i∘x)^2 in centered variables (u_0 for t, u_j for s_j).
fn cylinder_poly(cap: &Cap, i: usize) -> (MPoly, Vec<Q>) {
    let n = cap.n;
    let nv = n;
    let mut center = vec![cap.t_mid()];
    let mut radii = vec![cap.t_len() / qi(2)];
    for j in 1..n {
        let (a, b) = cap.sbox.signed(j);
        center.push((&a + &b) / qi(2));
        radii.push((&b - &a) / qi(2));
    }
    let t = MPoly::shifted_var(nv, 0, center[0].clone());
    let tp: Vec<MPoly> = (0..=i + 1).scan(MPoly::constant(nv, Q::one()), |acc, k| {
        let cur = acc.clone();
        if k <= i {
            *acc = acc.mul(&t);
        }
        Some(cur)
    }).collect();
    let comp = |k: usize| -> MPoly {
        let mut p = tp[k].scale(&cap.s0);
        for j in 1..=k.min(n - 1) {
            let s = MPoly::shifted_var(nv, j, center[j].clone());
            p = p.add(&s.mul(&tp[k - j]).scale(&falling(k as u32, j as u32)));
        }
        p
    };
    let xi = comp(i);
    let xi1 = comp(i + 1);
    (xi1.add(&xi.mul(&xi).scale(&qi(-1))), radii)
}

/// Certified sup bound only (centered Taylor form in exact arithmetic).
pub fn cylinder_error_upper(cap: &Cap, i: usize) -> Q {
    let (p, radii) = cylinder_poly(cap, i);
    p.abs_bound(&radii)
}

/// Bracket the sup of |ξ_{i+1}∘x - (ξ_i∘x)^2| over the cap.
pub fn cylinder_error(cap: &Cap, i: usize) -> CylinderError {
    assert!(i >= 1 && i <= cap.n, "component index out of range");
    let (p, radii) = cylinder_poly(cap, i);
    let upper = p.abs_bound(&radii);
    // Grid lower bracket over active axes.
    let n = cap.n;
    let active: Vec<usize> = (0..n)
        .filter(|&k| !radii[k].is_zero() && (k == 0 || k <= (i + 1).min(n - 1)))
        .collect();
    let rf: Vec<f64> = radii.iter().map(to_f64).collect();
    let total = GRID_POINTS.pow(active.len() as u32);
    let node = |g: usize, k: usize| -> f64 {
        if GRID_POINTS == 1 { 0.0 } else { -rf[k] + 2.0 * rf[k] * g as f64 / (GRID_POINTS - 1) as f64 }
    };
    let mut best = (-1.0, vec![0usize; active.len()]);
    let mut u = vec![0.0; n];
    for idx in 0..total {
        let mut rem = idx;
        let mut digits = vec![0usize; active.len()];
        for (a, &k) in active.iter().enumerate() {
            digits[a] = rem % GRID_POINTS;
            rem /= GRID_POINTS;
            u[k] = node(digits[a], k);
        }
        let v = p.eval_f64(&u).abs();
        if v > best.0 {
            best = (v, digits);
        }
    }
    let mut uq = vec![Q::zero(); n];
    for (a, &k) in active.iter().enumerate() {
        let g = best.1[a] as i64;
        uq[k] = -radii[k].clone() + qi(2) * &radii[k] * qf(g, GRID_POINTS as i64 - 1);
    }
    let lower = p.eval(&uq).abs();
    CylinderError { component_index: i, sup_error: upper, lower, method: BoundMethod::IntervalArithmetic }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    #[serde(with = "crate::exact::qser")]
    pub lhs: Q,
    #[serde(with = "crate::exact::qser")]
    pub rhs: Q,
    pub holds: bool,
}

/// |t^M + Σ_{j<=m} (M)_j s_j t^{M-j}| <= 2 (M|t|)^{M-m} under |s_j| <= 1/j!, |t| <= 1/(2M).
pub fn tail_bound_check(big_m: u32, m: u32, t: &Q, s: &[Q]) -> Result<TailBound> {
    if m > big_m {
        return Err(Error::Hypothesis(format!("m = {m} exceeds M = {big_m}")));
    }
    if s.len() != m as usize {
        return Err(Error::DimensionMismatch { expected: m as usize, got: s.len() });
    }
    for (j, sj) in s.iter().enumerate() {
        if sj.abs() > factorial_q(j as u32 + 1).recip() {
            return Err(Error::Hypothesis(format!("|s_{}| exceeds 1/{}!", j + 1, j + 1)));
        }
    }
    if t.abs() > qf(1, 2 * big_m as i64) {
        return Err(Error::Hypothesis(format!("|t| exceeds 1/(2M) = 1/{}", 2 * big_m)));
    }
    let mut v = qpow(t, big_m as i64);
    for (j, sj) in s.iter().enumerate() {
        let j = j as u32 + 1;
        v += falling(big_m, j) * sj * qpow(t, (big_m - j) as i64);
    }
    let lhs = v.abs();
    let rhs = qi(2) * qpow(&(qi(big_m as i64) * t.abs()), (big_m - m) as i64);
    Ok(TailBound { holds: lhs <= rhs, lhs, rhs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessDeficit {
    #[serde(with = "crate::exact::qser")]
    pub upper: Q,
    #[serde(with = "crate::exact::qser")]
    pub lower: Q,
    #[serde(with = "crate::exact::qser")]
    pub anchor: Q,
}

/// |s0| u^{n+1} + Σ_j (n+1)_j smax_j u^{n+1-j}, increasing in u and in each smax_j.
pub fn deficit_profile(n: usize, s0_abs: &Q, smax: &[Q], u: &Q) -> Q {
    let mut v = s0_abs * qpow(u, n as i64 + 1);
    for (j, m) in smax.iter().enumerate() {
        let j = j + 1;
        v += falling(n as u32 + 1, j as u32) * m * qpow(u, (n + 1 - j) as i64);
    }
    v
}

/// inf over anchors t0 of sup over the cap of |t-t0|^{n+1} + Σ (n+1)_j |s_j| |t-t0|^{n+1-j}.
///
/// The sup for a fixed anchor is attained at the far t-endpoint and the box corner, so it is
/// exact; the candidate grid contains the midpoint, which is the optimal anchor.
pub fn flatness_deficit(cap: &Cap) -> FlatnessDeficit {
    let smax: Vec<Q> = (1..cap.n).map(|j| cap.sbox.hi(j)).collect();
    let s0 = cap.s0.abs();
    let (a, b) = (&cap.t.0, &cap.t.1);
    let len = b - a;
    // The profile grows with u = max(t0 - a, b - t0), so among the equispaced candidates the
    // middle one (the exact midpoint, the count being odd) wins; evaluate it directly.
    let mid = (FLATNESS_ANCHORS as i64 - 1) / 2;
    let anchor = a + &len * qf(mid, FLATNESS_ANCHORS as i64 - 1);
    let u = qmax(&(&anchor - a), &(b - &anchor));
    let upper = deficit_profile(cap.n, &s0, &smax, &u);
    // Every anchor leaves one endpoint at distance >= len/2.
    let lower = deficit_profile(cap.n, &s0, &smax, &(&len / qi(2)));
    FlatnessDeficit { upper, lower, anchor }
}

pub fn is_flat(cap: &Cap, tolerance: i64) -> bool {
    flatness_deficit(cap).upper <= qi(tolerance) * &cap.delta
}

/// Interval of t^k for t in [a, b].
fn pow_interval(a: &Q, b: &Q, k: usize) -> (Q, Q) {
    if k == 0 {
        return (Q::one(), Q::one());
    }
    let pa = qpow(a, k as i64);
    let pb = qpow(b, k as i64);
    if k % 2 == 0 && a.is_negative() && b.is_positive() {
        (Q::zero(), qmax(&pa, &pb))
    } else {
        (qmin(&pa, &pb), qmax(&pa, &pb))
    }
}

fn mul_interval(x: &(Q, Q), y: &(Q, Q)) -> (Q, Q) {
    let c = [&x.0 * &y.0, &x.0 * &y.1, &x.1 * &y.0, &x.1 * &y.1];
    let lo = c.iter().min().unwrap().clone();
    let hi = c.iter().max().unwrap().clone();
    (lo, hi)
}

/// Enclosure of ξ_i∘x_ext over the cap (term-wise interval arithmetic, exact endpoints).
pub fn component_range(cap: &Cap, i: usize) -> (Q, Q) {
    let (a, b) = (&cap.t.0, &cap.t.1);
    let lead = pow_interval(a, b, i);
    let mut acc = mul_interval(&(cap.s0.clone(), cap.s0.clone()), &lead);
    for j in 1..=i.min(cap.n - 1) {
        let f = falling(i as u32, j as u32);
        let s = cap.sbox.signed(j);
        let s = (&s.0 * &f, &s.1 * &f);
        let term = mul_interval(&s, &pow_interval(a, b, i - j));
        acc = (acc.0 + term.0, acc.1 + term.1);
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rectangularity {
    pub length_ok: bool,
    pub accepted: bool,
    /// (1/10)-free minimum of the length-condition terms.
    pub length_min: f64,
    pub t_len: f64,
    pub inner: Vec<(f64, f64)>,
    pub outer: Vec<(f64, f64)>,
    pub side_ratios: Vec<f64>,
    pub max_side_ratio: f64,
    pub volume_ratio: f64,
}

/// Length condition plus the inner/outer box sandwich of the δ-neighborhood.
pub fn is_almost_rectangular(cap: &Cap) -> Result<Rectangularity> {
    let n = cap.n;
    let ks: Vec<i64> = cap
        .sbox
        .ranges
        .iter()
        .enumerate()
        .map(|(j, r)| {
            r.dyadic_index()
                .ok_or_else(|| Error::NonDyadic(format!("coordinate s_{} is {:?}", j + 1, r)))
        })
        .collect::<Result<_>>()?;
    let k = |i: usize| ks[i - 1];
    let cap = cap.at_start();
    let t = cap.t_len();
    let ten_t = qi(10) * &t;
    let mut holds = true;
    let mut length_min = f64::INFINITY;
    for i in 2..n {
        let term = qf(1, i as i64) * pow2(k(i - 1) - k(i));
        holds &= ten_t <= term;
        length_min = length_min.min(to_f64(&term));
    }
    let curv = Radical::new(Q::one(), pow2(k(n - 1)) * &cap.delta / factorial_q(n as u32 + 1), 1, 2);
    holds &= curv.ge_q(&ten_t);
    length_min = length_min.min(curv.to_f64());
    let first = pow2(-k(1));
    holds &= ten_t <= first;
    length_min = length_min.min(to_f64(&first));

    // Inner box.
    let mut inner = Vec::with_capacity(n + 1);
    for i in 1..n {
        let f = factorial_q(i as u32);
        let (a, b) = cap.sbox.signed(i);
        let (a, b) = (&a * &f, &b * &f);
        let mid = (&a + &b) / qi(2);
        let half = (&b - &a) / qi(4);
        inner.push((&mid - &half, &mid + &half));
    }
    let beta = qf(1, 2) * factorial_q(n as u32) * (cap.sbox.hi(n - 1) / qi(2)) * &t;
    inner.push(match cap.sbox.alpha[n - 2] {
        Sign::Plus => (Q::zero(), beta),
        Sign::Minus => (-beta, Q::zero()),
    });
    inner.push((-&cap.delta / qi(2), &cap.delta / qi(2)));

    // Outer box.
    let mut outer: Vec<(Q, Q)> = (1..=n).map(|i| component_range(&cap, i)).collect();
    let top = component_range(&cap, n + 1);
    outer.push((top.0 - &cap.delta, top.1 + &cap.delta));

    let side_ratios: Vec<f64> = inner
        .iter()
        .zip(&outer)
        .map(|(a, b)| to_f64(&(&b.1 - &b.0)) / to_f64(&(&a.1 - &a.0)))
        .collect();
    let max_side_ratio = side_ratios.iter().cloned().fold(0.0, f64::max);
    let volume_ratio = side_ratios.iter().product();
    let conv = |v: &Vec<(Q, Q)>| v.iter().map(|(a, b)| (to_f64(a), to_f64(b))).collect();
    Ok(Rectangularity {
        length_ok: holds,
        accepted: holds && max_side_ratio <= RECT_SIDE_RATIO_BOUND,
        length_min,
        t_len: to_f64(&t),
        inner: conv(&inner),
        outer: conv(&outer),
        side_ratios,
        max_side_ratio,
        volume_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub max_theta_per_delta: usize,
    pub max_delta_per_theta: usize,
    /// Shift factor c of consecutive I-intervals relative to i·(gap in b).
    pub shift_factor: f64,
    pub intervals: usize,
}

/// Overlap counts between the Δ′ intervals I_{Δ′} and the θ grid of mesh E^{1/2} on the ξ_i axis.
pub fn overlap_counts(caps: &[Cap], i: usize, e: f64) -> OverlapCounts {
    let sign = if i >= 2 { caps.first().map_or(Sign::Plus, |c| c.sbox.alpha[i - 2]) } else { Sign::Plus };
    let starts: Vec<f64> = caps.iter().map(|c| to_f64(&c.t.0)).collect();
    overlap_counts_from_starts(&starts, sign, i, e)
}

/// Same as [`overlap_counts`] from the left endpoints b of the t-intervals and the sign α_{i-1}.
pub fn overlap_counts_from_starts(starts: &[f64], sign: Sign, i: usize, e: f64) -> OverlapCounts {
    assert!(e > 0.0, "E must be positive");
    let w = e.sqrt();
    let scale = if i >= 2 {
        to_f64(&c_constant(i as u32)) * to_f64(&factorial_q(i as u32)) * sign.factor() as f64
    } else {
        1.0
    };
    let cells: Vec<(i64, i64)> = starts
        .iter()
        .map(|&b| {
            let (lo, hi) = if i >= 2 { (scale * b - 5.0 * w, scale * b + 5.0 * w) } else { (b, b + 3.0 * w) };
            ((lo / w).floor() as i64, (hi / w).floor() as i64)
        })
        .collect();
    let max_theta_per_delta = cells.iter().map(|(a, b)| (b - a + 1) as usize).max().unwrap_or(0);
    let lo = cells.iter().map(|c| c.0).min().unwrap_or(0);
    let hi = cells.iter().map(|c| c.1).max().unwrap_or(0);
    let mut diff = vec![0i64; (hi - lo + 2).max(1) as usize];
    for (a, b) in &cells {
        diff[(a - lo) as usize] += 1;
        diff[(b - lo + 1) as usize] -= 1;
    }
    let mut run = 0;
    let mut max_delta_per_theta = 0;
    for d in diff {
        run += d;
        max_delta_per_theta = max_delta_per_theta.max(run as usize);
    }
    let shift_factor = if i >= 2 { scale / i as f64 } else { 1.0 };
    OverlapCounts { max_theta_per_delta, max_delta_per_theta, shift_factor, intervals: starts.len() }
}

/// Exact comparison helper: is the radical at least q.
pub fn radical_ge(r: &Radical, q: &Q) -> bool {
    r.cmp_q(q) != Ordering::Less
}
