//! Exact rational helpers: dyadic rounding, radicals, factorials, parsing.

use std::cmp::Ordering;
use std::fmt;

use num::bigint::{BigInt, Sign as BigSign};
use num::integer::Integer;
use num::rational::BigRational;
use num::traits::{One, Signed, ToPrimitive, Zero};
use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;

use crate::error::Error;

/// Exact rational number used throughout the crate.
pub type Q = BigRational;

pub fn qi(v: i64) -> Q {
    Q::from_integer(BigInt::from(v))
}

pub fn qf(num: i64, den: i64) -> Q {
    Q::new(BigInt::from(num), BigInt::from(den))
}

/// 2^e for any integer e.
pub fn pow2(e: i64) -> Q {
    if e >= 0 {
        Q::from_integer(BigInt::one() << (e as usize))
    } else {
        Q::new(BigInt::one(), BigInt::one() << ((-e) as usize))
    }
}

pub fn qpow(x: &Q, e: i64) -> Q {
    if e >= 0 {
        num::traits::pow(x.clone(), e as usize)
    } else {
        num::traits::pow(x.recip(), (-e) as usize)
    }
}

pub fn factorial(n: u32) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, k| acc * BigInt::from(k))
}

pub fn factorial_q(n: u32) -> Q {
    Q::from_integer(factorial(n))
}

/// Falling factorial i!/(i-j)!.
pub fn falling(i: u32, j: u32) -> Q {
    if j > i {
        return Q::zero();
    }
    Q::from_integer(((i - j + 1)..=i).fold(BigInt::one(), |acc, k| acc * BigInt::from(k)))
}

pub fn binomial(n: u32, k: u32) -> Q {
    if k > n {
        return Q::zero();
    }
    falling(n, k) / factorial_q(k)
}

/// Exact conversion of a finite double to a rational.
pub fn from_f64(x: f64) -> Option<Q> {
    Q::from_float(x)
}

pub fn to_f64(x: &Q) -> f64 {
    // BigRational::to_f64 can lose the exponent for huge parts; scale by bit lengths.
    if let Some(v) = x.to_f64() {
        if v.is_finite() && (v != 0.0 || x.is_zero()) {
            return v;
        }
    }
    let nb = x.numer().bits() as i64;
    let db = x.denom().bits() as i64;
    let shift = nb - db;
    let scaled = x * pow2(-shift);
    scaled.to_f64().unwrap_or(f64::NAN) * 2f64.powi(shift as i32)
}

/// floor(log2(x)) for x > 0.
pub fn log2_floor(x: &Q) -> i64 {
    assert!(x.is_positive(), "log2_floor of non-positive value");
    let mut e = x.numer().bits() as i64 - x.denom().bits() as i64;
    // 2^e is within a factor 2 of x; fix up.
    while pow2(e) > *x {
        e -= 1;
    }
    while pow2(e + 1) <= *x {
        e += 1;
    }
    e
}

/// Largest power of two not exceeding x (x > 0).
pub fn dyadic_floor(x: &Q) -> Q {
    pow2(log2_floor(x))
}

/// Smallest power of two not below x (x > 0).
pub fn dyadic_ceil(x: &Q) -> Q {
    let e = log2_floor(x);
    if pow2(e) == *x {
        pow2(e)
    } else {
        pow2(e + 1)
    }
}

/// Returns e when x = 2^e exactly.
pub fn exact_log2(x: &Q) -> Option<i64> {
    if !x.is_positive() {
        return None;
    }
    let e = log2_floor(x);
    (pow2(e) == *x).then_some(e)
}

pub fn is_dyadic(x: &Q) -> bool {
    let d = x.denom();
    d.is_one() || (d & (d - BigInt::one())).is_zero()
}

pub fn qmin(a: &Q, b: &Q) -> Q {
    if a <= b { a.clone() } else { b.clone() }
}

pub fn qmax(a: &Q, b: &Q) -> Q {
    if a >= b { a.clone() } else { b.clone() }
}

/// Positive real of the form coef * base^(num/den) with rational coef, base > 0.
///
/// Covers every scale the constructions need (δ^ε, (2^k δ)^{1/2}, (i! 2^-k)^{1/i}, ...)
/// while keeping comparisons exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Radical {
    pub coef: Q,
    pub base: Q,
    pub num: i64,
    pub den: i64,
}

impl Radical {
    pub fn new(coef: Q, base: Q, num: i64, den: i64) -> Self {
        assert!(den > 0 && base.is_positive() && coef.is_positive());
        let g = num.gcd(&den).max(1);
        Radical { coef, base, num: num / g, den: den / g }
    }

    pub fn rational(v: Q) -> Self {
        Radical::new(v, Q::one(), 0, 1)
    }

    /// base^(exp) with a rational exponent.
    pub fn power(base: Q, exp: &Q) -> Self {
        let num = exp.numer().to_i64().expect("exponent numerator");
        let den = exp.denom().to_i64().expect("exponent denominator");
        Radical::new(Q::one(), base, num, den)
    }

    pub fn scale(&self, c: &Q) -> Self {
        Radical::new(&self.coef * c, self.base.clone(), self.num, self.den)
    }

    /// Rational value when the exponent is integral or the root is exact.
    pub fn exact(&self) -> Option<Q> {
        if self.den == 1 {
            return Some(&self.coef * qpow(&self.base, self.num));
        }
        let root = exact_root(&self.base, self.den as u32)?;
        Some(&self.coef * qpow(&root, self.num))
    }

    pub fn to_f64(&self) -> f64 {
        (self.ln()).exp()
    }

    pub fn ln(&self) -> f64 {
        ln_q(&self.coef) + (self.num as f64 / self.den as f64) * ln_q(&self.base)
    }

    /// Compare against a non-negative rational exactly.
    pub fn cmp_q(&self, r: &Q) -> Ordering {
        if !r.is_positive() {
            return Ordering::Greater;
        }
        // coef * base^(num/den) vs r  <=>  base^num vs (r/coef)^den
        let lhs = qpow(&self.base, self.num);
        let rhs = qpow(&(r / &self.coef), self.den);
        lhs.cmp(&rhs)
    }

    pub fn cmp(&self, other: &Radical) -> Ordering {
        // Raise both sides to the lcm of the denominators.
        let l = self.den.lcm(&other.den);
        let a = qpow(&self.coef, l) * qpow(&self.base, self.num * (l / self.den));
        let b = qpow(&other.coef, l) * qpow(&other.base, other.num * (l / other.den));
        a.cmp(&b)
    }

    pub fn le_q(&self, r: &Q) -> bool {
        self.cmp_q(r) != Ordering::Greater
    }

    pub fn ge_q(&self, r: &Q) -> bool {
        self.cmp_q(r) != Ordering::Less
    }

    /// Largest power of two not exceeding the value.
    pub fn dyadic_floor(&self) -> Q {
        let guess = self.ln() / std::f64::consts::LN_2;
        let mut e = guess.floor() as i64;
        while self.cmp_q(&pow2(e)) == Ordering::Less {
            e -= 1;
        }
        while self.cmp_q(&pow2(e + 1)) != Ordering::Less {
            e += 1;
        }
        pow2(e)
    }

    /// Value rounded down to a multiple of 2^-bits relative to its dyadic floor.
    pub fn floor_with_bits(&self, bits: u32) -> Q {
        let base = self.dyadic_floor();
        let unit = &base * pow2(-(bits as i64));
        // largest m with m*unit <= value, m in [2^bits, 2^(bits+1))
        let lhs = qpow(&self.base, self.num);
        let fits = |m: &BigInt| lhs >= qpow(&(&unit * Q::from_integer(m.clone()) / &self.coef), self.den);
        let mut lo = BigInt::one() << bits as usize;
        if bits <= 40 {
            // Start from the floating-point quotient and walk to the exact answer.
            let guess = (self.ln() - ln_q(&unit)).exp().floor();
            let top = (BigInt::one() << (bits as usize + 1)) - BigInt::one();
            let mut m = BigInt::from(guess as i64).clamp(lo.clone(), top.clone());
            while m > lo && !fits(&m) {
                m -= BigInt::one();
            }
            while m < top && fits(&(&m + BigInt::one())) {
                m += BigInt::one();
            }
            return unit * Q::from_integer(m);
        }
        let mut hi = BigInt::one() << (bits as usize + 1);
        while &hi - &lo > BigInt::one() {
            let mid: BigInt = (&lo + &hi) >> 1usize;
            if fits(&mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        unit * Q::from_integer(lo)
    }
}

impl fmt::Display for Radical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*({})^({}/{})", self.coef, self.base, self.num, self.den)
    }
}

/// Exact k-th root of a positive rational, if it exists.
pub fn exact_root(x: &Q, k: u32) -> Option<Q> {
    if k == 1 {
        return Some(x.clone());
    }
    let n = x.numer().nth_root(k);
    let d = x.denom().nth_root(k);
    if num::traits::pow(n.clone(), k as usize) == *x.numer()
        && num::traits::pow(d.clone(), k as usize) == *x.denom()
    {
        Some(Q::new(n, d))
    } else {
        None
    }
}

/// Natural log of a positive rational without overflow.
pub fn ln_q(x: &Q) -> f64 {
    let nb = x.numer().bits() as i64;
    let db = x.denom().bits() as i64;
    let shift = nb - db;
    let scaled = x * pow2(-shift);
    scaled.to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
}

/// Parse "2^-12", "2^(-12)", "1/4096", or a decimal string into an exact rational.
pub fn parse_q(s: &str) -> Result<Q, Error> {
    let t = s.trim();
    if let Some(rest) = t.strip_prefix("2^") {
        let e = rest.trim_start_matches('(').trim_end_matches(')');
        let e: i64 = e
            .parse()
            .map_err(|_| Error::Parse(format!("bad exponent in {t:?}")))?;
        return Ok(pow2(e));
    }
    if let Some((a, b)) = t.split_once('/') {
        let a: BigInt = a.trim().parse().map_err(|_| Error::Parse(format!("bad rational {t:?}")))?;
        let b: BigInt = b.trim().parse().map_err(|_| Error::Parse(format!("bad rational {t:?}")))?;
        if b.is_zero() {
            return Err(Error::Parse(format!("zero denominator in {t:?}")));
        }
        return Ok(Q::new(a, b));
    }
    if let Ok(i) = t.parse::<BigInt>() {
        return Ok(Q::from_integer(i));
    }
    // Decimal literals are read as exact decimals, not through binary floating point.
    if let Some(q) = parse_decimal(t) {
        return Ok(q);
    }
    let v: f64 = t.parse().map_err(|_| Error::Parse(format!("not a number: {t:?}")))?;
    from_f64(v).ok_or_else(|| Error::Parse(format!("non-finite number: {t:?}")))
}

fn parse_decimal(t: &str) -> Option<Q> {
    let (mant, exp) = match t.find(['e', 'E']) {
        Some(i) => (&t[..i], t[i + 1..].parse::<i64>().ok()?),
        None => (t, 0),
    };
    let (neg, mant) = match mant.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mant.strip_prefix('+').unwrap_or(mant)),
    };
    let (ip, fp) = mant.split_once('.').unwrap_or((mant, ""));
    if ip.is_empty() && fp.is_empty() {
        return None;
    }
    if !ip.chars().chain(fp.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits: BigInt = format!("{}{}", ip, fp).parse().ok()?;
    let scale = exp - fp.len() as i64;
    let ten = Q::from_integer(BigInt::from(10));
    let mut v = Q::from_integer(digits) * qpow(&ten, scale);
    if neg {
        v = -v;
    }
    Some(v)
}

/// Canonical string form "p" or "p/q".
pub fn fmt_q(x: &Q) -> String {
    if x.denom().is_one() {
        x.numer().to_string()
    } else {
        format!("{}/{}", x.numer(), x.denom())
    }
}

/// Serde adapter: rationals as strings, accepting numbers on input.
pub mod qser {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Q, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_q(x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Q, D::Error> {
        d.deserialize_any(QVisitor)
    }

    pub(super) struct QVisitor;

    impl<'de> Visitor<'de> for QVisitor {
        type Value = Q;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a rational as string or number")
        }
        fn visit_str<E: de::Error>(self, v: &str) -> Result<Q, E> {
            parse_q(v).map_err(E::custom)
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Q, E> {
            Ok(qi(v))
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Q, E> {
            Ok(Q::from_integer(BigInt::from(v)))
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> Result<Q, E> {
            from_f64(v).ok_or_else(|| E::custom("non-finite"))
        }
    }
}

/// Serde adapter for vectors of rationals.
pub mod qvec {
    use super::*;
    use serde::de::SeqAccess;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(x: &[Q], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(x.len()))?;
        for v in x {
            seq.serialize_element(&fmt_q(v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Q>, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Vec<Q>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a list of rationals")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut a: A) -> Result<Vec<Q>, A::Error> {
                let mut out = Vec::new();
                while let Some(w) = a.next_element::<QWrap>()? {
                    out.push(w.0);
                }
                Ok(out)
            }
        }
        d.deserialize_seq(V)
    }

    pub(crate) struct QWrap(pub Q);

    impl<'de> serde::Deserialize<'de> for QWrap {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            d.deserialize_any(super::qser::QVisitor).map(QWrap)
        }
    }
}

/// Sign of a rational as -1, 0, 1.
pub fn signum(x: &Q) -> i32 {
    match x.numer().sign() {
        BigSign::Minus => -1,
        BigSign::NoSign => 0,
        BigSign::Plus => 1,
    }
}
