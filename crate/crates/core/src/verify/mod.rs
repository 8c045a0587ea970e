//! Monte Carlo estimates of decoupling ratios for the cap families built in
//! [`crate::partition`], plus a brute-force parabola oracle and a cylinder-lift
//! comparison.
//!
//! Norms are taken over a box of side R centered at the origin (default R = 1/δ),
//! a finite stand-in for the whole-space norm.

pub mod constants;

use std::f64::consts::TAU;

use num::complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{from_f64, to_f64, Radical, Q};
use crate::geometry::{moment_point_ext_f64, Cap};
use crate::partition::PartitionReport;

pub use constants::{theoretical_constant, ConstantBound, ConstantInputs, FormulaId};

/// Atoms per cap used by [`decoupling_ratio`].
pub const DEFAULT_ATOMS_PER_CAP: usize = 2;
/// Relative tolerance of the frequency membership check.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stratification {
    Uniform,
    /// Latin hypercube: every axis is cut into n_samples strata, each hit once.
    StratifiedPerAxis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub box_side: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub stratification: Stratification,
}

impl SamplePlan {
    pub const MIN_SAMPLES: usize = 1000;

    pub fn new(box_side: f64, n_samples: usize, seed: u64, stratification: Stratification) -> Result<Self> {
        if !(box_side.is_finite() && box_side > 0.0) {
            return Err(Error::InvalidArgument(format!("box side must be positive, got {box_side}")));
        }
        if n_samples < Self::MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "need at least {} samples, got {n_samples}",
                Self::MIN_SAMPLES
            )));
        }
        Ok(SamplePlan { box_side, n_samples, seed, stratification })
    }

    /// Uniform plan on the box of side 1/δ.
    pub fn for_delta(delta: f64, n_samples: usize, seed: u64) -> Result<Self> {
        SamplePlan::new(1.0 / delta, n_samples, seed, Stratification::Uniform)
    }

    pub fn volume(&self, dim: usize) -> f64 {
        self.box_side.powi(dim as i32)
    }

    /// Sample points, flattened row-major (n_samples x dim). Deterministic in (seed, stream).
    pub fn points(&self, dim: usize, stream: u64) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, stream);
        let r = self.box_side;
        let n = self.n_samples;
        let mut out = vec![0.0; n * dim];
        match self.stratification {
            Stratification::Uniform => {
                for v in out.iter_mut() {
                    *v = (rng.gen::<f64>() - 0.5) * r;
                }
            }
            Stratification::StratifiedPerAxis => {
                let mut strata: Vec<usize> = (0..n).collect();
                for axis in 0..dim {
                    for i in (1..n).rev() {
                        strata.swap(i, rng.gen_range(0..=i));
                    }
                    for (i, &k) in strata.iter().enumerate() {
                        out[i * dim + axis] = ((k as f64 + rng.gen::<f64>()) / n as f64 - 0.5) * r;
                    }
                }
            }
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const ATOM_STREAM: u64 = 0;
fn phase_stream(trial: usize) -> u64 {
    1 + 2 * trial as u64
}
fn sample_stream(trial: usize) -> u64 {
    2 + 2 * trial as u64
}
const LIFT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub freq: Vec<f64>,
    #[serde(with = "complex_pair")]
    pub amp: Complex64,
    pub cap: usize,
}

mod complex_pair {
    use num::complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        [z.re, z.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(Complex64::new(re, im))
    }
}

/// Finite exponential sum Σ a_j e(x·ξ_j), atoms grouped by cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub dim: usize,
    pub caps: usize,
    pub atoms: Vec<Atom>,
}

impl TestFunction {
    pub fn new(dim: usize, caps: usize, atoms: Vec<Atom>) -> Result<Self> {
        if let Some(a) = atoms.iter().find(|a| a.freq.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: a.freq.len() });
        }
        if let Some(a) = atoms.iter().find(|a| a.cap >= caps) {
            return Err(Error::OutOfRange(format!("atom cap {} with {caps} caps", a.cap)));
        }
        Ok(TestFunction { dim, caps, atoms })
    }

    pub fn eval(&self, x: &[f64]) -> Complex64 {
        self.atoms.iter().map(|a| a.amp * Complex64::cis(TAU * dot(x, &a.freq))).sum()
    }

    /// Same frequencies, unit amplitudes with fresh uniform phases.
    pub fn rephased<R: Rng>(&self, rng: &mut R) -> TestFunction {
        let mut f = self.clone();
        for a in &mut f.atoms {
            a.amp = Complex64::cis(TAU * rng.gen::<f64>());
        }
        f
    }

    /// All amplitudes equal to 1.
    pub fn coherent(&self) -> TestFunction {
        let mut f = self.clone();
        for a in &mut f.atoms {
            a.amp = Complex64::new(1.0, 0.0);
        }
        f
    }

    /// Append a frequency coordinate to every atom.
    pub fn lifted(&self, extra: impl Fn(usize) -> f64) -> TestFunction {
        let mut f = self.clone();
        f.dim += 1;
        for (j, a) in f.atoms.iter_mut().enumerate() {
            a.freq.push(extra(j));
        }
        f
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Preimage of a frequency under the cap parametrization.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub t: f64,
    pub s: Vec<f64>,
    /// Offset along the last axis.
    pub v: f64,
    pub residual: f64,
    pub inside: bool,
}

/// s_1..s_{n-1} from the first n-1 frequency coordinates at a fixed t (triangular solve).
fn solve_s(n: usize, t: f64, s0: f64, xi: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; n - 1];
    let mut pows = vec![1.0; n + 2];
    for k in 1..=n + 1 {
        pows[k] = pows[k - 1] * t;
    }
    for i in 1..n {
        let mut rest = xi[i - 1] - s0 * pows[i];
        let mut fall = 1.0;
        for j in 1..i {
            fall *= (i + 1 - j) as f64;
            rest -= fall * s[j - 1] * pows[i - j];
        }
        // fall is now (i)_{i-1} = i! = (i)_i
        s[i - 1] = rest / fall;
    }
    s
}

/// Recover (t, s, v) for a moment-surface frequency and test it against the cap's δ-neighborhood.
///
/// For each t the s-coordinates follow from a triangular solve; t itself minimizes the
/// worst violation among: the residual in coordinate n, the s-box, |v| <= δ and the
/// t-interval. Minimizing the combined violation (rather than the residual alone)
/// keeps the test sharp near s_{n-1} = 0, where the parametrization folds and t is
/// only determined to about the square root of machine precision.
pub fn cap_membership(cap: &Cap, xi: &[f64]) -> Result<Membership> {
    let n = cap.n;
    if xi.len() != n + 1 {
        return Err(Error::DimensionMismatch { expected: n + 1, got: xi.len() });
    }
    let s0 = to_f64(&cap.s0);
    let (t0, t1) = (to_f64(&cap.t.0), to_f64(&cap.t.1));
    let delta = to_f64(&cap.delta);
    let bounds: Vec<(f64, f64)> = (1..n)
        .map(|j| {
            let (a, b) = cap.sbox.signed(j);
            (to_f64(&a), to_f64(&b))
        })
        .collect();
    let outside = |v: f64, lo: f64, hi: f64| (lo - v).max(v - hi).max(0.0);
    let probe = |t: f64| {
        let s = solve_s(n, t, s0, xi);
        let x = moment_point_ext_f64(n, t, s0, &s);
        let res = (xi[n - 1] - x[n - 1]).abs();
        let v = xi[n] - x[n];
        let mut worst = res.max(outside(t, t0, t1)).max((v.abs() - delta).max(0.0));
        for (sj, &(lo, hi)) in s.iter().zip(&bounds) {
            worst = worst.max(outside(*sj, lo, hi));
        }
        (worst, t, s, v, res)
    };
    let margin = (t1 - t0).max(1e-300) * 1e-3;
    const NODES: usize = 64;
    let (lo, hi) = (t0 - margin, t1 + margin);
    let step = (hi - lo) / NODES as f64;
    let best = (0..=NODES)
        .map(|k| (k, probe(lo + step * k as f64).0))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let (mut a, mut b) = (lo + step * best.saturating_sub(1) as f64, (lo + step * (best + 1) as f64).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        if b - a <= f64::EPSILON * b.abs().max(a.abs()).max(1e-300) {
            break;
        }
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if probe(c).0 <= probe(d).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let (worst, t, s, v, residual) = [a, 0.5 * (a + b), b]
        .into_iter()
        .map(probe)
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .expect("three candidates");
    let scale = xi.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    Ok(Membership { t, s, v, residual, inside: worst <= MEMBERSHIP_TOL * scale })
}

/// Random atoms in each cap's δ-neighborhood; atom 0 of every cap is its center.
pub fn random_test_function(caps: &[Cap], delta: f64, atoms_per_cap: usize, seed: u64) -> Result<TestFunction> {
    if caps.is_empty() {
        return Err(Error::Empty("no caps".into()));
    }
    if atoms_per_cap == 0 {
        return Err(Error::InvalidArgument("atoms_per_cap must be at least 1".into()));
    }
    let n = caps[0].n;
    if let Some(c) = caps.iter().find(|c| c.n != n) {
        return Err(Error::DimensionMismatch { expected: n, got: c.n });
    }
    let mut rng = stream_rng(seed, ATOM_STREAM);
    let mut atoms = Vec::with_capacity(caps.len() * atoms_per_cap);
    for (id, cap) in caps.iter().enumerate() {
        let s0 = to_f64(&cap.s0);
        let (t0, t1) = (to_f64(&cap.t.0), to_f64(&cap.t.1));
        let bounds: Vec<(f64, f64)> = (1..n)
            .map(|j| {
                let (a, b) = cap.sbox.signed(j);
                (to_f64(&a), to_f64(&b))
            })
            .collect();
        for k in 0..atoms_per_cap {
            let (t, s, v) = if k == 0 {
                (to_f64(&cap.t_mid()), cap.sbox.center().iter().map(to_f64).collect::<Vec<_>>(), 0.0)
            } else {
                let t = t0 + (t1 - t0) * rng.gen::<f64>();
                let s = bounds.iter().map(|&(a, b)| a + (b - a) * rng.gen::<f64>()).collect::<Vec<_>>();
                (t, s, delta * (2.0 * rng.gen::<f64>() - 1.0))
            };
            let mut freq = moment_point_ext_f64(n, t, s0, &s);
            freq[n] += v;
            let m = cap_membership(cap, &freq)?;
            if !m.inside {
                return Err(Error::Hypothesis(format!(
                    "atom {k} of cap {id} re-projects outside its cap (t = {}, v = {})",
                    m.t, m.v
                )));
            }
            atoms.push(Atom { freq, amp: Complex64::new(1.0, 0.0), cap: id });
        }
    }
    TestFunction::new(n + 1, caps.len(), atoms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpNorm {
    pub value: f64,
    pub stderr: f64,
    /// Sample mean of |f|^p.
    pub mean_power: f64,
}

fn check_p(p: f64) -> Result<()> {
    if !(2.0..=6.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must lie in [2, 6], got {p}")));
    }
    Ok(())
}

/// Monte Carlo estimate of (∫_box |f|^p)^{1/p} with a delta-method standard error.
pub fn lp_norm(f: &TestFunction, p: f64, plan: &SamplePlan) -> Result<LpNorm> {
    check_p(p)?;
    let pts = plan.points(f.dim, sample_stream(0));
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for x in pts.chunks_exact(f.dim) {
        let w = f.eval(x).norm().powf(p);
        sum += w;
        sum_sq += w * w;
    }
    let count = plan.n_samples as f64;
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0) * count / (count - 1.0);
    let value = (plan.volume(f.dim) * mean).powf(1.0 / p);
    let stderr = if mean > 0.0 { value * (var / count).sqrt() / (p * mean) } else { 0.0 };
    Ok(LpNorm { value, stderr, mean_power: mean })
}

/// Precomputed atom data for the inner loop.
struct Packed {
    dim: usize,
    freq: Vec<f64>,
    amp: Vec<Complex64>,
    cap: Vec<usize>,
    caps: usize,
}

impl Packed {
    fn new(f: &TestFunction) -> Self {
        Packed {
            dim: f.dim,
            freq: f.atoms.iter().flat_map(|a| a.freq.iter().map(|v| v * TAU)).collect(),
            amp: f.atoms.iter().map(|a| a.amp).collect(),
            cap: f.atoms.iter().map(|a| a.cap).collect(),
            caps: f.caps,
        }
    }

    /// For each exponent: (mean |f|^p, mean |f_cap|^p per cap) over the points,
    /// using the first `dim` coordinates of every `stride`-long row.
    fn power_means(&self, ps: &[f64], pts: &[f64], stride: usize) -> Vec<(f64, Vec<f64>)> {
        let mut total = vec![0.0; ps.len()];
        let mut per_cap = vec![vec![0.0; self.caps]; ps.len()];
        let mut parts = vec![Complex64::new(0.0, 0.0); self.caps];
        let count = pts.len() / stride;
        for x in pts.chunks_exact(stride) {
            let x = &x[..self.dim];
            parts.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for (j, xi) in self.freq.chunks_exact(self.dim).enumerate() {
                let (sin, cos) = dot(x, xi).sin_cos();
                let a = self.amp[j];
                let slot = &mut parts[self.cap[j]];
                slot.re += a.re * cos - a.im * sin;
                slot.im += a.re * sin + a.im * cos;
            }
            let sum: Complex64 = parts.iter().sum();
            for (k, &p) in ps.iter().enumerate() {
                let acc = &mut per_cap[k];
                for (a, v) in acc.iter_mut().zip(&parts) {
                    *a += abs_pow(*v, p);
                }
                total[k] += abs_pow(sum, p);
            }
        }
        let c = count as f64;
        total
            .into_iter()
            .zip(per_cap)
            .map(|(t, caps)| (t / c, caps.into_iter().map(|v| v / c).collect()))
            .collect()
    }
}

/// |z|^p through |z|², with integer powers for even integer p.
fn abs_pow(z: Complex64, p: f64) -> f64 {
    let r2 = z.norm_sqr();
    let half = 0.5 * p;
    if half.fract() == 0.0 {
        r2.powi(half as i32)
    } else {
        r2.powf(half)
    }
}

/// Per exponent: lhs = ‖f‖_p, rhs = (Σ_cap ‖f_cap‖_p²)^{1/2} on one sample set.
fn trial_sides(f: &TestFunction, ps: &[f64], pts: &[f64], stride: usize, volume: f64) -> Vec<(f64, f64)> {
    Packed::new(f)
        .power_means(ps, pts, stride)
        .into_iter()
        .zip(ps)
        .map(|((total, per_cap), &p)| {
            let lhs = (volume * total).powf(1.0 / p);
            let rhs = per_cap.iter().map(|m| (volume * m).powf(1.0 / p).powi(2)).sum::<f64>().sqrt();
            (lhs, rhs)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioQuantiles {
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingEstimate {
    pub p: f64,
    pub delta: f64,
    /// Sides of the median trial, so that ratio = lhs / rhs.
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub trials: usize,
    pub ratio_quantiles: RatioQuantiles,
    pub ratios: Vec<f64>,
    pub caps: usize,
    pub atoms: usize,
    pub box_side: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Lower nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).floor() as usize]
}

fn summarize(p: f64, delta: f64, f: &TestFunction, plan: &SamplePlan, sides: Vec<(f64, f64)>) -> DecouplingEstimate {
    let ratios: Vec<f64> = sides.iter().map(|(l, r)| l / r).collect();
    let mut order: Vec<usize> = (0..sides.len()).collect();
    order.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| ratios[i]).collect();
    let mid = order[(order.len() - 1) / 2];
    DecouplingEstimate {
        p,
        delta,
        lhs: sides[mid].0,
        rhs: sides[mid].1,
        ratio: ratios[mid],
        trials: sides.len(),
        ratio_quantiles: RatioQuantiles {
            min: sorted[0],
            p25: quantile(&sorted, 0.25),
            p50: quantile(&sorted, 0.5),
            p75: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        },
        ratios,
        caps: f.caps,
        atoms: f.atoms.len(),
        box_side: plan.box_side,
        n_samples: plan.n_samples,
        seed: plan.seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phases {
    /// Fresh uniform phases per trial.
    Random,
    /// Unit amplitudes in every trial; trials differ only in sample points.
    Coherent,
}

/// Ratio of the two sides over independent trials of a fixed frequency set.
pub fn estimate_ratio(
    f: &TestFunction,
    p: f64,
    delta: f64,
    trials: usize,
    plan: &SamplePlan,
    phases: Phases,
) -> Result<DecouplingEstimate> {
    Ok(estimate_ratios(f, &[p], delta, trials, plan, phases)?.remove(0))
}

/// [`estimate_ratio`] for several exponents sharing the same phases and samples.
pub fn estimate_ratios(
    f: &TestFunction,
    ps: &[f64],
    delta: f64,
    trials: usize,
    plan: &SamplePlan,
    phases: Phases,
) -> Result<Vec<DecouplingEstimate>> {
    ps.iter().try_for_each(|&p| check_p(p))?;
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let volume = plan.volume(f.dim);
    let sides: Vec<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let g = match phases {
                Phases::Random => f.rephased(&mut stream_rng(plan.seed, phase_stream(trial))),
                Phases::Coherent => f.coherent(),
            };
            let pts = plan.points(f.dim, sample_stream(trial));
            trial_sides(&g, ps, &pts, f.dim, volume)
        })
        .collect();
    Ok(ps
        .iter()
        .enumerate()
        .map(|(k, &p)| summarize(p, delta, f, plan, sides.iter().map(|s| s[k]).collect()))
        .collect())
}

pub const MIN_TRIALS: usize = 8;

/// Decoupling ratio of a partition with `atoms_per_cap` random atoms per cap.
pub fn decoupling_ratio_caps(
    caps: &[Cap],
    delta: f64,
    p: f64,
    trials: usize,
    atoms_per_cap: usize,
    plan: &SamplePlan,
) -> Result<DecouplingEstimate> {
    Ok(decoupling_ratios_caps(caps, delta, &[p], trials, atoms_per_cap, plan)?.remove(0))
}

/// [`decoupling_ratio_caps`] for several exponents on one set of trials.
pub fn decoupling_ratios_caps(
    caps: &[Cap],
    delta: f64,
    ps: &[f64],
    trials: usize,
    atoms_per_cap: usize,
    plan: &SamplePlan,
) -> Result<Vec<DecouplingEstimate>> {
    ps.iter().try_for_each(|&p| check_p(p))?;
    if trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let f = random_test_function(caps, delta, atoms_per_cap, plan.seed)?;
    estimate_ratios(&f, ps, delta, trials, plan, Phases::Random)
}

pub fn decoupling_ratio(report: &PartitionReport, p: f64, trials: usize, plan: &SamplePlan) -> Result<DecouplingEstimate> {
    let caps: Vec<Cap> = report.caps().collect();
    decoupling_ratio_caps(&caps, to_f64(&report.delta), p, trials, DEFAULT_ATOMS_PER_CAP, plan)
}

/// Canonical partition of the parabola (t, t²), t in [0, 1], into intervals of
/// length dyadic_floor(δ^{1/2}).
pub fn parabola_caps(delta: f64) -> Result<Vec<(f64, f64)>> {
    let dq = from_f64(delta)
        .filter(|d| *d > Q::from_integer(0.into()) && *d < Q::from_integer(1.into()))
        .ok_or_else(|| Error::InvalidArgument(format!("δ must lie in (0, 1), got {delta}")))?;
    let len = to_f64(&Radical::new(Q::from_integer(1.into()), dq, 1, 2).dyadic_floor());
    let count = (1.0 / len).round() as usize;
    Ok((0..count).map(|k| (k as f64 * len, (k + 1) as f64 * len)).collect())
}

/// Planar test function on parabola caps; atom 0 of each cap sits at its center on the curve.
pub fn parabola_test_function(caps: &[(f64, f64)], delta: f64, atoms_per_cap: usize, seed: u64) -> Result<TestFunction> {
    if caps.is_empty() {
        return Err(Error::Empty("no parabola caps".into()));
    }
    if atoms_per_cap == 0 {
        return Err(Error::InvalidArgument("atoms_per_cap must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, ATOM_STREAM);
    let mut atoms = Vec::new();
    for (id, &(a, b)) in caps.iter().enumerate() {
        for k in 0..atoms_per_cap {
            let (t, v) = if k == 0 {
                (0.5 * (a + b), 0.0)
            } else {
                (a + (b - a) * rng.gen::<f64>(), delta * (2.0 * rng.gen::<f64>() - 1.0))
            };
            atoms.push(Atom { freq: vec![t, t * t + v], amp: Complex64::new(1.0, 0.0), cap: id });
        }
    }
    TestFunction::new(2, caps.len(), atoms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub delta: f64,
    pub p: f64,
    /// Largest ratio observed over all trial families.
    pub value: f64,
    pub coherent_ratio: f64,
    pub random: DecouplingEstimate,
}

/// Smallest δ the oracle accepts.
pub const ORACLE_MIN_DELTA: f64 = 1.0 / 65536.0;

/// Empirical parabola decoupling constant: the worst ratio over random-phase
/// trials and the all-ones profile, one atom per cap at its center.
pub fn parabola_dec_oracle(delta: f64, p: f64, trials: usize, plan: &SamplePlan) -> Result<OracleEstimate> {
    check_p(p)?;
    if delta < ORACLE_MIN_DELTA {
        return Err(Error::CostGuard(format!("δ = {delta} is below the oracle floor 2^-16")));
    }
    let caps = parabola_caps(delta)?;
    let f = parabola_test_function(&caps, delta, 1, plan.seed)?;
    let random = estimate_ratio(&f, p, delta, trials, plan, Phases::Random)?;
    let coherent = estimate_ratio(&f, p, delta, 1, plan, Phases::Coherent)?;
    Ok(OracleEstimate {
        delta,
        p,
        value: random.ratio_quantiles.max.max(coherent.ratio),
        coherent_ratio: coherent.ratio,
        random,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftCheck {
    pub base: DecouplingEstimate,
    pub lifted: DecouplingEstimate,
    pub lift_width: f64,
}

/// Ratios for a planar parabola family and for its cylinder lift, whose third
/// frequency coordinate is uniform in [0, lift_width]. Both use the same phases
/// and the same sample points (the base ignores the third coordinate).
pub fn cylindrical_lift_check(
    caps: &[(f64, f64)],
    delta: f64,
    p: f64,
    trials: usize,
    atoms_per_cap: usize,
    lift_width: f64,
    plan: &SamplePlan,
) -> Result<LiftCheck> {
    check_p(p)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let base = parabola_test_function(caps, delta, atoms_per_cap, plan.seed)?;
    let mut lift_rng = stream_rng(plan.seed, LIFT_STREAM);
    let heights: Vec<f64> = (0..base.atoms.len()).map(|_| lift_width * lift_rng.gen::<f64>()).collect();
    let lifted = base.lifted(|j| heights[j]);
    let (vb, vl) = (plan.volume(2), plan.volume(3));
    let sides: Vec<((f64, f64), (f64, f64))> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(plan.seed, phase_stream(trial));
            let phased = lifted.rephased(&mut rng);
            let mut flat = base.clone();
            for (a, b) in flat.atoms.iter_mut().zip(&phased.atoms) {
                a.amp = b.amp;
            }
            let pts = plan.points(3, sample_stream(trial));
            (trial_sides(&flat, &[p], &pts, 3, vb)[0], trial_sides(&phased, &[p], &pts, 3, vl)[0])
        })
        .collect();
    let (sb, sl): (Vec<_>, Vec<_>) = sides.into_iter().unzip();
    Ok(LiftCheck {
        base: summarize(p, delta, &base, plan, sb),
        lifted: summarize(p, delta, &lifted, plan, sl),
        lift_width,
    })
}
