//! Dyadic annuli and the cap partitions built on them.
//!
//! Partitions are emitted as [`CapFamily`] values: one s-box times a run of equal
//! t-pieces. Flatness and rectangularity are translation invariant in t, so every
//! check runs on a representative piece; tiling runs on the family boxes.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::Instant;

use num::traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{certify_nondegeneracy, taylor_residual_bound, top_derivative_bound, Curve};
use crate::error::{Error, Result};
use crate::exact::{
    dyadic_ceil, dyadic_floor, exact_log2, factorial_q, fmt_q, from_f64, pow2, qf, qi, qmax, qmin, qpow,
    to_f64, Radical, Q,
};
use crate::geometry::{
    apply_map, c_constant, dilation_map, flatness_deficit, is_almost_rectangular, is_standardized,
    overlap_counts_from_starts, AffineMap, Cap, OverlapCounts, SBox, SRange, Sign, FLATNESS_TOLERANCE,
};

/// Default ε for the iterative construction.
pub fn default_eps() -> Q {
    qf(1, 8)
}

/// Extra bits kept when rounding a dilation factor inside its J window.
const DILATION_BITS: u32 = 8;

/// Bits kept for irrational thresholds recorded in the ledger.
const THRESHOLD_BITS: u32 = 32;

/// Upper bound on the length halvings used to repair flatness.
const MAX_HALVINGS: u32 = 16;

fn check_delta(delta: &Q) -> Result<()> {
    if !delta.is_positive() || *delta >= qf(1, 2) {
        return Err(Error::InvalidArgument(format!("δ = {} must lie in (0, 1/2)", fmt_q(delta))));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("partitions need n >= 3, got {n}")));
    }
    Ok(())
}

/// k̄_j for j = 1..n-1: the unique integer with 2^{1-k̄} <= δ^{j/(n+1)}/j! < 2^{2-k̄}.
pub fn kbar(n: usize, delta: &Q) -> Result<Vec<u32>> {
    check_delta(delta)?;
    Ok(kbar_unchecked(n, delta))
}

fn kbar_unchecked(n: usize, delta: &Q) -> Vec<u32> {
    (1..n)
        .map(|j| {
            let bound = Radical::new(factorial_q(j as u32).recip(), delta.clone(), j as i64, n as i64 + 1);
            let e = exact_log2(&bound.dyadic_floor()).expect("power of two");
            (1 - e).max(0) as u32
        })
        .collect()
}

/// One dyadic annulus 𝒜^α_k: |s_j| in [2^{-k_j}, 2^{1-k_j}), or [0, 2^{1-k̄_j}) in the last slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnulusIndex {
    pub n: usize,
    #[serde(with = "crate::exact::qser")]
    pub delta: Q,
    pub alpha: Vec<Sign>,
    pub k: Vec<u32>,
}

impl AnnulusIndex {
    /// Validates 0 <= k_j <= k̄_j.
    pub fn new(n: usize, delta: Q, alpha: Vec<Sign>, k: Vec<u32>) -> Result<Self> {
        check_n(n)?;
        let kb = kbar(n, &delta)?;
        if alpha.len() != n - 1 || k.len() != n - 1 {
            return Err(Error::DimensionMismatch { expected: n - 1, got: k.len().min(alpha.len()) });
        }
        for (j, (&kj, &b)) in k.iter().zip(&kb).enumerate() {
            if kj > b {
                return Err(Error::OutOfRange(format!("k_{} = {kj} exceeds k̄ = {b}", j + 1)));
            }
        }
        Ok(AnnulusIndex { n, delta, alpha, k })
    }

    pub fn kbar(&self) -> Vec<u32> {
        kbar_unchecked(self.n, &self.delta)
    }

    pub fn srange(&self, j: usize) -> SRange {
        annulus_slot(self.k[j - 1], self.kbar()[j - 1])
    }

    pub fn sbox(&self) -> SBox {
        let kb = self.kbar();
        SBox::new(self.alpha.clone(), self.k.iter().zip(&kb).map(|(&k, &b)| annulus_slot(k, b)).collect())
    }

    /// Cap over t in [-1, 1] and the whole annulus.
    pub fn cap(&self) -> Cap {
        Cap::new(self.n, self.delta.clone(), (qi(-1), qi(1)), self.sbox())
    }

    /// Some coordinate sits in a genuine dyadic shell.
    pub fn has_shell(&self) -> bool {
        self.k.iter().zip(self.kbar()).any(|(&k, b)| k < b)
    }
}

fn annulus_slot(k: u32, kbar: u32) -> SRange {
    if k == kbar {
        SRange::Zero { hi: pow2(1 - kbar as i64) }
    } else {
        SRange::Dyadic { k }
    }
}

/// Every annulus index in a fixed order: sign patterns outermost, then k lexicographically.
pub fn dyadic_annuli(n: usize, delta: &Q) -> Result<Vec<AnnulusIndex>> {
    check_n(n)?;
    let kb = kbar(n, delta)?;
    let ks = k_vectors(&kb);
    let mut out = Vec::with_capacity(ks.len() << (n - 1));
    for alpha in Sign::patterns(n - 1) {
        for k in &ks {
            out.push(AnnulusIndex { n, delta: delta.clone(), alpha: alpha.clone(), k: k.clone() });
        }
    }
    Ok(out)
}

fn k_vectors(kb: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for &b in kb {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..=b).map(move |k| {
                    let mut v = prefix.clone();
                    v.push(k);
                    v
                })
            })
            .collect();
    }
    out
}

/// An s-box times [t_lo, t_hi] cut into `pieces` equal t-intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapFamily {
    /// The cap spanning the whole t-range of the family.
    pub cap: Cap,
    pub pieces: u64,
}

impl CapFamily {
    /// Cut the template's t-range into pieces of exactly `len`.
    pub fn uniform(template: Cap, len: &Q) -> Result<Self> {
        let count = template.t_len() / len;
        if !count.is_integer() || !count.is_positive() {
            return Err(Error::InvalidArgument(format!(
                "piece length {} does not divide the t-range {}",
                fmt_q(len),
                fmt_q(&template.t_len())
            )));
        }
        let pieces = count.to_integer().to_u64().ok_or_else(|| Error::CostGuard("too many pieces".into()))?;
        Ok(CapFamily { cap: template, pieces })
    }

    pub fn piece_len(&self) -> Q {
        self.cap.t_len() / qi(self.pieces as i64)
    }

    pub fn piece(&self, idx: u64) -> Cap {
        assert!(idx < self.pieces);
        let len = self.piece_len();
        let mut c = self.cap.clone();
        let lo = &self.cap.t.0 + &len * qi(idx as i64);
        c.t = (lo.clone(), lo + len);
        c
    }

    pub fn representative(&self) -> Cap {
        self.piece(0)
    }

    pub fn caps(&self) -> impl Iterator<Item = Cap> + '_ {
        (0..self.pieces).map(|i| self.piece(i))
    }

    pub fn volume(&self) -> Q {
        self.cap.volume()
    }

    /// Flatness deficit of one piece over δ.
    pub fn flatness_ratio(&self) -> f64 {
        let rep = self.representative();
        to_f64(&(flatness_deficit(&rep).upper / &rep.delta))
    }
}

/// Target region for tiling: t-interval times signed s-intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(with = "crate::exact::qvec")]
    pub t: Vec<Q>,
    pub s: Vec<SignedInterval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedInterval {
    #[serde(with = "crate::exact::qser")]
    pub lo: Q,
    #[serde(with = "crate::exact::qser")]
    pub hi: Q,
}

impl Region {
    /// [-1, 1] × [-2, 2]^{n-1}.
    pub fn full(n: usize) -> Self {
        Region {
            t: vec![qi(-1), qi(1)],
            s: (1..n).map(|_| SignedInterval { lo: qi(-2), hi: qi(2) }).collect(),
        }
    }

    pub fn from_annulus(a: &AnnulusIndex) -> Self {
        Region::from_sbox(&a.sbox(), (qi(-1), qi(1)))
    }

    pub fn from_sbox(sbox: &SBox, t: (Q, Q)) -> Self {
        Region {
            t: vec![t.0, t.1],
            s: (1..=sbox.dim())
                .map(|j| {
                    let (lo, hi) = sbox.signed(j);
                    SignedInterval { lo, hi }
                })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.s.len() + 1
    }

    fn bounds(&self) -> Vec<(Q, Q)> {
        std::iter::once((self.t[0].clone(), self.t[1].clone()))
            .chain(self.s.iter().map(|i| (i.lo.clone(), i.hi.clone())))
            .collect()
    }

    pub fn volume(&self) -> Q {
        self.bounds().iter().map(|(a, b)| b - a).fold(Q::one(), |x, y| x * y)
    }
}

/// Result of an exact tiling check with the first failure, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilingOutcome {
    pub ok: bool,
    pub reason: Option<String>,
}

impl TilingOutcome {
    fn pass() -> Self {
        TilingOutcome { ok: true, reason: None }
    }

    fn fail(reason: String) -> Self {
        TilingOutcome { ok: false, reason: Some(reason) }
    }
}

/// Exact coordinate plus an f64 copy flagged when the copy is exact.
#[derive(Clone)]
struct Coord {
    q: Q,
    f: f64,
    exact: bool,
}

impl Coord {
    fn new(q: Q) -> Self {
        let f = to_f64(&q);
        let exact = from_f64(f).is_some_and(|back| back == q);
        Coord { q, f, exact }
    }

    fn cmp(&self, other: &Coord) -> Ordering {
        if self.exact && other.exact {
            self.f.partial_cmp(&other.f).unwrap()
        } else {
            self.q.cmp(&other.q)
        }
    }
}

type BoxCoords = Vec<(Coord, Coord)>;

fn family_box(cap: &Cap) -> BoxCoords {
    std::iter::once((Coord::new(cap.t.0.clone()), Coord::new(cap.t.1.clone())))
        .chain((1..cap.n).map(|j| {
            let (lo, hi) = cap.sbox.signed(j);
            (Coord::new(lo), Coord::new(hi))
        }))
        .collect()
}

fn interiors_meet(a: &BoxCoords, b: &BoxCoords) -> bool {
    a.iter().zip(b).all(|(x, y)| x.0.cmp(&y.1) == Ordering::Less && y.0.cmp(&x.1) == Ordering::Less)
}

const LEAF_SIZE: usize = 16;

/// Finds an interior-overlapping pair by recursive median splits over the axes.
fn find_overlap(boxes: &[BoxCoords], ids: Vec<usize>, depth: usize) -> Option<(usize, usize)> {
    if ids.len() <= LEAF_SIZE || depth > 200 {
        return pairwise_overlap(boxes, &ids);
    }
    let dims = boxes[ids[0]].len();
    for shift in 0..dims {
        let axis = (depth + shift) % dims;
        let mut los: Vec<&Coord> = ids.iter().map(|&i| &boxes[i][axis].0).collect();
        los.sort_by(|a, b| a.cmp(b));
        let cut = los[los.len() / 2].clone();
        if los[0].cmp(&cut) == Ordering::Equal {
            continue;
        }
        let left: Vec<usize> = ids.iter().copied().filter(|&i| boxes[i][axis].0.cmp(&cut) == Ordering::Less).collect();
        let right: Vec<usize> =
            ids.iter().copied().filter(|&i| boxes[i][axis].1.cmp(&cut) == Ordering::Greater).collect();
        if left.len() == ids.len() || right.len() == ids.len() {
            continue;
        }
        return find_overlap(boxes, left, depth + 1).or_else(|| find_overlap(boxes, right, depth + 1));
    }
    pairwise_overlap(boxes, &ids)
}

fn pairwise_overlap(boxes: &[BoxCoords], ids: &[usize]) -> Option<(usize, usize)> {
    for (a, &i) in ids.iter().enumerate() {
        for &j in &ids[a + 1..] {
            if interiors_meet(&boxes[i], &boxes[j]) {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

/// Exact check that the families have disjoint interiors and exactly cover the region.
///
/// Containment plus equal total volume plus pairwise interior-disjointness is equivalent
/// to an exact tiling up to measure zero.
pub fn tiling_check_families(families: &[CapFamily], region: &Region) -> Result<TilingOutcome> {
    for f in families {
        if f.cap.n != region.n() {
            return Err(Error::CoordinateMismatch(format!("cap has n = {}, region has n = {}", f.cap.n, region.n())));
        }
        if f.pieces == 0 {
            return Ok(TilingOutcome::fail("empty family".into()));
        }
    }
    let bounds = region.bounds();
    let mut total = Q::zero();
    let boxes: Vec<BoxCoords> = families.iter().map(|f| family_box(&f.cap)).collect();
    let rb: Vec<(Coord, Coord)> = bounds.iter().map(|(a, b)| (Coord::new(a.clone()), Coord::new(b.clone()))).collect();
    for (idx, (f, b)) in families.iter().zip(&boxes).enumerate() {
        for (axis, ((lo, hi), (rlo, rhi))) in b.iter().zip(&rb).enumerate() {
            if lo.cmp(rlo) == Ordering::Less || hi.cmp(rhi) == Ordering::Greater || lo.cmp(hi) != Ordering::Less {
                return Ok(TilingOutcome::fail(format!("family {idx} leaves the region on axis {axis}")));
            }
        }
        total += f.volume();
    }
    let target = region.volume();
    if total != target {
        return Ok(TilingOutcome::fail(format!("volume {} differs from region volume {}", fmt_q(&total), fmt_q(&target))));
    }
    if let Some((i, j)) = find_overlap(&boxes, (0..boxes.len()).collect(), 0) {
        return Ok(TilingOutcome::fail(format!("families {i} and {j} overlap")));
    }
    Ok(TilingOutcome::pass())
}

/// Exact tiling check for individual caps.
pub fn tiling_check(caps: &[Cap], region: &Region) -> Result<bool> {
    let fams: Vec<CapFamily> = caps.iter().map(|c| CapFamily { cap: c.clone(), pieces: 1 }).collect();
    Ok(tiling_check_families(&fams, region)?.ok)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Endcap,
    /// Two-scale n = 3 construction.
    Moment3,
    Iterative,
    Rectangular,
    Flat,
    Curve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Endcap,
    Moment3,
    Iterative,
    Rectangular,
}

/// What happened to one annulus (or rectangular group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusRoute {
    pub alpha: Vec<Sign>,
    pub k: Vec<u32>,
    pub route: Route,
    #[serde(with = "crate::exact::qser")]
    pub t_len: Q,
    /// n = 3 case label.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub case: Option<String>,
    /// Whether 2^{2k1-3k2} < δ selected the length 2^{k1-k2}.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub short_branch: Option<bool>,
    /// T over the a-priori length bound, before flatness repairs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound_ratio: Option<f64>,
    #[serde(default)]
    pub halvings: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timings {
    pub construct_ms: f64,
    pub verify_ms: f64,
}

/// Full output of a partition operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub kind: PartitionKind,
    pub n: usize,
    #[serde(with = "crate::exact::qser")]
    pub delta: Q,
    #[serde(with = "crate::exact::qser")]
    pub eps: Q,
    pub families: Vec<CapFamily>,
    pub cap_count: u64,
    pub routes: Vec<AnnulusRoute>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ledger: Option<IterationLedger>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rect: Option<RectSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve: Option<CurveLedger>,
    pub tiling_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tiling_note: Option<String>,
    /// Fraction of caps with flatness deficit <= 10 δ.
    pub flat_fraction: f64,
    pub max_flatness_ratio: f64,
    /// Fraction of caps accepted by the rectangularity test in force for this kind.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rect_fraction: Option<f64>,
    #[serde(skip)]
    pub timings: Timings,
}

impl PartitionReport {
    fn assemble(
        kind: PartitionKind,
        n: usize,
        delta: &Q,
        eps: &Q,
        families: Vec<CapFamily>,
        routes: Vec<AnnulusRoute>,
        region: &Region,
        started: Instant,
    ) -> Result<Self> {
        let construct_ms = started.elapsed().as_secs_f64() * 1e3;
        let verify_start = Instant::now();
        let tiling = tiling_check_families(&families, region)?;
        let cap_count = families.iter().map(|f| f.pieces).sum();
        let ratios: Vec<f64> = families.par_iter().map(CapFamily::flatness_ratio).collect();
        let (flat_fraction, max_flatness_ratio) = weighted_fraction(&families, &ratios, FLATNESS_TOLERANCE as f64);
        Ok(PartitionReport {
            kind,
            n,
            delta: delta.clone(),
            eps: eps.clone(),
            families,
            cap_count,
            routes,
            ledger: None,
            rect: None,
            curve: None,
            tiling_ok: tiling.ok,
            tiling_note: tiling.reason,
            flat_fraction,
            max_flatness_ratio,
            rect_fraction: None,
            timings: Timings { construct_ms, verify_ms: verify_start.elapsed().as_secs_f64() * 1e3 },
        })
    }

    /// All caps, expanded from the families.
    pub fn caps(&self) -> impl Iterator<Item = Cap> + '_ {
        self.families.iter().flat_map(CapFamily::caps)
    }

    /// Concatenate reports of the same kind in order (families, routes).
    pub fn merge(mut self, other: PartitionReport) -> Result<PartitionReport> {
        if self.n != other.n || self.delta != other.delta {
            return Err(Error::CoordinateMismatch("reports differ in n or δ".into()));
        }
        let total = (self.cap_count + other.cap_count).max(1) as f64;
        self.flat_fraction = (self.flat_fraction * self.cap_count as f64
            + other.flat_fraction * other.cap_count as f64)
            / total;
        self.max_flatness_ratio = self.max_flatness_ratio.max(other.max_flatness_ratio);
        self.cap_count += other.cap_count;
        self.families.extend(other.families);
        self.routes.extend(other.routes);
        self.tiling_ok = false;
        self.tiling_note = Some("merged; re-run tiling_check against the union region".into());
        Ok(self)
    }
}

/// Cap-weighted fraction of families with ratio <= tol, plus the max ratio.
fn weighted_fraction(families: &[CapFamily], ratios: &[f64], tol: f64) -> (f64, f64) {
    let total: u64 = families.iter().map(|f| f.pieces).sum();
    let good: u64 = families.iter().zip(ratios).filter(|(_, &r)| r <= tol).map(|(f, _)| f.pieces).sum();
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    (if total == 0 { 0.0 } else { good as f64 / total as f64 }, max)
}

fn annulus_family(a: &AnnulusIndex, len: &Q) -> Result<CapFamily> {
    CapFamily::uniform(a.cap(), len)
}

/// Endcap t-length D/n with D = δ^{1/(n+1)} (exact when a power of two, else its dyadic floor).
///
/// 2n/D is an integer, so the pieces tile [-1, 1] exactly.
pub fn endcap_length(n: usize, delta: &Q) -> Q {
    let d = Radical::new(Q::one(), delta.clone(), 1, n as i64 + 1).dyadic_floor();
    d / qi(n as i64)
}

/// Endcap route for the all-k̄ annuli (every sign pattern).
pub fn endcap_partition(n: usize, delta: &Q) -> Result<PartitionReport> {
    check_n(n)?;
    let started = Instant::now();
    let kb = kbar(n, delta)?;
    let len = endcap_length(n, delta);
    let mut families = Vec::new();
    let mut routes = Vec::new();
    for alpha in Sign::patterns(n - 1) {
        let a = AnnulusIndex { n, delta: delta.clone(), alpha: alpha.clone(), k: kb.clone() };
        families.push(annulus_family(&a, &len)?);
        routes.push(endcap_route(&a, &len));
    }
    let region = Region {
        t: vec![qi(-1), qi(1)],
        s: kb.iter().map(|&b| SignedInterval { lo: -pow2(1 - b as i64), hi: pow2(1 - b as i64) }).collect(),
    };
    PartitionReport::assemble(PartitionKind::Endcap, n, delta, &default_eps(), families, routes, &region, started)
}

fn endcap_route(a: &AnnulusIndex, len: &Q) -> AnnulusRoute {
    AnnulusRoute {
        alpha: a.alpha.clone(),
        k: a.k.clone(),
        route: Route::Endcap,
        t_len: len.clone(),
        case: None,
        short_branch: None,
        bound_ratio: None,
        halvings: 0,
    }
}

/// The two-scale n = 3 route applies when 2^{-k_i} > δ^{i/4} for some i.
pub fn m3_applicable(delta: &Q, k1: u32, k2: u32) -> bool {
    [(1, k1), (2, k2)]
        .iter()
        .any(|&(i, k)| Radical::new(Q::one(), delta.clone(), i, 4).cmp_q(&pow2(-(k as i64))) == Ordering::Less)
}

/// n = 3 cap length: dyadic floor of min{2^{k1-k2}, (2^{k2} δ)^{1/2}}.
pub fn m3_length(delta: &Q, k1: u32, k2: u32) -> Q {
    let short = pow2(k1 as i64 - k2 as i64);
    let curv = Radical::new(Q::one(), pow2(k2 as i64) * delta, 1, 2);
    let m = if curv.cmp_q(&short) == Ordering::Less { curv.dyadic_floor() } else { short };
    dyadic_floor(&m)
}

/// (case label, whether the short branch 2^{k1-k2} was taken).
pub fn m3_case(delta: &Q, k1: u32, k2: u32) -> (String, bool) {
    if 2 * k1 >= k2 {
        ("2k1>=k2".to_string(), false)
    } else {
        let flip = pow2(2 * k1 as i64 - 3 * k2 as i64) < *delta;
        ("k2>2k1".to_string(), flip)
    }
}

/// Two-scale partition of one n = 3 annulus.
pub fn partition_m3(delta: &Q, k1: u32, k2: u32, alpha: [Sign; 2]) -> Result<PartitionReport> {
    let started = Instant::now();
    let a = AnnulusIndex::new(3, delta.clone(), alpha.to_vec(), vec![k1, k2])?;
    if !m3_applicable(delta, k1, k2) {
        return Err(Error::NotApplicable(format!("(k1, k2) = ({k1}, {k2}) belongs to the endcap partition")));
    }
    let (fam, route) = m3_family(&a)?;
    let region = Region::from_annulus(&a);
    let mut report =
        PartitionReport::assemble(PartitionKind::Moment3, 3, delta, &default_eps(), vec![fam], vec![route], &region, started)?;
    report.rect_fraction = Some(m3_length_fraction(&report.families));
    Ok(report)
}

fn m3_family(a: &AnnulusIndex) -> Result<(CapFamily, AnnulusRoute)> {
    let (k1, k2) = (a.k[0], a.k[1]);
    let len = m3_length(&a.delta, k1, k2);
    let (case, flip) = m3_case(&a.delta, k1, k2);
    let fam = annulus_family(a, &len)?;
    let route = AnnulusRoute {
        alpha: a.alpha.clone(),
        k: a.k.clone(),
        route: Route::Moment3,
        t_len: len,
        short_branch: (case == "k2>2k1").then_some(flip),
        case: Some(case),
        bound_ratio: None,
        halvings: 0,
    };
    Ok((fam, route))
}

/// Slack on the length condition for n = 3 caps; the curvature term carries √24.
pub const M3_LENGTH_SLACK: f64 = 5.0;

/// Fraction of caps whose length is within [`M3_LENGTH_SLACK`] of the length-condition minimum.
fn m3_length_fraction(families: &[CapFamily]) -> f64 {
    let ok: Vec<f64> = families
        .iter()
        .map(|f| match is_almost_rectangular(&f.representative()) {
            Ok(r) if r.t_len <= M3_LENGTH_SLACK * r.length_min => 0.0,
            _ => f64::INFINITY,
        })
        .collect();
    weighted_fraction(families, &ok, 0.0).0
}

/// Every annulus through its flat route, tiled against [-1,1] × [-2,2]^{n-1}.
///
/// n = 3 uses the two-scale partition or the endcap; n >= 4 the iterative partition or the endcap.
pub fn flat_partition(n: usize, delta: &Q, eps: &Q) -> Result<PartitionReport> {
    check_n(n)?;
    check_eps(eps)?;
    let started = Instant::now();
    let kb = kbar(n, delta)?;
    let ks = k_vectors(&kb);
    // The constructions depend on magnitudes only; compute once per k and reuse for every sign.
    let per_k: Vec<(Q, AnnulusRoute)> = ks
        .par_iter()
        .map(|k| {
            let a = AnnulusIndex { n, delta: delta.clone(), alpha: vec![Sign::Plus; n - 1], k: k.clone() };
            flat_route(&a, eps)
        })
        .collect::<Result<_>>()?;
    let mut families = Vec::with_capacity(per_k.len() << (n - 1));
    let mut routes = Vec::with_capacity(families.capacity());
    for alpha in Sign::patterns(n - 1) {
        for (k, (len, route)) in ks.iter().zip(&per_k) {
            let a = AnnulusIndex { n, delta: delta.clone(), alpha: alpha.clone(), k: k.clone() };
            families.push(annulus_family(&a, len)?);
            let mut r = route.clone();
            r.alpha = alpha.clone();
            routes.push(r);
        }
    }
    let mut report =
        PartitionReport::assemble(PartitionKind::Flat, n, delta, eps, families, routes, &Region::full(n), started)?;
    if n == 3 {
        let m3: Vec<CapFamily> = report
            .families
            .iter()
            .zip(&report.routes)
            .filter(|(_, r)| r.route == Route::Moment3)
            .map(|(f, _)| f.clone())
            .collect();
        report.rect_fraction = Some(m3_length_fraction(&m3));
    }
    Ok(report)
}

/// One annulus through its flat route, tiled against the annulus itself.
pub fn annulus_partition(a: &AnnulusIndex, eps: &Q) -> Result<PartitionReport> {
    check_n(a.n)?;
    check_eps(eps)?;
    let started = Instant::now();
    let (len, route) = flat_route(a, eps)?;
    let families = vec![annulus_family(a, &len)?];
    let region = Region::from_annulus(a);
    PartitionReport::assemble(PartitionKind::Flat, a.n, &a.delta, eps, families, vec![route], &region, started)
}

fn check_eps(eps: &Q) -> Result<()> {
    if !eps.is_positive() || *eps > qf(1, 4) {
        return Err(Error::InvalidArgument(format!("ε = {} must lie in (0, 1/4]", fmt_q(eps))));
    }
    Ok(())
}

/// Route and t-length for one annulus (sign ignored).
fn flat_route(a: &AnnulusIndex, eps: &Q) -> Result<(Q, AnnulusRoute)> {
    let n = a.n;
    if n == 3 {
        if m3_applicable(&a.delta, a.k[0], a.k[1]) {
            let (_, route) = m3_family(a)?;
            return Ok((route.t_len.clone(), route));
        }
        let len = endcap_length(n, &a.delta);
        return Ok((len.clone(), endcap_route(a, &len)));
    }
    if !a.has_shell() {
        let len = endcap_length(n, &a.delta);
        return Ok((len.clone(), endcap_route(a, &len)));
    }
    let outcome = match iterate_annulus(a, eps, false) {
        Err(Error::NotApplicable(_)) => {
            let len = endcap_length(n, &a.delta);
            return Ok((len.clone(), endcap_route(a, &len)));
        }
        other => other?,
    };
    let route = AnnulusRoute {
        alpha: a.alpha.clone(),
        k: a.k.clone(),
        route: Route::Iterative,
        t_len: outcome.ledger.final_length.clone(),
        case: None,
        short_branch: None,
        bound_ratio: Some(outcome.ledger.bound_ratio),
        halvings: outcome.ledger.halvings,
    };
    Ok((outcome.ledger.final_length.clone(), route))
}

// ---------------------------------------------------------------------------
// Iterative partition (n >= 4)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    IndexMaximal,
    BelowThreshold,
}

/// One rescaling step of the first explored branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerStep {
    pub l: usize,
    /// Pivot before the step (i_{l-1}; 0 at the first step).
    pub pivot: usize,
    /// Chosen index i_l.
    pub index: usize,
    #[serde(with = "crate::exact::qser")]
    pub d: Q,
    /// Scale before the dilation.
    #[serde(with = "crate::exact::qser")]
    pub delta_before: Q,
    /// Scale after the dilation.
    #[serde(with = "crate::exact::qser")]
    pub delta: Q,
    /// 𝒮 values for indices pivot+1..n-1 (anchored slots at level 0 reported as 0).
    pub s_values: Vec<f64>,
    /// a_i thresholds used for 𝒮.
    #[serde(with = "crate::exact::qvec")]
    pub thresholds: Vec<Q>,
    pub floored: Vec<bool>,
    pub map_id: String,
    /// Number of J intervals the chosen coordinate was split into.
    pub j_count: u64,
    pub standardized: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standardization_failure: Option<String>,
    #[serde(with = "crate::exact::qser")]
    pub t_standard: Q,
}

/// One interval-halving step of a shrink run (or the level-0 split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStep {
    pub component: usize,
    pub e: f64,
    pub children: usize,
    pub counts: OverlapCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRecord {
    pub branch: usize,
    pub level: usize,
    pub component: usize,
    #[serde(with = "crate::exact::qser")]
    pub start_len: Q,
    #[serde(with = "crate::exact::qser")]
    pub target_len: Q,
    pub steps: Vec<OverlapStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLedger {
    pub k: Vec<u32>,
    pub steps: Vec<LedgerStep>,
    pub termination: Termination,
    /// Number of rescalings N on the first branch.
    pub big_n: usize,
    pub branches: usize,
    /// Largest N over all explored branches.
    pub max_steps: usize,
    pub all_standardized: bool,
    /// Standardization on every branch whose dilations all have d >= 1.
    pub standardized_expanding: bool,
    /// Distinct failed standardization clauses over all branches.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub standardization_failures: Vec<String>,
    /// δ_l grows on every step whose J anchor lies below c_{i+1}.
    pub deltas_increasing: bool,
    pub deltas_at_most_one: bool,
    pub shrink_runs: Vec<ShrinkRecord>,
    #[serde(with = "crate::exact::qser")]
    pub dilation_product: Q,
    /// Length before the flatness repair.
    #[serde(with = "crate::exact::qser")]
    pub raw_length: Q,
    #[serde(with = "crate::exact::qser")]
    pub final_length: Q,
    /// raw_length over the a-priori bound min{min_i(...)^{1/(n-1-i)}, (2^{k_{n-1}}δ/(n+1)!)^{1/2}}.
    pub bound_ratio: f64,
    /// Same ratio with floored coordinates replaced by their pulled-back thresholds a_i.
    pub effective_bound_ratio: f64,
    pub halvings: u32,
    /// Length of the first branch's final cap pulled back through the inverse lineage.
    #[serde(with = "crate::exact::qser")]
    pub pullback_length: Q,
    pub pullback_delta_matches: bool,
}

impl IterationLedger {
    /// Largest overlap count over every recorded step.
    pub fn max_overlap(&self) -> usize {
        self.shrink_runs
            .iter()
            .flat_map(|r| &r.steps)
            .map(|s| s.counts.max_theta_per_delta.max(s.counts.max_delta_per_theta))
            .max()
            .unwrap_or(0)
    }

    /// δ_{l+1} = d^{n+1-pivot} δ_l on every recorded step.
    pub fn scale_law_holds(&self, n: usize) -> bool {
        self.steps
            .iter()
            .all(|s| s.delta == qpow(&s.d, (n + 1 - s.pivot) as i64) * &s.delta_before)
    }
}

/// Rescaled frame: magnitudes of s_1..s_{n-1}, s_0, scale, and the lineage so far.
#[derive(Clone)]
struct Frame {
    n: usize,
    pivot: usize,
    delta: Q,
    s0: Q,
    mags: Vec<(Q, Q)>,
    dprod: Q,
    /// Accumulated factor multiplying each s_i since the original coordinates.
    scale: Vec<Q>,
    /// Some dilation on this branch had d < 1 (the anchor sat above c_{i+1}).
    contracted: bool,
    lineage: Vec<String>,
}

impl Frame {
    fn cap(&self, t_len: &Q, alpha: &[Sign]) -> Cap {
        let ranges = self
            .mags
            .iter()
            .map(|(lo, hi)| if lo.is_zero() { SRange::Zero { hi: hi.clone() } } else { SRange::Range { lo: lo.clone(), hi: hi.clone() } })
            .collect();
        let mut c = Cap::new(self.n, self.delta.clone(), (Q::zero(), t_len.clone()), SBox::new(alpha.to_vec(), ranges));
        c.s0 = self.s0.clone();
        c.lineage = self.lineage.clone();
        c
    }
}

struct BranchEnd {
    steps: Vec<LedgerStep>,
    termination: Termination,
    final_len: Q,
    dprod: Q,
    frame: Frame,
    /// Original-coordinate sizes with floored thresholds pulled back.
    effective: Vec<Q>,
}

struct Walk<'a> {
    eps: &'a Q,
    k: Vec<u32>,
    alpha: Vec<Sign>,
    shrink_runs: Vec<ShrinkRecord>,
    ends: Vec<BranchEnd>,
    all_standardized: bool,
    standardized_expanding: bool,
    failures: Vec<String>,
    increasing: bool,
    at_most_one: bool,
}

/// (X)^{1/a} vs (Y)^{1/b} via X^b vs Y^a.
fn root_cmp(x: &Q, a: usize, y: &Q, b: usize) -> Ordering {
    qpow(x, b as i64).cmp(&qpow(y, a as i64))
}

/// Dyadic ceiling of a radical.
fn radical_dyadic_ceil(r: &Radical) -> Q {
    let f = r.dyadic_floor();
    if r.cmp_q(&f) == Ordering::Equal { f } else { f * qi(2) }
}

impl Walk<'_> {
    /// Shrink bookkeeping: t-intervals from `start` to `target` on component i.
    fn record_shrink(&mut self, branch: usize, level: usize, i: usize, delta: &Q, start: &Q, target: &Q, sign: Sign) {
        let mut steps = Vec::new();
        let mut cur = start.clone();
        let de = Radical::power(delta.clone(), self.eps);
        let half = Radical::power(delta.clone(), &(self.eps / qi(2)));
        // Halving applies while T >= 30 δ^{-ε} L, i.e. T δ^ε >= 30 L.
        while de.scale(&cur).ge_q(&(qi(30) * target)) {
            let child = radical_dyadic_ceil(&half.scale(&cur));
            if child >= cur {
                break;
            }
            let count = (&cur / &child).to_integer().to_usize().unwrap_or(usize::MAX);
            let cf = to_f64(&child);
            let starts: Vec<f64> = (0..count).map(|k| k as f64 * cf).collect();
            let e = (i as f64 * cf).powi(2);
            let counts = overlap_counts_from_starts(&starts, sign, i, e);
            steps.push(OverlapStep { component: i, e, children: count, counts });
            cur = child;
        }
        self.shrink_runs.push(ShrinkRecord {
            branch,
            level,
            component: i,
            start_len: start.clone(),
            target_len: target.clone(),
            steps,
        });
    }

    /// Rescale around coordinate `index` (J split, dilation), then run the next level.
    fn rescale(&mut self, frame: &Frame, index: usize, l_prev: &Q, steps: Vec<LedgerStep>, info: StepInfo, branch: usize) -> Result<()> {
        let n = frame.n;
        let p = frame.pivot;
        let e = index - p;
        let (lo, hi) = frame.mags[index - 1].clone();
        let de30 = Radical::power(frame.delta.clone(), self.eps).scale(&qf(1, 30));
        let m = -exact_log2(&de30.dyadic_floor()).unwrap();
        let ratio = (&hi - &lo) / &lo;
        let extra = if ratio > Q::one() { exact_log2(&dyadic_ceil(&ratio)).unwrap() } else { 0 };
        let bits = (m + extra).max(0) as u32;
        let count = 1u64 << bits;
        let width = (&hi - &lo) / qi(count as i64);
        let c = c_constant(index as u32 + 1);
        let explored: Vec<u64> = if count == 1 { vec![0] } else { vec![0, count - 1] };
        for (which, &slot) in explored.iter().enumerate() {
            let j_lo = &lo + &width * qi(slot as i64);
            let j_hi = &j_lo + &width;
            let mid = (&j_lo + &j_hi) / qi(2);
            let d = Radical::new(Q::one(), &c / &mid, 1, e as i64)
                .floor_with_bits(bits + DILATION_BITS + e as u32);
            let a = &c / qpow(&d, e as i64);
            if a < j_lo || a > j_hi {
                return Err(Error::Hypothesis(format!("rounded dilation leaves J at index {index}")));
            }
            let map = dilation_map(n, &d, p)?;
            let mut next = frame.clone();
            next.pivot = index;
            next.delta = qpow(&d, (n + 1 - p) as i64) * &frame.delta;
            next.s0 = qpow(&d, -(p as i64)) * &frame.s0;
            for (i, (slot, sc)) in next.mags.iter_mut().zip(next.scale.iter_mut()).enumerate() {
                let f = qpow(&d, (i + 1) as i64 - p as i64);
                *slot = (&slot.0 * &f, &slot.1 * &f);
                *sc *= &f;
            }
            let f = qpow(&d, e as i64);
            next.mags[index - 1] = (&j_lo * &f, &j_hi * &f);
            next.dprod = &frame.dprod * &d;
            next.contracted |= d < Q::one();
            next.lineage.push(map.id.clone());
            // d > 1 exactly when the anchor sits below c_{i+1}; unit-size shells may shrink δ.
            if a < c {
                self.increasing &= next.delta > frame.delta;
            }
            if p == 0 && next.delta > Q::one() {
                return Err(Error::NotApplicable(format!(
                    "first rescaled scale exceeds 1 at index {index}; the shell is at endcap size"
                )));
            }
            self.at_most_one &= next.delta <= Q::one();
            let t_len = &d * l_prev;
            let mut steps = steps.clone();
            let level = steps.len() + 1;
            steps.push(LedgerStep {
                l: level,
                pivot: p,
                index,
                d: d.clone(),
                delta_before: frame.delta.clone(),
                delta: next.delta.clone(),
                s_values: info.s_values.clone(),
                thresholds: info.thresholds.clone(),
                floored: info.floored.clone(),
                map_id: map.id.clone(),
                j_count: count,
                standardized: false,
                standardization_failure: None,
                t_standard: Q::zero(),
            });
            let b = if which == 0 { branch } else { self.ends.len() + 1000 * (level + 1) + branch };
            self.level(next, t_len, steps, b)?;
        }
        Ok(())
    }

    /// Standardize, decide the next index or terminate.
    fn level(&mut self, frame: Frame, t_len: Q, mut steps: Vec<LedgerStep>, branch: usize) -> Result<()> {
        let n = frame.n;
        let p = frame.pivot;
        let level = steps.len();
        let t_std = Radical::power(frame.delta.clone(), self.eps)
            .scale(&qf(1, 30 * (p as i64 + 2)))
            .dyadic_floor();
        let t_cur = dyadic_floor(&qmin(&t_len, &t_std));
        let st = is_standardized(&frame.cap(&t_cur, &self.alpha), p + 1, &frame.delta, self.eps);
        self.all_standardized &= st.ok;
        if !frame.contracted {
            self.standardized_expanding &= st.ok;
        }
        if let Some(clause) = &st.failed_clause {
            let tag = if frame.contracted { " after a contraction" } else { "" };
            let note = format!("pivot {p}: {clause}{tag}");
            if !self.failures.contains(&note) {
                self.failures.push(note);
            }
        }
        if let Some(last) = steps.last_mut() {
            last.standardized = st.ok;
            last.standardization_failure = st.failed_clause.clone();
            last.t_standard = t_cur.clone();
        }
        let sign_at = |i: usize| if i >= 2 { self.alpha[i - 2] } else { Sign::Plus };
        if p == n - 1 {
            let target = Radical::new(qi(n as i64).recip(), &frame.delta / qi(6), 1, 2).floor_with_bits(THRESHOLD_BITS);
            let sign = sign_at(n);
            self.record_shrink(branch, level, n, &frame.delta.clone(), &t_cur, &target, sign);
            self.finish(frame, steps, Termination::IndexMaximal, target, None);
            return Ok(());
        }
        let info = thresholds(&frame);
        let best = info.best;
        if info.floored[best - p - 1] {
            let tau = Radical::new(Q::one(), frame.delta.clone(), 1, (n + 1 - p) as i64);
            let target = tau.scale(&qf(1, p as i64 + 1)).floor_with_bits(THRESHOLD_BITS);
            let sign = sign_at(p + 1);
            self.record_shrink(branch, level, p + 1, &frame.delta.clone(), &t_cur, &target, sign);
            let fin = tau.scale(&qf(1, n as i64)).floor_with_bits(THRESHOLD_BITS);
            self.finish(frame, steps, Termination::BelowThreshold, fin, Some(&info));
            return Ok(());
        }
        let target = info.s_max.scale(&qf(1, p as i64 + 1)).floor_with_bits(THRESHOLD_BITS);
        let sign = sign_at(p + 1);
        self.record_shrink(branch, level, p + 1, &frame.delta.clone(), &t_cur, &target, sign);
        let steps_copy = std::mem::take(&mut steps);
        self.rescale(&frame, best, &target, steps_copy, info, branch)
    }

    fn finish(&mut self, frame: Frame, steps: Vec<LedgerStep>, termination: Termination, final_len: Q, info: Option<&StepInfo>) {
        let p = frame.pivot;
        let effective = (1..frame.n)
            .map(|i| {
                let nominal = pow2(-(self.k[i - 1] as i64));
                match info {
                    Some(info) if i > p && info.floored[i - p - 1] => {
                        qmax(&nominal, &(&info.thresholds[i - p - 1] / &frame.scale[i - 1]))
                    }
                    _ => nominal,
                }
            })
            .collect();
        self.ends.push(BranchEnd { steps, termination, final_len, dprod: frame.dprod.clone(), frame, effective });
    }
}

#[derive(Clone)]
struct StepInfo {
    s_values: Vec<f64>,
    thresholds: Vec<Q>,
    floored: Vec<bool>,
    best: usize,
    s_max: Radical,
}

/// a_i and 𝒮 for indices above the pivot; ties go to the smallest index.
fn thresholds(frame: &Frame) -> StepInfo {
    let n = frame.n;
    let p = frame.pivot;
    let mut thresholds = Vec::new();
    let mut floored = Vec::new();
    for i in (p + 1)..n {
        let floor = Radical::new(factorial_q(i as u32).recip(), frame.delta.clone(), (i - p) as i64, (n + 1 - p) as i64);
        let lo = &frame.mags[i - 1].0;
        if floor.cmp_q(lo) == Ordering::Greater {
            thresholds.push(floor.floor_with_bits(THRESHOLD_BITS));
            floored.push(true);
        } else {
            thresholds.push(lo.clone());
            floored.push(false);
        }
    }
    let mut best = p + 1;
    for i in (p + 2)..n {
        let x = factorial_q(i as u32) * &thresholds[i - p - 1];
        let y = factorial_q(best as u32) * &thresholds[best - p - 1];
        if root_cmp(&x, i - p, &y, best - p) == Ordering::Greater {
            best = i;
        }
    }
    let s_of = |i: usize| Radical::new(Q::one(), factorial_q(i as u32) * &thresholds[i - p - 1], 1, (i - p) as i64);
    let s_values = ((p + 1)..n).map(|i| s_of(i).to_f64()).collect();
    StepInfo { s_values, s_max: s_of(best), thresholds, floored, best }
}

/// Simulation result for one annulus: ledger plus the emitted family length.
pub struct IterationOutcome {
    pub ledger: IterationLedger,
}

/// Runs the rescaling ladder on the annulus magnitudes. With `keep_records` false the per-step
/// overlap records are dropped after computing their maxima.
fn iterate_annulus(a: &AnnulusIndex, eps: &Q, keep_records: bool) -> Result<IterationOutcome> {
    let n = a.n;
    let delta = &a.delta;
    let kb = a.kbar();
    if !a.has_shell() {
        return Err(Error::NotApplicable("every coordinate sits in its zero slot; use the endcap partition".into()));
    }
    let mags: Vec<(Q, Q)> = (1..n).map(|j| {
        let r = a.srange(j);
        (r.lo(), r.hi())
    }).collect();
    let frame = Frame {
        n,
        pivot: 0,
        delta: delta.clone(),
        s0: Q::one(),
        mags,
        dprod: Q::one(),
        scale: vec![Q::one(); n - 1],
        contracted: false,
        lineage: Vec::new(),
    };
    // Level 0: 𝒮^0_i = (i! 2^{-k_i})^{1/i} over slots outside their zero interval.
    let mut walk = Walk {
        eps,
        k: a.k.clone(),
        alpha: a.alpha.clone(),
        shrink_runs: Vec::new(),
        ends: Vec::new(),
        all_standardized: true,
        standardized_expanding: true,
        failures: Vec::new(),
        increasing: true,
        at_most_one: true,
    };
    let live: Vec<usize> = (1..n).filter(|&i| a.k[i - 1] < kb[i - 1]).collect();
    let value = |i: usize| factorial_q(i as u32) * pow2(-(a.k[i - 1] as i64));
    let mut best = live[0];
    for &i in &live[1..] {
        if root_cmp(&value(i), i, &value(best), best) == Ordering::Greater {
            best = i;
        }
    }
    let s_max = Radical::new(Q::one(), value(best), 1, best as i64);
    let l0 = s_max.dyadic_floor();
    let count = (qi(2) / &l0).to_integer().to_usize().unwrap_or(usize::MAX);
    let lf = to_f64(&l0);
    let starts: Vec<f64> = (0..count).map(|k| -1.0 + k as f64 * lf).collect();
    let e = lf * lf;
    walk.shrink_runs.push(ShrinkRecord {
        branch: 0,
        level: 0,
        component: 1,
        start_len: qi(2),
        target_len: l0.clone(),
        steps: vec![OverlapStep { component: 1, e, children: count, counts: overlap_counts_from_starts(&starts, Sign::Plus, 1, e) }],
    });
    let info = StepInfo {
        s_values: (1..n)
            .map(|i| if live.contains(&i) { Radical::new(Q::one(), value(i), 1, i as i64).to_f64() } else { 0.0 })
            .collect(),
        thresholds: (1..n).map(|i| if live.contains(&i) { pow2(-(a.k[i - 1] as i64)) } else { Q::zero() }).collect(),
        floored: (1..n).map(|i| !live.contains(&i)).collect(),
        best,
        s_max,
    };
    walk.rescale(&frame, best, &l0, Vec::new(), info, 0)?;

    let first = &walk.ends[0];
    let raw = walk
        .ends
        .iter()
        .map(|b| &b.final_len / &b.dprod)
        .min()
        .expect("at least one branch");
    let mut len = dyadic_floor(&qmin(&raw, &qi(2)));
    let nominal: Vec<Q> = a.k.iter().map(|&k| pow2(-(k as i64))).collect();
    let bound_ratio = to_f64(&len) / length_bound(n, delta, &nominal);
    let effective_bound_ratio = walk
        .ends
        .iter()
        .map(|b| to_f64(&len) / length_bound(n, delta, &b.effective))
        .fold(0.0, f64::max);
    let raw_length = len.clone();
    let mut halvings = 0;
    let template = a.cap();
    loop {
        let fam = CapFamily::uniform(template.clone(), &len)?;
        if fam.flatness_ratio() <= FLATNESS_TOLERANCE as f64 || halvings >= MAX_HALVINGS {
            break;
        }
        len /= qi(2);
        halvings += 1;
    }
    // Pull the first branch's final cap back to the original coordinates.
    let end_cap = first.frame.cap(&first.final_len, &a.alpha);
    let mut back = end_cap.clone();
    for id in first.frame.lineage.iter().rev() {
        let inv: AffineMap = AffineMap::from_id(n, id)?.inverse()?;
        back = apply_map(&inv, &back)?;
    }
    let pullback_length = back.t_len();
    let pullback_delta_matches = back.delta == *delta;
    let max_steps = walk.ends.iter().map(|b| b.steps.len()).max().unwrap_or(0);
    let mut shrink_runs = walk.shrink_runs;
    if !keep_records {
        for r in &mut shrink_runs {
            r.steps.retain(|s| s.counts.max_theta_per_delta.max(s.counts.max_delta_per_theta) > 0);
        }
    }
    let ledger = IterationLedger {
        k: a.k.clone(),
        steps: first.steps.clone(),
        termination: first.termination,
        big_n: first.steps.len(),
        branches: walk.ends.len(),
        max_steps,
        all_standardized: walk.all_standardized,
        standardized_expanding: walk.standardized_expanding,
        standardization_failures: walk.failures.clone(),
        deltas_increasing: walk.increasing,
        deltas_at_most_one: walk.at_most_one,
        shrink_runs,
        dilation_product: first.dprod.clone(),
        raw_length,
        final_length: len,
        bound_ratio,
        effective_bound_ratio,
        halvings,
        pullback_length,
        pullback_delta_matches,
    };
    Ok(IterationOutcome { ledger })
}

/// min{ min_i ((n-1-i)! s_{n-1}/s_i)^{1/(n-1-i)}, (δ/(s_{n-1} (n+1)!))^{1/2} } in f64,
/// for coordinate sizes s_1..s_{n-1} (2^{-k_i} on an annulus).
pub fn length_bound(n: usize, delta: &Q, sizes: &[Q]) -> f64 {
    let last = &sizes[n - 2];
    let mut m = Radical::new(Q::one(), delta / (last * factorial_q(n as u32 + 1)), 1, 2).to_f64();
    for i in 1..n - 1 {
        let e = (n - 1 - i) as i64;
        let v = Radical::new(Q::one(), factorial_q(e as u32) * last / &sizes[i - 1], 1, e).to_f64();
        m = m.min(v);
    }
    m
}

/// Iterative partition of one annulus (n >= 4).
pub fn iterative_partition(n: usize, delta: &Q, eps: &Q, annulus: &AnnulusIndex) -> Result<PartitionReport> {
    if n < 4 {
        return Err(Error::InvalidArgument("the iterative partition needs n >= 4; use partition_m3".into()));
    }
    check_eps(eps)?;
    if annulus.n != n || annulus.delta != *delta {
        return Err(Error::CoordinateMismatch("annulus was built for a different n or δ".into()));
    }
    let started = Instant::now();
    let a = AnnulusIndex::new(n, delta.clone(), annulus.alpha.clone(), annulus.k.clone())?;
    let outcome = iterate_annulus(&a, eps, true)?;
    let len = outcome.ledger.final_length.clone();
    let fam = annulus_family(&a, &len)?;
    let route = AnnulusRoute {
        alpha: a.alpha.clone(),
        k: a.k.clone(),
        route: Route::Iterative,
        t_len: len,
        case: None,
        short_branch: None,
        bound_ratio: Some(outcome.ledger.bound_ratio),
        halvings: outcome.ledger.halvings,
    };
    let mut report = PartitionReport::assemble(
        PartitionKind::Iterative,
        n,
        delta,
        eps,
        vec![fam],
        vec![route],
        &Region::from_annulus(&a),
        started,
    )?;
    report.ledger = Some(outcome.ledger);
    Ok(report)
}

/// Ledgers for every annulus the ladder applies to (sign-independent), in k order.
pub fn iteration_ledgers(n: usize, delta: &Q, eps: &Q) -> Result<Vec<IterationLedger>> {
    check_n(n)?;
    check_eps(eps)?;
    let kb = kbar(n, delta)?;
    k_vectors(&kb)
        .par_iter()
        .filter(|k| k.iter().zip(&kb).any(|(a, b)| a < b))
        .map(|k| {
            let a = AnnulusIndex { n, delta: delta.clone(), alpha: vec![Sign::Plus; n - 1], k: k.clone() };
            match iterate_annulus(&a, eps, false) {
                Ok(o) => Ok(Some(o.ledger)),
                Err(Error::NotApplicable(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Almost rectangular partition

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectGroup {
    pub alpha: Vec<Sign>,
    /// k_{n-1}.
    pub k_last: u32,
    /// (j, k_j) for an eccentric group, None for the non-eccentric group.
    pub eccentric: Option<(usize, u32)>,
    /// Smallest k_i covered per coordinate.
    pub kmin: Vec<u32>,
    #[serde(with = "crate::exact::qser")]
    pub t_len: Q,
    pub accepted: bool,
    pub max_side_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectSummary {
    pub groups: usize,
    pub eccentric_groups: usize,
    pub noneccentric_groups: usize,
    pub max_side_ratio: f64,
    pub ratio_law_ok: bool,
    pub ratio_law_checked: usize,
    /// Per (α, k_{n-1}) the groups' s-volumes add up to the slab volume.
    pub cover_ok: bool,
    pub group_list: Vec<RectGroup>,
}

/// Eccentricity of coordinate j at level k_j relative to k_{n-1} = K.
pub fn is_eccentric(n: usize, delta: &Q, j: usize, kj: u32, k_last: u32) -> bool {
    let x = pow2(k_last as i64) * delta / factorial_q(n as u32 + 1);
    pow2(2 * (kj as i64 - k_last as i64)) < qpow(&x, (n - 1 - j) as i64)
}

/// Almost rectangular partition (n >= 4; n = 3 returns the flat partition).
pub fn rectangular_partition(n: usize, delta: &Q) -> Result<PartitionReport> {
    check_n(n)?;
    if n == 3 {
        let mut r = flat_partition(3, delta, &default_eps())?;
        r.kind = PartitionKind::Rectangular;
        return Ok(r);
    }
    let started = Instant::now();
    let kb = kbar(n, delta)?;
    let big = kb[n - 2];
    let x_of = |k: u32| pow2(k as i64) * delta / factorial_q(n as u32 + 1);
    let mut specs: Vec<(u32, Option<(usize, u32)>, Vec<u32>)> = Vec::new();
    for k_last in 0..=big {
        // Non-eccentric group: every coordinate at or above its eccentricity threshold.
        let mut kmin = Vec::new();
        let mut empty = false;
        for i in 1..n - 1 {
            match (0..=kb[i - 1]).find(|&k| !is_eccentric(n, delta, i, k, k_last)) {
                Some(k) => kmin.push(k),
                None => empty = true,
            }
        }
        if !empty {
            specs.push((k_last, None, kmin));
        }
        for j in 1..n - 1 {
            for kj in 0..=kb[j - 1] {
                if !is_eccentric(n, delta, j, kj, k_last) {
                    continue;
                }
                let mut kmin = Vec::new();
                let mut empty = false;
                for i in 1..n - 1 {
                    if i == j {
                        kmin.push(kj);
                        continue;
                    }
                    let lhs = |k: u32| (k as i64 - k_last as i64) * (n - 1 - j) as i64;
                    let rhs = (kj as i64 - k_last as i64) * (n - 1 - i) as i64;
                    let found = (0..=kb[i - 1]).find(|&k| if i < j { lhs(k) > rhs } else { lhs(k) >= rhs });
                    match found {
                        Some(k) => kmin.push(k),
                        None => empty = true,
                    }
                }
                if !empty {
                    specs.push((k_last, Some((j, kj)), kmin));
                }
            }
        }
    }
    let _ = &x_of;
    let built: Vec<(SBox, Q, Option<(usize, u32)>, u32, Vec<u32>)> = specs
        .par_iter()
        .map(|(k_last, ecc, kmin)| {
            let ranges: Vec<SRange> = (1..n)
                .map(|i| {
                    if i == n - 1 {
                        annulus_slot(*k_last, big)
                    } else if ecc.is_some_and(|(j, _)| j == i) {
                        annulus_slot(kmin[i - 1], kb[i - 1])
                    } else {
                        SRange::Zero { hi: pow2(1 - kmin[i - 1] as i64) }
                    }
                })
                .collect();
            let sbox = SBox::new(vec![Sign::Plus; n - 1], ranges);
            let len = rect_length(n, delta, &sbox, *k_last, *ecc);
            (sbox, len, *ecc, *k_last, kmin.clone())
        })
        .collect();
    let checks: Vec<(bool, f64)> = built
        .par_iter()
        .map(|(sbox, len, ..)| {
            let cap = Cap::new(n, delta.clone(), (Q::zero(), len.clone()), sbox.clone());
            match is_almost_rectangular(&cap) {
                Ok(r) => (r.accepted, r.max_side_ratio),
                Err(_) => (false, f64::INFINITY),
            }
        })
        .collect();
    let mut families = Vec::new();
    let mut routes = Vec::new();
    let mut group_list = Vec::new();
    for alpha in Sign::patterns(n - 1) {
        for ((sbox, len, ecc, k_last, kmin), (accepted, ratio)) in built.iter().zip(&checks) {
            let sbox = SBox::new(alpha.clone(), sbox.ranges.clone());
            let cap = Cap::new(n, delta.clone(), (qi(-1), qi(1)), sbox);
            families.push(CapFamily::uniform(cap, len)?);
            let mut k = kmin.clone();
            k.push(*k_last);
            routes.push(AnnulusRoute {
                alpha: alpha.clone(),
                k,
                route: Route::Rectangular,
                t_len: len.clone(),
                case: Some(if ecc.is_some() { "eccentric" } else { "non-eccentric" }.to_string()),
                short_branch: None,
                bound_ratio: None,
                halvings: 0,
            });
            group_list.push(RectGroup {
                alpha: alpha.clone(),
                k_last: *k_last,
                eccentric: *ecc,
                kmin: kmin.clone(),
                t_len: len.clone(),
                accepted: *accepted,
                max_side_ratio: *ratio,
            });
        }
    }
    // Cover per (α, K): group s-volumes sum to the slab (2^{n-2} · width of slot K).
    let mut slab: HashMap<u32, Q> = HashMap::new();
    for (sbox, ..) in &built {
        let k_last = sbox.ranges[n - 2].dyadic_index().unwrap() as u32;
        *slab.entry(k_last.min(big)).or_insert_with(Q::zero) += sbox.volume();
    }
    let cover_ok = (0..=big).all(|k| {
        let expect = pow2(n as i64 - 2) * annulus_slot(k, big).width();
        slab.get(&k).is_some_and(|v| *v == expect)
    });
    let (ratio_law_ok, ratio_law_checked) = ratio_law(n, &built);
    let accepted: Vec<f64> = group_list.iter().map(|g| if g.accepted { 0.0 } else { 1.0 }).collect();
    let mut report =
        PartitionReport::assemble(PartitionKind::Rectangular, n, delta, &default_eps(), families, routes, &Region::full(n), started)?;
    report.rect_fraction = Some(weighted_fraction(&report.families, &accepted, 0.0).0);
    let eccentric_groups = group_list.iter().filter(|g| g.eccentric.is_some()).count();
    report.rect = Some(RectSummary {
        groups: group_list.len(),
        eccentric_groups,
        noneccentric_groups: group_list.len() - eccentric_groups,
        max_side_ratio: group_list.iter().map(|g| g.max_side_ratio).fold(0.0, f64::max),
        ratio_law_ok,
        ratio_law_checked,
        cover_ok,
        group_list,
    });
    Ok(report)
}

/// Group length, capped by the length-condition minimum / 10 so the box sandwich applies.
fn rect_length(n: usize, delta: &Q, sbox: &SBox, k_last: u32, ecc: Option<(usize, u32)>) -> Q {
    let k = |i: usize| sbox.ranges[i - 1].dyadic_index().unwrap();
    let curv = Radical::new(Q::one(), pow2(k_last as i64) * delta / factorial_q(n as u32 + 1), 1, 2);
    let target = match ecc {
        Some((j, kj)) => Radical::new(qi(n as i64).recip(), pow2(kj as i64 - k_last as i64), 1, (n - 1 - j) as i64),
        None => curv.scale(&qi(n as i64).recip()),
    };
    let mut len = target.dyadic_floor();
    len = qmin(&len, &curv.scale(&qf(1, 10)).dyadic_floor());
    for i in 2..n {
        len = qmin(&len, &dyadic_floor(&(qf(1, 10 * i as i64) * pow2(k(i - 1) - k(i)))));
    }
    len = qmin(&len, &dyadic_floor(&(pow2(-k(1)) / qi(10))));
    qmin(&len, &qi(2))
}

/// Consecutive outer widths hi_i / hi_{i-1} within [ρ/2, 2ρ] on eccentric groups,
/// skipping coordinates pinned at the bottom of their range.
fn ratio_law(n: usize, built: &[(SBox, Q, Option<(usize, u32)>, u32, Vec<u32>)]) -> (bool, usize) {
    let mut ok = true;
    let mut checked = 0;
    for (sbox, _, ecc, k_last, kmin) in built {
        let Some((j, kj)) = ecc else { continue };
        let rho = ((*kj as f64 - *k_last as f64) / (n - 1 - j) as f64).exp2();
        for i in 2..n - 1 {
            if kmin[i - 1] == 0 || kmin[i - 2] == 0 {
                continue;
            }
            let r = to_f64(&(sbox.hi(i) / sbox.hi(i - 1)));
            checked += 1;
            ok &= r >= rho / 2.0 - 1e-12 && r <= 2.0 * rho + 1e-12;
        }
    }
    (ok, checked)
}

// ---------------------------------------------------------------------------
// General curves

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveLedger {
    pub depth: usize,
    /// ceil(c^i log2(1/δ)) for i = 0..=depth.
    pub exponents: Vec<i64>,
    pub residual_zero: bool,
    pub sigma: f64,
    pub top_derivative: f64,
    /// t-cut C^{-1} σ (n+1)! δ_i^{1/(n+2)} per level (None when the residual vanishes).
    pub cuts: Vec<Option<f64>>,
    /// Largest (deficit + Taylor residual) / (10 δ) over the final caps.
    pub max_mapped_ratio: f64,
}

/// Depth N: the least N with c^N log2(1/δ) < 1, c = (n+1)/(n+2).
pub fn recursion_depth(n: usize, delta: &Q) -> (usize, Vec<i64>) {
    let c = qf(n as i64 + 1, n as i64 + 2);
    let l = from_f64(-to_f64(delta).log2()).unwrap_or_else(Q::zero);
    let mut exps = Vec::new();
    let mut k = 0;
    loop {
        let v = qpow(&c, k as i64) * &l;
        exps.push(v.ceil().to_integer().to_i64().unwrap());
        if v < Q::one() {
            return (k, exps);
        }
        k += 1;
    }
}

/// Induction-on-scales partition of the hypersurface generated by `curve`.
pub fn curve_partition(curve: &Curve, delta: &Q, eps: &Q) -> Result<PartitionReport> {
    let n = curve.n;
    check_n(n)?;
    check_delta(delta)?;
    check_eps(eps)?;
    let started = Instant::now();
    let sigma = match &curve.certificate {
        Some(c) => c.sigma_lb,
        None => certify_nondegeneracy(curve, 1.0 / 64.0)?.sigma_lb,
    };
    let top = top_derivative_bound(curve);
    let (depth, exponents) = recursion_depth(n, delta);
    let residual_zero = top == 0.0;
    let mut direct = flat_partition(n, delta, eps)?;
    let lineage = format!("M(grid=curve,n={n})");
    let mut cuts = vec![None; depth + 1];
    if !residual_zero {
        // Scales from coarse to fine; the finest is δ itself.
        let fact = (1..=n + 1).map(|v| v as f64).product::<f64>();
        let mut len_cap = qi(2);
        for i in (0..depth).rev() {
            let di = if i == 0 { to_f64(delta) } else { (-(exponents[i] as f64)).exp2() };
            let cut = sigma * fact * di.powf(1.0 / (n as f64 + 2.0)) / top;
            cuts[i] = Some(cut);
            let cq = from_f64(cut).filter(|v| v.is_positive()).map(|v| dyadic_floor(&v)).unwrap_or_else(|| pow2(-60));
            len_cap = qmin(&len_cap, &cq);
        }
        let mut families = Vec::with_capacity(direct.families.len());
        for (f, r) in direct.families.iter().zip(direct.routes.iter_mut()) {
            let len = qmin(&f.piece_len(), &len_cap);
            r.t_len = len.clone();
            families.push(CapFamily::uniform(f.cap.clone(), &len)?);
        }
        direct.families = families;
    }
    for f in &mut direct.families {
        f.cap.lineage = vec![lineage.clone()];
    }
    let mapped: Vec<f64> = direct
        .families
        .par_iter()
        .map(|f| {
            let rep = f.representative();
            let base = to_f64(&flatness_deficit(&rep).upper);
            let hi: Vec<f64> = (1..n).map(|j| to_f64(&rep.sbox.hi(j))).collect();
            let extra = taylor_residual_bound(curve, to_f64(&rep.t_len()) / 2.0, &hi);
            (base + extra) / to_f64(delta)
        })
        .collect();
    let (flat_fraction, max_ratio) = weighted_fraction(&direct.families, &mapped, FLATNESS_TOLERANCE as f64);
    let region = Region::full(n);
    let tiling = tiling_check_families(&direct.families, &region)?;
    let mut report = PartitionReport::assemble(
        PartitionKind::Curve,
        n,
        delta,
        eps,
        direct.families,
        direct.routes,
        &region,
        started,
    )?;
    report.tiling_ok = tiling.ok;
    report.tiling_note = tiling.reason;
    report.flat_fraction = flat_fraction;
    report.max_flatness_ratio = max_ratio;
    report.rect_fraction = direct.rect_fraction;
    report.curve = Some(CurveLedger {
        depth,
        exponents,
        residual_zero,
        sigma,
        top_derivative: top,
        cuts,
        max_mapped_ratio: max_ratio / FLATNESS_TOLERANCE as f64,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::{moment_curve, perturbed_moment_curve};
    use proptest::prelude::*;

    fn d(e: i64) -> Q {
        pow2(-e)
    }

    /// Brute force: scan k until 2^{1-k} <= bound < 2^{2-k} in f64 with a safety margin.
    fn kbar_oracle(n: usize, e: i64, j: usize) -> u32 {
        let fact: f64 = (1..=j).map(|v| v as f64).product();
        let log_bound = -(e as f64) * j as f64 / (n as f64 + 1.0) - fact.log2();
        (1.0 - log_bound.floor()) as u32
    }

    #[test]
    fn kbar_small_cases() {
        assert_eq!(kbar(3, &d(12)).unwrap(), vec![4, 8]);
        assert_eq!(kbar(5, &d(20)).unwrap(), vec![5, 9, 14, 19]);
        for n in 3..7 {
            for e in 2..30 {
                let kb = kbar(n, &d(e)).unwrap();
                for j in 1..n {
                    assert_eq!(kb[j - 1], kbar_oracle(n, e, j), "n={n} e={e} j={j}");
                }
            }
        }
    }

    #[test]
    fn kbar_near_half() {
        let kb = kbar(3, &qf(49, 100)).unwrap();
        assert!(kb.iter().all(|&k| k >= 1));
        assert_eq!(dyadic_annuli(3, &qf(49, 100)).unwrap().len(), 4 * kb.iter().map(|&k| k as usize + 1).product::<usize>());
        assert!(kbar(3, &qf(1, 2)).is_err());
    }

    #[test]
    fn annuli_tile_the_cube() {
        let fams: Vec<CapFamily> = dyadic_annuli(3, &d(12))
            .unwrap()
            .into_iter()
            .map(|a| CapFamily { cap: a.cap(), pieces: 1 })
            .collect();
        assert_eq!(fams.len(), 4 * 5 * 9);
        assert!(tiling_check_families(&fams, &Region::full(3)).unwrap().ok);
    }

    #[test]
    fn tiling_detects_duplicates_and_gaps() {
        let a = AnnulusIndex::new(3, d(12), vec![Sign::Plus, Sign::Minus], vec![1, 2]).unwrap();
        let cap = a.cap();
        let region = Region::from_annulus(&a);
        assert!(tiling_check(&[cap.clone()], &region).unwrap());
        assert!(!tiling_check(&[cap.clone(), cap.clone()], &region).unwrap());
        let mut half = cap.clone();
        half.t = (qi(-1), qi(0));
        assert!(!tiling_check(&[half.clone()], &region).unwrap());
        let mut other = cap.clone();
        other.t = (qi(0), qi(1));
        assert!(tiling_check(&[half.clone(), other], &region).unwrap());
        // Same volume but shifted: overlap plus gap.
        let mut shifted = cap.clone();
        shifted.t = (qf(-1, 2), qf(1, 2));
        assert!(!tiling_check(&[half, shifted], &region).unwrap());
        let wrong = Cap::new(4, d(12), (qi(-1), qi(1)), SBox::new(vec![Sign::Plus; 3], vec![SRange::Dyadic { k: 1 }; 3]));
        assert!(matches!(tiling_check(&[wrong], &region), Err(Error::CoordinateMismatch(_))));
    }

    #[test]
    fn endcap_example() {
        let r = endcap_partition(3, &d(12)).unwrap();
        assert_eq!(endcap_length(3, &d(12)), qf(1, 3) * d(3));
        assert_eq!(r.families[0].pieces, 48);
        assert!(r.tiling_ok);
        assert_eq!(r.flat_fraction, 1.0);
    }

    #[test]
    fn endcap_corner_bound() {
        // ((1+1/n)^{n+1} - 1 - (n+1)/n) δ with |s_j| at their zero-slot maxima and half-length D/(2n).
        for n in 3..6 {
            let r = endcap_partition(n, &d(24)).unwrap();
            let bound = (1.0 + 1.0 / n as f64).powi(n as i32 + 1) - 1.0 - (n as f64 + 1.0) / n as f64;
            assert!(r.max_flatness_ratio <= 10.0, "n={n} ratio={}", r.max_flatness_ratio);
            assert!(bound < 10.0);
        }
    }

    #[test]
    fn endcap_scaling() {
        let a = endcap_length(3, &d(16));
        let b = endcap_length(3, &d(17));
        // 2^{-17/4} floors to 2^-5 while 2^{-16/4} is exact.
        let ratio = to_f64(&(b / a));
        let ideal = (-1.0f64 / 4.0).exp2();
        assert!(ratio <= ideal && ratio >= ideal / 2.0);
    }

    #[test]
    fn t1_examples() {
        assert_eq!(m3_length(&d(12), 1, 4), d(4));
        assert_eq!(m3_length(&d(12), 0, 0), d(6));
        // Out-of-range k2 = 9 at δ = 2^-12 (k̄2 = 8); the branch test itself still reads 2^-27 < 2^-12.
        assert_eq!(m3_case(&d(12), 0, 9), ("k2>2k1".to_string(), true));
        assert!(matches!(partition_m3(&d(12), 0, 9, [Sign::Plus; 2]), Err(Error::OutOfRange(_))));
        let r = partition_m3(&d(12), 0, 8, [Sign::Plus, Sign::Minus]).unwrap();
        assert!(r.tiling_ok);
        assert_eq!(r.routes[0].short_branch, Some(true));
        assert_eq!(r.families[0].piece_len(), d(8));
    }

    #[test]
    fn m3_needs_a_shell() {
        assert!(matches!(partition_m3(&d(12), 4, 8, [Sign::Plus; 2]), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn corner_identity() {
        // 2^{-k2} L^2 = δ whenever L^2 = 2^{k2} δ exactly.
        let delta = d(12);
        for k2 in (0..=8u32).filter(|k| (k + 12) % 2 == 0) {
            let l = m3_length(&delta, 0, k2);
            if &l * &l == pow2(k2 as i64) * &delta {
                assert_eq!(pow2(-(k2 as i64)) * &l * &l, delta);
            }
        }
    }

    #[test]
    fn flat_n3_tiles() {
        let r = flat_partition(3, &d(12), &default_eps()).unwrap();
        assert!(r.tiling_ok, "{:?}", r.tiling_note);
        assert_eq!(r.flat_fraction, 1.0, "max ratio {}", r.max_flatness_ratio);
        assert_eq!(r.rect_fraction, Some(1.0));
    }

    #[test]
    fn iterative_single_step() {
        // n = 4, k = k̄ except k_1 = 0: the ladder rescales once and stops below threshold.
        let delta = d(20);
        let kb = kbar(4, &delta).unwrap();
        let a = AnnulusIndex::new(4, delta.clone(), vec![Sign::Plus; 3], vec![0, kb[1], kb[2]]).unwrap();
        let r = iterative_partition(4, &delta, &default_eps(), &a).unwrap();
        let l = r.ledger.as_ref().unwrap();
        assert_eq!(l.big_n, 1);
        assert_eq!(l.termination, Termination::BelowThreshold);
        assert!(l.scale_law_holds(4));
        assert!(l.pullback_delta_matches);
        assert!(l.raw_length <= l.pullback_length);
        assert!(r.tiling_ok);
        assert_eq!(r.flat_fraction, 1.0);
    }

    #[test]
    fn iterative_rejects_endcap_annulus() {
        let delta = d(20);
        let kb = kbar(4, &delta).unwrap();
        let a = AnnulusIndex::new(4, delta.clone(), vec![Sign::Plus; 3], kb).unwrap();
        assert!(matches!(iterative_partition(4, &delta, &default_eps(), &a), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn iterative_ledger_invariants_n4() {
        let delta = d(16);
        for l in iteration_ledgers(4, &delta, &default_eps()).unwrap() {
            assert!(l.scale_law_holds(4), "k={:?}", l.k);
            assert!(l.standardized_expanding, "k={:?} {:?}", l.k, l.standardization_failures);
            assert!(l.effective_bound_ratio <= 4.0, "k={:?}", l.k);
            assert!(l.deltas_increasing && l.deltas_at_most_one, "k={:?}", l.k);
            assert!(l.max_steps <= 3, "k={:?}", l.k);
            assert!(l.pullback_delta_matches);
            assert!(l.max_overlap() <= 25, "k={:?} overlap {}", l.k, l.max_overlap());
        }
    }

    #[test]
    fn eccentricity_example() {
        // n = 5, δ = 2^-30, k_4 = 6, k_1 = 1: (2^{-5})^{2/3} vs 2^6 2^-30 / 720.
        assert!(!is_eccentric(5, &d(30), 1, 1, 6));
    }

    #[test]
    fn rectangular_n4_small() {
        let r = rectangular_partition(4, &d(12)).unwrap();
        assert!(r.tiling_ok, "{:?}", r.tiling_note);
        let s = r.rect.as_ref().unwrap();
        assert!(s.cover_ok);
        assert!(s.ratio_law_ok);
        assert_eq!(r.rect_fraction, Some(1.0), "max side ratio {}", s.max_side_ratio);
    }

    #[test]
    fn curve_moment_matches_direct() {
        let c = moment_curve(3).unwrap().with_certificate(1.0 / 32.0).unwrap();
        let a = curve_partition(&c, &d(12), &default_eps()).unwrap();
        let b = flat_partition(3, &d(12), &default_eps()).unwrap();
        assert_eq!(a.families.len(), b.families.len());
        for (x, y) in a.families.iter().zip(&b.families) {
            assert_eq!(x.pieces, y.pieces);
            assert_eq!(x.cap.sbox, y.cap.sbox);
        }
        assert!(a.curve.as_ref().unwrap().residual_zero);
    }

    #[test]
    fn curve_depth_ladder() {
        // c = 4/5, log2(1/δ) = 12: 12, 9.6, 7.68, ... first below 1 at N = 12.
        let (depth, exps) = recursion_depth(3, &d(12));
        let mut v = 12.0f64;
        let mut n = 0;
        while v >= 1.0 {
            v *= 0.8;
            n += 1;
        }
        assert_eq!(depth, n);
        assert_eq!(exps[0], 12);
        assert_eq!(exps[1], 10);
        let bound = (12.0f64.ln() / (5.0f64 / 4.0).ln()) + 1.0;
        assert!(depth as f64 <= bound);
    }

    #[test]
    fn perturbed_curve_flat() {
        let c = perturbed_moment_curve().with_certificate(1.0 / 64.0).unwrap();
        let r = curve_partition(&c, &d(12), &default_eps()).unwrap();
        assert!(r.tiling_ok);
        assert_eq!(r.flat_fraction, 1.0);
    }

    #[test]
    fn report_is_deterministic() {
        let a = serde_json::to_string(&flat_partition(3, &d(10), &default_eps()).unwrap()).unwrap();
        let b = serde_json::to_string(&flat_partition(3, &d(10), &default_eps()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn m3_caps_tile_and_are_flat(e in 6i64..20, k1 in 0u32..8, k2 in 0u32..14, s1: bool, s2: bool) {
            let delta = d(e);
            let kb = kbar(3, &delta).unwrap();
            prop_assume!(k1 <= kb[0] && k2 <= kb[1] && m3_applicable(&delta, k1, k2));
            let sign = |b: bool| if b { Sign::Minus } else { Sign::Plus };
            let r = partition_m3(&delta, k1, k2, [sign(s1), sign(s2)]).unwrap();
            prop_assert!(r.tiling_ok);
            prop_assert_eq!(r.flat_fraction, 1.0);
            let len = r.families[0].piece_len();
            let target = qmin(&pow2(k1 as i64 - k2 as i64), &pow2(60));
            let curv = Radical::new(Q::one(), pow2(k2 as i64) * &delta, 1, 2);
            prop_assert!(len <= target && curv.ge_q(&len));
            prop_assert!(qi(2) * &len > target || curv.cmp_q(&(qi(2) * &len)) == Ordering::Less);
        }

        #[test]
        fn tiling_rejects_any_duplicate(e in 6i64..14, pick in 0usize..500) {
            let annuli = dyadic_annuli(3, &d(e)).unwrap();
            let mut fams: Vec<CapFamily> = annuli.iter().map(|a| CapFamily { cap: a.cap(), pieces: 1 }).collect();
            let extra = fams[pick % fams.len()].clone();
            fams.push(extra);
            prop_assert!(!tiling_check_families(&fams, &Region::full(3)).unwrap().ok);
        }

        #[test]
        fn overlap_and_scales_hold(k in proptest::collection::vec(0u32..20, 3), e in 14i64..24) {
            let delta = d(e);
            let kb = kbar(4, &delta).unwrap();
            let k: Vec<u32> = k.iter().zip(&kb).map(|(a, b)| a % (b + 1)).collect();
            let a = AnnulusIndex::new(4, delta.clone(), vec![Sign::Plus; 3], k).unwrap();
            prop_assume!(a.has_shell());
            let l = iterate_annulus(&a, &default_eps(), true).unwrap().ledger;
            prop_assert!(l.scale_law_holds(4));
            prop_assert!(l.max_steps <= 3);
            prop_assert!(l.deltas_at_most_one);
        }
    }
}
