use std::f64::consts::{PI, TAU};

use num::complex::Complex64;
use ruled_decoup::exact::{pow2, qf};
use ruled_decoup::partition::{flat_partition, partition_m3};
use ruled_decoup::verify::{
    cap_membership, cylindrical_lift_check, decoupling_ratio, decoupling_ratio_caps, estimate_ratio, lp_norm,
    parabola_caps, parabola_dec_oracle, random_test_function, Atom, Phases, SamplePlan, Stratification,
    TestFunction,
};
use ruled_decoup::{Cap, Error, Sign};

fn plan(side: f64, n: usize, seed: u64) -> SamplePlan {
    SamplePlan::new(side, n, seed, Stratification::Uniform).unwrap()
}

fn atom(freq: Vec<f64>, amp: Complex64, cap: usize) -> Atom {
    Atom { freq, amp, cap }
}

fn m3_caps(e: i64) -> Vec<Cap> {
    partition_m3(&pow2(-e), 0, 1, [Sign::Plus, Sign::Plus]).unwrap().caps().collect()
}

#[test]
fn single_center_atom_is_a_pure_exponential() {
    let caps = m3_caps(8);
    let f = random_test_function(&caps[..1], 1.0 / 256.0, 1, 3).unwrap().coherent();
    let xi = f.atoms[0].freq.clone();
    for x in [[0.0, 0.0, 0.0, 0.0], [1.5, -2.0, 0.25, 7.0], [100.0, 3.0, -40.0, 0.5]] {
        let want = Complex64::cis(TAU * x.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>());
        assert!((f.eval(&x) - want).norm() < 1e-12);
    }
}

#[test]
fn atoms_are_reproducible_per_seed() {
    let caps = m3_caps(8);
    let a = random_test_function(&caps, 1.0 / 256.0, 3, 11).unwrap();
    let b = random_test_function(&caps, 1.0 / 256.0, 3, 11).unwrap();
    let c = random_test_function(&caps, 1.0 / 256.0, 3, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(matches!(random_test_function(&[], 0.1, 1, 0), Err(Error::Empty(_))));
    assert!(random_test_function(&caps, 0.1, 0, 0).is_err());
}

#[test]
fn every_atom_reprojects_into_its_cap() {
    let delta = pow2(-8);
    let report = flat_partition(3, &delta, &qf(1, 8)).unwrap();
    let caps: Vec<Cap> = report.caps().step_by(7).collect();
    let f = random_test_function(&caps, 1.0 / 256.0, 4, 5).unwrap();
    for a in &f.atoms {
        let m = cap_membership(&caps[a.cap], &a.freq).unwrap();
        assert!(m.inside, "cap {} t={} v={}", a.cap, m.t, m.v);
    }
    // Pushing the offset past δ must be caught.
    let mut far = f.atoms[0].freq.clone();
    far[3] += 2.0 / 256.0;
    assert!(!cap_membership(&caps[0], &far).unwrap().inside);
    // An atom of one cap is not a member of a distant cap.
    let last = f.atoms.iter().rev().find(|a| a.cap == caps.len() - 1).unwrap();
    assert!(!cap_membership(&caps[0], &last.freq).unwrap().inside);
}

#[test]
fn unimodular_norm_is_the_box_volume() {
    let f = TestFunction::new(2, 1, vec![atom(vec![0.3, -1.7], Complex64::cis(0.4), 0)]).unwrap();
    let plan = plan(64.0, 2000, 1);
    for p in [2.0, 3.5, 6.0] {
        let n = lp_norm(&f, p, &plan).unwrap();
        let want = (64.0f64 * 64.0).powf(1.0 / p);
        assert!((n.value / want - 1.0).abs() < 1e-12);
        assert!(n.stderr < 1e-9 * want);
    }
    assert!(lp_norm(&f, 1.5, &plan).is_err());
    assert!(lp_norm(&f, 6.5, &plan).is_err());
}

#[test]
fn opposite_atoms_cancel() {
    let xi = vec![0.5, 0.25];
    let one = Complex64::new(1.0, 0.0);
    let f = TestFunction::new(2, 1, vec![atom(xi.clone(), one, 0), atom(xi, -one, 0)]).unwrap();
    assert_eq!(lp_norm(&f, 4.0, &plan(10.0, 1000, 2)).unwrap().value, 0.0);
}

/// ∫ over [-R/2, R/2]^d of |e(x·a) + e(x·b)|² = 2R^d (1 + Π sinc(π R γ_i)), γ = a - b.
#[test]
fn two_atom_l2_matches_the_box_integral() {
    let side = 8.0;
    for gap in [[0.05, 0.0], [0.1, 0.07], [0.3, 0.2]] {
        let one = Complex64::new(1.0, 0.0);
        let f = TestFunction::new(2, 1, vec![atom(vec![0.0, 0.0], one, 0), atom(gap.to_vec(), one, 0)]).unwrap();
        let sinc = |u: f64| if u == 0.0 { 1.0 } else { u.sin() / u };
        let exact = 2.0 * side * side * (1.0 + gap.iter().map(|g| sinc(PI * side * g)).product::<f64>());
        let est = lp_norm(&f, 2.0, &plan(side, 200_000, 9)).unwrap();
        let sq = est.value * est.value;
        // squared-norm error ~ 2 · value · stderr
        let tol = 4.0 * 2.0 * est.value * est.stderr;
        assert!((sq - exact).abs() < tol, "gap {gap:?}: {sq} vs {exact} (tol {tol})");
    }
}

#[test]
fn doubling_samples_shrinks_the_error_by_root_two() {
    let caps = m3_caps(6);
    let f = random_test_function(&caps, 1.0 / 64.0, 1, 4).unwrap();
    let f = f.rephased(&mut rand_chacha::ChaCha8Rng::from_seed_u64(4));
    let a = lp_norm(&f, 6.0, &plan(64.0, 40_000, 21)).unwrap();
    let b = lp_norm(&f, 6.0, &plan(64.0, 80_000, 21)).unwrap();
    let factor = a.stderr / b.stderr;
    assert!((1.2..=1.7).contains(&factor), "factor {factor}");
}

trait SeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}
impl SeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        <Self as rand::SeedableRng>::seed_from_u64(seed)
    }
}

#[test]
fn separated_frequencies_are_orthogonal_in_l2() {
    // gap 1 on a box of side 100: R ≥ 100 / gap
    let atoms = (0..5)
        .map(|k| atom(vec![k as f64, (k * k) as f64 * 0.5], Complex64::cis(k as f64), 0))
        .collect();
    let f = TestFunction::new(2, 1, atoms).unwrap();
    let est = lp_norm(&f, 2.0, &plan(100.0, 100_000, 3)).unwrap();
    let want = 5.0 * 100.0 * 100.0;
    assert!((est.value.powi(2) / want - 1.0).abs() < 0.05);
}

#[test]
fn stratified_points_hit_every_stratum_once() {
    let plan = SamplePlan::new(10.0, 1000, 8, Stratification::StratifiedPerAxis).unwrap();
    let pts = plan.points(3, 0);
    assert_eq!(pts, plan.points(3, 0));
    for axis in 0..3 {
        let mut hit = vec![false; 1000];
        for x in pts.chunks(3) {
            let k = ((x[axis] / 10.0 + 0.5) * 1000.0).floor() as usize;
            assert!(!hit[k]);
            hit[k] = true;
        }
    }
    assert!(SamplePlan::new(10.0, 999, 0, Stratification::Uniform).is_err());
    assert!(SamplePlan::new(0.0, 1000, 0, Stratification::Uniform).is_err());
}

#[test]
fn one_cap_partition_has_ratio_exactly_one() {
    let caps = m3_caps(8);
    for p in [2.0, 4.0, 6.0] {
        let est = decoupling_ratio_caps(&caps[..1], 1.0 / 256.0, p, 8, 3, &SamplePlan::for_delta(1.0 / 256.0, 1000, 1).unwrap())
            .unwrap();
        assert_eq!(est.ratio, 1.0);
        assert!(est.ratios.iter().all(|&r| r == 1.0));
    }
}

#[test]
fn estimates_are_bitwise_reproducible() {
    let delta = pow2(-6);
    let report = partition_m3(&delta, 0, 1, [Sign::Plus, Sign::Plus]).unwrap();
    let plan = SamplePlan::for_delta(1.0 / 64.0, 2000, 77).unwrap();
    let a = decoupling_ratio(&report, 6.0, 8, &plan).unwrap();
    let b = decoupling_ratio(&report, 6.0, 8, &plan).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.ratio, a.lhs / a.rhs);
    assert_eq!(a.ratio, a.ratio_quantiles.p50);
    assert!(decoupling_ratio(&report, 6.0, 7, &plan).is_err());
}

#[test]
fn l2_ratio_is_near_one_on_a_large_box() {
    let delta = pow2(-6);
    let report = partition_m3(&delta, 0, 1, [Sign::Plus, Sign::Plus]).unwrap();
    let plan = plan(16.0 * 64.0, 20_000, 5);
    let est = decoupling_ratio(&report, 2.0, 8, &plan).unwrap();
    assert!((est.ratio - 1.0).abs() < 0.05, "{}", est.ratio);
}

#[test]
fn coherent_profile_is_not_beaten_by_random_phases() {
    let caps = parabola_caps(1.0 / 64.0).unwrap();
    let f = ruled_decoup::verify::parabola_test_function(&caps, 1.0 / 64.0, 1, 0).unwrap();
    let plan = SamplePlan::for_delta(1.0 / 64.0, 20_000, 2).unwrap();
    let random = estimate_ratio(&f, 6.0, 1.0 / 64.0, 8, &plan, Phases::Random).unwrap();
    let coherent = estimate_ratio(&f, 6.0, 1.0 / 64.0, 1, &plan, Phases::Coherent).unwrap();
    assert!(coherent.ratio >= random.ratio_quantiles.p50);
}

/// Two caps at δ = 1/4 with centers 1/4 and 3/4: on the box [-2, 2]² the cross
/// term runs over whole periods, so for any phase the p = 6 ratio is
/// (mean |1 + e^{iψ}|⁶)^{1/6} / √2 = 20^{1/6} / √2.
#[test]
fn oracle_two_caps_matches_a_phase_grid() {
    let caps = parabola_caps(0.25).unwrap();
    assert_eq!(caps, vec![(0.0, 0.5), (0.5, 1.0)]);
    let closed = 20f64.powf(1.0 / 6.0) / 2f64.sqrt();
    // brute force: midpoint quadrature in x, 16 phases
    let grid = 200;
    let mut worst: f64 = 0.0;
    for k in 0..16 {
        let phase = TAU * k as f64 / 16.0;
        let mut acc = 0.0;
        for i in 0..grid {
            for j in 0..grid {
                let x = [-2.0 + 4.0 * (i as f64 + 0.5) / grid as f64, -2.0 + 4.0 * (j as f64 + 0.5) / grid as f64];
                let a = x[0] * 0.25 + x[1] / 16.0;
                let b = x[0] * 0.75 + x[1] * 9.0 / 16.0;
                let v = Complex64::cis(TAU * a) + Complex64::cis(TAU * b + phase);
                acc += v.norm().powi(6);
            }
        }
        worst = worst.max((acc / (grid * grid) as f64).powf(1.0 / 6.0) / 2f64.sqrt());
    }
    assert!((worst / closed - 1.0).abs() < 1e-3);
    let plan = SamplePlan::for_delta(0.25, 100_000, 3).unwrap();
    let oracle = parabola_dec_oracle(0.25, 6.0, 8, &plan).unwrap();
    assert!((oracle.value / closed - 1.0).abs() < 0.03, "{} vs {closed}", oracle.value);
}

#[test]
fn oracle_is_near_one_at_p2_and_guards_cost() {
    let plan = SamplePlan::for_delta(1.0 / 256.0, 20_000, 3).unwrap();
    let o = parabola_dec_oracle(1.0 / 256.0, 2.0, 8, &plan).unwrap();
    assert!((o.random.ratio - 1.0).abs() < 0.05, "{}", o.random.ratio);
    assert!(matches!(parabola_dec_oracle(pow2f(-17), 6.0, 8, &plan), Err(Error::CostGuard(_))));
}

fn pow2f(e: i32) -> f64 {
    2f64.powi(e)
}

#[test]
fn lift_of_one_cap_and_flat_lift_change_nothing() {
    let caps = parabola_caps(1.0 / 64.0).unwrap();
    let plan = SamplePlan::for_delta(1.0 / 64.0, 2000, 4).unwrap();
    let one = cylindrical_lift_check(&caps[..1], 1.0 / 64.0, 6.0, 8, 2, 1.0, &plan).unwrap();
    assert_eq!(one.base.ratio, 1.0);
    assert_eq!(one.lifted.ratio, 1.0);
    let flat = cylindrical_lift_check(&caps, 1.0 / 64.0, 6.0, 8, 2, 0.0, &plan).unwrap();
    for (a, b) in flat.base.ratios.iter().zip(&flat.lifted.ratios) {
        assert!((a - b).abs() < 1e-9);
    }
}
