use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::Parser;
use proptest::prelude::*;
use ruled_decoup::partition::PartitionReport;
use ruled_decoup::verify::{ConstantBound, DecouplingEstimate, RatioQuantiles};
use ruled_decoup_cli::{emit_csv, fit_slope, parse_csv, run, Artifact, FailureKind, ReportRow, RunConfig};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ruled-decoup-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn config(args: &[&str]) -> RunConfig {
    RunConfig::try_parse_from(std::iter::once("ruled-decoup").chain(args.iter().copied())).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bin(args: &[&str]) -> std::process::Output {
    Proc::new(env!("CARGO_BIN_EXE_ruled-decoup")).args(args).output().unwrap()
}

#[test]
fn partition_fixture_tiles() {
    let dir = scratch("fixture");
    let out = dir.join("caps.json");
    let o = bin(&["partition", "--n", "3", "--delta", "2^-12", "--surface", "moment", "--mode", "flat", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let art: Artifact<PartitionReport> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(art.result.tiling_ok);
    assert_eq!(art.result.flat_fraction, 1.0);
    assert_eq!(art.hash, ruled_decoup_cli::content_hash(&art.config, &art.result));
}

#[test]
fn artifacts_reproduce_from_their_embedded_config() {
    let dir = scratch("rerun");
    let caps = dir.join("caps.json");
    let est = dir.join("est.json");
    run(&config(&["partition", "--n", "3", "--delta", "2^-6", "--annulus", "0,1", "--out", path_str(&caps)])).unwrap();
    let verify = config(&[
        "verify", "--caps", path_str(&caps), "--p", "6", "--trials", "8", "--samples", "2000", "--seed", "7", "--out",
        path_str(&est),
    ]);
    run(&verify).unwrap();
    for path in [&caps, &est] {
        let first = fs::read(path).unwrap();
        let value: serde_json::Value = serde_json::from_slice(&first).unwrap();
        let embedded: RunConfig = serde_json::from_value(value["config"].clone()).unwrap();
        run(&embedded).unwrap();
        assert_eq!(first, fs::read(path).unwrap(), "{}", path.display());
    }
    let art: Artifact<DecouplingEstimate> = serde_json::from_slice(&fs::read(&est).unwrap()).unwrap();
    assert_eq!(art.result.trials, 8);
    assert_eq!(art.result.seed, 7);
}

#[test]
fn constant_matches_a_direct_evaluation() {
    let dir = scratch("constant");
    let out = dir.join("bound.json");
    let o = bin(&["constant", "--formula", "moment", "--n", "3", "--delta", "2^-12", "--eps", "0.125", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let art: Artifact<ConstantBound> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    // (60 δ^{-ε/2})^{n/2} n^{1/2} (ln 1/δ)^{n ln n / ε}
    let d = 2f64.powi(-12);
    let want = (60.0 * d.powf(-0.0625)).powf(1.5) * 3f64.sqrt() * (1.0 / d).ln().powf(3.0 * 3f64.ln() / 0.125);
    assert!((art.result.value / want - 1.0).abs() < 1e-11);
}

#[test]
fn exit_codes_and_error_records() {
    let dir = scratch("codes");
    let out = dir.join("caps.json");
    // A tolerance below the achieved flatness is a verification failure; the artifact is still written.
    let o = bin(&["partition", "--n", "3", "--delta", "2^-8", "--tolerance-multiplier", "1", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.exists());
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(rec["exit_code"], 2);
    assert_eq!(rec["error"]["kind"], "verification");

    for args in [
        vec!["partition", "--n", "3", "--delta", "0.75", "--out", "x.json"],
        vec!["partition", "--n", "3", "--delta", "2^-8", "--annulus", "1,2,3", "--out", "x.json"],
        vec!["partition", "--n", "3", "--delta", "banana", "--out", "x.json"],
        vec!["constant", "--formula", "nope", "--n", "3", "--delta", "2^-8", "--eps", "0.1", "--out", "x.json"],
        vec!["oracle", "--delta", "2^-20", "--out", "x.json"],
        vec!["verify", "--caps", "/nonexistent/caps.json", "--out", "x.json"],
    ] {
        let o = bin(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
        assert_eq!(rec["exit_code"], 1);
    }
    let err = run(&config(&["verify", "--caps", "/nonexistent/caps.json", "--out", "x.json"])).unwrap_err();
    assert_eq!(err.kind, FailureKind::Io);
    assert!(err.message.contains("/nonexistent/caps.json"));

    let o = Proc::new(env!("CARGO_BIN_EXE_ruled-decoup"))
        .args(["constant", "--formula", "moment", "--n", "3", "--delta", "2^-8", "--eps", "0.1", "--out"])
        .arg(dir.join("b.json"))
        .env("RULED_DECOUP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

fn estimate(delta: f64, p25: f64, p50: f64, p75: f64) -> DecouplingEstimate {
    DecouplingEstimate {
        p: 6.0,
        delta,
        lhs: p50,
        rhs: 1.0,
        ratio: p50,
        trials: 16,
        ratio_quantiles: RatioQuantiles { min: p25, p25, p50, p75, max: p75 },
        ratios: vec![p50; 16],
        caps: 4,
        atoms: 8,
        box_side: 1.0 / delta,
        n_samples: 1000,
        seed: 0,
    }
}

#[test]
fn report_of_one_estimate() {
    let dir = scratch("report1");
    let est = dir.join("e.json");
    fs::write(&est, serde_json::to_string(&estimate(1.0 / 64.0, 1.1, 1.15, 1.2)).unwrap()).unwrap();
    let (csv, svg) = (dir.join("r.csv"), dir.join("r.svg"));
    run(&config(&["report", "--estimates", path_str(&est), "--csv", path_str(&csv), "--svg", path_str(&svg)])).unwrap();
    let rows = parse_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].ratio_p50, 1.15);
    let svg = fs::read_to_string(&svg).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
    assert!(svg.contains("slope = n/a"));
}

#[test]
fn report_slope_is_the_least_squares_fit() {
    let dir = scratch("report4");
    let points = [(6, 1.10), (8, 1.13), (10, 1.12), (12, 1.17)];
    let mut paths = Vec::new();
    for (e, r) in points {
        let p = dir.join(format!("e{e}.json"));
        let art = Artifact::new(&config(&["oracle", "--delta", "0.25", "--out", "o.json"]), estimate(2f64.powi(-e), r - 0.01, r, r + 0.01));
        fs::write(&p, serde_json::to_string(&art).unwrap()).unwrap();
        paths.push(p);
    }
    let (csv, svg) = (dir.join("r.csv"), dir.join("r.svg"));
    let mut args = vec!["report", "--estimates"];
    args.extend(paths.iter().map(|p| path_str(p)));
    args.extend(["--csv", path_str(&csv), "--svg", path_str(&svg)]);
    run(&config(&args)).unwrap();
    // independent fit: slope of ln r against ln(1/δ) = e ln 2
    let xs: Vec<f64> = points.iter().map(|(e, _)| *e as f64 * 2f64.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, r)| f64::ln(*r)).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = num / den;
    let svg = fs::read_to_string(&svg).unwrap();
    assert!(svg.contains(&format!("slope = {slope:.4}")), "{slope}");
    let rows = parse_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    let fitted = fit_slope(&rows.iter().map(|r| (1.0 / r.delta, r.ratio_p50)).collect::<Vec<_>>()).unwrap();
    assert!((fitted - slope).abs() < 1e-9);
}

fn sig12(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap()
}

proptest! {
    #[test]
    fn csv_round_trips_at_twelve_digits(
        rows in prop::collection::vec((1e-9f64..1.0, 2.0f64..6.0, 0.1f64..10.0, 0.1f64..10.0, 0.1f64..10.0, 1usize..1000), 1..6)
    ) {
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .map(|(delta, p, a, b, c, trials)| ReportRow { delta, p, ratio_p25: a, ratio_p50: b, ratio_p75: c, trials })
            .collect();
        let back = parse_csv(&emit_csv(&rows, &["meta".into()])).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(sig12(a.delta), b.delta);
            prop_assert_eq!(sig12(a.p), b.p);
            prop_assert_eq!(sig12(a.ratio_p25), b.ratio_p25);
            prop_assert_eq!(sig12(a.ratio_p50), b.ratio_p50);
            prop_assert_eq!(sig12(a.ratio_p75), b.ratio_p75);
            prop_assert_eq!(a.trials, b.trials);
        }
    }
}
