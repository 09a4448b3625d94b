//! Runs the `mcrc` binary end to end: exit codes, outputs and manifests.

use std::fs;
use std::path::Path;
use std::process::Command;

use mcrc::cli::{exit_code, EXIT_DATA, EXIT_SOLVER, EXIT_USAGE};
use mcrc::raster::{GridGeometry, RasterGrid};
use mcrc::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mcrc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mcrc")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

fn small_plot(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("plot.cfg");
    fs::write(&cfg, "synth.extent = 16, 16\nsynth.n_canopy = 4\nsynth.point_density = 30\n").unwrap();
    cfg
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mcrc(&[]).0, EXIT_USAGE);
    assert_eq!(mcrc(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(mcrc(&["segment"]).0, EXIT_USAGE);
    assert_eq!(mcrc(&["--help"]).0, 0);
}

#[test]
fn data_errors_exit_two_and_still_write_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let (code, err) = mcrc(&["segment", "--input", p(&tmp.path().join("missing.csv")), "--out", p(&out)]);
    assert_eq!(code, EXIT_DATA, "{err}");
    let m = manifest(&out);
    assert!(m.contains("command = segment"));
    assert!(m.contains("status = error"));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(mcrc(&["synth", "--config", p(&cfg), "--out", p(&out)]).0, EXIT_DATA);
}

#[test]
fn solver_failures_map_to_three() {
    let e = Error::NonConvergence { matvecs: 10, max_residual: 1.0 };
    assert_eq!(exit_code(&e), EXIT_SOLVER);
    assert_eq!(exit_code(&Error::NoPoints), EXIT_DATA);
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = small_plot(root);
    let synth = root.join("synth");
    assert_eq!(mcrc(&["synth", "--config", p(&cfg), "--seed", "4", "--out", p(&synth)]).0, 0);
    for f in ["cloud.csv", "truth.csv", "tree_truth.csv", "point_truth.csv"] {
        assert!(synth.join(f).exists(), "{f}");
    }
    assert!(manifest(&synth).contains("config.synth.seed = 4"));
    let cloud = synth.join("cloud.csv");

    let filter = root.join("filter");
    assert_eq!(mcrc(&["filter", "--input", p(&cloud), "--out", p(&filter)]).0, 0);
    assert!(filter.join("ground.csv").exists() && filter.join("objects.csv").exists());

    let chm = root.join("chm");
    assert_eq!(mcrc(&["chm", "--input", p(&cloud), "--out", p(&chm)]).0, 0);
    let grid = RasterGrid::read_ascii(&chm.join("chm.asc")).unwrap();
    assert!(grid.iter().flatten().all(|v| v >= 0.0));

    let detect = root.join("detect");
    assert_eq!(mcrc(&["detect", "--input", p(&cloud), "--out", p(&detect)]).0, 0);
    for f in ["treetops.csv", "watershed.asc", "watershed_trees.csv"] {
        assert!(detect.join(f).exists(), "{f}");
    }

    for (cmd, dir) in [("segment", "seg"), ("rc-only", "rc")] {
        let out = root.join(dir);
        let (code, err) = mcrc(&[cmd, "--input", p(&cloud), "--out", p(&out), "--threads", "2"]);
        assert_eq!(code, 0, "{cmd}: {err}");
        assert!(out.join("segmentation.csv").exists() && out.join("trees.csv").exists());
        assert!(out.join("rc_nodes.csv").exists());
        let m = manifest(&out);
        assert!(m.contains("status = ok") && m.contains("timing.total"));
        assert!(m.contains("threads = 2"));
    }
    assert!(root.join("seg/mc_correlations.csv").exists());

    let val = root.join("val");
    let trees = root.join("seg/trees.csv");
    assert_eq!(mcrc(&["validate", "--truth", p(&synth.join("truth.csv")), "--trees", p(&trees), "--out", p(&val)]).0, 0);
    let report = fs::read_to_string(val.join("report.csv")).unwrap();
    let overall = report.lines().find(|l| l.starts_with("Overall,")).unwrap();
    let fields: Vec<usize> = overall.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields[0], 4);
    assert!(fields[2] >= 3, "{overall}");
}

#[test]
fn rpca_writes_scores_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let geom = GridGeometry::new((0.0, 0.0), 1.0, 12, 10).unwrap();
    let mut args: Vec<String> = vec!["rpca".into()];
    // Seven bands from a random rank-6 factorization.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u: Vec<[f64; 6]> = (0..geom.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    for b in 0..7 {
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let values = u.iter().map(|row| Some(row.iter().zip(&v).map(|(a, c)| a * c).sum::<f64>())).collect();
        let path = tmp.path().join(format!("band{b}.asc"));
        RasterGrid::from_values(geom, values).unwrap().write_ascii(&path).unwrap();
        args.extend(["--band".into(), path.to_string_lossy().into_owned()]);
    }
    // Nuclear-norm shrinkage leaves fewer than five components here, so the
    // default range must be refused as rank deficient.
    let argv = |out: &Path, extra: &[String]| {
        let mut a = args.clone();
        a.extend(["--out".into(), p(out).into()]);
        a.extend(extra.iter().cloned());
        a
    };
    let refused = argv(&tmp.path().join("refused"), &[]);
    assert_eq!(mcrc(&refused.iter().map(String::as_str).collect::<Vec<_>>()).0, EXIT_DATA);

    let cfg = tmp.path().join("rpca.cfg");
    fs::write(&cfg, "rpca.last_component = 3\n").unwrap();
    let out = tmp.path().join("out");
    let ok = argv(&out, &["--config".into(), p(&cfg).into()]);
    let (code, err) = mcrc(&ok.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 0, "{err}");
    for k in 2..=3 {
        let g = RasterGrid::read_ascii(&out.join(format!("pc{k}.asc"))).unwrap();
        assert!(g.same_geometry(&RasterGrid::nodata(geom)));
    }
    assert!(!out.join("pc4.asc").exists());
    let trace = fs::read_to_string(out.join("rpca_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,objective,merit"));
}
