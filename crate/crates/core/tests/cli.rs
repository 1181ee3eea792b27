//! End-to-end runs of the `intracell` binary. Golden summaries live in
//! `tests/golden`; set `INTRACELL_BLESS=1` to regenerate them.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name).display().to_string()
}

fn intracell(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intracell")).args(args).env_remove("INTRACELL_THREADS").output().unwrap()
}

fn stdout_ok(args: &[&str]) -> String {
    let out = intracell(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn check_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("INTRACELL_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let (a, e): (toml::Table, toml::Table) = (toml::from_str(actual).unwrap(), toml::from_str(&expected).unwrap());
    compare(&a.into(), &e.into(), name);
}

/// Structural comparison with a relative tolerance on floats.
fn compare(a: &toml::Value, e: &toml::Value, at: &str) {
    use toml::Value::*;
    match (a, e) {
        (Float(x), Float(y)) => {
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{at}: {x} != {y}");
        }
        (Array(x), Array(y)) => {
            assert_eq!(x.len(), y.len(), "{at}: length");
            for (k, (p, q)) in x.iter().zip(y).enumerate() {
                compare(p, q, &format!("{at}[{k}]"));
            }
        }
        (Table(x), Table(y)) => {
            let (kx, ky): (Vec<_>, Vec<_>) = (x.keys().collect(), y.keys().collect());
            assert_eq!(kx, ky, "{at}: keys");
            for (k, v) in x {
                compare(v, &y[k], &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(a, e, "{at}"),
    }
}

/// A small FRAP protocol that runs in well under a second per curve.
fn small_protocol(dir: &Path) -> PathBuf {
    let path = dir.join("protocol.toml");
    fs::write(
        &path,
        "[domain]\nwidth = 12.0\nheight = 24.0\nnx = 12\nny = 24\n\n[spot]\nx = 6.0\ny = 12.0\nradius = 2.0\n\n\
         [bleach]\ndepth = 0.8\n\n[observation]\nt_end = 10.0\ncount = 10\n",
    )
    .unwrap();
    path
}

#[test]
fn effective_matches_golden() {
    let out = stdout_ok(&["effective", "--model", &data("two_state.toml")]);
    check_golden("effective_two_state.toml", &out);
}

#[test]
fn effective_four_state_matches_golden() {
    let out = stdout_ok(&["effective", "--model", &data("four_state_bidirectional.toml")]);
    check_golden("effective_four_state.toml", &out);
}

#[test]
fn dispersion_matches_golden() {
    let out = stdout_ok(&["dispersion", "--model", &data("two_state.toml"), "--points", "9", "--nu-max", "1"]);
    check_golden("dispersion_two_state.toml", &out);
}

#[test]
fn spatial_effective_matches_golden() {
    let out =
        stdout_ok(&["spatial-effective", "--model", &data("two_state.toml"), "--rho", &data("rho_step.csv"), "--points", "201"]);
    check_golden("spatial_step.toml", &out);
}

#[test]
fn simulate_matches_golden() {
    let out = stdout_ok(&["simulate", "--model", &data("two_state.toml"), "--cycles", "5000", "--seed", "11"]);
    check_golden("simulate_two_state.toml", &out);
}

#[test]
fn missing_model_names_the_path() {
    let out = intracell(&["effective", "--model", "/no/such/model.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/model.toml"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn invalid_model_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[[state]]\nlabel = \"a\"\nspeed = 1.0\ndiffusivity = -1.0\n").unwrap();
    let out = intracell(&["effective", "--model", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn cfl_violation_fails_cleanly() {
    let out = intracell(&["pde", "--model", &data("two_state.toml"), "--dt", "1.0", "--t-end", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stability limit"), "{err}");
}

#[test]
fn pde_tracks_effective_velocity() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout_ok(&[
        "pde", "--model", &data("two_state.toml"), "--t-end", "4", "--snapshots", "1,2", "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let t: toml::Table = toml::from_str(&out).unwrap();
    let slope = t["mean_y_slope"].as_float().unwrap();
    let v = t["spectral_v_eff"].as_float().unwrap();
    assert!((slope + v).abs() < 1e-3 * v, "slope {slope} vs -{v}");
    assert!(t["mass_drift_rate"].as_float().unwrap().abs() < 1e-12);
    for f in ["moments.csv", "snapshot_000.txt", "snapshot_001.txt", "final.txt", "summary.toml", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn network_then_pde_on_segments() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net");
    stdout_ok(&[
        "network", "--kind", "parallel", "--filaments", "30", "--p-plus-down", "1", "--width", "4", "--height", "20", "--nx",
        "40", "--ny", "200", "--seed", "1", "--out-dir", net.to_str().unwrap(),
    ]);
    let segs = net.join("segments.csv");
    let out = stdout_ok(&["pde", "--model", &data("two_state.toml"), "--segments", segs.to_str().unwrap(), "--t-end", "2"]);
    let t: toml::Table = toml::from_str(&out).unwrap();
    assert_eq!(t["mode"].as_str(), Some("network"));
    // Plus ends down everywhere: net drift toward -y.
    assert!(t["mean_y_slope"].as_float().unwrap() < 0.0);
}

#[test]
fn frap_synth_sweep_fit_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let protocol = small_protocol(dir.path());
    let synth = dir.path().join("synth");
    stdout_ok(&[
        "frap-synth", "--model", &data("frap/well_identified.toml"), "--protocol", protocol.to_str().unwrap(), "--out-dir",
        synth.to_str().unwrap(),
    ]);
    let curve = synth.join("recovery.csv");
    let grid = "d=0.5:2:2,c=0.25:1:2,beta1=0.1:0.4:2,beta2=0.05:0.2:2";
    let sweep = stdout_ok(&[
        "frap-sweep", "--protocol", protocol.to_str().unwrap(), "--data", curve.to_str().unwrap(), "--grid", grid,
    ]);
    let t: toml::Table = toml::from_str(&sweep).unwrap();
    assert_eq!(t["evaluated"].as_integer(), Some(16));
    assert_eq!(t["profiles"].as_array().unwrap().len(), 4);

    let fit_dir = dir.path().join("fit");
    let fit = stdout_ok(&[
        "frap-fit", "--protocol", protocol.to_str().unwrap(), "--data", curve.to_str().unwrap(), "--grid", grid, "--starts",
        "2", "--max-iter", "40", "--out-dir", fit_dir.to_str().unwrap(),
    ]);
    let t: toml::Table = toml::from_str(&fit).unwrap();
    assert_eq!(t["params"].as_array().unwrap().len(), 4);
    assert!(t["objective"].as_float().unwrap() >= 0.0);
    for f in ["sweep.csv", "optima.csv", "fitted.csv"] {
        assert!(fit_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn unknown_template_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let protocol = small_protocol(dir.path());
    let out = intracell(&[
        "frap-sweep", "--protocol", protocol.to_str().unwrap(), "--data", "x.csv", "--template", "three-state", "--grid", "d=1:2:2",
    ]);
    assert!(!out.status.success());
}

#[test]
fn replay_reproduces_artifacts_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    stdout_ok(&[
        "simulate", "--model", &data("four_state_random.toml"), "--cycles", "3000", "--seed", "2", "--threads", "1",
        "--out-dir", a.to_str().unwrap(),
    ]);
    stdout_ok(&["replay", a.join("manifest.json").to_str().unwrap(), "--threads", "4", "--out-dir", b.to_str().unwrap()]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"].as_u64(), Some(2));
    assert_eq!(manifest["schema"].as_str(), Some("intracell.manifest/1"));
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert!(artifacts.iter().any(|f| f == "cycles.csv"));
    for f in artifacts {
        let f = f.as_str().unwrap();
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}
