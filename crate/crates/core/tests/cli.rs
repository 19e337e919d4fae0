use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moire::curve::Method;
use moire::io::{
    read_bands_csv, read_convergence_csv, read_dofset_csv, read_dos_csv, read_region_csv, read_timing_csv,
    CONVERGENCE_HEADER, DOFSET_HEADER, DOS_HEADER, REGION_HEADER, TIMING_HEADER,
};

fn moire(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_moire"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("MOIRE_WORKERS");
    if let Some(w) = workers {
        cmd.env("MOIRE_WORKERS", w);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run_ok(sub: &str, config: &Path, out: &Path) -> String {
    let o = moire(&[sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(
        o.status.success(),
        "{sub} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const GRAPHENE: &str = r#""geometry": {"lattice": {"kind": "hexagonal", "a": 2.46}, "twist_deg": 3.0}"#;

#[test]
fn help_and_usage_errors() {
    let o = moire(&["--help"], None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "bands",
        "monolayer-dos",
        "region",
        "dos-real",
        "dos-momentum",
        "dos-momentum-naive",
        "verify-lemma",
        "converge",
        "bench",
    ] {
        assert!(text.contains(sub), "help text lacks {sub}");
    }
    assert_eq!(moire(&[], None).status.code(), Some(1));
    let o = moire(&["transmogrify", "--config", "x.json"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(moire(&["dos-real"], None).status.code(), Some(1));
    assert_eq!(moire(&["dos-real", "--config", "/no/such/file.json"], None).status.code(), Some(1));
}

#[test]
fn invalid_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.json", &format!("{{{GRAPHENE}, \"speed\": 3}}"));
    let o = moire(&["bands", "--config", unknown.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("speed"));
    let outside = write_config(
        dir.path(),
        "b.json",
        &format!("{{{GRAPHENE}, \"model\": {{\"eta\": 0.27}}, \"energies\": {{\"min\": 0.5, \"max\": 0.6, \"count\": 2}}}}"),
    );
    let out = dir.path().join("out");
    let o = moire(
        &["dos-momentum", "--config", outside.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn region_reports_ring_and_pockets() {
    let dir = tempfile::tempdir().unwrap();
    let ring = write_config(
        dir.path(),
        "ring.json",
        r#"{"geometry": {"lattice": {"kind": "hexagonal", "a": 2.46}, "twist_deg": 2.0},
            "window": [2.6, 2.8], "momentum": {"r": 0.0, "resolution": 64}}"#,
    );
    let out = dir.path().join("ring");
    let stdout = run_ok("region", &ring, &out);
    assert!(stdout.contains("not advantageous"), "{stdout}");
    assert_eq!(header(&out.join("region.csv")), REGION_HEADER);
    let rows = read_region_csv(&out.join("region.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 64 * 64);
    assert!(rows.iter().any(|r| r.wraps));
    assert!(rows.iter().all(|r| r.in_mask == r.component.is_some()));
    assert!(read_dofset_csv(&out.join("dofset.csv")).unwrap().is_empty());

    let pockets = write_config(
        dir.path(),
        "pockets.json",
        r#"{"geometry": {"lattice": {"kind": "hexagonal", "a": 2.46}, "twist_deg": 2.0},
            "window": [0.4, 0.5], "momentum": {"r": 1.0, "resolution": 64}}"#,
    );
    let out = dir.path().join("pockets");
    let stdout = run_ok("region", &pockets, &out);
    assert!(stdout.contains("advisory: advantageous"), "{stdout}");
    assert_eq!(header(&out.join("dofset.csv")), DOFSET_HEADER);
    let dofs = read_dofset_csv(&out.join("dofset.csv")).unwrap();
    assert!(!dofs.is_empty());
    assert!(dofs.iter().all(|(_, layer, orbital)| matches!(layer, 1 | 2) && *orbital < 2));
    assert!(!read_region_csv(&out.join("region.csv")).unwrap().iter().any(|r| r.wraps));
}

#[test]
fn bands_touch_at_the_dirac_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &format!("{{{GRAPHENE}, \"monolayer\": {{\"path\": [[0, 0], [0.6666666666666666, 0.3333333333333333]], \"points_per_segment\": 30}}}}"),
    );
    let out = dir.path().join("out");
    run_ok("bands", &cfg, &out);
    let bands = read_bands_csv(&out.join("bands.csv")).unwrap();
    assert_eq!(bands.rows.len(), 31);
    let (_, at_k) = bands.rows.last().unwrap();
    assert!((at_k[1] - at_k[0]).abs() < 1e-9);
    let (_, at_gamma) = &bands.rows[0];
    assert!((at_gamma[1] - 8.1).abs() < 1e-9);
}

#[test]
fn dos_commands_write_documented_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &format!(
            "{{{GRAPHENE}, \"model\": {{\"eta\": 0.27}}, \"energies\": {{\"min\": -0.2, \"max\": 0.2, \"count\": 5}},
              \"naive\": {{\"kappa\": 0.1, \"r\": 1.0, \"n_q\": 16}},
              \"momentum\": {{\"kappa\": 0.1, \"resolution\": 64, \"n_lambda\": 6}},
              \"real\": {{\"kappa\": 0.2, \"r\": 25.0, \"n_b\": 1}},
              \"monolayer\": {{\"kappa\": 0.1, \"grid\": 60}}}}"
        ),
    );
    for (sub, method) in [
        ("dos-momentum-naive", Method::MomentumNaive),
        ("dos-momentum", Method::MomentumAdaptive),
        ("dos-real", Method::Real),
        ("monolayer-dos", Method::Monolayer),
    ] {
        let out = dir.path().join(sub);
        run_ok(sub, &cfg, &out);
        assert_eq!(header(&out.join("dos.csv")), DOS_HEADER);
        let curves = read_dos_csv(&out.join("dos.csv")).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].method, method);
        assert_eq!(curves[0].energies.len(), 5);
        assert!(curves[0].values.iter().all(|v| *v > 0.0));
        if method != Method::Monolayer {
            assert_eq!(header(&out.join("timing.csv")), TIMING_HEADER);
            let timing = read_timing_csv(&out.join("timing.csv")).unwrap();
            assert_eq!(timing.last().unwrap().phase, "total");
        }
    }
    let out = dir.path().join("lemma");
    run_ok("verify-lemma", &cfg, &out);
    let lemma = fs::read_to_string(out.join("lemma.csv")).unwrap();
    assert_eq!(lemma.lines().count(), 5);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &format!(
            "{{{GRAPHENE}, \"model\": {{\"eta\": 0.27}}, \"energies\": {{\"min\": -0.2, \"max\": 0.2, \"count\": 9}},
              \"momentum\": {{\"kappa\": 0.1, \"resolution\": 64, \"n_lambda\": 8}}}}"
        ),
    );
    let mut values = Vec::new();
    for (w, flag) in [("1", false), ("3", true)] {
        let out = dir.path().join(format!("w{w}"));
        let mut args = vec!["dos-momentum", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        if flag {
            args.extend(["--workers", w]);
        }
        let o = moire(&args, (!flag).then_some(w));
        assert!(o.status.success());
        values.push(read_dos_csv(&out.join("dos.csv")).unwrap()[0].values.clone());
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&values[0]), bits(&values[1]));
}

#[test]
fn converge_writes_study_tables_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &format!(
            "{{{GRAPHENE}, \"model\": {{\"eta\": 0.27}},
              \"momentum\": {{\"resolution\": 64}},
              \"study\": {{\"m\": [9, 14], \"marked_energies\": [-0.1, 0.15], \"real_n_b\": 1,
                          \"reference\": {{\"n_lambda\": 12}}, \"record_wall_time\": false}}}}"
        ),
    );
    let mut texts = Vec::new();
    for w in ["1", "2"] {
        let out = dir.path().join(format!("w{w}"));
        let o = moire(
            &["converge", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", w],
            None,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("cost slope"));
        assert_eq!(header(&out.join("convergence.csv")), CONVERGENCE_HEADER);
        let rows = read_convergence_csv(&out.join("convergence.csv")).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert!(rows.iter().all(|r| r.rel_error.is_finite() && r.wall_s == 0.0));
        let curves = read_dos_csv(&out.join("dos.csv")).unwrap();
        assert_eq!(curves.len(), 5);
        texts.push(
            ["dos.csv", "convergence.csv", "timing.csv"]
                .map(|f| fs::read(out.join(f)).unwrap())
                .to_vec(),
        );
    }
    assert_eq!(texts[0], texts[1]);
}
