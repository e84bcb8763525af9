//! Drives the `qdmfa` binary as a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qdmfa::maps_io::{write_qfm, FieldMap, GridGeometry, QfmFile, MASK_CHANNEL, UNIT_TESLA};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn qdmfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdmfa"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qdmfa(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn two_branch_scenario_reports_missing_branch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["kgd", "defective"] {
        let scn = scenarios().join(format!("{name}.json"));
        let scn = scn.to_str().unwrap();
        let (b, cube, fit, j) = (
            format!("{name}_b.qfm"),
            format!("{name}.qdcb"),
            format!("{name}_fit.qfm"),
            format!("{name}_j.qfm"),
        );
        ok(d, &["simulate", "--scenario", scn, "--out", &b]);
        ok(
            d,
            &[
                "synth-odmr",
                "--field",
                &b,
                "--scenario",
                scn,
                "--seed",
                "3",
                "--out",
                &cube,
            ],
        );
        ok(
            d,
            &["fit", "--cube", &cube, "--scenario", scn, "--out", &fit],
        );
        ok(d, &["invert", "--in", &fit, "--out", &j]);
    }
    let kgd = scenarios().join("kgd.json");
    let report = json(&ok(
        d,
        &[
            "compare",
            "--ref",
            "kgd_j.qfm",
            "--dut",
            "defective_j.qfm",
            "--scenario",
            kgd.to_str().unwrap(),
        ],
    ));
    assert_eq!(report["kind"], "MissingBranch");
    assert_eq!(report["termination_reason"], "Terminated");
    assert!(report["ref_path"].as_array().unwrap().len() > 10);
    let conf = report["confidence"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&conf));

    let trace = json(&ok(
        d,
        &[
            "trace",
            "--in",
            "defective_j.qfm",
            "--seed-px",
            "16,32",
            "--stop-fraction",
            "0.5",
        ],
    ));
    assert_eq!(trace["reason"], "Terminated");
    let end = trace["points_px"]
        .as_array()
        .unwrap()
        .last()
        .unwrap()
        .clone();
    assert!((end[0].as_f64().unwrap() - 62.0).abs() <= 2.0, "{end}");
}

#[test]
fn ohmic_csv_is_a_fifty_ohm_short() {
    let dir = tempfile::tempdir().unwrap();
    let csv = scenarios().join("linear.csv");
    let v = json(&ok(dir.path(), &["iv", "--csv", csv.to_str().unwrap()]));
    assert_eq!(v["class"], "ShortSuspected");
    assert!((v["resistance_ohm"].as_f64().unwrap() - 50.0).abs() < 50.0 * 1e-9);
    let diode = scenarios().join("diode.csv");
    let v = json(&ok(dir.path(), &["iv", "--csv", diode.to_str().unwrap()]));
    assert_eq!(v, serde_json::json!({"class": "Nominal"}));
}

#[test]
fn render_writes_a_valid_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scn = scenarios().join("wire.json");
    ok(
        d,
        &[
            "simulate",
            "--scenario",
            scn.to_str().unwrap(),
            "--out",
            "b.qfm",
        ],
    );
    ok(
        d,
        &[
            "render",
            "--in",
            "b.qfm",
            "--channel",
            "Bz",
            "--out",
            "bz.pgm",
        ],
    );
    let bytes = std::fs::read(d.join("bz.pgm")).unwrap();
    let header = b"P5\n64 64\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 2 * 64 * 64);
    // The wire runs along y at column 31.5: Bz changes sign across it.
    let level = |row: usize, col: usize| {
        let i = header.len() + 2 * (row * 64 + col);
        u16::from_be_bytes([bytes[i], bytes[i + 1]])
    };
    assert!((level(32, 10) < 32768) != (level(32, 53) < 32768));
}

#[test]
fn masked_input_is_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = GridGeometry::new(16, 16, 2e-6, 5e-6).unwrap();
    let bz = FieldMap::from_fn(g, UNIT_TESLA, |c, r| {
        1e-6 * ((c as f64 - 8.0) / (1.0 + (r as f64 - 8.0).powi(2)))
    })
    .unwrap();
    let mask = FieldMap::from_fn(g, "1", |c, r| if (c, r) == (3, 3) { 0.0 } else { 1.0 }).unwrap();
    write_qfm(
        QfmFile::single("Bz", &bz).with_map(MASK_CHANNEL, &mask),
        &d.join("masked.qfm"),
    )
    .unwrap();

    let out = qdmfa(d, &["invert", "--in", "masked.qfm", "--out", "j.qfm"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: MaskedPixels: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!d.join("j.qfm").exists());

    ok(
        d,
        &[
            "invert",
            "--in",
            "masked.qfm",
            "--allow-masked",
            "--out",
            "j.qfm",
        ],
    );
    let j = qdmfa::maps_io::read_qfm(&d.join("j.qfm"))
        .unwrap()
        .current_density()
        .unwrap();
    assert!(j.filter().is_some());
}

#[test]
fn usage_and_domain_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(qdmfa(d, &["no-such-command"]).status.code(), Some(2));
    let scn = scenarios().join("wire.json");
    let missing_seed = qdmfa(
        d,
        &[
            "synth-odmr",
            "--field",
            "b.qfm",
            "--scenario",
            scn.to_str().unwrap(),
            "--out",
            "c.qdcb",
        ],
    );
    assert_eq!(missing_seed.status.code(), Some(2));
    let missing_file = qdmfa(d, &["render", "--in", "absent.qfm", "--out", "x.pgm"]);
    assert_eq!(missing_file.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing_file.stderr).starts_with("error: Io: "));
}

#[test]
fn degenerate_bias_fit_masks_every_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scn = scenarios().join("wire_bias111.json");
    let scn = scn.to_str().unwrap();
    ok(d, &["simulate", "--scenario", scn, "--out", "b.qfm"]);
    ok(
        d,
        &[
            "synth-odmr",
            "--field",
            "b.qfm",
            "--scenario",
            scn,
            "--seed",
            "1",
            "--out",
            "c.qdcb",
        ],
    );
    ok(
        d,
        &[
            "fit",
            "--cube",
            "c.qdcb",
            "--scenario",
            scn,
            "--out",
            "fit.qfm",
        ],
    );
    let fit = qdmfa::maps_io::read_qfm(&d.join("fit.qfm")).unwrap();
    let mask = fit.mask().unwrap().unwrap();
    assert!(mask.data().iter().all(|&m| m == 0.0));
    let out = qdmfa(d, &["invert", "--in", "fit.qfm", "--out", "j.qfm"]);
    assert_eq!(out.status.code(), Some(1));
}
