//! End-to-end tests of the `lintx` binary: exit codes, file contracts, and
//! byte-level agreement between commands that promise identical output.

use lintx_cli::ppm;
use lintx_core::model::{decode, encode, init_weights, ModelSpec};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lintx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lintx"))
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    (
        status.code().expect("exit code"),
        String::from_utf8(stdout).expect("utf8 stdout"),
        String::from_utf8(stderr).expect("utf8 stderr"),
    )
}

/// Writes a P6 image whose pixel (x, y) is `f(x, y)`.
fn write_p6(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize) -> [u8; 3]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.extend_from_slice(&f(x, y));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn content_ppm(path: &Path) {
    write_p6(path, 16, 16, |x, y| {
        let inside = (4..10).contains(&x) && (6..12).contains(&y);
        if inside {
            [200, 60, 40]
        } else {
            [(x * 16) as u8, (y * 16) as u8, 90]
        }
    });
}

fn style_ppm(path: &Path) {
    write_p6(path, 16, 16, |x, y| {
        if (x + 2 * y) % 5 < 2 {
            [250, 240, 10]
        } else {
            [20, 40, 160]
        }
    });
}

#[test]
fn alpha_zero_reproduces_the_plain_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("c.ppm");
    let style = dir.path().join("s.ppm");
    let out = dir.path().join("out.ppm");
    content_ppm(&content);
    style_ppm(&style);

    let (code, _, stderr) = run(lintx()
        .args(["stylize", "--content"])
        .arg(&content)
        .arg("--style")
        .arg(&style)
        .arg("--out")
        .arg(&out)
        .args(["--alpha", "0"]));
    assert_eq!(code, 0, "stderr: {stderr}");

    // With alpha 0 the transform result is discarded, so the output must be
    // exactly decode(encode(content)) under the same seed-0 weights.
    let spec = ModelSpec::shallow();
    let store = init_weights(&spec, 0);
    let img = ppm::read_image(&content).unwrap();
    let enc = encode(&img, &spec.encoder, &store).unwrap();
    let rec = decode(enc.bottleneck(), &spec.encoder, &store).unwrap();
    let expected = dir.path().join("expected.ppm");
    ppm::write_image(&rec, &expected).unwrap();

    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(&expected).unwrap(),
        "CLI output differs from library reconstruction"
    );
}

#[test]
fn stylize_report_prints_residual_lines() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("c.ppm");
    let style = dir.path().join("s.ppm");
    content_ppm(&content);
    style_ppm(&style);

    let (code, stdout, stderr) = run(lintx()
        .args(["stylize", "--content"])
        .arg(&content)
        .arg("--style")
        .arg(&style)
        .arg("--out")
        .arg(dir.path().join("out.ppm"))
        .arg("--report"));
    assert_eq!(code, 0, "stderr: {stderr}");
    let cov_line = stdout
        .lines()
        .find(|l| l.starts_with("REPORT covariance_residual "))
        .expect("covariance report line");
    let val: f64 = cov_line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(val.is_finite() && val >= 0.0);
    // 16x16 input -> 4x4 bottleneck, well under the affinity pixel cap.
    assert!(
        stdout.lines().any(|l| l.starts_with("REPORT affinity_residual ")),
        "missing affinity line in: {stdout}"
    );
}

#[test]
fn p3_input_is_an_unsupported_variant() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("c.ppm");
    let style = dir.path().join("s.ppm");
    std::fs::write(&content, "P3\n2 2\n255\n0 0 0 1 1 1 2 2 2 3 3 3\n").unwrap();
    style_ppm(&style);

    let (code, _, stderr) = run(lintx()
        .args(["stylize", "--content"])
        .arg(&content)
        .arg("--style")
        .arg(&style)
        .arg("--out")
        .arg(dir.path().join("out.ppm")));
    assert_eq!(code, 3);
    assert!(stderr.contains("unsupported PPM variant"), "stderr: {stderr}");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let style = dir.path().join("s.ppm");
    style_ppm(&style);

    let (code, _, stderr) =
        run(lintx().args(["stylize", "--style"]).arg(&style).arg("--out").arg("x.ppm"));
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn invalid_thread_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("c.ppm");
    let style = dir.path().join("s.ppm");
    content_ppm(&content);
    style_ppm(&style);

    let (code, _, stderr) = run(lintx()
        .env("LINTX_THREADS", "0")
        .args(["stylize", "--content"])
        .arg(&content)
        .arg("--style")
        .arg(&style)
        .arg("--out")
        .arg(dir.path().join("out.ppm")));
    assert_eq!(code, 2);
    assert!(stderr.contains("LINTX_THREADS"), "stderr: {stderr}");
}

#[test]
fn verify_passes_and_formats_every_line() {
    let (code, stdout, stderr) = run(lintx().arg("verify"));
    assert_eq!(code, 0, "stderr: {stderr}");
    let lines: Vec<&str> = stdout.lines().filter(|l| !l.is_empty()).collect();
    assert!(lines.len() >= 8, "too few checks: {stdout}");
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        assert_eq!(parts.len(), 5, "bad line: {line}");
        assert_eq!(parts[0], "CHECK");
        assert!(parts[2].parse::<f64>().is_ok(), "bad residual: {line}");
        assert!(parts[3].parse::<f64>().is_ok(), "bad threshold: {line}");
        assert_eq!(parts[4], "PASS", "failing check: {line}");
    }
}

#[test]
fn sabotaged_verify_fails_only_covariance_checks() {
    let (code, stdout, _) = run(lintx().args(["verify", "--sabotage", "identityT"]));
    assert_eq!(code, 1);
    for line in stdout.lines().filter(|l| !l.is_empty()) {
        if line.contains("covariance_match") {
            assert!(line.ends_with("FAIL"), "sabotage not detected: {line}");
        } else {
            assert!(line.ends_with("PASS"), "collateral failure: {line}");
        }
    }
}

#[test]
fn unknown_sabotage_mode_is_a_usage_error() {
    let (code, _, stderr) = run(lintx().args(["verify", "--sabotage", "nonsense"]));
    assert_eq!(code, 2);
    assert!(stderr.contains("sabotage"), "stderr: {stderr}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("c.ppm");
    let style = dir.path().join("s.ppm");
    content_ppm(&content);
    style_ppm(&style);
    let cfg = dir.path().join("lintx.conf");
    std::fs::write(&cfg, "# run config\nalpha = 0\n").unwrap();

    let stylize = |args: &[&str], out: &Path| {
        let (code, _, stderr) = run(lintx()
            .args(["stylize", "--content"])
            .arg(&content)
            .arg("--style")
            .arg(&style)
            .arg("--out")
            .arg(out)
            .args(args));
        assert_eq!(code, 0, "stderr: {stderr}");
        std::fs::read(out).unwrap()
    };

    let flag_out = stylize(&["--alpha", "0"], &dir.path().join("flag.ppm"));
    let cfg_path = cfg.to_str().unwrap().to_owned();
    let cfg_out = stylize(&["--config", &cfg_path], &dir.path().join("cfg.ppm"));
    assert_eq!(flag_out, cfg_out, "config alpha should act like the flag");

    // A flag on top of a conflicting config value wins.
    let cfg2 = dir.path().join("lintx2.conf");
    std::fs::write(&cfg2, "alpha = 0.7\n").unwrap();
    let cfg2_path = cfg2.to_str().unwrap().to_owned();
    let both = stylize(&["--config", &cfg2_path, "--alpha", "0"], &dir.path().join("both.ppm"));
    assert_eq!(flag_out, both, "CLI flag should override config file");
    let cfg_only = stylize(&["--config", &cfg2_path], &dir.path().join("cfg2.ppm"));
    assert_ne!(flag_out, cfg_only, "config alpha 0.7 should change the output");

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "alpha = 0\nshininess = 9\n").unwrap();
    let (code, _, stderr) = run(lintx()
        .args(["stylize", "--content"])
        .arg(&content)
        .arg("--style")
        .arg(&style)
        .arg("--out")
        .arg(dir.path().join("never.ppm"))
        .arg("--config")
        .arg(&bad));
    assert_eq!(code, 2);
    assert!(stderr.contains("shininess"), "stderr: {stderr}");
}

#[test]
fn video_output_matches_independent_single_frame_runs() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let video_out = dir.path().join("video");
    std::fs::create_dir_all(&frames).unwrap();
    std::fs::create_dir_all(&video_out).unwrap();
    let style = dir.path().join("s.ppm");
    style_ppm(&style);
    let names = ["a.ppm", "b.ppm"];
    write_p6(&frames.join(names[0]), 16, 16, |x, y| [(x * 15) as u8, (y * 15) as u8, 30]);
    write_p6(&frames.join(names[1]), 16, 16, |x, y| [(y * 15) as u8, 200, (x * 15) as u8]);

    let (code, _, stderr) = run(lintx()
        .args(["stylize-video", "--content"])
        .arg(&frames)
        .arg("--style")
        .arg(&style)
        .arg("--out")
        .arg(&video_out));
    assert_eq!(code, 0, "stderr: {stderr}");

    for name in names {
        let single = dir.path().join(format!("single_{name}"));
        let (code, _, stderr) = run(lintx()
            .args(["stylize", "--content"])
            .arg(frames.join(name))
            .arg("--style")
            .arg(&style)
            .arg("--out")
            .arg(&single));
        assert_eq!(code, 0, "stderr: {stderr}");
        assert_eq!(
            std::fs::read(video_out.join(name)).unwrap(),
            std::fs::read(&single).unwrap(),
            "{name}: cached-style video frame differs from one-shot run"
        );
    }
}

#[test]
fn masked_stylize_requires_the_closed_form_kind() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("c.ppm");
    let style = dir.path().join("s.ppm");
    let mask = dir.path().join("m.ppm");
    content_ppm(&content);
    style_ppm(&style);
    write_p6(&mask, 16, 16, |x, _| if x < 8 { [0, 0, 0] } else { [255, 255, 255] });

    let base = |kind: &str, out: &str| {
        run(lintx()
            .args(["stylize", "--content"])
            .arg(&content)
            .arg("--style")
            .arg(&style)
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--mask")
            .arg(&mask)
            .args(["--kind", kind]))
    };

    let (code, _, stderr) = base("closed_form", "masked.ppm");
    assert_eq!(code, 0, "stderr: {stderr}");
    let (code, _, stderr) = base("adain", "never.ppm");
    assert_eq!(code, 2, "mask should be closed_form only, stderr: {stderr}");
}

#[test]
fn bench_emits_the_documented_csv_shape() {
    let (code, stdout, stderr) = run(lintx().args(["bench", "--sizes", "32"]));
    assert_eq!(code, 0, "stderr: {stderr}");
    let mut lines = stdout.lines();
    let mut header = Vec::new();
    let mut rows = Vec::new();
    for line in lines.by_ref() {
        if line.starts_with('#') {
            header.push(line);
        } else if !line.is_empty() {
            rows.push(line);
        }
    }
    assert!(
        header.iter().any(|l| l.contains("not comparable")),
        "missing comparability disclaimer: {stdout}"
    );
    assert_eq!(rows[0], "size,kind,setup_ms,apply_ms,total_ms");
    let kinds: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(kinds, ["closed_form", "adain", "learned"]);
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 5, "bad row: {row}");
        assert_eq!(cells[0], "32");
        for cell in &cells[2..] {
            let ms: f64 = cell.parse().unwrap();
            assert!(ms >= 0.0, "bad timing in {row}");
        }
    }
}

#[test]
fn bench_rejects_sizes_the_encoder_cannot_pool() {
    let (code, _, stderr) = run(lintx().args(["bench", "--sizes", "30"]));
    assert_eq!(code, 2);
    assert!(stderr.contains("30"), "stderr: {stderr}");
}

#[test]
fn train_decoder_writes_loadable_weights_and_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dec.lstw");
    let (code, stdout, stderr) =
        run(lintx().args(["train-decoder", "--steps", "5", "--out"]).arg(&out));
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("pretrained decoder for 5 steps"), "stdout: {stdout}");

    lintx_core::weights::WeightStore::load(&out).expect("output weights load");
    let sidecar = std::fs::read_to_string(PathBuf::from(format!("{}.loss.csv", out.display())))
        .expect("sidecar exists");
    let lines: Vec<&str> = sidecar.lines().collect();
    assert_eq!(lines[0], "step,content_loss,style_loss,total");
    assert_eq!(lines.len(), 6, "header + one row per step");
}

#[test]
fn train_transform_writes_loadable_weights_and_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tr.lstw");
    let (code, _, stderr) =
        run(lintx().args(["train-transform", "--steps", "2", "--out"]).arg(&out));
    assert_eq!(code, 0, "stderr: {stderr}");

    lintx_core::weights::WeightStore::load(&out).expect("output weights load");
    let sidecar = std::fs::read_to_string(PathBuf::from(format!("{}.loss.csv", out.display())))
        .expect("sidecar exists");
    assert_eq!(sidecar.lines().count(), 3, "header + one row per step");
}
