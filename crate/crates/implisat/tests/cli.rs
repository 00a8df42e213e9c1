use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn implisat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_implisat"))
        .args(args)
        .env("IMPLISAT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--iters", "30", "--L", "4", "--n", "16", "--m", "4", "--hyper-width", "16", "--batch", "32", "--log-every", "10",
    "--lr", "1e-3",
];

fn synth(dir: &Path) -> PathBuf {
    let out = implisat(&["synth", "--out", p(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json")
}

fn encode(manifest: &Path, ckpt: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec!["encode", "--input", p(manifest), "--out", p(ckpt), "--mode", mode];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    implisat(&args)
}

#[test]
fn encode_decode_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ckpt = dir.path().join("f.isat");
    let out = encode(&manifest, &ckpt, "fourier", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# encode resolved config"));
    assert!(stdout.contains("\"hidden_width\": 16"));
    let log = fs::read_to_string(dir.path().join("f.log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss,eval_mse,eval_psnr,best_mse,psnr_B2,psnr_B5,psnr_B1\n"));
    assert_eq!(log.lines().count(), 4);

    let decoded = dir.path().join("dec");
    let out = implisat(&["decode", "--model", p(&ckpt), "--out", p(&decoded), "--scale", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::metadata(decoded.join("B2.f32")).unwrap().len(), 128 * 128 * 4);
    assert_eq!(fs::metadata(decoded.join("B1.f32")).unwrap().len(), 32 * 32 * 4);

    let at_one = dir.path().join("dec1");
    assert_eq!(code(&implisat(&["decode", "--model", p(&ckpt), "--out", p(&at_one)])), 0);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(code(&implisat(&["eval", "--input", p(&manifest), "--model", p(&ckpt), "--out", p(&a)])), 0);
    let out = implisat(&["eval", "--input", p(&manifest), "--prediction", p(&at_one.join("manifest.json")), "--out", p(&b)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let psnr = |path: &Path| -> f64 {
        let text = fs::read_to_string(path).unwrap();
        let all = text.lines().find(|l| l.contains(",all,")).unwrap().to_string();
        all.split(',').nth(2).unwrap().parse().unwrap()
    };
    // the decoded payloads are f32, so the two scores agree to f32 precision
    assert!((psnr(&a) - psnr(&b)).abs() < 0.01, "{} vs {}", psnr(&a), psnr(&b));

    let hist = dir.path().join("hist.csv");
    assert_eq!(code(&implisat(&["analyze", "--model", p(&ckpt), "--out", p(&hist)])), 0);
    let text = fs::read_to_string(&hist).unwrap();
    assert!(text.starts_with("group,bin_left,bin_right,density\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 64);
}

#[test]
fn compare_writes_one_row_set_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let mut models = Vec::new();
    for mode in ["fourier", "shift", "scale"] {
        let ckpt = dir.path().join(format!("{mode}.isat"));
        assert_eq!(code(&encode(&manifest, &ckpt, mode, &[])), 0);
        models.push(ckpt);
    }
    let (table, conv) = (dir.path().join("table.csv"), dir.path().join("conv.csv"));
    let mut args = vec!["compare", "--input", p(&manifest), "--out", p(&table), "--convergence", p(&conv), "--models"];
    args.extend(models.iter().map(|m| p(m)));
    let out = implisat(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    for mode in ["fourier", "shift", "scale"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{mode},"))).count(), 4, "{text}");
    }
    let conv = fs::read_to_string(&conv).unwrap();
    assert!(conv.starts_with("iteration,fourier,shift,scale\n"));
    assert_eq!(conv.lines().count(), 4);
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let runs: Vec<Vec<Vec<u8>>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let manifest = synth(dir.path());
            let ckpt = dir.path().join("m.isat");
            assert_eq!(code(&encode(&manifest, &ckpt, "fourier", &["--seed", "3"])), 0);
            let eval = dir.path().join("eval.csv");
            assert_eq!(code(&implisat(&["eval", "--input", p(&manifest), "--model", p(&ckpt), "--out", p(&eval)])), 0);
            ["m.isat", "m.log.csv", "eval.csv", "B2.f32", "manifest.json"]
                .iter()
                .map(|f| fs::read(dir.path().join(f)).unwrap())
                .collect()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ckpt = dir.path().join("m.isat");

    // usage and configuration
    assert_eq!(code(&implisat(&["encode", "--bogus"])), 2);
    assert_eq!(code(&encode(&manifest, &ckpt, "fourier", &["--m", "0"])), 2);
    assert_eq!(code(&encode(&manifest, &ckpt, "fourier", &["--m", "8"])), 2);
    assert_eq!(code(&encode(&manifest, &ckpt, "wavelet", &[])), 2);
    assert!(!ckpt.exists());

    // data and file format
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&encode(&missing, &ckpt, "fourier", &[])), 3);
    let garbage = dir.path().join("garbage.isat");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&implisat(&["decode", "--model", p(&garbage), "--out", p(dir.path())])), 3);

    assert_eq!(code(&encode(&manifest, &ckpt, "shift", &[])), 0);
    let out = dir.path().join("x");
    assert_eq!(code(&implisat(&["decode", "--model", p(&ckpt), "--out", p(&out), "--band", "B9"])), 3);
    assert_eq!(code(&implisat(&["decode", "--model", p(&ckpt), "--out", p(&out), "--scale", "0"])), 2);
    // frequency analysis needs a Fourier model
    assert_eq!(code(&implisat(&["analyze", "--model", p(&ckpt), "--out", p(&out)])), 2);

    // squared predictions overflow after one step at this learning rate
    let diverged = dir.path().join("d.isat");
    let out = implisat(&[
        "encode", "--input", p(&manifest), "--out", p(&diverged), "--mode", "scale", "--L", "4", "--n", "8", "--m", "2",
        "--iters", "10", "--batch", "4", "--lr", "1e200",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"model": {"hidden_width": 12, "rank": 3, "omega0": 20.0}, "train": {"iterations": 5}}"#).unwrap();
    let ckpt = dir.path().join("m.isat");
    let out = implisat(&[
        "encode", "--input", p(&manifest), "--out", p(&ckpt), "--config", p(&config), "--mode", "shift", "--iters", "2",
        "--batch", "8", "--log-every", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"hidden_width\": 12"));
    assert!(stdout.contains("\"omega0\": 20.0"));
    assert!(stdout.contains("\"iterations\": 2"));

    fs::write(&config, r#"{"model": {"widht": 12}}"#).unwrap();
    assert_eq!(code(&implisat(&["encode", "--input", p(&manifest), "--out", p(&ckpt), "--config", p(&config)])), 2);
    fs::write(&config, r#"{"optimizer": {}}"#).unwrap();
    assert_eq!(code(&implisat(&["encode", "--input", p(&manifest), "--out", p(&ckpt), "--config", p(&config)])), 2);
}
