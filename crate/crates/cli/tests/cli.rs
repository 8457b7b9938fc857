use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperfuse::{checkpoint, init_params, pnm, ImageGray, Provenance};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Flags for a tiny synthetic run writing into `dir`.
fn tiny(dir: &Path) -> Vec<String> {
    [
        "--synthetic",
        "4",
        "--size",
        "12",
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--seed",
        "3",
        "--out-dir",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([dir.display().to_string()])
    .collect()
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(tiny(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn write_pgm(path: &Path, w: usize, h: usize, seed: usize) {
    let img = ImageGray::from_fn(w, h, Provenance::Visible, |x, y| {
        ((x * 5 + y * 11 + seed * 17) % 97) as f64 / 96.0
    })
    .unwrap();
    pnm::write(&img, path).unwrap();
}

#[test]
fn train_then_eval_writes_all_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    let out = train(&dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# resolved configuration"));
    assert!(stdout.contains("epoch,step,L,L_p,L_ssim,L_ag"));
    assert!(stdout.contains("fusion layer invocations during training: 0"));
    for f in ["config.txt", "train_log.csv", "model.hfn"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let mut args: Vec<String> = vec!["eval".into()];
    args.extend(tiny(&dir));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("pair_id,en,qabf,ssim,psnr"));
    assert!(dir.join("report.txt").exists());
}

#[test]
fn config_file_is_applied_and_flags_override_it() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# desk run\nlr = 0.002\nfeedback_iterations = 2\n").unwrap();
    let out = train(
        &dir,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--feedback-iterations",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let saved = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(saved.contains("lr = 0.002"), "{saved}");
    assert!(saved.contains("feedback_iterations = 3"), "{saved}");
}

#[test]
fn training_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train(&d1, &[])), 0);
    assert_eq!(code(&train(&d2, &[])), 0);
    for f in ["model.hfn", "train_log.csv"] {
        assert_eq!(
            std::fs::read(d1.join(f)).unwrap(),
            std::fs::read(d2.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_learning_rate_saves_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    let out = train(&dir, &["--lr", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let saved = std::fs::read(dir.join("model.hfn")).unwrap();
    assert_eq!(saved, checkpoint::to_bytes(&init_params(3)));
}

fn trained_checkpoint(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("model");
    assert_eq!(code(&train(&dir, &[])), 0);
    dir.join("model.hfn")
}

#[test]
fn fuse_is_symmetric_in_its_inputs() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained_checkpoint(&tmp);
    let (a, b) = (tmp.path().join("a.pgm"), tmp.path().join("b.pgm"));
    write_pgm(&a, 14, 12, 1);
    write_pgm(&b, 14, 12, 2);
    let (ab, ba) = (tmp.path().join("ab.pgm"), tmp.path().join("ba.pgm"));
    let c = ckpt.to_str().unwrap();
    let o1 = run(&[
        "fuse",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        ab.to_str().unwrap(),
        "--checkpoint",
        c,
    ]);
    let o2 = run(&[
        "fuse",
        b.to_str().unwrap(),
        a.to_str().unwrap(),
        ba.to_str().unwrap(),
        "--checkpoint",
        c,
    ]);
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    assert_eq!(code(&o2), 0, "{}", stderr(&o2));
    assert_eq!(std::fs::read(&ab).unwrap(), std::fs::read(&ba).unwrap());
    let stdout = String::from_utf8_lossy(&o1.stdout);
    assert!(stdout.contains("EN ") && stdout.contains("Qabf ") && stdout.contains("PSNR "));
    let fused = pnm::read(&ab, Provenance::Fused).unwrap();
    assert_eq!(fused.dims(), (14, 12));
}

#[test]
fn mismatched_sizes_exit_with_six() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained_checkpoint(&tmp);
    let (a, b) = (tmp.path().join("a.pgm"), tmp.path().join("b.pgm"));
    write_pgm(&a, 14, 12, 1);
    write_pgm(&b, 12, 12, 2);
    let out = tmp.path().join("f.pgm");
    let o = run(&[
        "fuse",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_checkpoints_exit_with_five() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.pgm");
    write_pgm(&a, 8, 8, 1);
    let out = tmp.path().join("f.pgm");
    let fuse_with = |ckpt: &Path| {
        run(&[
            "fuse",
            a.to_str().unwrap(),
            a.to_str().unwrap(),
            out.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ])
    };
    let missing = tmp.path().join("missing.hfn");
    assert_eq!(code(&fuse_with(&missing)), 5);

    let garbage = tmp.path().join("garbage.hfn");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&fuse_with(&garbage)), 5);

    // a manifest entry with the wrong channel count
    let good = checkpoint::to_bytes(&init_params(0));
    let text = String::from_utf8_lossy(&good);
    let first = text.lines().nth(2).unwrap().to_string();
    let patched = first.replacen("16", "8", 1);
    let mut bytes = good.clone();
    let at = text.find(&first).unwrap();
    bytes.splice(at..at + first.len(), patched.bytes());
    let schema = tmp.path().join("schema.hfn");
    std::fs::write(&schema, bytes).unwrap();
    let o = fuse_with(&schema);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn missing_corpus_directory_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let vis = tmp.path().join("vis");
    std::fs::create_dir_all(&vis).unwrap();
    let o = run(&[
        "train",
        "--ir-dir",
        tmp.path().join("nowhere").to_str().unwrap(),
        "--vis-dir",
        vis.to_str().unwrap(),
        "--size",
        "12",
        "--out-dir",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&train(&dir, &["--lr", "fast"])), 2);
    assert_eq!(code(&train(&dir, &["--a1", "0.2"])), 2);
    assert_eq!(code(&train(&dir, &["--batch-size", "0"])), 2);
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_speed = 3\n").unwrap();
    let o = train(&dir, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_speed"), "{}", stderr(&o));
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--corrupt-adjoint", "warp"])), 2);
}

#[test]
fn single_pair_corpus_needs_the_all_split() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    let common = [
        "--synthetic",
        "1",
        "--size",
        "12",
        "--seed",
        "3",
        "--out-dir",
        d,
    ];
    let mut args = vec!["train", "--steps", "1"];
    args.extend(common);
    assert_eq!(code(&run(&args)), 0);
    let mut refs = vec!["eval"];
    refs.extend(common);
    let o = run(&refs);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let mut all = refs.clone();
    all.extend(["--eval-split", "all"]);
    let o = run(&all);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn gradcheck_passes_and_a_corrupted_adjoint_fails() {
    let ok = run(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = run(&["gradcheck", "--seed", "1", "--corrupt-adjoint", "conv2d"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("conv2d"), "{}", stderr(&bad));
}

#[test]
fn small_demo_produces_a_report_and_fused_images() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("demo");
    let o = run(&[
        "demo",
        "--size",
        "12",
        "--steps",
        "2",
        "--seed",
        "9",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for id in 0..4 {
        assert!(dir.join(format!("fused/pair_{id:03}.pgm")).exists());
        assert!(dir.join(format!("corpus/ir/pair_{id:03}.pgm")).exists());
    }
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    // non-degenerate: the fused image is neither source and carries information
    let ir = pnm::read(&dir.join("corpus/ir/pair_000.pgm"), Provenance::Infrared).unwrap();
    let vis = pnm::read(&dir.join("corpus/vis/pair_000.pgm"), Provenance::Visible).unwrap();
    let fused = pnm::read(&dir.join("fused/pair_000.pgm"), Provenance::Fused).unwrap();
    assert_ne!(fused.pixels(), ir.pixels());
    assert_ne!(fused.pixels(), vis.pixels());
    assert!(hyperfuse::metrics::entropy(&fused) > 0.0);
}
