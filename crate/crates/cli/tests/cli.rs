use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_illumnerf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn last_line(o: &Output) -> String {
    stdout(o).lines().last().unwrap_or_default().to_string()
}

fn field<'a>(out: &'a str, key: &str) -> Option<&'a str> {
    out.lines().find_map(|l| l.strip_prefix(&format!("{key}=")))
}

fn synth(dir: &Path) {
    let o = run(&["synth", "--scene", "two-planes", "--views", "3", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(last_line(&o), "status=ok");
}

const TINY: &[&str] = &[
    "--iters",
    "4",
    "--patch-size",
    "8",
    "--rays-per-batch",
    "32",
    "--n-samples",
    "8",
    "--field-width",
    "16",
    "--pid-width",
    "4",
    "--checkpoint-every",
    "2",
];

fn train(scene: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--scene", scene.to_str().unwrap(), "--out", out.to_str().unwrap()];
    // Flags in `extra` replace the tiny defaults.
    for kv in TINY.chunks(2) {
        if !extra.contains(&kv[0]) {
            args.extend_from_slice(kv);
        }
    }
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn synth_then_train_writes_checkpoint_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    let out = tmp.path().join("run");
    synth(&scene);
    let o = train(&scene, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(last_line(&o), "status=ok");
    assert!(out.join("checkpoint.ckpt").exists());
    assert!(out.join("checkpoints/iter_0000002.ckpt").exists());
    assert!(out.join("metrics.csv").exists());
    let report = std::fs::read_to_string(out.join("eval_report.csv")).unwrap();
    assert!(report.starts_with("view,ssim,psnr,abs_rel\n"));
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn ablation_flag_changes_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    synth(&scene);
    let a = tmp.path().join("full");
    let b = tmp.path().join("no_ac");
    assert!(train(&scene, &a, &[]).status.success());
    assert!(train(&scene, &b, &["--lambda-ac", "0"]).status.success());
    let ra = std::fs::read_to_string(a.join("eval_report.csv")).unwrap();
    let rb = std::fs::read_to_string(b.join("eval_report.csv")).unwrap();
    assert_ne!(ra, rb);
    let cfg = std::fs::read_to_string(b.join("config.cfg")).unwrap();
    assert!(cfg.contains("lambda_ac = 0"));
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    synth(&scene);
    let o = run(&["synth", "--out", scene.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(last_line(&o).starts_with("status=error kind=usage"));
    let o = run(&["synth", "--out", scene.to_str().unwrap(), "--overwrite"]);
    assert!(o.status.success());

    let out = tmp.path().join("run");
    assert!(train(&scene, &out, &[]).status.success());
    let first = std::fs::read(out.join("eval_report.csv")).unwrap();
    assert_eq!(train(&scene, &out, &[]).status.code(), Some(1));
    let o = train(&scene, &out, &["--overwrite"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("eval_report.csv")).unwrap(), first);
}

#[test]
fn resume_continues_and_is_a_no_op_when_done() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    synth(&scene);
    let out = tmp.path().join("run");
    assert!(train(&scene, &out, &["--iters", "2"]).status.success());
    let o = train(&scene, &out, &["--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last_iter = metrics.lines().last().unwrap().split(',').next().unwrap().to_string();
    assert_eq!(last_iter, "3");
    assert_eq!(metrics.lines().filter(|l| l.starts_with("iter,")).count(), 1);

    let ckpt = std::fs::read(out.join("checkpoint.ckpt")).unwrap();
    assert!(train(&scene, &out, &["--resume"]).status.success());
    assert_eq!(std::fs::read(out.join("checkpoint.ckpt")).unwrap(), ckpt);
}

#[test]
fn render_and_eval_use_a_trained_run() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    let out = tmp.path().join("run");
    synth(&scene);
    assert!(train(&scene, &out, &[]).status.success());

    let poses = tmp.path().join("poses.txt");
    std::fs::write(&poses, "# name qw qx qy qz tx ty tz\nmid 1 0 0 0 0 0 0\nside 0.9998 0 0.02 0 0.1 0 0\n").unwrap();
    let o = run(&[
        "render",
        "--scene",
        scene.to_str().unwrap(),
        "--run",
        out.to_str().unwrap(),
        "--poses",
        poses.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "renders"), Some("2"));
    for f in ["mid.png", "mid_depth.dpth", "side.png", "side_depth.png"] {
        assert!(out.join("novel/renders").join(f).exists(), "{f}");
    }

    let o = run(&["eval", "--scene", scene.to_str().unwrap(), "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert_eq!(field(&s, "views"), Some("2"));
    let ssim: f64 = field(&s, "mean_ssim").unwrap().parse().unwrap();
    assert!(ssim.is_finite() && ssim <= 1.0);
    // Same weights, same report as the end-of-training evaluation.
    assert_eq!(
        std::fs::read_to_string(out.join("eval/eval_report.csv")).unwrap(),
        std::fs::read_to_string(out.join("eval_report.csv")).unwrap()
    );
}

#[test]
fn decompose_writes_maps_the_file_provider_reads() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    synth(&scene);
    let s = scene.to_str().unwrap();
    // Ground-truth maps already exist in the scene.
    let o = run(&["decompose", "--scene", s, "--provider", "retinex"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["decompose", "--scene", s, "--provider", "retinex", "--overwrite"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "maps"), Some("3"));
    let out = tmp.path().join("run");
    let o = train(&scene, &out, &["--provider", "file"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn check_grad_passes_on_fresh_init() {
    let o = run(&["check-grad"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let s = stdout(&o);
    let err: f64 = field(&s, "max_rel_err").unwrap().parse().unwrap();
    assert!(err < 1e-4, "{err}");
    assert_eq!(last_line(&o), "status=ok");
}

#[test]
fn exit_codes() {
    let o = run(&["train", "--scene", "x", "--no-such-flag", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(last_line(&o), "status=error kind=usage");

    let o = run(&["train", "--scene", "x", "--iters", "abc"]);
    assert_eq!(o.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let o = run(&["train", "--scene", missing.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(last_line(&o).starts_with("status=error kind=data"));

    let o = run(&["check-grad", "--tolerance", "1e-300"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(last_line(&o).starts_with("status=error kind=numerical"));
}
