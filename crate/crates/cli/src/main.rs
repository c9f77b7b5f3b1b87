//! `illumnerf` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use illumnerf::camera::pose_from_parts;
use illumnerf::io::{albedo_path, load_scene, KvFile, save_render, write_png, RunConfig, SceneDataset};
use illumnerf::synth::{preset, TwoPlanesConfig};
use illumnerf::trainer::{
    evaluate, gradient_suite, run_training, write_eval, EvalReport, RunDir, Trainer, ViewRenderer,
};
use illumnerf::{Error, ErrorKind, Result};

fn kebab(key: &str) -> String {
    key.replace('_', "-")
}

/// `--preset`, `--config` and one flag per run-config key.
fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("preset")
                .long("preset")
                .value_name("NAME")
                .help("Base configuration: desk or full"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value file applied over the preset"),
        );
    RunConfig::KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(kebab(key))
                .value_name("VALUE")
                .help_heading("Run configuration"),
        )
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("DIR")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn overwrite_arg() -> Arg {
    Arg::new("overwrite")
        .long("overwrite")
        .action(ArgAction::SetTrue)
        .help("Replace existing outputs")
}

fn cli() -> Command {
    Command::new("illumnerf")
        .about("Few-shot radiance fields under varying illumination")
        .subcommand_required(true)
        .subcommand(
            Command::new("synth")
                .about("Write a synthetic scene in dataset layout")
                .arg(Arg::new("scene").long("scene").default_value("two-planes"))
                .arg(
                    Arg::new("views")
                        .long("views")
                        .default_value("3")
                        .value_parser(clap::value_parser!(usize))
                        .help("Train views"),
                )
                .arg(
                    Arg::new("test-views")
                        .long("test-views")
                        .default_value("2")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("width")
                        .long("width")
                        .default_value("64")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("height")
                        .long("height")
                        .default_value("64")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(path_arg("out", "Scene directory").required(true))
                .arg(overwrite_arg()),
        )
        .subcommand(config_args(
            Command::new("decompose")
                .about("Write pseudo-albedo maps for the train views")
                .arg(path_arg("scene", "Scene directory").required(true))
                .arg(path_arg("out", "Directory receiving albedo/ (default: the scene)"))
                .arg(overwrite_arg()),
        ))
        .subcommand(config_args(
            Command::new("train")
                .about("Train, checkpoint and evaluate")
                .arg(path_arg("scene", "Scene directory").required(true))
                .arg(path_arg("out", "Run directory").default_value("run"))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .conflicts_with("overwrite")
                        .help("Continue from the run's checkpoint"),
                )
                .arg(overwrite_arg()),
        ))
        .subcommand(
            Command::new("render")
                .about("Render poses from a pose file with a trained run")
                .arg(path_arg("scene", "Scene directory").required(true))
                .arg(path_arg("run", "Trained run directory").required(true))
                .arg(
                    Arg::new("poses")
                        .long("poses")
                        .value_name("FILE")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Lines of `name qw qx qy qz tx ty tz` (world-to-camera)"),
                )
                .arg(path_arg("out", "Output directory (default: RUN/novel)"))
                .arg(overwrite_arg()),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a trained run on the test views")
                .arg(path_arg("scene", "Scene directory").required(true))
                .arg(path_arg("run", "Trained run directory").required(true))
                .arg(path_arg("out", "Output directory (default: RUN/eval)"))
                .arg(overwrite_arg()),
        )
        .subcommand(
            Command::new("check-grad")
                .about("Finite-difference audit of every loss term")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .default_value("1e-4")
                        .value_parser(clap::value_parser!(f64)),
                ),
        )
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by the parser")
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Preset (flag, else the file's `preset` key, else desk), then the config
/// file, then individual flags.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let file = match m.get_one::<PathBuf>("config") {
        Some(p) => KvFile::read(p)?,
        None => KvFile::default(),
    };
    let preset = m.get_one::<String>("preset").map(String::as_str).or(file.get("preset"));
    let mut cfg = match preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::desk(),
    };
    for (k, v) in file.entries.iter().filter(|(k, _)| k != "preset") {
        cfg.set(k, v)?;
    }
    for key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config saved by `train`, needed to rebuild the networks.
fn saved_config(run: &Path) -> Result<RunConfig> {
    let p = RunDir::new(run).config();
    if !p.exists() {
        return Err(Error::MissingFile(p));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    RunConfig::from_text(&text)
}

fn trained(scene: &Path, run: &Path) -> Result<(RunConfig, SceneDataset, Trainer)> {
    let cfg = saved_config(run)?;
    let ds = load_scene(scene, &cfg)?;
    let ckpt = RunDir::new(run).checkpoint();
    if !ckpt.exists() {
        return Err(Error::MissingFile(ckpt));
    }
    let mut t = Trainer::from_dataset(cfg.clone(), &ds)?;
    t.load(&ckpt)?;
    Ok((cfg, ds, t))
}

fn refuse_clobber(p: &Path, overwrite: bool) -> Result<()> {
    if overwrite || !p.exists() {
        return Ok(());
    }
    let nonempty_dir = p.is_dir() && std::fs::read_dir(p).map_err(|e| Error::io(p, e))?.next().is_some();
    if p.is_file() || nonempty_dir {
        return Err(usage(format!("{} exists; pass --overwrite to replace it", p.display())));
    }
    Ok(())
}

fn print_eval(r: &EvalReport) {
    println!("views={}", r.rows.len());
    println!("mean_ssim={:.6}", r.mean_ssim());
    println!("mean_psnr={:.4}", r.mean_psnr());
    if let Some(a) = r.mean_abs_rel() {
        println!("mean_abs_rel={a:.6}");
    }
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let out = path(m, "out");
    refuse_clobber(out, m.get_flag("overwrite"))?;
    let layout = TwoPlanesConfig {
        train_views: *m.get_one("views").unwrap(),
        test_views: *m.get_one("test-views").unwrap(),
        width: *m.get_one("width").unwrap(),
        height: *m.get_one("height").unwrap(),
    };
    let scene = preset(m.get_one::<String>("scene").unwrap(), &layout)?;
    scene.emit_dataset(out)?;
    println!("scene={}", out.display());
    println!("views={}", scene.views.len());
    Ok(())
}

fn cmd_decompose(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let scene = path(m, "scene");
    let out = m.get_one::<PathBuf>("out").map(PathBuf::as_path).unwrap_or(scene);
    let provider = SceneDataset::provider(&cfg)?;
    if cfg.provider == "file" {
        return Err(usage("decompose needs a provider that computes albedo (ground-truth or retinex)"));
    }
    let ds = load_scene(scene, &cfg)?;
    let targets: Vec<PathBuf> = ds.train.iter().map(|v| albedo_path(out, &v.name)).collect();
    if !m.get_flag("overwrite") {
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            return Err(usage(format!("{} exists; pass --overwrite to replace it", p.display())));
        }
    }
    for (map, p) in ds.pseudo_albedo(&provider)?.iter().zip(&targets) {
        // Invalid pixels are stored as black, which the file provider reads back as invalid.
        let mut img = map.to_image();
        for (px, ok) in img.data.chunks_exact_mut(3).zip(&map.valid) {
            if !ok {
                px.fill(0.0);
            }
        }
        write_png(p, &img)?;
    }
    println!("provider={}", provider.kind().as_str());
    println!("maps={}", targets.len());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let scene = path(m, "scene");
    let out = path(m, "out");
    let resume = m.get_flag("resume");
    if !resume {
        refuse_clobber(out, m.get_flag("overwrite"))?;
    }
    let ds = load_scene(scene, &cfg)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let report = run_training(cfg, &ds, out, resume, |i, r| eprintln!("{}", r.csv_row(i)))?;
    println!("run={}", out.display());
    print_eval(&report);
    Ok(())
}

/// Parses `name qw qx qy qz tx ty tz` lines; `#` starts a comment.
fn parse_poses(text: &str, file: &str) -> Result<Vec<(String, UnitQuaternion<f64>, Vector3<f64>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: file.into(),
            line: i + 1,
            message,
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 8 {
            return Err(parse_err(format!("expected `name qw qx qy qz tx ty tz`, got `{line}`")));
        }
        let v: Vec<f64> = tok[1..]
            .iter()
            .map(|t| t.parse().map_err(|_| parse_err(format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() == 0.0 {
            return Err(parse_err("zero quaternion".into()));
        }
        out.push((tok[0].to_string(), UnitQuaternion::from_quaternion(q), Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

fn cmd_render(m: &ArgMatches) -> Result<()> {
    let run = path(m, "run");
    let default_out = run.join("novel");
    let out = m.get_one::<PathBuf>("out").cloned().unwrap_or(default_out);
    refuse_clobber(&out, m.get_flag("overwrite"))?;
    let pose_file = path(m, "poses");
    let text = std::fs::read_to_string(pose_file).map_err(|e| Error::io(pose_file, e))?;
    let poses = parse_poses(&text, &pose_file.display().to_string())?;
    if poses.is_empty() {
        return Err(Error::InvalidData(format!("{} lists no poses", pose_file.display())));
    }
    let (_, ds, trainer) = trained(path(m, "scene"), run)?;
    let intrinsics = &ds.train[0].camera;
    let renderer = trainer.renderer();
    for (name, q, t) in &poses {
        // World-to-camera in dataset units; cameras live in normalized units.
        let rot = q.to_rotation_matrix().into_inner().transpose();
        let center = -(rot * t) * ds.scale;
        let cam = intrinsics.with_pose(pose_from_parts(&rot, &center))?;
        let (color, depth) = renderer.render(name, &cam)?;
        save_render(&out, name, &color, Some(&depth))?;
    }
    println!("out={}", out.display());
    println!("renders={}", poses.len());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let run = path(m, "run");
    let out = m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| run.join("eval"));
    refuse_clobber(&out, m.get_flag("overwrite"))?;
    let (cfg, ds, trainer) = trained(path(m, "scene"), run)?;
    if ds.test.is_empty() {
        return Err(Error::InvalidData("scene has no test views".into()));
    }
    let (report, renders) = evaluate(&trainer.renderer(), &ds.test, cfg.eval_scale_align)?;
    write_eval(&out, &report, &renders)?;
    println!("out={}", out.display());
    print_eval(&report);
    Ok(())
}

fn cmd_check_grad(m: &ArgMatches) -> Result<bool> {
    let tol: f64 = *m.get_one("tolerance").unwrap();
    let report = gradient_suite(*m.get_one("seed").unwrap(), tol)?;
    for e in &report.entries {
        println!("term=\"{}\" max_rel_err={:.3e} pass={}", e.name, e.max_rel_error, e.passed);
    }
    println!("max_rel_err={:.3e}", report.max_rel_error());
    println!("tolerance={tol:e}");
    Ok(report.passed())
}

fn exit_code(kind: ErrorKind) -> (u8, &'static str) {
    match kind {
        ErrorKind::Usage => (1, "usage"),
        ErrorKind::Data => (2, "data"),
        ErrorKind::Numerical => (3, "numerical"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            println!("status=error kind=usage");
            return ExitCode::from(1);
        }
    };
    let result = match matches.subcommand() {
        Some(("synth", m)) => cmd_synth(m).map(|_| true),
        Some(("decompose", m)) => cmd_decompose(m).map(|_| true),
        Some(("train", m)) => cmd_train(m).map(|_| true),
        Some(("render", m)) => cmd_render(m).map(|_| true),
        Some(("eval", m)) => cmd_eval(m).map(|_| true),
        Some(("check-grad", m)) => cmd_check_grad(m),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(true) => {
            println!("status=ok");
            ExitCode::SUCCESS
        }
        Ok(false) => {
            println!("status=error kind=numerical message=\"gradient check failed\"");
            ExitCode::from(3)
        }
        Err(e) => {
            let (code, label) = exit_code(e.kind());
            eprintln!("error: {e}");
            println!("status=error kind={label} message=\"{}\"", e.to_string().replace('"', "'"));
            ExitCode::from(code)
        }
    }
}
