//! The training loop, checkpointing and held-out evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{abs_rel, psnr, ssim};
use super::pose::sample_novel_pose;
use super::step::{build_loss, sample_color_rays, Networks, StepBatch, TrainData, PID_PREFIX};
use crate::autodiff::{adam_step, load_checkpoint, save_checkpoint, AdamConfig, Graph, ParamStore, Precision};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::{mask_ratio_at, render_values};
use crate::io::{append_csv, quantize, save_render, write_atomic, DepthMap, Image, RunConfig, SceneDataset, View, METRICS_HEADER};
use crate::losses::{LossReport, LossWeights};
use crate::synth::{neutral_light, SyntheticScene};

/// Linear error-rate schedule from `start` at iteration 0 to `end` at the
/// final iteration `total − 1`.
pub fn error_rate(iteration: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return end;
    }
    let t = (iteration.min(total - 1)) as f64 / (total - 1) as f64;
    start + (end - start) * t
}

fn precision_of(cfg: &RunConfig) -> Precision {
    if cfg.precision == "double" {
        Precision::Double
    } else {
        Precision::Single
    }
}

pub fn loss_weights(cfg: &RunConfig) -> LossWeights {
    LossWeights {
        color: cfg.lambda_c,
        ac: cfg.lambda_ac,
        dc: cfg.lambda_dc,
        ds: cfg.lambda_ds,
        edge: cfg.lambda_edge,
        pid: cfg.lambda_pid,
        chrom: cfg.lambda_chrom,
    }
}

pub fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        decay_per_step: None,
    }
    .with_decay_over(cfg.iters, cfg.lr_final)
}

fn iteration_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// The batch of iteration `i`: a pure function of `(cfg, data, i)`.
pub fn draw_batch(cfg: &RunConfig, data: &TrainData, i: usize) -> Result<StepBatch> {
    let mut rng = iteration_rng(cfg.seed, i);
    let (color_rays, color_gt) = sample_color_rays(data, cfg.rays_per_batch, &mut rng);
    let novel = sample_novel_pose(&data.cameras, &mut rng)?;
    let s = cfg.patch_size;
    if s > novel.width || s > novel.height {
        return Err(Error::InvalidArgument(format!(
            "patch size {s} exceeds the {}×{} views",
            novel.width, novel.height
        )));
    }
    let patch_origin = (rng.gen_range(0..=novel.width - s), rng.gen_range(0..=novel.height - s));
    let target = rng.gen_range(0..data.cameras.len());
    Ok(StepBatch {
        color_rays,
        color_gt,
        novel,
        patch_origin,
        target,
        sample_seed: rng.gen(),
        mask_ratio: mask_ratio_at(i, cfg.iters, cfg.rho_start, cfg.rho_ramp),
        r_e: error_rate(i, cfg.iters, cfg.re_start, cfg.re_end),
    })
}

/// Schedule position of a run. The RNG and novel-pose sampler are pure
/// functions of `(seed, iteration)`, so this plus the parameter store is
/// the whole resumable state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub r_e: f64,
    pub rho: f64,
    pub seed: u64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub nets: Networks,
    pub store: ParamStore,
    pub data: TrainData,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

const INIT_STREAM: u64 = u64::MAX;

impl Trainer {
    /// Fresh networks initialised from `cfg.seed`.
    pub fn new(cfg: RunConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let (w, h) = (data.width(), data.height());
        if cfg.patch_size > w || cfg.patch_size > h {
            return Err(Error::InvalidArgument(format!(
                "patch size {} exceeds the {w}×{h} views",
                cfg.patch_size
            )));
        }
        let nets = Networks::from_config(&cfg);
        let mut store = ParamStore::new(precision_of(&cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        nets.init(&mut store, &mut rng)?;
        store.set_lr_scale(&format!("{PID_PREFIX}/"), cfg.lr_pid_scale);
        let weights = loss_weights(&cfg);
        weights.validate()?;
        let adam = adam_config(&cfg);
        adam.validate()?;
        Ok(Self {
            cfg,
            nets,
            store,
            data,
            weights,
            adam,
        })
    }

    pub fn from_dataset(cfg: RunConfig, ds: &SceneDataset) -> Result<Self> {
        let pseudo = ds.pseudo_albedo(&SceneDataset::provider(&cfg)?)?;
        Self::new(cfg, TrainData::from_dataset(ds, pseudo)?)
    }

    /// Replaces the parameters with a checkpoint of the same architecture.
    pub fn restore(&mut self, store: ParamStore) -> Result<()> {
        let a = self.store.blocks();
        let b = store.blocks();
        if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.name != y.name || x.shape != y.shape) {
            return Err(Error::Checkpoint("checkpoint does not match the configured networks".into()));
        }
        if store.precision() != self.store.precision() {
            return Err(Error::Checkpoint("checkpoint precision differs from the run's".into()));
        }
        self.store = store;
        self.store.set_lr_scale(&format!("{PID_PREFIX}/"), self.cfg.lr_pid_scale);
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.restore(load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    pub fn iteration(&self) -> usize {
        self.store.step() as usize
    }

    pub fn state(&self) -> TrainState {
        let i = self.iteration();
        TrainState {
            iteration: i,
            r_e: self.r_e_at(i),
            rho: self.rho_at(i),
            seed: self.cfg.seed,
        }
    }

    pub fn r_e_at(&self, i: usize) -> f64 {
        error_rate(i, self.cfg.iters, self.cfg.re_start, self.cfg.re_end)
    }

    pub fn rho_at(&self, i: usize) -> f64 {
        mask_ratio_at(i, self.cfg.iters, self.cfg.rho_start, self.cfg.rho_ramp)
    }

    /// Draws the batch of iteration `i`.
    pub fn sample_batch(&self, i: usize) -> Result<StepBatch> {
        draw_batch(&self.cfg, &self.data, i)
    }

    /// One joint Adam step on both networks.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.sample_batch(self.iteration())?;
        let mut g = Graph::new();
        let out = build_loss(&mut g, &self.store, &self.nets, &self.data, &batch, &self.weights, None)?;
        self.store.zero_grads();
        g.backward(out.loss).accumulate_into(&g, &mut self.store);
        adam_step(&mut self.store, &self.adam)?;
        debug_assert!(self.store.all_finite());
        Ok(out.report)
    }

    /// Steps until `until` (exclusive end iteration), reporting each step.
    pub fn train_until(&mut self, until: usize, mut on_step: impl FnMut(usize, &LossReport) -> Result<()>) -> Result<()> {
        while self.iteration() < until {
            let i = self.iteration();
            let r = self.step()?;
            on_step(i, &r)?;
        }
        Ok(())
    }

    pub fn renderer(&self) -> FieldRenderer<'_> {
        FieldRenderer {
            store: &self.store,
            nets: &self.nets,
            bounds: (self.data.near, self.data.far),
            mask_ratio: self.rho_at(self.iteration()),
        }
    }
}

/// Renders a color image and camera-space depth for a view.
pub trait ViewRenderer {
    fn render(&self, name: &str, camera: &Camera) -> Result<(Image, DepthMap)>;
}

pub struct FieldRenderer<'a> {
    pub store: &'a ParamStore,
    pub nets: &'a Networks,
    pub bounds: (f64, f64),
    pub mask_ratio: f64,
}

const RENDER_CHUNK: usize = 1024;

impl ViewRenderer for FieldRenderer<'_> {
    fn render(&self, _name: &str, camera: &Camera) -> Result<(Image, DepthMap)> {
        let (w, h) = (camera.width, camera.height);
        let rays: Vec<_> = (0..w * h).map(|i| camera.pixel_ray(i % w, i / w)).collect();
        let out = render_values(
            self.store,
            &self.nets.field,
            &rays,
            (h, w),
            self.bounds,
            &self.nets.samples,
            self.mask_ratio,
            RENDER_CHUNK,
        )?;
        let depth = rays
            .iter()
            .zip(&out.depth)
            .map(|(r, d)| (d * camera.axis_cosine(r.pixel)) as f32)
            .collect();
        Ok((
            Image {
                width: w,
                height: h,
                data: out.color,
            },
            DepthMap {
                width: w,
                height: h,
                data: depth,
            },
        ))
    }
}

/// Ray-traced ground truth, quantized like the emitted dataset. `scale`
/// maps scene units to the dataset's normalized units.
pub struct OracleRenderer<'a> {
    pub scene: &'a SyntheticScene,
    pub scale: f64,
}

impl ViewRenderer for OracleRenderer<'_> {
    fn render(&self, name: &str, camera: &Camera) -> Result<(Image, DepthMap)> {
        let light = self
            .scene
            .views
            .iter()
            .find(|v| v.name == name)
            .map(|v| v.light)
            .unwrap_or_else(neutral_light);
        let cam = camera.scaled_scene(1.0 / self.scale)?;
        let gt = self.scene.trace_view(&cam, &light);
        let mut depth = gt.depth_map();
        let mut color = gt.color;
        color.data.iter_mut().for_each(|v| *v = quantize(*v) as f64 / 255.0);
        depth.data.iter_mut().for_each(|d| *d = (*d as f64 * self.scale) as f32);
        Ok((color, depth))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub view: String,
    pub ssim: f64,
    pub psnr: f64,
    /// Absent when the view has no ground-truth depth.
    pub abs_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: &str = "view,ssim,psnr,abs_rel";

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN)
    }

    /// Mean over finite values.
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr).filter(|p| p.is_finite())).unwrap_or(f64::INFINITY)
    }

    pub fn mean_abs_rel(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.abs_rel))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let ar = r.abs_rel.map_or(String::new(), |v| format!("{v:.9}"));
            let _ = writeln!(out, "{},{:.9},{:.6},{}", r.view, r.ssim, r.psnr, ar);
        }
        out
    }
}

/// One rendered test view.
#[derive(Debug, Clone)]
pub struct EvalRender {
    pub name: String,
    pub color: Image,
    pub depth: DepthMap,
}

/// Renders every view and scores it against its image and depth.
pub fn evaluate(renderer: &dyn ViewRenderer, views: &[View], scale_align: bool) -> Result<(EvalReport, Vec<EvalRender>)> {
    let mut report = EvalReport::default();
    let mut renders = Vec::with_capacity(views.len());
    for v in views {
        let (color, depth) = renderer.render(&v.name, &v.camera)?;
        let s = ssim(&color, &v.image)?;
        let p = psnr(&color, &v.image)?;
        let ar = match (&v.depth, v.depth_valid()) {
            (Some(gt), Some(valid)) if valid.iter().any(|b| *b) => {
                let pred: Vec<f64> = depth.data.iter().map(|d| *d as f64).collect();
                let gt: Vec<f64> = gt.data.iter().map(|d| *d as f64).collect();
                Some(abs_rel(&pred, &gt, &valid, scale_align)?)
            }
            _ => None,
        };
        report.rows.push(EvalRow {
            view: v.name.clone(),
            ssim: s,
            psnr: p,
            abs_rel: ar,
        });
        renders.push(EvalRender {
            name: v.stem().to_string(),
            color,
            depth,
        });
    }
    Ok((report, renders))
}

/// Writes `eval_report.csv` and `renders/` into `run_dir`.
pub fn write_eval(run_dir: &Path, report: &EvalReport, renders: &[EvalRender]) -> Result<()> {
    write_atomic(&run_dir.join("eval_report.csv"), report.to_csv().as_bytes())?;
    for r in renders {
        save_render(run_dir, &r.name, &r.color, Some(&r.depth))?;
    }
    Ok(())
}

/// File names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.cfg")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.ckpt")
    }

    pub fn checkpoint_at(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration:07}.ckpt"))
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.csv")
    }
}

/// Trains to `cfg.iters` with periodic metrics and checkpoints, then
/// evaluates on the test views. Resumes from the run's latest checkpoint
/// when `resume` is set and one exists.
pub fn run_training(
    cfg: RunConfig,
    ds: &SceneDataset,
    run_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(usize, &LossReport),
) -> Result<EvalReport> {
    let dir = RunDir::new(run_dir);
    let mut trainer = Trainer::from_dataset(cfg, ds)?;
    if resume && dir.checkpoint().exists() {
        trainer.load(&dir.checkpoint())?;
    } else if dir.metrics().exists() {
        std::fs::remove_file(dir.metrics()).map_err(|e| Error::io(dir.metrics(), e))?;
    }
    write_atomic(&dir.config(), trainer.cfg.to_text().as_bytes())?;
    let total = trainer.cfg.iters;
    let log_every = trainer.cfg.log_every.max(1);
    let ckpt_every = trainer.cfg.checkpoint_every;
    let mut pending = Vec::new();
    while trainer.iteration() < total {
        let i = trainer.iteration();
        let r = trainer.step()?;
        let done = i + 1;
        if i % log_every == 0 || done == total {
            pending.push(r.csv_row(i));
            progress(i, &r);
        }
        let ckpt_due = ckpt_every > 0 && done % ckpt_every == 0;
        if ckpt_due || done == total {
            append_csv(&dir.metrics(), METRICS_HEADER, &pending)?;
            pending.clear();
            trainer.save(&dir.checkpoint())?;
            if ckpt_due {
                trainer.save(&dir.checkpoint_at(done))?;
            }
        }
    }
    let (report, renders) = evaluate(&trainer.renderer(), &ds.test, trainer.cfg.eval_scale_align)?;
    write_eval(run_dir, &report, &renders)?;
    Ok(report)
}

/// Evaluates a saved run directory's latest checkpoint.
pub fn evaluate_run(cfg: RunConfig, ds: &SceneDataset, run_dir: &Path) -> Result<EvalReport> {
    let dir = RunDir::new(run_dir);
    let ckpt = dir.checkpoint();
    if !ckpt.exists() {
        return Err(Error::MissingFile(ckpt));
    }
    let mut trainer = Trainer::from_dataset(cfg, ds)?;
    trainer.load(&ckpt)?;
    let (report, renders) = evaluate(&trainer.renderer(), &ds.test, trainer.cfg.eval_scale_align)?;
    write_eval(run_dir, &report, &renders)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::load_scene;
    use crate::synth::{two_planes, TwoPlanesConfig};

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.iters = 6;
        c.patch_size = 8;
        c.rays_per_batch = 16;
        c.n_samples = 8;
        c.field_width = 8;
        c.field_depth = 2;
        c.pos_freqs = 2;
        c.dir_freqs = 1;
        c.pid_width = 4;
        c.pid_layers = 2;
        c.log_every = 1;
        c.checkpoint_every = 3;
        c
    }

    fn scene_dir() -> (tempfile::TempDir, SyntheticScene) {
        let dir = tempfile::tempdir().unwrap();
        let scene = two_planes(&TwoPlanesConfig {
            train_views: 3,
            test_views: 2,
            width: 16,
            height: 16,
        })
        .unwrap();
        scene.emit_dataset(dir.path()).unwrap();
        (dir, scene)
    }

    #[test]
    fn error_rate_endpoints() {
        assert_eq!(error_rate(0, 100, 1.0, 0.0), 1.0);
        assert_eq!(error_rate(99, 100, 1.0, 0.0), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let r = error_rate(i, 100, 1.0, 0.0);
            assert!(r <= prev && (0.0..=1.0).contains(&r));
            prev = r;
        }
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let (dir, _) = scene_dir();
        let cfg = tiny_cfg();
        let ds = load_scene(dir.path(), &cfg).unwrap();
        let mut a = Trainer::from_dataset(cfg.clone(), &ds).unwrap();
        let mut b = Trainer::from_dataset(cfg, &ds).unwrap();
        for _ in 0..3 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert_eq!(ra, rb);
            assert!(a.store.all_finite());
        }
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn zero_weights_silence_pidnet_consistency_gradients() {
        let (dir, _) = scene_dir();
        let mut cfg = tiny_cfg();
        cfg.lambda_pid = 0.0;
        cfg.lambda_chrom = 0.0;
        cfg.lambda_edge = 0.0;
        cfg.lambda_ac = 0.0;
        cfg.lambda_dc = 0.0;
        let ds = load_scene(dir.path(), &cfg).unwrap();
        let mut t = Trainer::from_dataset(cfg, &ds).unwrap();
        let batch = t.sample_batch(0).unwrap();
        let mut g = Graph::new();
        let out = build_loss(&mut g, &t.store, &t.nets, &t.data, &batch, &t.weights, None).unwrap();
        t.store.zero_grads();
        g.backward(out.loss).accumulate_into(&g, &mut t.store);
        for b in t.store.blocks().iter().filter(|b| b.name.starts_with("pid/")) {
            assert!(b.grad.iter().all(|x| *x == 0.0), "{}", b.name);
        }
    }

    #[test]
    fn run_resume_matches_uninterrupted() {
        let (dir, _) = scene_dir();
        let cfg = tiny_cfg();
        let ds = load_scene(dir.path(), &cfg).unwrap();
        let full = tempfile::tempdir().unwrap();
        let a = run_training(cfg.clone(), &ds, full.path(), false, |_, _| {}).unwrap();

        let part = tempfile::tempdir().unwrap();
        let mut t = Trainer::from_dataset(cfg.clone(), &ds).unwrap();
        t.train_until(3, |_, _| Ok(())).unwrap();
        t.save(&RunDir::new(part.path()).checkpoint()).unwrap();
        let b = run_training(cfg, &ds, part.path(), true, |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        let text = std::fs::read_to_string(full.path().join("eval_report.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), EVAL_HEADER);
        assert!(full.path().join("checkpoints/iter_0000003.ckpt").exists());
    }

    #[test]
    fn oracle_renderer_scores_perfectly() {
        let (dir, scene) = scene_dir();
        let cfg = tiny_cfg();
        let ds = load_scene(dir.path(), &cfg).unwrap();
        let oracle = OracleRenderer {
            scene: &scene,
            scale: ds.scale,
        };
        let (report, _) = evaluate(&oracle, &ds.test, false).unwrap();
        assert_eq!(report.rows.len(), ds.test.len());
        for r in &report.rows {
            assert!((r.ssim - 1.0).abs() < 1e-9, "{r:?}");
            assert!(r.abs_rel.unwrap() < 1e-6, "{r:?}");
        }
    }
}
