//! Finite-difference audit of every loss term and of the full step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::run::{draw_batch, loss_weights};
use super::step::{build_loss, Networks, TrainData};
use crate::autodiff::{gradient_check, Graph, ParamStore, Precision, Var};
use crate::error::Result;
use crate::intrinsic::{PseudoAlbedoMap, ProviderKind};
use crate::io::RunConfig;
use crate::losses::{
    albedo_consistency_g, chromaticity_consistency_g, color_loss_g, depth_consistency_g, depth_smoothness_g,
    edge_preserving_g, intrinsic_smoothness_g, visibility_weights,
};
use crate::synth::{two_planes, TwoPlanesConfig};

/// Side length of the audited patches.
pub const SUITE_PATCH: usize = 4;
/// Samples per ray in the end-to-end check.
pub const SUITE_SAMPLES: usize = 8;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn check(
    name: &str,
    store: &ParamStore,
    tolerance: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<SuiteEntry> {
    let report = gradient_check(
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s)?;
            g.backward(l).accumulate_into(&g, s);
            Ok(g.scalar(l))
        },
        store,
        FD_STEP,
        tolerance,
    )?;
    Ok(SuiteEntry {
        name: name.to_string(),
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
    })
}

/// Tiny double-precision end-to-end fixture: 16×16 two-planes views with
/// their synthetic albedo as pseudo ground truth.
pub fn suite_fixture(seed: u64) -> Result<(RunConfig, Networks, ParamStore, TrainData)> {
    let scene = two_planes(&TwoPlanesConfig {
        train_views: 3,
        test_views: 0,
        width: 16,
        height: 16,
    })?;
    let mut cams = Vec::new();
    let mut images = Vec::new();
    let mut pseudo = Vec::new();
    for v in scene.train_views() {
        let gt = scene.trace(v);
        pseudo.push(PseudoAlbedoMap {
            width: gt.albedo.width,
            height: gt.albedo.height,
            albedo: gt.albedo.data.iter().map(|a| a.clamp(1e-3, 1.0)).collect(),
            valid: gt.hit.clone(),
            provider: ProviderKind::GroundTruth,
        });
        images.push(gt.color);
        cams.push(v.camera.clone());
    }
    let (near, far) = (cams[0].near, cams[0].far);
    let data = TrainData::new(cams, images, pseudo, near, far)?;
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.precision = "double".into();
    cfg.patch_size = SUITE_PATCH;
    cfg.rays_per_batch = 6;
    cfg.n_samples = SUITE_SAMPLES;
    cfg.field_width = 6;
    cfg.field_depth = 2;
    cfg.pos_freqs = 2;
    cfg.dir_freqs = 1;
    cfg.pid_width = 3;
    cfg.pid_layers = 2;
    // Mid-run schedule so both ω and the frequency mask are non-trivial.
    cfg.iters = 10;
    let nets = Networks::from_config(&cfg);
    let mut store = ParamStore::new(Precision::Double);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nets.init(&mut store, &mut rng)?;
    Ok((cfg, nets, store, data))
}

/// Checks each loss term against central differences with respect to its
/// rendered inputs, then the whole step into both networks' parameters.
pub fn gradient_suite(seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let s = SUITE_PATCH;
    let n = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = ParamStore::new(Precision::Double);
    inputs.insert("color", &[n, 3], uniform(&mut rng, 3 * n, 0.05, 0.95))?;
    inputs.insert("albedo", &[n, 3], uniform(&mut rng, 3 * n, 0.05, 0.95))?;
    inputs.insert("depth", &[n], uniform(&mut rng, n, 1.0, 3.0))?;
    inputs.insert("depth_tgt", &[n], uniform(&mut rng, n, 1.0, 3.0))?;
    let gt_color = uniform(&mut rng, 3 * n, 0.0, 1.0);
    let tgt_albedo = uniform(&mut rng, 3 * n, 0.05, 0.95);
    let coef_a = uniform(&mut rng, n, 0.8, 1.2);
    let coef_b = uniform(&mut rng, n, -0.2, 0.2);
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
    let e_vals: Vec<f64> = uniform(&mut rng, n, 0.0, 0.5);
    let vis = visibility_weights(&e_vals, &mask, 0.7);

    let mut entries = Vec::new();
    entries.push(check("L_color wrt color", &inputs, tolerance, |g, st| {
        let c = g.param(st, "color")?;
        Ok(color_loss_g(g, c, &gt_color, &mask))
    })?);
    entries.push(check("L_ac wrt albedo", &inputs, tolerance, |g, st| {
        let a = g.param(st, "albedo")?;
        let t = g.constant(&[n, 3], tgt_albedo.clone());
        Ok(albedo_consistency_g(g, a, t, &vis.omega))
    })?);
    entries.push(check("L_dc wrt depth", &inputs, tolerance, |g, st| {
        let d = g.param(st, "depth")?;
        let dt = g.param(st, "depth_tgt")?;
        let sc = g.mul_const(d, coef_a.clone());
        let proj = g.add_const(sc, &coef_b);
        let diff = g.sub(proj, dt);
        let e = g.square(diff);
        Ok(depth_consistency_g(g, e, &mask, s, s))
    })?);
    entries.push(check("L_ds wrt depth", &inputs, tolerance, |g, st| {
        let d = g.param(st, "depth")?;
        Ok(depth_smoothness_g(g, d, s, s))
    })?);
    for (label, exp_variant) in [("L_edge wrt albedo", false), ("L_edge (exp) wrt albedo", true)] {
        entries.push(check(label, &inputs, tolerance, |g, st| {
            let a = g.param(st, "albedo")?;
            let t = g.constant(&[n, 3], tgt_albedo.clone());
            Ok(edge_preserving_g(g, a, t, &vis, s, s, exp_variant))
        })?);
    }
    entries.push(check("L_pid wrt albedo", &inputs, tolerance, |g, st| {
        let a = g.param(st, "albedo")?;
        Ok(intrinsic_smoothness_g(g, a, s, s))
    })?);
    entries.push(check("L_chrom wrt albedo and color", &inputs, tolerance, |g, st| {
        let a = g.param(st, "albedo")?;
        let c = g.param(st, "color")?;
        let t = g.constant(&[n, 3], tgt_albedo.clone());
        Ok(chromaticity_consistency_g(g, a, t, c, &mask))
    })?);

    let (cfg, nets, store, data) = suite_fixture(seed)?;
    let weights = loss_weights(&cfg);
    let batch = draw_batch(&cfg, &data, cfg.iters / 2)?;
    let mut g = Graph::new();
    let frozen = build_loss(&mut g, &store, &nets, &data, &batch, &weights, None)?.frozen;
    entries.push(check("total wrt field and decomposer parameters", &store, tolerance, |g, st| {
        Ok(build_loss(g, st, &nets, &data, &batch, &weights, Some(&frozen))?.loss)
    })?);
    Ok(SuiteReport { tolerance, entries })
}
