//! Loss assembly for one optimization step.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::field::{render_patch, EncodingConfig, FieldConfig, RadianceField, SampleConfig};
use crate::intrinsic::{ls_scale, PidNet, PidNetConfig, PseudoAlbedoMap};
use crate::io::{Image, RunConfig, SceneDataset};
use crate::losses::{
    albedo_consistency_g, chromaticity_consistency_g, color_loss_g, depth_consistency_g, depth_smoothness_g,
    edge_preserving_g, intrinsic_smoothness_g, total_loss_g, visibility_weights, LossReport, LossTerms,
    LossWeights, VisibilityWeights,
};

/// Field `field/…` plus decomposer `pid/…`, sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub field: RadianceField,
    pub pid: PidNet,
    pub samples: SampleConfig,
    pub edge_exp: bool,
}

pub const FIELD_PREFIX: &str = "field";
pub const PID_PREFIX: &str = "pid";

impl Networks {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let enc = EncodingConfig {
            pos_freqs: cfg.pos_freqs,
            dir_freqs: cfg.dir_freqs,
            mask_ratio: 1.0,
        };
        let arch = FieldConfig {
            width: cfg.field_width,
            depth: cfg.field_depth,
            skip: (cfg.field_skip > 0).then_some(cfg.field_skip),
        };
        Self {
            field: RadianceField::new(FIELD_PREFIX, arch, &enc),
            pid: PidNet::new(
                PID_PREFIX,
                PidNetConfig {
                    patch_size: cfg.patch_size,
                    width: cfg.pid_width,
                    layers: cfg.pid_layers,
                },
            ),
            samples: SampleConfig {
                n_samples: cfg.n_samples,
                background: [cfg.background; 3],
            },
            edge_exp: cfg.edge_exp,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.field.init(store, rng)?;
        self.pid.init(store, rng)
    }

    pub fn patch_size(&self) -> usize {
        self.pid.cfg.patch_size
    }
}

/// Train views as the step sees them.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub pseudo: Vec<PseudoAlbedoMap>,
    pub near: f64,
    pub far: f64,
}

impl TrainData {
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>, pseudo: Vec<PseudoAlbedoMap>, near: f64, far: f64) -> Result<Self> {
        if cameras.len() != images.len() || cameras.len() != pseudo.len() {
            return Err(Error::Shape(format!(
                "{} cameras, {} images, {} albedo maps",
                cameras.len(),
                images.len(),
                pseudo.len()
            )));
        }
        if cameras.len() < 2 {
            return Err(Error::InvalidData("training needs at least 2 train views".into()));
        }
        for ((c, im), p) in cameras.iter().zip(&images).zip(&pseudo) {
            if (c.width, c.height) != (im.width, im.height) || (p.width, p.height) != (im.width, im.height) {
                return Err(Error::Shape("camera, image and albedo sizes differ".into()));
            }
        }
        Ok(Self {
            cameras,
            images,
            pseudo,
            near,
            far,
        })
    }

    pub fn from_dataset(ds: &SceneDataset, pseudo: Vec<PseudoAlbedoMap>) -> Result<Self> {
        Self::new(
            ds.train.iter().map(|v| v.camera.clone()).collect(),
            ds.train.iter().map(|v| v.image.clone()).collect(),
            pseudo,
            ds.near,
            ds.far,
        )
    }

    pub fn width(&self) -> usize {
        self.cameras[0].width
    }

    pub fn height(&self) -> usize {
        self.cameras[0].height
    }
}

/// Everything random about one step, drawn up front.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub color_rays: Vec<Ray>,
    /// `color_rays.len() × 3`.
    pub color_gt: Vec<f64>,
    pub novel: Camera,
    /// Top-left (column, row) of the patch in the novel view.
    pub patch_origin: (usize, usize),
    /// Index of the train view receiving correspondences.
    pub target: usize,
    /// Seeds the stratified sampling of every render in the step.
    pub sample_seed: u64,
    pub mask_ratio: f64,
    pub r_e: f64,
}

impl StepBatch {
    /// Novel-view patch pixels, row-major.
    pub fn patch_pixels(&self, s: usize) -> Vec<Vector2<f64>> {
        let (c0, r0) = self.patch_origin;
        (0..s * s)
            .map(|i| Vector2::new((c0 + i % s) as f64, (r0 + i / s) as f64))
            .collect()
    }
}

/// Non-differentiable decisions of a step. Reusing them pins the loss to one
/// smooth branch, which is what finite-difference checks need.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    /// Real-valued landing pixel of the target render, when in bounds.
    pub target_pixels: Vec<Option<Vector2<f64>>>,
    /// Top-left corner (column, row) of each bilinear albedo lookup.
    pub cells: Vec<Option<(usize, usize)>>,
    pub in_bounds: Vec<bool>,
    /// In bounds and backed by a valid pseudo-albedo pixel.
    pub valid: Vec<bool>,
    pub visibility: VisibilityWeights,
    /// Whether the albedo terms use the least-squares alignment.
    pub aligned: bool,
    /// `s*` at the recorded step, 1 when unaligned.
    pub albedo_scale: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: Var,
    pub report: LossReport,
    pub frozen: Frozen,
    /// Novel patch color and camera depth, for inspection.
    pub patch_color: Vec<f64>,
    pub patch_depth: Vec<f64>,
    pub albedo: Var,
    pub e_proj: Var,
}

fn branch_rng(seed: u64, branch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ branch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Records the total loss of one step in `g`.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    g: &mut Graph,
    store: &ParamStore,
    nets: &Networks,
    data: &TrainData,
    batch: &StepBatch,
    weights: &LossWeights,
    frozen: Option<&Frozen>,
) -> Result<StepOutput> {
    let s = nets.patch_size();
    let n = s * s;
    let bounds = (data.near, data.far);
    let cfg = &nets.samples;
    let field = &nets.field;
    let tgt_cam = data
        .cameras
        .get(batch.target)
        .ok_or_else(|| Error::InvalidArgument(format!("target view {} does not exist", batch.target)))?;
    let pseudo = &data.pseudo[batch.target];
    if batch.patch_origin.0 + s > batch.novel.width || batch.patch_origin.1 + s > batch.novel.height {
        return Err(Error::InvalidArgument(format!(
            "{s}×{s} patch at {:?} leaves the {}×{} novel view",
            batch.patch_origin, batch.novel.width, batch.novel.height
        )));
    }

    // Input-view rays for the photometric term.
    let nc = batch.color_rays.len();
    let color = render_patch(
        g,
        store,
        field,
        &batch.color_rays,
        (1, nc),
        bounds,
        cfg,
        batch.mask_ratio,
        Some(&mut branch_rng(batch.sample_seed, 0)),
    )?;
    let color_vars = color.vars.ok_or_else(|| Error::InvalidArgument("store has no trainable field".into()))?;
    let l_color = color_loss_g(g, color_vars.color, &batch.color_gt, &vec![true; nc]);

    // Novel-view patch.
    let pixels = batch.patch_pixels(s);
    let rays: Vec<Ray> = pixels.iter().map(|x| batch.novel.pixel_ray(x.x as usize, x.y as usize)).collect();
    let patch = render_patch(
        g,
        store,
        field,
        &rays,
        (s, s),
        bounds,
        cfg,
        batch.mask_ratio,
        Some(&mut branch_rng(batch.sample_seed, 1)),
    )?;
    let pv = patch.vars.ok_or_else(|| Error::InvalidArgument("store has no trainable field".into()))?;
    let cos_src: Vec<f64> = pixels.iter().map(|x| batch.novel.axis_cosine(*x)).collect();
    let z_src = g.mul_const(pv.depth, cos_src);
    let z_src_val = g.value(z_src).to_vec();

    // Transfer into the target view. The homogeneous target pixel is affine
    // in the source depth, so both d̃ and the landing position x'(d) stay
    // differentiable; the target render itself is taken at a fixed x'.
    let coeffs: Vec<_> = pixels
        .iter()
        .map(|x| batch.novel.transfer_coefficients(tgt_cam, *x))
        .collect();
    let (target_pixels, in_bounds) = match frozen {
        Some(f) => (f.target_pixels.clone(), f.in_bounds.clone()),
        None => {
            let mut tp = Vec::with_capacity(n);
            let mut ib = Vec::with_capacity(n);
            for (x, z) in pixels.iter().zip(&z_src_val) {
                let t = batch.novel.transfer(tgt_cam, *x, z.max(data.near))?;
                tp.push(t.in_bounds.then_some(t.pixel));
                ib.push(t.in_bounds);
            }
            (tp, ib)
        }
    };
    let ca: Vec<f64> = coeffs.iter().map(|(a, _)| a.z).collect();
    let cb: Vec<f64> = coeffs.iter().map(|(_, b)| b.z).collect();
    let scaled = g.mul_const(z_src, ca);
    let d_proj = g.add_const(scaled, &cb);

    let tgt_rays: Vec<Ray> = target_pixels
        .iter()
        .map(|p| match p {
            Some(x) => tgt_cam.pixel_to_ray(*x),
            None => Ok(tgt_cam.pixel_ray(0, 0)),
        })
        .collect::<Result<_>>()?;
    let tgt_render = render_patch(
        g,
        store,
        field,
        &tgt_rays,
        (s, s),
        bounds,
        cfg,
        batch.mask_ratio,
        Some(&mut branch_rng(batch.sample_seed, 2)),
    )?;
    let tv = tgt_render.vars.ok_or_else(|| Error::InvalidArgument("store has no trainable field".into()))?;
    let cos_tgt: Vec<f64> = tgt_rays.iter().map(|r| tgt_cam.axis_cosine(r.pixel)).collect();
    let z_tgt = g.mul_const(tv.depth, cos_tgt);
    let diff = g.sub(d_proj, z_tgt);
    let e_proj = g.square(diff);

    // Bilinear cell of each landing position, valid when all four corners
    // carry pseudo-albedo.
    let (tw, th) = (pseudo.width, pseudo.height);
    let cells: Vec<Option<(usize, usize)>> = match frozen {
        Some(f) => f.cells.clone(),
        None => target_pixels
            .iter()
            .map(|p| {
                let x = (*p)?;
                let (c0, r0) = (x.x.floor() as usize, x.y.floor() as usize);
                let (c1, r1) = ((c0 + 1).min(tw - 1), (r0 + 1).min(th - 1));
                let ok = [(c0, r0), (c1, r0), (c0, r1), (c1, r1)]
                    .iter()
                    .all(|&(c, r)| pseudo.valid[r * tw + c]);
                ok.then_some((c0, r0))
            })
            .collect(),
    };
    let valid: Vec<bool> = cells.iter().map(|c| c.is_some()).collect();
    let vis = match frozen {
        Some(f) => f.visibility.clone(),
        None => visibility_weights(g.value(e_proj), &valid, batch.r_e),
    };

    // Decompose the rendered patch.
    let patch_img = g.reshape(pv.color, &[s, s, 3]);
    let albedo = nets.pid.forward(g, store, patch_img)?;
    let albedo = g.reshape(albedo, &[n, 3]);

    let tgt = bilinear_lookup(g, pseudo, z_src, &coeffs, &cells);
    // Least-squares scale s* of the target onto the decomposition, kept in
    // the graph. The albedo terms compare a/s* with the raw target: the same
    // alignment in target units, and invariant to the scale of a, so the
    // decomposer gains nothing by shrinking its output.
    let mask3: Vec<f64> = valid.iter().flat_map(|v| [f64::from(u8::from(*v)); 3]).collect();
    let aligned = match frozen {
        Some(f) => f.aligned,
        None => {
            let m = ls_scale(g.value(albedo), g.value(tgt), &valid);
            valid.iter().any(|v| *v) && m.is_ok_and(|m| !m.degenerate)
        }
    };
    let (albedo_al, albedo_scale) = if aligned {
        let at = g.mul(albedo, tgt);
        let num = g.weighted_sum(at, mask3.clone());
        let tt = g.square(tgt);
        let den = g.weighted_sum(tt, mask3);
        let scale = g.div(num, den);
        let value = g.scalar(scale);
        let scale_n = g.gather(scale, vec![0; 3 * n]);
        let scale_n = g.reshape(scale_n, &[n, 3]);
        (g.div(albedo, scale_n), value)
    } else {
        (albedo, 1.0)
    };

    let l_ac = albedo_consistency_g(g, albedo_al, tgt, &vis.omega);
    let l_dc = depth_consistency_g(g, e_proj, &in_bounds, s, s);
    let l_ds = depth_smoothness_g(g, z_src, s, s);
    let l_edge = edge_preserving_g(g, albedo_al, tgt, &vis, s, s, nets.edge_exp);
    let l_pid = intrinsic_smoothness_g(g, albedo_al, s, s);
    let l_chrom = chromaticity_consistency_g(g, albedo_al, tgt, pv.color, &valid);

    let terms = LossTerms {
        vars: [l_color, l_ac, l_dc, l_ds, l_edge, l_pid, l_chrom],
    };
    let n_valid = valid.iter().filter(|v| **v).count();
    let (loss, report) = total_loss_g(g, &terms, weights, n_valid)?;
    Ok(StepOutput {
        loss,
        report,
        frozen: Frozen {
            target_pixels,
            cells,
            in_bounds,
            valid,
            visibility: vis,
            aligned,
            albedo_scale,
        },
        patch_color: patch.color,
        patch_depth: z_src_val,
        albedo,
        e_proj,
    })
}

/// Pseudo-albedo at the landing position `x'(d)` of each patch pixel,
/// bilinear inside the fixed `cells`; `[n, 3]`, zero where a cell is absent.
fn bilinear_lookup(
    g: &mut Graph,
    pseudo: &PseudoAlbedoMap,
    depth: Var,
    coeffs: &[(Vector3<f64>, Vector3<f64>)],
    cells: &[Option<(usize, usize)>],
) -> Var {
    let n = cells.len();
    let (w, h) = (pseudo.width, pseudo.height);
    // Homogeneous coordinates; absent cells get the constant point (0, 0).
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut off = [vec![0.0; n], vec![0.0; n], vec![1.0; n]];
    let mut corner = [vec![0.0; 3 * n], vec![0.0; 3 * n], vec![0.0; 3 * n], vec![0.0; 3 * n]];
    let (mut u0, mut v0) = (vec![0.0; n], vec![0.0; n]);
    for (i, cell) in cells.iter().enumerate() {
        let Some((c0, r0)) = *cell else { continue };
        let (a, b) = coeffs[i];
        for j in 0..3 {
            k[j][i] = a[j];
            off[j][i] = b[j];
        }
        let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
        let (p00, p10, p01, p11) = (pseudo.rgb(c0, r0), pseudo.rgb(c1, r0), pseudo.rgb(c0, r1), pseudo.rgb(c1, r1));
        for ch in 0..3 {
            corner[0][3 * i + ch] = p00[ch];
            corner[1][3 * i + ch] = p10[ch] - p00[ch];
            corner[2][3 * i + ch] = p01[ch] - p00[ch];
            corner[3][3 * i + ch] = p11[ch] - p10[ch] - p01[ch] + p00[ch];
        }
        u0[i] = -(c0 as f64);
        v0[i] = -(r0 as f64);
    }
    let [kx, ky, kz] = k;
    let hx = g.mul_const(depth, kx);
    let hx = g.add_const(hx, &off[0]);
    let hy = g.mul_const(depth, ky);
    let hy = g.add_const(hy, &off[1]);
    let hz = g.mul_const(depth, kz);
    let hz = g.add_const(hz, &off[2]);
    let u = g.div(hx, hz);
    let v = g.div(hy, hz);
    let fu = g.add_const(u, &u0);
    let fv = g.add_const(v, &v0);
    let rep: Vec<usize> = (0..n).flat_map(|i| [i, i, i]).collect();
    let fu3 = g.gather(fu, rep.clone());
    let fv3 = g.gather(fv, rep);
    let fuv = g.mul(fu3, fv3);
    let [c00, du, dv, duv] = corner;
    let t1 = g.mul_const(fu3, du);
    let t2 = g.mul_const(fv3, dv);
    let t3 = g.mul_const(fuv, duv);
    let t12 = g.add(t1, t2);
    let t = g.add(t12, t3);
    let t = g.add_const(t, &c00);
    g.reshape(t, &[n, 3])
}

/// Uniformly random input-view rays with their observed colors.
pub fn sample_color_rays(data: &TrainData, count: usize, rng: &mut impl Rng) -> (Vec<Ray>, Vec<f64>) {
    let mut rays = Vec::with_capacity(count);
    let mut gt = Vec::with_capacity(3 * count);
    for _ in 0..count {
        let v = rng.gen_range(0..data.cameras.len());
        let cam = &data.cameras[v];
        let (c, r) = (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height));
        rays.push(cam.pixel_ray(c, r));
        gt.extend_from_slice(&data.images[v].pixel(c, r));
    }
    (rays, gt)
}
