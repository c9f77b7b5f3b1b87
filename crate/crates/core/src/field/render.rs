//! Differentiable volume rendering of ray batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::encoding::encode_into;
use super::mlp::RadianceField;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::camera::Ray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub background: [f64; 3],
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            background: [0.0; 3],
        }
    }
}

/// Graph handles of a rendered batch, present when rendering kept its tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderVars {
    /// `[rays, 5]`: rgb, expected distance, opacity.
    pub output: Var,
    /// `[rays, 3]`.
    pub color: Var,
    /// `[rays]`, expected distance along the unit ray.
    pub depth: Var,
    pub sigma: Var,
}

/// A rendered block of `rows × cols` rays.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRender {
    pub rows: usize,
    pub cols: usize,
    /// Row-major rgb, `rows × cols × 3`.
    pub color: Vec<f64>,
    /// `Σ wᵢ tᵢ` per ray.
    pub depth: Vec<f64>,
    /// `Σ wᵢ` per ray.
    pub opacity: Vec<f64>,
    /// Per-ray sample weights, `rows × cols × n_samples`.
    pub weights: Vec<f64>,
    pub vars: Option<RenderVars>,
}

impl PatchRender {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expected distance conditioned on hitting something.
    pub fn normalized_depth(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.opacity)
            .map(|(d, a)| if *a > 0.0 { d / a } else { 0.0 })
            .collect()
    }
}

/// Sample distances and interval lengths for `n` samples in `[near, far]`:
/// bin midpoints, or one uniform draw per bin when `rng` is given.
pub fn sample_distances(
    near: f64,
    far: f64,
    n: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Vec<f64>) {
    let step = (far - near) / n as f64;
    let t = match rng {
        Some(rng) => (0..n)
            .map(|i| near + (i as f64 + rng.gen::<f64>()) * step)
            .collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * step).collect(),
    };
    (t, vec![step; n])
}

/// Renders `rays` (row-major `rows × cols`) through `field`, recording the
/// computation in `g`.
#[allow(clippy::too_many_arguments)]
pub fn render_patch(
    g: &mut Graph,
    store: &ParamStore,
    field: &RadianceField,
    rays: &[Ray],
    dims: (usize, usize),
    bounds: (f64, f64),
    cfg: &SampleConfig,
    mask_ratio: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<PatchRender> {
    let (rows, cols) = dims;
    let (near, far) = bounds;
    if rows * cols != rays.len() {
        return Err(Error::Shape(format!(
            "{} rays cannot fill a {rows}×{cols} patch",
            rays.len()
        )));
    }
    if cfg.n_samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples per ray".into()));
    }
    if !(near > 0.0 && near < far) {
        return Err(Error::InvalidArgument(format!("bad bounds [{near}, {far}]")));
    }
    let n = rays.len();
    let s = cfg.n_samples;
    let pd = field.pos_dim();
    let dd = field.dir_dim();
    let mut pos = Vec::with_capacity(n * s * pd);
    let mut dir = Vec::with_capacity(n * s * dd);
    let mut t_all = Vec::with_capacity(n * s);
    let mut delta_all = Vec::with_capacity(n * s);
    let mut dir_enc = Vec::with_capacity(dd);
    for ray in rays {
        let (t, delta) = sample_distances(near, far, s, rng.as_deref_mut());
        dir_enc.clear();
        encode_into(ray.direction.as_slice(), field.dir_freqs, mask_ratio, &mut dir_enc);
        for &ti in &t {
            let p = ray.at(ti);
            encode_into(p.as_slice(), field.pos_freqs, mask_ratio, &mut pos);
            dir.extend_from_slice(&dir_enc);
        }
        t_all.extend(t);
        delta_all.extend(delta);
    }
    let pv = g.constant(&[n * s, pd], pos);
    let dv = g.constant(&[n * s, dd], dir);
    let (sigma, rgb) = field.forward(g, store, pv, dv)?;
    let sigma = g.reshape(sigma, &[n, s]);
    let rgb = g.reshape(rgb, &[n, s, 3]);
    let out = g.volume_render(sigma, rgb, t_all, delta_all, cfg.background)?;
    let color_v = g.slice_cols(out, 0, 3);
    let depth_v = g.slice_cols(out, 3, 4);
    let depth_v = g.reshape(depth_v, &[n]);
    let ov = g.value(out);
    let mut color = Vec::with_capacity(3 * n);
    let mut depth = Vec::with_capacity(n);
    let mut opacity = Vec::with_capacity(n);
    for row in ov.chunks_exact(5) {
        color.extend_from_slice(&row[..3]);
        depth.push(row[3]);
        opacity.push(row[4]);
    }
    let weights = g.render_weights(out).map(|w| w.to_vec()).unwrap_or_default();
    let vars = g.requires_grad(out).then_some(RenderVars {
        output: out,
        color: color_v,
        depth: depth_v,
        sigma,
    });
    Ok(PatchRender {
        rows,
        cols,
        color,
        depth,
        opacity,
        weights,
        vars,
    })
}

/// Renders without keeping a tape, in chunks of `chunk` rays.
#[allow(clippy::too_many_arguments)]
pub fn render_values(
    store: &ParamStore,
    field: &RadianceField,
    rays: &[Ray],
    dims: (usize, usize),
    bounds: (f64, f64),
    cfg: &SampleConfig,
    mask_ratio: f64,
    chunk: usize,
) -> Result<PatchRender> {
    let (rows, cols) = dims;
    if rows * cols != rays.len() {
        return Err(Error::Shape(format!(
            "{} rays cannot fill a {rows}×{cols} patch",
            rays.len()
        )));
    }
    let mut out = PatchRender {
        rows,
        cols,
        color: Vec::with_capacity(rays.len() * 3),
        depth: Vec::with_capacity(rays.len()),
        opacity: Vec::with_capacity(rays.len()),
        weights: Vec::with_capacity(rays.len() * cfg.n_samples),
        vars: None,
    };
    for part in rays.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let r = render_patch(&mut g, store, field, part, (1, part.len()), bounds, cfg, mask_ratio, None)?;
        out.color.extend(r.color);
        out.depth.extend(r.depth);
        out.opacity.extend(r.opacity);
        out.weights.extend(r.weights);
    }
    Ok(out)
}

/// Backpropagates upstream gradients on a render's color (`rays × 3`) and
/// depth (`rays`) into the parameter gradients of `store`.
pub fn backward_patch(
    g: &Graph,
    render: &PatchRender,
    d_color: &[f64],
    d_depth: &[f64],
    store: &mut ParamStore,
) -> Result<()> {
    let vars = render
        .vars
        .ok_or_else(|| Error::InvalidArgument("render has no retained tape".into()))?;
    let n = render.len();
    if d_color.len() != 3 * n || d_depth.len() != n {
        return Err(Error::Shape("upstream gradient sizes do not match the render".into()));
    }
    let mut seed = vec![0.0; 5 * n];
    for i in 0..n {
        seed[5 * i..5 * i + 3].copy_from_slice(&d_color[3 * i..3 * i + 3]);
        seed[5 * i + 3] = d_depth[i];
    }
    g.backward_from(&[(vars.output, seed)]).accumulate_into(g, store);
    Ok(())
}
