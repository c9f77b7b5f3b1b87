//! Patch-wise decomposition network: a shallow stack of 3×3 convolutions
//! predicting log-albedo, with shading recovered by division.

use rand::Rng;

use super::IntrinsicPair;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Lower albedo bound; keeps shading finite.
pub const ALBEDO_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PidNetConfig {
    pub patch_size: usize,
    pub width: usize,
    /// Total convolution count including the output layer.
    pub layers: usize,
}

impl Default for PidNetConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            width: 32,
            layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidNet {
    pub prefix: String,
    pub cfg: PidNetConfig,
}

impl PidNet {
    pub fn new(prefix: &str, cfg: PidNetConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            cfg,
        }
    }

    fn name(&self, layer: usize, part: &str) -> String {
        format!("{}/c{layer}/{part}", self.prefix)
    }

    fn channels(&self, layer: usize) -> (usize, usize) {
        let last = self.cfg.layers - 1;
        let cin = if layer == 0 { 3 } else { self.cfg.width };
        let cout = if layer == last { 3 } else { self.cfg.width };
        (cin, cout)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.cfg.layers < 2 || self.cfg.width == 0 {
            return Err(Error::InvalidArgument(format!("invalid decomposer config {:?}", self.cfg)));
        }
        for layer in 0..self.cfg.layers {
            let (cin, cout) = self.channels(layer);
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            let scale = if layer == self.cfg.layers - 1 { 0.1 } else { 1.0 };
            let w = (0..9 * cin * cout)
                .map(|_| scale * rng.gen_range(-bound..bound))
                .collect();
            store.insert(&self.name(layer, "w"), &[3, 3, cin, cout], w)?;
            store.insert(&self.name(layer, "b"), &[cout], vec![0.0; cout])?;
        }
        Ok(())
    }

    pub fn zero_output(&self, store: &mut ParamStore) -> Result<()> {
        let last = self.cfg.layers - 1;
        for part in ["w", "b"] {
            let name = self.name(last, part);
            let n = store
                .block(&name)
                .ok_or_else(|| Error::Shape(format!("missing block `{name}`")))?
                .len();
            store.set_values(&name, &vec![0.0; n])?;
        }
        Ok(())
    }

    /// Albedo `[S, S, 3]` for a color patch `[S, S, 3]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patch: Var) -> Result<Var> {
        let s = self.cfg.patch_size;
        if g.shape(patch) != [s, s, 3] {
            return Err(Error::Shape(format!(
                "decomposer expects a {s}×{s}×3 patch, got {:?}",
                g.shape(patch)
            )));
        }
        let mut h = patch;
        for layer in 0..self.cfg.layers {
            let w = g.param(store, &self.name(layer, "w"))?;
            let b = g.param(store, &self.name(layer, "b"))?;
            h = g.conv3x3(h, w, b);
            if layer + 1 < self.cfg.layers {
                h = g.relu(h);
            }
        }
        // Sigmoid into [ALBEDO_MIN, 1]: bounded like a clamp but never flat,
        // so a saturated unit can still recover.
        let unit = g.sigmoid(h);
        let scaled = g.scale(unit, 1.0 - ALBEDO_MIN);
        Ok(g.add_scalar(scaled, ALBEDO_MIN))
    }

    /// Decomposes a patch without keeping the tape.
    pub fn decompose(&self, store: &ParamStore, patch: &[f64]) -> Result<IntrinsicPair> {
        let s = self.cfg.patch_size;
        if patch.len() != s * s * 3 {
            return Err(Error::Shape(format!(
                "decomposer expects {} values, got {}",
                s * s * 3,
                patch.len()
            )));
        }
        let mut g = Graph::new();
        let p = g.constant(&[s, s, 3], patch.to_vec());
        let a = self.forward(&mut g, store, p)?;
        Ok(IntrinsicPair::from_albedo(s, s, patch.to_vec(), g.value(a).to_vec()))
    }
}
