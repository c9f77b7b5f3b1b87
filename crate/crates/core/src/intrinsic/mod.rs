//! Intrinsic image formation: albedo ⊙ shading = color.

mod pidnet;
mod provider;

pub use pidnet::{PidNet, PidNetConfig, ALBEDO_MIN};
pub use provider::{
    gaussian_blur, pseudo_albedo, AlbedoProvider, ProviderInput, ProviderKind, PseudoAlbedoMap,
};

use crate::autodiff::CHROMA_EPS;
use crate::error::{Error, Result};

/// Albedo and shading of an `h × w` RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicPair {
    pub height: usize,
    pub width: usize,
    pub albedo: Vec<f64>,
    pub shading: Vec<f64>,
    pub color: Vec<f64>,
}

impl IntrinsicPair {
    /// Derives shading as `color ⊘ albedo`.
    pub fn from_albedo(height: usize, width: usize, color: Vec<f64>, albedo: Vec<f64>) -> Self {
        let shading = color.iter().zip(&albedo).map(|(c, a)| c / a).collect();
        Self {
            height,
            width,
            albedo,
            shading,
            color,
        }
    }

    pub fn max_reconstruction_error(&self) -> f64 {
        self.albedo
            .iter()
            .zip(&self.shading)
            .zip(&self.color)
            .map(|((a, s), c)| (a * s - c).abs())
            .fold(0.0, f64::max)
    }
}

/// `c / max(ε, r+g+b)`.
pub fn chromaticity(c: [f64; 3]) -> [f64; 3] {
    let s = (c[0] + c[1] + c[2]).max(CHROMA_EPS);
    [c[0] / s, c[1] / s, c[2] / s]
}

/// Least-squares scale aligning a target albedo patch to a source patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledAlbedo {
    pub scale: f64,
    pub values: Vec<f64>,
    /// Set when the target has no energy on the mask; `values` is then the
    /// unscaled target.
    pub degenerate: bool,
}

/// Returns `s*·tgt` with `s* = Σ src·tgt / Σ tgt²` over masked pixels.
///
/// `src` and `tgt` are `n × 3`; `mask` has one entry per pixel.
pub fn ls_scale(src: &[f64], tgt: &[f64], mask: &[bool]) -> Result<ScaledAlbedo> {
    if src.len() != tgt.len() || src.len() != 3 * mask.len() {
        return Err(Error::Shape("ls_scale operands differ in size".into()));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::InvalidArgument("ls_scale needs at least one valid pixel".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..3 {
            num += src[3 * i + c] * tgt[3 * i + c];
            den += tgt[3 * i + c] * tgt[3 * i + c];
        }
    }
    if den < 1e-12 {
        return Ok(ScaledAlbedo {
            scale: 1.0,
            values: tgt.to_vec(),
            degenerate: true,
        });
    }
    let scale = num / den;
    Ok(ScaledAlbedo {
        scale,
        values: tgt.iter().map(|t| t * scale).collect(),
        degenerate: false,
    })
}
