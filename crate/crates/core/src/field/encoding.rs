//! Sinusoidal positional encoding with a progressive frequency mask.

/// Number of frequencies and the fraction of them currently unmasked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    /// Fraction ρ ∈ [0, 1] of frequencies left visible.
    pub mask_ratio: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            mask_ratio: 1.0,
        }
    }
}

impl EncodingConfig {
    pub fn with_mask_ratio(self, mask_ratio: f64) -> Self {
        Self {
            mask_ratio: mask_ratio.clamp(0.0, 1.0),
            ..self
        }
    }

    pub fn pos_dim(&self) -> usize {
        encoded_dim(3, self.pos_freqs)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_dim(3, self.dir_freqs)
    }
}

pub fn encoded_dim(input_dim: usize, freqs: usize) -> usize {
    input_dim * (1 + 2 * freqs)
}

/// Frequencies with index `>= ⌈ρ·L⌉` are masked.
pub fn active_frequencies(freqs: usize, mask_ratio: f64) -> usize {
    ((mask_ratio.clamp(0.0, 1.0) * freqs as f64).ceil() as usize).min(freqs)
}

/// Appends `[x, sin(2⁰x), cos(2⁰x), …, sin(2^{L−1}x), cos(2^{L−1}x)]` to
/// `out`, with masked frequencies written as exact zeros.
pub fn encode_into(x: &[f64], freqs: usize, mask_ratio: f64, out: &mut Vec<f64>) {
    let active = active_frequencies(freqs, mask_ratio);
    out.extend_from_slice(x);
    let mut scale = 1.0;
    for k in 0..freqs {
        if k < active {
            out.extend(x.iter().map(|v| (scale * v).sin()));
            out.extend(x.iter().map(|v| (scale * v).cos()));
        } else {
            out.extend(std::iter::repeat_n(0.0, 2 * x.len()));
        }
        scale *= 2.0;
    }
}

pub fn encode(x: &[f64], freqs: usize, mask_ratio: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(x.len(), freqs));
    encode_into(x, freqs, mask_ratio, &mut out);
    out
}

/// Linear ramp of ρ from `start` to 1 over the first `ramp_fraction` of
/// `total` iterations.
pub fn mask_ratio_at(iteration: usize, total: usize, start: f64, ramp_fraction: f64) -> f64 {
    let ramp = ramp_fraction * total as f64;
    if ramp <= 0.0 {
        return 1.0;
    }
    (start + (1.0 - start) * iteration as f64 / ramp).clamp(start.min(1.0), 1.0)
}
