//! Full-image pseudo-albedo sources, computed once per training view.

use std::path::Path;

use super::ALBEDO_MIN;
use crate::error::{Error, Result};
use crate::io::{read_png, Image};

/// Which provider produced a [`PseudoAlbedoMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    GroundTruth,
    Retinex,
    File,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::GroundTruth => "ground-truth",
            ProviderKind::Retinex => "retinex",
            ProviderKind::File => "file",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ground-truth" | "gt" => Ok(ProviderKind::GroundTruth),
            "retinex" => Ok(ProviderKind::Retinex),
            "file" => Ok(ProviderKind::File),
            other => Err(Error::InvalidArgument(format!(
                "unknown albedo provider `{other}` (expected ground-truth, retinex or file)"
            ))),
        }
    }
}

/// Pseudo-albedo for one input image with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAlbedoMap {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `(0, 1]`.
    pub albedo: Vec<f64>,
    pub valid: Vec<bool>,
    pub provider: ProviderKind,
}

impl PseudoAlbedoMap {
    pub fn rgb(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.albedo[i], self.albedo[i + 1], self.albedo[i + 2]]
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.albedo.clone(),
        }
    }
}

/// Provider choice with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AlbedoProvider {
    GroundTruth,
    /// Gaussian standard deviation of the luminance blur, in pixels.
    Retinex { sigma: f64 },
    File,
}

impl AlbedoProvider {
    pub fn kind(&self) -> ProviderKind {
        match self {
            AlbedoProvider::GroundTruth => ProviderKind::GroundTruth,
            AlbedoProvider::Retinex { .. } => ProviderKind::Retinex,
            AlbedoProvider::File => ProviderKind::File,
        }
    }
}

/// What a provider may look at for one view.
#[derive(Debug, Clone, Copy)]
pub struct ProviderInput<'a> {
    pub image: &'a Image,
    /// Synthetic albedo, when the scene ships one.
    pub ground_truth: Option<&'a Image>,
    /// Precomputed albedo image read by the file provider.
    pub albedo_file: Option<&'a Path>,
    /// Integer factor by which `image` was reduced from the file's size.
    pub downscale: usize,
}

fn clamp_albedo(v: f64) -> f64 {
    v.clamp(ALBEDO_MIN, 1.0)
}

pub fn pseudo_albedo(provider: &AlbedoProvider, input: ProviderInput<'_>) -> Result<PseudoAlbedoMap> {
    let img = input.image;
    let (w, h) = (img.width, img.height);
    let wrap = |albedo: Vec<f64>, valid: Vec<bool>| PseudoAlbedoMap {
        width: w,
        height: h,
        albedo,
        valid,
        provider: provider.kind(),
    };
    match provider {
        AlbedoProvider::GroundTruth => {
            let gt = input.ground_truth.ok_or_else(|| {
                Error::InvalidData("ground-truth albedo requested but the scene has none".into())
            })?;
            check_size(gt, w, h, "ground-truth albedo")?;
            Ok(wrap(gt.data.iter().map(|v| clamp_albedo(*v)).collect(), vec![true; w * h]))
        }
        AlbedoProvider::Retinex { sigma } => {
            let (albedo, valid) = retinex(img, *sigma)?;
            Ok(wrap(albedo, valid))
        }
        AlbedoProvider::File => {
            let path = input
                .albedo_file
                .ok_or_else(|| Error::InvalidArgument("file provider needs an albedo path".into()))?;
            if !path.exists() {
                return Err(Error::MissingFile(path.to_path_buf()));
            }
            let loaded = read_png(path)?;
            let f = input.downscale.max(1);
            check_size(&loaded, w * f, h * f, &path.display().to_string())?;
            let loaded = loaded.downscale(f)?;
            // A zero channel carries no ratio information.
            let valid = loaded
                .data
                .chunks_exact(3)
                .map(|p| p.iter().all(|v| *v > 0.0))
                .collect();
            Ok(wrap(loaded.data.iter().map(|v| clamp_albedo(*v)).collect(), valid))
        }
    }
}

fn check_size(img: &Image, w: usize, h: usize, what: &str) -> Result<()> {
    if img.width != w || img.height != h {
        return Err(Error::InvalidData(format!(
            "{what} is {}×{}, expected {w}×{h}",
            img.width, img.height
        )));
    }
    Ok(())
}

/// Separable Gaussian blur of a single-channel map with clamped borders.
pub fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * src[r * width + clampi(c as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp[clampi(r as isize + k as isize - radius, height) * width + c])
                .sum();
        }
    }
    out
}

const RETINEX_EPS: f64 = 1e-4;

fn retinex(img: &Image, sigma: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidData("empty image".into()));
    }
    let lum: Vec<f64> = img
        .data
        .chunks_exact(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    let blurred = gaussian_blur(&lum, w, h, sigma);
    let mut albedo: Vec<f64> = img
        .data
        .iter()
        .enumerate()
        .map(|(i, c)| c / blurred[i / 3].max(RETINEX_EPS))
        .collect();
    let peak = albedo.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        albedo.iter_mut().for_each(|a| *a /= peak);
    }
    let valid = lum.iter().map(|l| *l > RETINEX_EPS).collect();
    Ok((albedo.into_iter().map(clamp_albedo).collect(), valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intrinsic::chromaticity;
    use crate::io::write_png;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            for c in 0..w {
                data.extend_from_slice(&f(c, r));
            }
        }
        Image { width: w, height: h, data }
    }

    #[test]
    fn ground_truth_is_passthrough() {
        let gt = image(4, 3, |c, r| [0.1 + 0.1 * c as f64, 0.5, 0.2 + 0.1 * r as f64]);
        let color = image(4, 3, |_, _| [0.3; 3]);
        let map = pseudo_albedo(
            &AlbedoProvider::GroundTruth,
            ProviderInput { image: &color, ground_truth: Some(&gt), albedo_file: None, downscale: 1 },
        )
        .unwrap();
        assert_eq!(map.albedo, gt.data);
        assert!(map.valid.iter().all(|v| *v));
        assert_eq!(map.provider, ProviderKind::GroundTruth);
    }

    #[test]
    fn retinex_constant_image() {
        let img = image(9, 7, |_, _| [0.4, 0.3, 0.2]);
        let map = pseudo_albedo(
            &AlbedoProvider::Retinex { sigma: 2.0 },
            ProviderInput { image: &img, ground_truth: None, albedo_file: None, downscale: 1 },
        )
        .unwrap();
        for p in map.albedo.chunks_exact(3) {
            for c in 0..3 {
                assert!((p[c] - map.albedo[c]).abs() < 1e-12);
            }
        }
        assert!(map.albedo.iter().all(|a| *a > 0.0 && *a <= 1.0));
    }

    #[test]
    fn retinex_recovers_albedo_chromaticity() {
        let (w, h) = (32, 24);
        let albedo = |c: usize, r: usize| {
            if (c / 8 + r / 8) % 2 == 0 {
                [0.8, 0.3, 0.2]
            } else {
                [0.2, 0.5, 0.7]
            }
        };
        let shade = |c: usize, r: usize| 0.3 + 0.6 * (c as f64 / w as f64) * (0.5 + 0.5 * r as f64 / h as f64);
        let img = image(w, h, |c, r| {
            let a = albedo(c, r);
            let s = shade(c, r);
            [a[0] * s, a[1] * s, a[2] * s]
        });
        let map = pseudo_albedo(
            &AlbedoProvider::Retinex { sigma: 4.0 },
            ProviderInput { image: &img, ground_truth: None, albedo_file: None, downscale: 1 },
        )
        .unwrap();
        let mut mae = 0.0;
        for r in 0..h {
            for c in 0..w {
                let est = chromaticity(map.rgb(c, r));
                let tru = chromaticity(albedo(c, r));
                mae += (0..3).map(|k| (est[k] - tru[k]).abs()).sum::<f64>() / 3.0;
            }
        }
        mae /= (w * h) as f64;
        assert!(mae < 0.05, "chromaticity MAE {mae}");
    }

    #[test]
    fn file_provider_reads_sibling_and_rejects_problems() {
        let dir = tempfile::tempdir().unwrap();
        let alb_path = dir.path().join("view_000_albedo.png");
        let img = image(5, 4, |_, _| [0.5; 3]);
        let input = ProviderInput { image: &img, ground_truth: None, albedo_file: Some(&alb_path), downscale: 1 };

        let err = pseudo_albedo(&AlbedoProvider::File, input).unwrap_err();
        assert!(err.to_string().contains("view_000_albedo.png"), "{err}");

        write_png(&alb_path, &image(4, 4, |_, _| [0.5; 3])).unwrap();
        assert!(pseudo_albedo(&AlbedoProvider::File, input).is_err());

        let alb = image(5, 4, |c, _| [0.2 * c as f64, 0.6, 0.4]);
        write_png(&alb_path, &alb).unwrap();
        let map = pseudo_albedo(&AlbedoProvider::File, input).unwrap();
        assert!(!map.valid[0] && map.valid[1]);
        assert!((map.rgb(1, 0)[1] - 153.0 / 255.0).abs() < 1e-12);
    }
}
