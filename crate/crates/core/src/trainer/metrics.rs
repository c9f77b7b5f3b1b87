//! Image and depth quality metrics.

use crate::error::{Error, Result};
use crate::io::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "images are {}×{} and {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean structural similarity over every fully contained 11×11 window and
/// all three channels, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}"
        )));
    }
    let g = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let plane = |img: &Image| -> Vec<f64> { img.data.chunks_exact(3).map(|p| p[c]).collect() };
        let (x, y) = (plane(a), plane(b));
        let products = [
            x.clone(),
            y.clone(),
            x.iter().map(|v| v * v).collect(),
            y.iter().map(|v| v * v).collect(),
            x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>(),
        ];
        // Separable filtering: rows first, then columns.
        let filtered: Vec<Vec<f64>> = products
            .iter()
            .map(|src| {
                let mut rows = vec![0.0; ow * h];
                for r in 0..h {
                    for col in 0..ow {
                        rows[r * ow + col] = (0..SSIM_WINDOW).map(|k| g[k] * src[r * w + col + k]).sum();
                    }
                }
                let mut out = vec![0.0; ow * oh];
                for r in 0..oh {
                    for col in 0..ow {
                        out[r * ow + col] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + col]).sum();
                    }
                }
                out
            })
            .collect();
        for i in 0..ow * oh {
            let (mx, my) = (filtered[0][i], filtered[1][i]);
            let vx = filtered[2][i] - mx * mx;
            let vy = filtered[3][i] - my * my;
            let cxy = filtered[4][i] - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

/// Peak signal-to-noise ratio for peak 1; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean `|d̂ − d|/d` over valid pixels. With `scale_align`, `pred` is first
/// multiplied by the median ratio `d/d̂` over valid pixels where `d̂ > 0`.
pub fn abs_rel(pred: &[f64], gt: &[f64], valid: &[bool], scale_align: bool) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::Shape(format!(
            "depth sizes {} / {} / mask {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("abs_rel over an empty valid set".into()));
    }
    if let Some(&i) = idx.iter().find(|&&i| !(gt[i] > 0.0)) {
        return Err(Error::InvalidData(format!("ground-truth depth {} at valid pixel {i}", gt[i])));
    }
    let s = if scale_align {
        let ratios: Vec<f64> = idx.iter().filter(|&&i| pred[i] > 0.0).map(|&i| gt[i] / pred[i]).collect();
        if ratios.is_empty() {
            1.0
        } else {
            median(ratios)
        }
    } else {
        1.0
    };
    let sum: f64 = idx.iter().map(|&i| (s * pred[i] - gt[i]).abs() / gt[i]).sum();
    Ok(sum / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image { width: w, height: h, data: (0..w * h * 3).map(|_| rng.gen::<f64>()).collect() }
    }

    /// Direct 2-D window sums per position.
    fn naive_ssim(a: &Image, b: &Image) -> f64 {
        let g = gaussian_window();
        let (w, h) = (a.width, a.height);
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..3 {
            for r0 in 0..=h - 11 {
                for c0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            let x = a.pixel(c0 + j, r0 + i)[c];
                            let y = b.pixel(c0 + j, r0 + i)[c];
                            mx += wt * x;
                            my += wt * y;
                            sxx += wt * x * x;
                            syy += wt * y * y;
                            sxy += wt * x * y;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(20, 16, 1);
        let b = random_image(20, 16, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let a = random_image(17, 13, 3);
        let b = random_image(17, 13, 4);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negative_is_negative() {
        // Checkerboard of 0.1 / 0.9, no mid-grey.
        let (w, h) = (16, 16);
        let data: Vec<f64> = (0..w * h)
            .flat_map(|i| {
                let v = if (i % w + i / w) % 2 == 0 { 0.1 } else { 0.9 };
                [v; 3]
            })
            .collect();
        let neg = Image { width: w, height: h, data: data.iter().map(|v| 1.0 - v).collect() };
        let a = Image { width: w, height: h, data };
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_bad_shapes() {
        assert!(ssim(&random_image(12, 12, 0), &random_image(12, 13, 0)).is_err());
        assert!(ssim(&random_image(10, 12, 0), &random_image(10, 12, 0)).is_err());
    }

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn abs_rel_examples() {
        let d = [1.0, 2.0, 3.0, 4.0];
        let m = [true; 4];
        assert_eq!(abs_rel(&d, &d, &m, false).unwrap(), 0.0);
        let d2: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        assert!((abs_rel(&d2, &d, &m, false).unwrap() - 1.0).abs() < 1e-15);
        assert!(abs_rel(&d2, &d, &m, true).unwrap() < 1e-15);
        assert!(abs_rel(&d, &d, &[false; 4], false).is_err());
        assert!(abs_rel(&d, &[0.0, 1.0, 1.0, 1.0], &m, false).is_err());
    }

    proptest! {
        #[test]
        fn abs_rel_matches_naive_loop(
            pairs in proptest::collection::vec((0.1f64..5.0, 0.1f64..5.0, any::<bool>()), 1..64),
            align in any::<bool>(),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let gt: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut valid: Vec<bool> = pairs.iter().map(|p| p.2).collect();
            valid[0] = true;
            let mut ratios = Vec::new();
            for i in 0..pred.len() {
                if valid[i] {
                    ratios.push(gt[i] / pred[i]);
                }
            }
            ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = ratios.len();
            let s = if !align { 1.0 } else if k % 2 == 1 { ratios[k / 2] } else { (ratios[k / 2 - 1] + ratios[k / 2]) / 2.0 };
            let mut sum = 0.0;
            let mut n = 0.0;
            for i in 0..pred.len() {
                if valid[i] {
                    sum += (s * pred[i] - gt[i]).abs() / gt[i];
                    n += 1.0;
                }
            }
            let got = abs_rel(&pred, &gt, &valid, align).unwrap();
            prop_assert!((got - sum / n).abs() < 1e-12);
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn alignment_cancels_global_scale(
            gt in proptest::collection::vec(0.1f64..5.0, 1..64),
            s in 0.01f64..100.0,
        ) {
            let pred: Vec<f64> = gt.iter().map(|d| d * s).collect();
            let valid = vec![true; gt.len()];
            prop_assert!(abs_rel(&pred, &gt, &valid, true).unwrap() < 1e-12);
        }
    }
}
