use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().cycle().take(width * height * 3).cloned().collect(),
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Area-averaged reduction by an integer factor; trailing rows and
    /// columns that do not fill a block are dropped.
    pub fn downscale(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downscale factor must be ≥ 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        if w == 0 || h == 0 {
            return Err(Error::InvalidData(format!(
                "{}×{} image is smaller than downscale factor {factor}",
                self.width, self.height
            )));
        }
        let mut out = Image::new(w, h);
        let norm = 1.0 / (factor * factor) as f64;
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                for dr in 0..factor {
                    for dc in 0..factor {
                        let p = self.pixel(c * factor + dc, r * factor + dr);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                out.set_pixel(c, r, acc.map(|v| v * norm));
            }
        }
        Ok(out)
    }
}

/// `[0, 1]` to 8 bits, rounding half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?
        .to_rgb8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|b| *b as f64 / 255.0).collect(),
    })
}

pub fn encode_rgb8(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| quantize(*v)).collect()
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_png_bytes(path, img.width, img.height, &encode_rgb8(img), image::ColorType::Rgb8)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| quantize(*v)).collect();
    write_png_bytes(path, width, height, &bytes, image::ColorType::L8)
}

fn write_png_bytes(path: &Path, w: usize, h: usize, bytes: &[u8], color: image::ColorType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, bytes, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Single-channel validity mask; any nonzero value counts as valid.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok((
        img.width() as usize,
        img.height() as usize,
        img.as_raw().iter().map(|v| *v > 0).collect(),
    ))
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// Row-major depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col] as f64
    }
}

pub fn encode_depth(d: &DepthMap) -> Result<Vec<u8>> {
    if d.width > u16::MAX as usize || d.height > u16::MAX as usize {
        return Err(Error::InvalidData(format!("depth map {}×{} too large", d.width, d.height)));
    }
    if d.data.len() != d.width * d.height {
        return Err(Error::Shape("depth data does not match its dimensions".into()));
    }
    let mut out = Vec::with_capacity(8 + 4 * d.data.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(d.width as u16).to_le_bytes());
    out.extend_from_slice(&(d.height as u16).to_le_bytes());
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    if bytes.len() < 8 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::InvalidData("not a DPTH depth file".into()));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let payload = &bytes[8..];
    if payload.len() != 4 * width * height {
        return Err(Error::InvalidData(format!(
            "depth payload has {} bytes, {width}×{height} needs {}",
            payload.len(),
            4 * width * height
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthMap { width, height, data })
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(&bytes).map_err(|e| match e {
        Error::InvalidData(m) => Error::InvalidData(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    super::write_atomic(path, &encode_depth(d)?)
}

/// Min-max normalized 8-bit preview over finite positive values.
pub fn write_depth_preview(path: &Path, d: &DepthMap) -> Result<()> {
    let finite = d.data.iter().filter(|v| v.is_finite() && **v > 0.0);
    let (lo, hi) = finite.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let values: Vec<f64> = d
        .data
        .iter()
        .map(|v| if v.is_finite() && *v > 0.0 { (*v - lo) as f64 / span } else { 0.0 })
        .collect();
    write_gray_png(path, d.width, d.height, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gray_quantizes_to_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        write_png(&p, &Image::filled(3, 2, [0.5; 3])).unwrap();
        let raw = image::open(&p).unwrap().to_rgb8();
        assert!(raw.as_raw().iter().all(|b| *b == 128));
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(2.5 / 255.0), 3);
        assert_eq!(quantize(-1.0), 0);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 29) % 256) as f64 / 255.0).collect();
        let img = Image { width: 4, height: 3, data };
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn downscale_averages_blocks() {
        let mut img = Image::new(4, 2);
        for c in 0..4 {
            img.set_pixel(c, 0, [c as f64 / 4.0; 3]);
            img.set_pixel(c, 1, [1.0; 3]);
        }
        let small = img.downscale(2).unwrap();
        assert_eq!((small.width, small.height), (2, 1));
        assert!((small.pixel(0, 0)[0] - (0.0 + 0.25 + 2.0) / 4.0).abs() < 1e-15);
        let big = Image::new(4000, 30);
        let d = big.downscale(10).unwrap();
        assert_eq!((d.width, d.height), (400, 3));
    }

    #[test]
    fn depth_rejects_garbage() {
        assert!(decode_depth(b"NOPE\0\0\0\0").is_err());
        let mut ok = encode_depth(&DepthMap { width: 2, height: 1, data: vec![1.0, 2.0] }).unwrap();
        ok.pop();
        assert!(decode_depth(&ok).is_err());
    }

    proptest! {
        #[test]
        fn depth_round_trip(w in 1usize..8, h in 1usize..8, seed in any::<u32>()) {
            let data: Vec<f32> = (0..w * h).map(|i| (seed as f32 + i as f32) * 0.37).collect();
            let d = DepthMap { width: w, height: h, data };
            let bytes = encode_depth(&d).unwrap();
            prop_assert_eq!(&bytes[..4], b"DPTH");
            prop_assert_eq!(bytes.len(), 8 + 4 * w * h);
            prop_assert_eq!(decode_depth(&bytes).unwrap(), d);
        }
    }
}
