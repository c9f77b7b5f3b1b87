//! Scene directory layout:
//!
//! ```text
//! images/<name>.png
//! albedo/<stem>_albedo.png   optional
//! depth/<stem>.dpth          optional
//! depth/<stem>_mask.png      optional
//! cameras.txt, images.txt    COLMAP text
//! split.txt                  `<name> train|test` per line
//! scene.cfg                  optional key = value
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::colmap::parse_colmap;
use super::config::{KvFile, RunConfig};
use super::image::{read_depth, read_mask_png, read_png, DepthMap, Image};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::intrinsic::{pseudo_albedo, AlbedoProvider, ProviderInput, ProviderKind, PseudoAlbedoMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub image: Image,
    pub camera: Camera,
    /// Albedo shipped with the scene under `albedo/`.
    pub albedo: Option<Image>,
    pub depth: Option<DepthMap>,
    pub depth_mask: Option<Vec<bool>>,
    pub albedo_path: PathBuf,
}

impl View {
    pub fn stem(&self) -> &str {
        Path::new(&self.name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.name)
    }

    /// Ground-truth depth validity: positive, finite and not masked out.
    pub fn depth_valid(&self) -> Option<Vec<bool>> {
        let d = self.depth.as_ref()?;
        Some(
            d.data
                .iter()
                .enumerate()
                .map(|(i, v)| v.is_finite() && *v > 0.0 && self.depth_mask.as_ref().is_none_or(|m| m[i]))
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub near: f64,
    pub far: f64,
    /// Factor applied to world units so the median train depth is 1.
    pub scale: f64,
    pub width: usize,
    pub height: usize,
    pub downscale: usize,
    pub warnings: Vec<String>,
}

pub fn albedo_path(scene_dir: &Path, image_name: &str) -> PathBuf {
    let stem = Path::new(image_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    scene_dir.join("albedo").join(format!("{stem}_albedo.png"))
}

pub fn depth_path(scene_dir: &Path, image_name: &str) -> PathBuf {
    let stem = Path::new(image_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    scene_dir.join("depth").join(format!("{stem}.dpth"))
}

pub fn parse_split(text: &str, file: &str) -> Result<Vec<(String, Split)>> {
    let mut out: Vec<(String, Split)> = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            file: file.into(),
            line: i + 1,
            message,
        };
        let (name, tag) = l.rsplit_once(char::is_whitespace).ok_or_else(|| bad(format!("expected `<name> train|test`, got `{l}`")))?;
        let split = match tag {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("unknown split `{other}`"))),
        };
        let name = name.trim().to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(bad(format!("`{name}` listed twice")));
        }
        out.push((name, split));
    }
    Ok(out)
}

fn downscale_depth(d: &DepthMap, factor: usize) -> DepthMap {
    if factor == 1 {
        return d.clone();
    }
    let (w, h) = (d.width / factor, d.height / factor);
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for dr in 0..factor {
                for dc in 0..factor {
                    let v = d.data[(r * factor + dr) * d.width + c * factor + dc];
                    if v.is_finite() && v > 0.0 {
                        sum += v as f64;
                        n += 1;
                    }
                }
            }
            data.push(if n > 0 { (sum / n as f64) as f32 } else { 0.0 });
        }
    }
    DepthMap { width: w, height: h, data }
}

fn downscale_mask(m: &[bool], width: usize, height: usize, factor: usize) -> Vec<bool> {
    let (w, h) = (width / factor, height / factor);
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            out.push((0..factor).all(|dr| (0..factor).all(|dc| m[(r * factor + dr) * width + c * factor + dc])));
        }
    }
    out
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn load_view(dir: &Path, name: &str, camera: &Camera, factor: usize) -> Result<View> {
    let img_path = dir.join("images").join(name);
    if !img_path.exists() {
        return Err(Error::MissingFile(img_path));
    }
    let raw = read_png(&img_path)?;
    if raw.width != camera.width || raw.height != camera.height {
        return Err(Error::InvalidData(format!(
            "{} is {}×{} but its camera says {}×{}",
            img_path.display(),
            raw.width,
            raw.height,
            camera.width,
            camera.height
        )));
    }
    let apath = albedo_path(dir, name);
    let albedo = if apath.exists() {
        let a = read_png(&apath)?;
        if a.width != raw.width || a.height != raw.height {
            return Err(Error::InvalidData(format!("{} does not match its image size", apath.display())));
        }
        Some(a.downscale(factor)?)
    } else {
        None
    };
    let dpath = depth_path(dir, name);
    let depth = if dpath.exists() {
        let d = read_depth(&dpath)?;
        if d.width != raw.width || d.height != raw.height {
            return Err(Error::InvalidData(format!("{} does not match its image size", dpath.display())));
        }
        Some(downscale_depth(&d, factor))
    } else {
        None
    };
    let mpath = dpath.with_file_name(format!(
        "{}_mask.png",
        Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
    ));
    let depth_mask = if mpath.exists() {
        let (w, h, m) = read_mask_png(&mpath)?;
        if w != raw.width || h != raw.height {
            return Err(Error::InvalidData(format!("{} does not match its image size", mpath.display())));
        }
        Some(downscale_mask(&m, w, h, factor))
    } else {
        None
    };
    Ok(View {
        name: name.to_string(),
        image: raw.downscale(factor)?,
        camera: camera.downscaled(factor)?,
        albedo,
        depth,
        depth_mask,
        albedo_path: apath,
    })
}

pub fn load_scene(dir: &Path, cfg: &RunConfig) -> Result<SceneDataset> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let split_path = dir.join("split.txt");
    if !split_path.exists() {
        return Err(Error::MissingFile(split_path));
    }
    let split_text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split = parse_split(&split_text, &split_path.display().to_string())?;
    let cams: HashMap<String, Camera> = parse_colmap(&dir.join("cameras.txt"), &dir.join("images.txt"))?
        .into_iter()
        .map(|v| (v.name, v.camera))
        .collect();
    let scene_cfg_path = dir.join("scene.cfg");
    let scene_cfg = if scene_cfg_path.exists() {
        KvFile::read(&scene_cfg_path)?
    } else {
        KvFile::default()
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (name, s) in &split {
        let cam = cams
            .get(name)
            .ok_or_else(|| Error::InvalidData(format!("`{name}` from split.txt has no camera in images.txt")))?;
        let view = load_view(dir, name, cam, cfg.downscale)?;
        match s {
            Split::Train => train.push(view),
            Split::Test => test.push(view),
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidData("split.txt lists no train views".into()));
    }
    let (width, height) = (train[0].image.width, train[0].image.height);
    if let Some(v) = train.iter().chain(&test).find(|v| v.image.width != width || v.image.height != height) {
        return Err(Error::InvalidData(format!(
            "`{}` is {}×{} after downscale, other views are {width}×{height}",
            v.name, v.image.width, v.image.height
        )));
    }

    let mut train_depths: Vec<f64> = train
        .iter()
        .filter_map(|v| Some(v.depth.as_ref()?.data.iter().zip(v.depth_valid()?).filter(|(_, ok)| *ok).map(|(d, _)| *d as f64).collect::<Vec<_>>()))
        .flatten()
        .collect();
    train_depths.sort_by(|a, b| a.total_cmp(b));

    let scale = if cfg.normalize_scale && !train_depths.is_empty() {
        1.0 / percentile(&train_depths, 0.5)
    } else {
        1.0
    };
    let (near, far) = if cfg.far > 0.0 {
        (cfg.near.max(1e-6), cfg.far)
    } else if let (Some(n), Some(f)) = (scene_cfg.get_f64("near")?, scene_cfg.get_f64("far")?) {
        (n * scale, f * scale)
    } else if !train_depths.is_empty() {
        let lo = percentile(&train_depths, 0.01) * scale;
        let hi = percentile(&train_depths, 0.99) * scale;
        (0.8 * lo, 1.2 * hi)
    } else {
        return Err(Error::InvalidData(
            "scene bounds unknown: set near/far in the run config or scene.cfg, or ship depth maps".into(),
        ));
    };

    let mut warnings = Vec::new();
    for v in train.iter_mut().chain(test.iter_mut()) {
        v.camera = v.camera.scaled_scene(scale)?.with_bounds(near, far)?;
        if let Some(d) = v.depth.as_mut() {
            d.data.iter_mut().for_each(|x| *x = (*x as f64 * scale) as f32);
        }
    }
    let provider = ProviderKind::parse(&cfg.provider)?;
    if provider == ProviderKind::File {
        if let Some(v) = train.iter().find(|v| !v.albedo_path.exists()) {
            return Err(Error::MissingFile(v.albedo_path.clone()));
        }
    }
    if provider == ProviderKind::GroundTruth {
        if let Some(v) = train.iter().find(|v| v.albedo.is_none()) {
            warnings.push(format!("`{}` has no ground-truth albedo", v.name));
        }
    }
    Ok(SceneDataset {
        root: dir.to_path_buf(),
        train,
        test,
        near,
        far,
        scale,
        width,
        height,
        downscale: cfg.downscale,
        warnings,
    })
}

impl SceneDataset {
    pub fn provider(cfg: &RunConfig) -> Result<AlbedoProvider> {
        Ok(match ProviderKind::parse(&cfg.provider)? {
            ProviderKind::GroundTruth => AlbedoProvider::GroundTruth,
            ProviderKind::Retinex => AlbedoProvider::Retinex { sigma: cfg.retinex_sigma },
            ProviderKind::File => AlbedoProvider::File,
        })
    }

    /// Pseudo-albedo for every train view, in order.
    pub fn pseudo_albedo(&self, provider: &AlbedoProvider) -> Result<Vec<PseudoAlbedoMap>> {
        self.train
            .iter()
            .map(|v| {
                pseudo_albedo(
                    provider,
                    ProviderInput {
                        image: &v.image,
                        ground_truth: v.albedo.as_ref(),
                        albedo_file: Some(&v.albedo_path),
                        downscale: self.downscale,
                    },
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parsing() {
        let s = parse_split("a.png train\n# x\nb c.png test\n", "split.txt").unwrap();
        assert_eq!(s, vec![("a.png".into(), Split::Train), ("b c.png".into(), Split::Test)]);
        assert!(parse_split("a.png val\n", "s").is_err());
        assert!(parse_split("a.png train\na.png test\n", "s").is_err());
    }

    #[test]
    fn depth_downscale_ignores_invalid() {
        let d = DepthMap { width: 2, height: 2, data: vec![1.0, 3.0, 0.0, f32::NAN] };
        assert_eq!(downscale_depth(&d, 2).data, vec![2.0]);
    }
}
