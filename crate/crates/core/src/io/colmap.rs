//! COLMAP text-format cameras (`cameras.txt`) and poses (`images.txt`).
//!
//! COLMAP places the origin at the top-left corner of the first pixel while
//! [`Camera`] puts integer coordinates at pixel centres, so principal points
//! shift by half a pixel on the way in and out.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::camera::{pose_from_parts, Camera};
use crate::error::{Error, Result};

/// Placeholder bounds for parsed cameras; scene loading replaces them.
pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapView {
    pub name: String,
    pub camera: Camera,
}

struct Intrinsics {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn parse_num<T: std::str::FromStr>(tok: &str, file: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        line,
        message: format!("cannot parse {what} from `{tok}`"),
    })
}

fn parse_cameras(text: &str, file: &str) -> Result<HashMap<u32, Intrinsics>> {
    let mut out = HashMap::new();
    for (line, l) in content_lines(text).filter(|(_, l)| !l.is_empty()) {
        let tok: Vec<&str> = l.split_whitespace().collect();
        let bad = |message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        if tok.len() < 4 {
            return Err(bad(format!("expected `ID MODEL WIDTH HEIGHT PARAMS…`, got `{l}`")));
        }
        let id: u32 = parse_num(tok[0], file, line, "camera id")?;
        let width = parse_num(tok[2], file, line, "width")?;
        let height = parse_num(tok[3], file, line, "height")?;
        let params: Vec<f64> = tok[4..]
            .iter()
            .map(|t| parse_num(t, file, line, "camera parameter"))
            .collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match (tok[1], params.len()) {
            ("PINHOLE", 4) => (params[0], params[1], params[2], params[3]),
            ("SIMPLE_PINHOLE", 3) => (params[0], params[0], params[1], params[2]),
            ("PINHOLE" | "SIMPLE_PINHOLE", n) => {
                return Err(bad(format!("{} takes {} parameters, got {n}", tok[1], if tok[1] == "PINHOLE" { 4 } else { 3 })))
            }
            (model, _) => return Err(Error::UnsupportedCameraModel(model.to_string())),
        };
        out.insert(
            id,
            Intrinsics {
                width,
                height,
                fx,
                fy,
                cx: cx - 0.5,
                cy: cy - 0.5,
            },
        );
    }
    Ok(out)
}

pub fn parse_colmap_text(cameras: &str, images: &str) -> Result<Vec<ColmapView>> {
    let intr = parse_cameras(cameras, "cameras.txt")?;
    let file = "images.txt";
    let mut views = Vec::new();
    let mut lines = content_lines(images);
    while let Some((line, l)) = lines.next() {
        if l.is_empty() {
            continue;
        }
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(Error::Parse {
                file: file.into(),
                line,
                message: format!("expected `ID QW QX QY QZ TX TY TZ CAMERA_ID NAME`, got `{l}`"),
            });
        }
        let v: Vec<f64> = tok[1..8]
            .iter()
            .map(|t| parse_num(t, file, line, "pose component"))
            .collect::<Result<_>>()?;
        let cam_id: u32 = parse_num(tok[8], file, line, "camera id")?;
        let name = tok[9..].join(" ");
        let k = intr.get(&cam_id).ok_or_else(|| Error::Parse {
            file: file.into(),
            line,
            message: format!("image `{name}` references unknown camera {cam_id}"),
        })?;
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() < 1e-12 {
            return Err(Error::Parse {
                file: file.into(),
                line,
                message: "zero quaternion".into(),
            });
        }
        // World-to-camera; invert to camera-to-world.
        let r_wc = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        let t_wc = Vector3::new(v[4], v[5], v[6]);
        let rot = r_wc.transpose();
        let center = -(rot * t_wc);
        let camera = Camera::new(
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            pose_from_parts(&rot, &center),
            k.width,
            k.height,
            DEFAULT_NEAR,
            DEFAULT_FAR,
        )
        .map_err(|e| Error::Parse {
            file: file.into(),
            line,
            message: e.to_string(),
        })?;
        views.push(ColmapView { name, camera });
        // Each image record is followed by its 2D point list.
        lines.next();
    }
    Ok(views)
}

pub fn parse_colmap(cameras_path: &Path, images_path: &Path) -> Result<Vec<ColmapView>> {
    let read = |p: &Path| {
        if !p.exists() {
            return Err(Error::MissingFile(p.to_path_buf()));
        }
        fs::read_to_string(p).map_err(|e| Error::io(p, e))
    };
    let cams = read(cameras_path)?;
    let imgs = read(images_path)?;
    parse_colmap_text(&cams, &imgs).map_err(|e| match e {
        Error::Parse { file, line, message } => Error::Parse {
            file: if file == "cameras.txt" {
                cameras_path.display().to_string()
            } else {
                images_path.display().to_string()
            },
            line,
            message,
        },
        other => other,
    })
}

/// Renders `(cameras.txt, images.txt)` with one PINHOLE camera per view.
pub fn serialize_colmap(views: &[ColmapView]) -> (String, String) {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for (i, v) in views.iter().enumerate() {
        let c = &v.camera;
        let id = i + 1;
        let _ = writeln!(
            cams,
            "{id} PINHOLE {} {} {} {} {} {}",
            c.width,
            c.height,
            c.fx(),
            c.fy(),
            c.cx() + 0.5,
            c.cy() + 0.5
        );
        let r_wc = c.rotation().transpose();
        let t_wc = -(r_wc * c.center());
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_wc));
        let q = if q.w < 0.0 { UnitQuaternion::new_unchecked(-q.into_inner()) } else { q };
        let _ = writeln!(
            imgs,
            "{id} {} {} {} {} {} {} {} {id} {}\n",
            q.w, q.i, q.j, q.k, t_wc.x, t_wc.y, t_wc.z, v.name
        );
    }
    (cams, imgs)
}

pub fn write_colmap(dir: &Path, views: &[ColmapView]) -> Result<()> {
    let (cams, imgs) = serialize_colmap(views);
    super::write_atomic(&dir.join("cameras.txt"), cams.as_bytes())?;
    super::write_atomic(&dir.join("images.txt"), imgs.as_bytes())
}
