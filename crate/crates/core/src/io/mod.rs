//! Dataset ingestion and run-directory persistence.

mod colmap;
mod config;
mod image;
mod scene;

pub use colmap::{parse_colmap, parse_colmap_text, serialize_colmap, write_colmap, ColmapView, DEFAULT_FAR, DEFAULT_NEAR};
pub use config::{KvFile, RunConfig};
pub use image::{
    decode_depth, encode_depth, encode_rgb8, quantize, read_depth, read_mask_png, read_png, write_depth,
    write_depth_preview, write_gray_png, write_png, DepthMap, Image,
};
pub use scene::{albedo_path, depth_path, load_scene, parse_split, SceneDataset, Split, View};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Column header of the training metrics log.
pub const METRICS_HEADER: &str = "iter,L_color,L_ac,L_dc,L_ds,L_edge,L_pid,L_chrom,total";

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp~");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Appends CSV rows, writing `header` first when the file is new. The whole
/// file is rewritten atomically so a crash never leaves a torn row.
pub fn append_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = if path.exists() {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        format!("{header}\n")
    };
    if let Some(first) = text.lines().next() {
        if first != header {
            return Err(Error::InvalidData(format!(
                "{} has header `{first}`, expected `{header}`",
                path.display()
            )));
        }
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Saves `renders/<name>.png`, and with a depth map `renders/<name>_depth.dpth`
/// plus an 8-bit preview.
pub fn save_render(run_dir: &Path, name: &str, color: &Image, depth: Option<&DepthMap>) -> Result<()> {
    let dir = run_dir.join("renders");
    write_png(&dir.join(format!("{name}.png")), color)?;
    if let Some(d) = depth {
        write_depth(&dir.join(format!("{name}_depth.dpth")), d)?;
        write_depth_preview(&dir.join(format!("{name}_depth.png")), d)?;
    }
    Ok(())
}
