//! Neural radiance field: encoding, MLP and volume rendering.

pub mod encoding;
mod mlp;
pub mod render;

pub use encoding::{encode, mask_ratio_at, EncodingConfig};
pub use mlp::{FieldConfig, RadianceField};
pub use render::{backward_patch, render_patch, render_values, PatchRender, RenderVars, SampleConfig};
