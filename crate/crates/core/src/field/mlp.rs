use nalgebra::Vector3;
use rand::Rng;

use super::encoding::{encode_into, EncodingConfig};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Trunk width, layer count and skip position. Density goes through a
/// softplus and color through a sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldConfig {
    pub width: usize,
    pub depth: usize,
    /// Layer index whose input is concatenated with the encoded position.
    pub skip: Option<usize>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 6,
            skip: Some(3),
        }
    }
}

/// A radiance field MLP whose weights live in a [`ParamStore`] under
/// `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub prefix: String,
    pub arch: FieldConfig,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

impl RadianceField {
    pub fn new(prefix: &str, arch: FieldConfig, enc: &EncodingConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            arch,
            pos_freqs: enc.pos_freqs,
            dir_freqs: enc.dir_freqs,
        }
    }

    pub fn pos_dim(&self) -> usize {
        3 * (1 + 2 * self.pos_freqs)
    }

    pub fn dir_dim(&self) -> usize {
        3 * (1 + 2 * self.dir_freqs)
    }

    fn name(&self, layer: &str, part: &str) -> String {
        format!("{}/{layer}/{part}", self.prefix)
    }

    fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let w = self.arch.width;
        let mut shapes = Vec::new();
        for i in 0..self.arch.depth {
            let mut fan_in = if i == 0 { self.pos_dim() } else { w };
            if self.arch.skip == Some(i) && i > 0 {
                fan_in += self.pos_dim();
            }
            shapes.push((format!("l{i}"), fan_in, w));
        }
        shapes.push(("sigma".into(), w, 1));
        shapes.push(("feat".into(), w, w));
        shapes.push(("color0".into(), w + self.dir_dim(), w / 2));
        shapes.push(("color1".into(), w / 2, 3));
        shapes
    }

    /// Registers randomly initialised weights in `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.arch.depth == 0 || self.arch.width < 2 {
            return Err(Error::InvalidArgument(format!(
                "field needs depth ≥ 1 and width ≥ 2, got {:?}",
                self.arch
            )));
        }
        for (layer, fan_in, fan_out) in self.layer_shapes() {
            store.insert(&self.name(&layer, "w"), &[fan_in, fan_out], glorot(rng, fan_in, fan_out))?;
            store.insert(&self.name(&layer, "b"), &[fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }

    /// Zeroes both output heads so density is `softplus(0)` and color is
    /// `sigmoid(0)` everywhere.
    pub fn zero_outputs(&self, store: &mut ParamStore) -> Result<()> {
        for layer in ["sigma", "color1"] {
            for part in ["w", "b"] {
                let name = self.name(layer, part);
                let n = store
                    .block(&name)
                    .ok_or_else(|| Error::Shape(format!("missing block `{name}`")))?
                    .len();
                store.set_values(&name, &vec![0.0; n])?;
            }
        }
        Ok(())
    }

    /// Checks that every block exists with the shape this architecture needs.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        for (layer, fan_in, fan_out) in self.layer_shapes() {
            for (part, shape) in [("w", vec![fan_in, fan_out]), ("b", vec![fan_out])] {
                let name = self.name(&layer, part);
                match store.block(&name) {
                    Some(b) if b.shape == shape => {}
                    Some(b) => {
                        return Err(Error::Shape(format!(
                            "block `{name}` has shape {:?}, architecture needs {shape:?}",
                            b.shape
                        )))
                    }
                    None => return Err(Error::Shape(format!("missing block `{name}`"))),
                }
            }
        }
        Ok(())
    }

    fn dense(&self, g: &mut Graph, store: &ParamStore, layer: &str, x: Var) -> Result<Var> {
        let w = g.param(store, &self.name(layer, "w"))?;
        let b = g.param(store, &self.name(layer, "b"))?;
        Ok(g.affine(x, w, b))
    }

    /// Evaluates density `[n, 1]` and color `[n, 3]` for encoded inputs
    /// `pos [n, pos_dim]` and `dir [n, dir_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos: Var, dir: Var) -> Result<(Var, Var)> {
        if g.shape(pos).get(1) != Some(&self.pos_dim()) || g.shape(dir).get(1) != Some(&self.dir_dim()) {
            return Err(Error::Shape(format!(
                "encoded inputs {:?}/{:?} do not match field dims {}/{}",
                g.shape(pos),
                g.shape(dir),
                self.pos_dim(),
                self.dir_dim()
            )));
        }
        let mut h = pos;
        for i in 0..self.arch.depth {
            if self.arch.skip == Some(i) && i > 0 {
                h = g.concat_cols(h, pos);
            }
            let z = self.dense(g, store, &format!("l{i}"), h)?;
            h = g.relu(z);
        }
        let raw_sigma = self.dense(g, store, "sigma", h)?;
        let sigma = g.softplus(raw_sigma);
        let feat = self.dense(g, store, "feat", h)?;
        let c_in = g.concat_cols(feat, dir);
        let c_hidden = self.dense(g, store, "color0", c_in)?;
        let c_hidden = g.relu(c_hidden);
        let raw_rgb = self.dense(g, store, "color1", c_hidden)?;
        let rgb = g.sigmoid(raw_rgb);
        Ok((sigma, rgb))
    }

    /// Single-point query: `(σ, rgb)`.
    pub fn query(
        &self,
        store: &ParamStore,
        p: &Vector3<f64>,
        d: &Vector3<f64>,
        mask_ratio: f64,
    ) -> Result<(f64, [f64; 3])> {
        self.check_store(store)?;
        let mut pe = Vec::new();
        encode_into(p.as_slice(), self.pos_freqs, mask_ratio, &mut pe);
        let mut de = Vec::new();
        encode_into(d.as_slice(), self.dir_freqs, mask_ratio, &mut de);
        let mut g = Graph::new();
        let pv = g.constant(&[1, pe.len()], pe);
        let dv = g.constant(&[1, de.len()], de);
        let (s, c) = self.forward(&mut g, store, pv, dv)?;
        let cv = g.value(c);
        Ok((g.value(s)[0], [cv[0], cv[1], cv[2]]))
    }
}
