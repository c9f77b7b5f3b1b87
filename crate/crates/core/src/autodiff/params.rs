use crate::error::{Error, Result};

/// Storage precision of a [`ParamStore`].
///
/// `Single` rounds values and optimizer moments to `f32` after every
/// mutation, so a store survives the `f32` checkpoint payload bit-exactly.
/// `Double` keeps full precision for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Learning-rate multiplier applied by [`adam_step`]; not persisted.
    pub lr_scale: f64,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    step: u64,
    precision: Precision,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            blocks: Vec::new(),
            step: 0,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Adds a block with zeroed gradient and moments.
    pub fn insert(&mut self, name: &str, shape: &[usize], mut value: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::Shape(format!(
                "block `{name}`: shape {shape:?} holds {n} values, got {}",
                value.len()
            )));
        }
        if self.block(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate block `{name}`")));
        }
        if self.precision == Precision::Single {
            round_f32(&mut value);
        }
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            value,
            lr_scale: 1.0,
        });
        Ok(())
    }

    /// Overwrites a block's values (used by gradient checks and loaders).
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let single = self.precision == Precision::Single;
        let block = self
            .block_mut(name)
            .ok_or_else(|| Error::Shape(format!("parameter block `{name}` not found")))?;
        if block.value.len() != values.len() {
            return Err(Error::Shape(format!("block `{name}` size mismatch")));
        }
        block.value.copy_from_slice(values);
        if single {
            round_f32(&mut block.value);
        }
        Ok(())
    }

    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) {
        for b in self.blocks.iter_mut().filter(|b| b.name.starts_with(prefix)) {
            b.lr_scale = scale;
        }
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.value.iter().chain(&b.m).chain(&b.v).all(|x| x.is_finite()))
    }

    fn finalize_precision(&mut self) {
        if self.precision == Precision::Single {
            for b in &mut self.blocks {
                round_f32(&mut b.value);
                round_f32(&mut b.m);
                round_f32(&mut b.v);
            }
        }
    }
}

/// Zeroes every gradient block; parameters are untouched.
pub fn zero_grads(store: &mut ParamStore) {
    store.zero_grads();
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied once per step.
    pub decay_per_step: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_per_step: None,
        }
    }
}

impl AdamConfig {
    /// Exponential decay reaching `final_ratio × lr` after `steps` steps.
    pub fn with_decay_over(mut self, steps: usize, final_ratio: f64) -> Self {
        if steps > 1 && final_ratio > 0.0 {
            self.decay_per_step = Some(final_ratio.powf(1.0 / (steps - 1) as f64));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.decay_per_step.is_none_or(|d| d > 0.0 && d <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam config {self:?}")))
        }
    }

    /// Learning rate in effect at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.decay_per_step {
            Some(d) => self.lr * d.powf((t.saturating_sub(1)) as f64),
            None => self.lr,
        }
    }
}

/// One bias-corrected Adam update over every block.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for b in store.blocks() {
        if let Some(i) = b.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}` at index {i}", b.name)));
        }
    }
    let t = store.step + 1;
    let lr = cfg.lr_at(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for b in store.blocks_mut() {
        let step_lr = lr * b.lr_scale;
        for i in 0..b.value.len() {
            let g = b.grad[i];
            b.m[i] = cfg.beta1 * b.m[i] + (1.0 - cfg.beta1) * g;
            b.v[i] = cfg.beta2 * b.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = b.m[i] / bc1;
            let v_hat = b.v[i] / bc2;
            b.value[i] -= step_lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.step = t;
    store.finalize_precision();
    if !store.all_finite() {
        return Err(Error::NonFinite("parameters after Adam step".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new(Precision::Double);
        s.insert("p", &[1], vec![p]).unwrap();
        s.block_mut("p").unwrap().grad[0] = g;
        s
    }

    #[test]
    fn zero_grads_clears_only_gradients() {
        let mut s = ParamStore::new(Precision::Double);
        s.insert("a", &[2], vec![3.0, 4.0]).unwrap();
        s.block_mut("a").unwrap().grad.copy_from_slice(&[1.0, -2.0]);
        zero_grads(&mut s);
        assert_eq!(s.block("a").unwrap().grad, vec![0.0, 0.0]);
        assert_eq!(s.block("a").unwrap().value, vec![3.0, 4.0]);

        let mut empty = ParamStore::new(Precision::Double);
        zero_grads(&mut empty);
        assert!(empty.is_empty());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction, so Δp = −lr / (1 + ε).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.block("p").unwrap().value[0] - expected).abs() < 1e-15);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn constant_gradient_keeps_decreasing() {
        let mut s = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &cfg).unwrap();
        let p1 = s.block("p").unwrap().value[0];
        s.block_mut("p").unwrap().grad[0] = 1.0;
        adam_step(&mut s, &cfg).unwrap();
        let p2 = s.block("p").unwrap().value[0];
        assert!(p2 < p1 && p1 < 0.0);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut s = scalar_store(0.0, f64::NAN);
        let err = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn decay_reaches_final_ratio() {
        let cfg = AdamConfig::default().with_decay_over(101, 0.1);
        assert!((cfg.lr_at(1) - 5e-4).abs() < 1e-18);
        assert!((cfg.lr_at(101) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn single_precision_rounds_values() {
        let mut s = ParamStore::new(Precision::Single);
        s.insert("a", &[1], vec![0.1]).unwrap();
        assert_eq!(s.block("a").unwrap().value[0], 0.1f32 as f64);
    }

    proptest! {
        #[test]
        fn zero_gradient_from_fresh_state_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut s = ParamStore::new(Precision::Double);
            s.insert("w", &[vals.len()], vals.clone()).unwrap();
            adam_step(&mut s, &AdamConfig::default()).unwrap();
            prop_assert_eq!(&s.block("w").unwrap().value, &vals);
            prop_assert_eq!(s.step(), 1);
        }

        #[test]
        fn adam_is_deterministic(vals in prop::collection::vec(-1.0f64..1.0, 1..10),
                                 grads in prop::collection::vec(-1.0f64..1.0, 10)) {
            let mut a = ParamStore::new(Precision::Single);
            a.insert("w", &[vals.len()], vals.clone()).unwrap();
            a.block_mut("w").unwrap().grad.copy_from_slice(&grads[..vals.len()]);
            let mut b = a.clone();
            adam_step(&mut a, &AdamConfig::default()).unwrap();
            adam_step(&mut b, &AdamConfig::default()).unwrap();
            for (x, y) in a.block("w").unwrap().value.iter().zip(&b.block("w").unwrap().value) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
