//! Flat `key = value` configuration files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered key/value pairs parsed from a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    pub entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim().to_string();
            if entries.iter().any(|(e, _)| *e == k) {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
            entries.push((k, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::InvalidData(format!("config key `{key}`: `{v}` is not a number")))
            })
            .transpose()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Every tunable of a training run. Keys match [`RunConfig::KEYS`] and the
/// command-line flags (`lambda_ac` ↔ `--lambda-ac`).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub iters: usize,
    pub patch_size: usize,
    pub rays_per_batch: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub precision: String,

    pub lr: f64,
    /// Learning rate at the final iteration relative to `lr`.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// PIDNet learning rate relative to the field's.
    pub lr_pid_scale: f64,

    pub lambda_c: f64,
    pub lambda_ac: f64,
    pub lambda_dc: f64,
    pub lambda_ds: f64,
    pub lambda_edge: f64,
    pub lambda_pid: f64,
    pub lambda_chrom: f64,
    pub edge_exp: bool,

    /// Initial visible fraction of positional-encoding frequencies.
    pub rho_start: f64,
    /// Fraction of the run over which the visible fraction ramps to 1.
    pub rho_ramp: f64,
    pub re_start: f64,
    pub re_end: f64,

    pub field_width: usize,
    pub field_depth: usize,
    /// Trunk layer fed the encoded position again; 0 disables the skip.
    pub field_skip: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub pid_width: usize,
    pub pid_layers: usize,

    pub provider: String,
    pub retinex_sigma: f64,
    pub downscale: usize,
    /// Scene bounds; 0 derives them from the scene.
    pub near: f64,
    pub far: f64,
    pub normalize_scale: bool,
    pub background: f64,

    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_scale_align: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("`{key}`: cannot parse `{v}`")))
}

macro_rules! run_config_keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => { self.$key = run_config_keys!(@parse $kind, key, value)?; })*
                    _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.to_string()),)*
                    _ => None,
                }
            }
        }
    };
    (@parse bool, $k:expr, $v:expr) => { parse_bool($k, $v) };
    (@parse val, $k:expr, $v:expr) => { parse_val($k, $v) };
}

run_config_keys! {
    iters: val, patch_size: val, rays_per_batch: val, n_samples: val, seed: val, precision: val,
    lr: val, lr_final: val, beta1: val, beta2: val, adam_eps: val, lr_pid_scale: val,
    lambda_c: val, lambda_ac: val, lambda_dc: val, lambda_ds: val, lambda_edge: val,
    lambda_pid: val, lambda_chrom: val, edge_exp: bool,
    rho_start: val, rho_ramp: val, re_start: val, re_end: val,
    field_width: val, field_depth: val, field_skip: val, pos_freqs: val, dir_freqs: val,
    pid_width: val, pid_layers: val,
    provider: val, retinex_sigma: val, downscale: val, near: val, far: val,
    normalize_scale: bool, background: val,
    log_every: val, checkpoint_every: val, eval_scale_align: bool,
}

impl RunConfig {
    /// Single-core scale: small networks, 16×16 patches, few rays.
    pub fn desk() -> Self {
        Self {
            iters: 5000,
            patch_size: 16,
            rays_per_batch: 128,
            n_samples: 24,
            seed: 0,
            precision: "single".into(),
            lr: 5e-3,
            lr_final: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_pid_scale: 1.0,
            lambda_c: 1.0,
            lambda_ac: 1.0,
            lambda_dc: 1.0,
            lambda_ds: 0.1,
            lambda_edge: 0.1,
            lambda_pid: 1.0,
            lambda_chrom: 0.01,
            edge_exp: false,
            rho_start: 0.2,
            rho_ramp: 0.4,
            re_start: 1.0,
            re_end: 0.0,
            field_width: 32,
            field_depth: 3,
            field_skip: 0,
            pos_freqs: 6,
            dir_freqs: 2,
            pid_width: 16,
            pid_layers: 4,
            provider: "ground-truth".into(),
            retinex_sigma: 8.0,
            downscale: 1,
            near: 0.0,
            far: 0.0,
            normalize_scale: true,
            background: 0.0,
            log_every: 50,
            checkpoint_every: 1000,
            eval_scale_align: false,
        }
    }

    /// Full-size setting: 70K iterations, 32×32 patches, 1024 rays.
    pub fn full() -> Self {
        Self {
            iters: 70_000,
            patch_size: 32,
            rays_per_batch: 1024,
            n_samples: 64,
            lr: 5e-4,
            field_width: 256,
            field_depth: 8,
            field_skip: 4,
            pos_freqs: 10,
            dir_freqs: 4,
            pid_width: 32,
            log_every: 100,
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}` (desk or full)"))),
        }
    }

    pub fn apply(&mut self, kv: &KvFile) -> Result<()> {
        for (k, v) in &kv.entries {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text, "run config")?;
        let mut cfg = match kv.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::desk(),
        };
        let rest = KvFile {
            entries: kv.entries.into_iter().filter(|(k, _)| k != "preset").collect(),
        };
        cfg.apply(&rest)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvFile::default();
        for k in Self::KEYS {
            kv.push(k, self.get(k).unwrap_or_default());
        }
        kv.to_text()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iters == 0 {
            return bad("iters must be > 0".into());
        }
        if self.patch_size < 8 {
            return bad(format!("patch_size must be ≥ 8, got {}", self.patch_size));
        }
        if self.n_samples == 0 || self.rays_per_batch == 0 {
            return bad("n_samples and rays_per_batch must be > 0".into());
        }
        if !["single", "double"].contains(&self.precision.as_str()) {
            return bad(format!("precision must be single or double, got `{}`", self.precision));
        }
        let lambdas = [
            ("lambda_c", self.lambda_c),
            ("lambda_ac", self.lambda_ac),
            ("lambda_dc", self.lambda_dc),
            ("lambda_ds", self.lambda_ds),
            ("lambda_edge", self.lambda_edge),
            ("lambda_pid", self.lambda_pid),
            ("lambda_chrom", self.lambda_chrom),
        ];
        for (k, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr_pid_scale >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rho_start) || !(0.0..=1.0).contains(&self.rho_ramp) {
            return bad("rho_start and rho_ramp must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.re_start) || !(0.0..=1.0).contains(&self.re_end) || self.re_end > self.re_start {
            return bad("need 0 ≤ re_end ≤ re_start ≤ 1".into());
        }
        if self.downscale == 0 {
            return bad("downscale must be ≥ 1".into());
        }
        if self.near < 0.0 || self.far < 0.0 || (self.far > 0.0 && self.near >= self.far) {
            return bad(format!("invalid bounds near={} far={}", self.near, self.far));
        }
        if self.field_width < 2 || self.field_depth == 0 || self.pid_layers < 2 || self.pid_width == 0 {
            return bad("network sizes too small".into());
        }
        crate::intrinsic::ProviderKind::parse(&self.provider)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parse_and_errors() {
        let kv = KvFile::parse("# c\na = 1\n\nb= two # trailing\n", "f").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two"));
        assert!(matches!(KvFile::parse("a = 1\nnope\n", "f"), Err(Error::Parse { line: 2, .. })));
        assert!(KvFile::parse("a = 1\na = 2\n", "f").is_err());
    }

    #[test]
    fn run_config_round_trip_and_validation() {
        let mut cfg = RunConfig::desk();
        cfg.set("lambda_ac", "0").unwrap();
        cfg.set("edge_exp", "true").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.set("lambda_zz", "1").is_err());
        assert!(cfg.set("iters", "many").is_err());
        assert!(RunConfig::from_text("iters = 0").is_err());
        assert!(RunConfig::from_text("patch_size = 4").is_err());
        assert!(RunConfig::from_text("lambda_ds = -1").is_err());
        let full = RunConfig::from_text("preset = full").unwrap();
        assert_eq!((full.iters, full.patch_size), (70_000, 32));
        assert!(RunConfig::desk().validate().is_ok());
    }

    #[test]
    fn default_lambdas() {
        let c = RunConfig::desk();
        assert_eq!(
            [c.lambda_c, c.lambda_ac, c.lambda_dc, c.lambda_ds, c.lambda_edge, c.lambda_pid, c.lambda_chrom],
            [1.0, 1.0, 1.0, 0.1, 0.1, 1.0, 0.01]
        );
    }
}
