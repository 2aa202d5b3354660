//! Flat `key = value` run configuration.
//!
//! Every key has a default. Files may set any subset; `#` starts a comment.
//! Environment variables named `RELCAP_<KEY>` (key upper-cased) override the
//! file. Unknown keys are rejected in both places.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "RELCAP_";

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("config key {key}: cannot parse {value:?}")))
}

macro_rules! config_keys {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => self.$name = parse_value(key, value)?, )*
                    _ => return Err(Error::UnknownConfigKey(key.to_string())),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.to_string()) ),*]
            }
        }
    };
}

config_keys! {
    seed: u64 = 0,
    /// object | image | hierarchical
    level: String = "object".into(),
    /// structured | literal
    hierarchy_mode: String = "structured".into(),
    scene_nodes: bool = false,
    gates: bool = true,
    soft_relation: bool = false,
    k_max: usize = 36,
    min_count: usize = 5,
    context_size: usize = 8,
    /// Decoder memory also holds the target image's image node.
    context_memory: bool = false,
    d_model: usize = 128,
    gcn_layers: usize = 2,
    d_rel: usize = 16,
    n_layers: usize = 2,
    n_heads: usize = 4,
    /// 0 selects 4 * d_model.
    d_ff: usize = 0,
    max_len: usize = 16,
    lr: f64 = 0.0005,
    beta1: f64 = 0.8,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    batch_size: usize = 32,
    epochs: usize = 35,
    /// Epochs without validation improvement before stopping; 0 disables.
    patience: usize = 5,
    min_delta: f64 = 1e-4,
    /// Keep the parameters of the best validation epoch.
    keep_best: bool = true,
    /// Trailing share of the corpus held out for validation loss.
    val_fraction: f64 = 0.1,
    beam: usize = 3,
    gmm_components: usize = 8,
    /// diagonal | full
    gmm_covariance: String = "diagonal".into(),
    gmm_max_iters: usize = 200,
    gmm_tolerance: f64 = 1e-6,
    relcls_hidden: usize = 256,
    relcls_epochs: usize = 30,
    relcls_batch: usize = 32,
    relcls_lr: f64 = 0.001,
    synthetic_preset: String = "relational".into(),
    synthetic_scenes: usize = 500,
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::UnknownConfigKey(_) => e,
                other => perr(other.to_string()),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies `RELCAP_<KEY>` overrides from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), v.as_ref())?;
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        crate::graph::GraphLevel::parse(&self.level)?;
        crate::graph::HierarchyMode::parse(&self.hierarchy_mode)?;
        crate::gmm::CovarianceKind::parse(&self.gmm_covariance)?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::validation("val_fraction must be in [0, 1)"));
        }
        if self.batch_size == 0 || self.context_size == 0 || self.beam == 0 {
            return Err(Error::validation("batch_size, context_size and beam must be positive"));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
