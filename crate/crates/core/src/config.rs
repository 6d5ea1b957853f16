//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the field
//! names of the configuration structs; an unknown or repeated key is an error.
//! The config hash is the SHA-256 of the canonical `key=value` lines sorted by
//! key, so it does not depend on the order keys appear in a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::synthgen::GenConfig;
use crate::training::{LossConfig, TrainConfig};

/// Parsed `key = value` lines, keyed by name with their 1-based line numbers.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("expected `key = value`, found `{raw}`")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(line, "empty key"));
            }
            if let Some((_, first)) = entries.insert(key.clone(), (value.trim().to_string(), line)) {
                return Err(Error::parse(line, format!("key `{key}` repeated (first on line {first})")));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::config(key, format!("unknown key (line {line})")));
            }
        }
        Ok(())
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some((value, line)) = self.entries.get(key) {
            *slot = value
                .parse()
                .map_err(|e| Error::config(key, format!("line {line}: cannot parse `{value}`: {e}")))?;
        }
        Ok(())
    }

    fn set_bool(&self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some((value, line)) = self.entries.get(key) {
            *slot = match value.as_str() {
                "true" | "on" | "1" | "yes" => true,
                "false" | "off" | "0" | "no" => false,
                other => {
                    return Err(Error::config(key, format!("line {line}: expected a boolean, found `{other}`")))
                }
            };
        }
        Ok(())
    }
}

fn hash_lines(lines: &[String]) -> String {
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Canonical `key=value` lines, sorted by key.
fn canonical(pairs: Vec<(&str, String)>) -> Vec<String> {
    let sorted: BTreeMap<&str, String> = pairs.into_iter().collect();
    sorted.into_iter().map(|(k, v)| format!("{k}={v}")).collect()
}

const RUN_KEYS: &[&str] = &[
    "input_dim",
    "hidden_dim",
    "latent_dim",
    "depth",
    "activation",
    "skip_connections",
    "fusion",
    "sine_omega0",
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "noise_sigma",
    "positive_fraction",
    "pairs_per_epoch",
    "seed",
    "weight_contrast",
    "weight_recon",
    "margin",
    "contrastive_scale",
    "folds",
    "fixed_fp_rate",
];

/// Everything an experiment run needs besides the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    /// `input_dim == 0` means "take it from the dataset".
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub folds: usize,
    pub fixed_fp_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig {
                input_dim: 0,
                ..NetConfig::default()
            },
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            folds: 5,
            fixed_fp_rate: 0.15,
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(RUN_KEYS)?;
        let mut c = RunConfig::default();
        kv.set("input_dim", &mut c.net.input_dim)?;
        kv.set("hidden_dim", &mut c.net.hidden_dim)?;
        kv.set("latent_dim", &mut c.net.latent_dim)?;
        kv.set("depth", &mut c.net.depth)?;
        kv.set("activation", &mut c.net.activation)?;
        kv.set_bool("skip_connections", &mut c.net.skip_connections)?;
        kv.set("fusion", &mut c.net.fusion)?;
        kv.set("sine_omega0", &mut c.net.sine_omega0)?;
        kv.set("epochs", &mut c.train.epochs)?;
        kv.set("batch_size", &mut c.train.batch_size)?;
        kv.set("learning_rate", &mut c.train.learning_rate)?;
        kv.set("adam_beta1", &mut c.train.adam_beta1)?;
        kv.set("adam_beta2", &mut c.train.adam_beta2)?;
        kv.set("adam_eps", &mut c.train.adam_eps)?;
        kv.set("noise_sigma", &mut c.train.noise_sigma)?;
        kv.set("positive_fraction", &mut c.train.positive_fraction)?;
        if let Some((value, line)) = kv.entries.get("pairs_per_epoch") {
            c.train.pairs_per_epoch = match value.as_str() {
                "auto" => None,
                v => Some(v.parse().map_err(|e| {
                    Error::config("pairs_per_epoch", format!("line {line}: cannot parse `{v}`: {e}"))
                })?),
            };
        }
        kv.set("seed", &mut c.train.seed)?;
        kv.set("weight_contrast", &mut c.loss.weight_contrast)?;
        kv.set("weight_recon", &mut c.loss.weight_recon)?;
        kv.set("margin", &mut c.loss.margin)?;
        kv.set("contrastive_scale", &mut c.loss.contrastive_scale)?;
        kv.set("folds", &mut c.folds)?;
        kv.set("fixed_fp_rate", &mut c.fixed_fp_rate)?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    /// Checks everything except `input_dim`, which may still be unresolved.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        if self.folds < 2 {
            return Err(Error::config("folds", "need at least 2 folds"));
        }
        if !(self.fixed_fp_rate > 0.0 && self.fixed_fp_rate < 1.0) {
            return Err(Error::config("fixed_fp_rate", "must lie strictly between 0 and 1"));
        }
        let probe = NetConfig {
            input_dim: self.net.input_dim.max(self.net.latent_dim),
            ..self.net
        };
        probe.validate()
    }

    /// Fix `input_dim` to the dataset's dimensionality.
    pub fn resolve_input_dim(&self, dims: usize) -> Result<Self> {
        if self.net.input_dim != 0 && self.net.input_dim != dims {
            return Err(Error::config(
                "input_dim",
                format!("configured {} but the dataset has {dims} features", self.net.input_dim),
            ));
        }
        let mut c = *self;
        c.net.input_dim = dims;
        c.net.validate()?;
        Ok(c)
    }

    pub fn canonical_lines(&self) -> Vec<String> {
        let (n, t, l) = (&self.net, &self.train, &self.loss);
        canonical(vec![
            ("input_dim", n.input_dim.to_string()),
            ("hidden_dim", n.hidden_dim.to_string()),
            ("latent_dim", n.latent_dim.to_string()),
            ("depth", n.depth.to_string()),
            ("activation", n.activation.to_string()),
            ("skip_connections", n.skip_connections.to_string()),
            ("fusion", n.fusion.to_string()),
            ("sine_omega0", n.sine_omega0.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("noise_sigma", t.noise_sigma.to_string()),
            ("positive_fraction", t.positive_fraction.to_string()),
            (
                "pairs_per_epoch",
                t.pairs_per_epoch.map_or_else(|| "auto".to_string(), |p| p.to_string()),
            ),
            ("seed", t.seed.to_string()),
            ("weight_contrast", l.weight_contrast.to_string()),
            ("weight_recon", l.weight_recon.to_string()),
            ("margin", l.margin.to_string()),
            ("contrastive_scale", l.contrastive_scale.to_string()),
            ("folds", self.folds.to_string()),
            ("fixed_fp_rate", self.fixed_fp_rate.to_string()),
        ])
    }

    pub fn hash(&self) -> String {
        hash_lines(&self.canonical_lines())
    }
}

const GEN_KEYS: &[&str] = &[
    "n_cases",
    "target_series_fraction",
    "series_size_min",
    "series_size_max",
    "dims",
    "target_sparsity",
    "signature_strength",
    "n_signature_features",
    "geo_series_sigma_km",
    "geo_population_extent_km",
    "time_series_gap_days",
    "time_extent_days",
    "seed",
    "target_positive_fraction",
];

/// Generator settings plus an optional imbalance target to calibrate towards.
#[derive(Clone, Debug, PartialEq)]
pub struct GenFile {
    pub config: GenConfig,
    pub target_positive_fraction: Option<f64>,
}

impl GenFile {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(GEN_KEYS)?;
        let mut c = GenConfig::default();
        kv.set("n_cases", &mut c.n_cases)?;
        kv.set("target_series_fraction", &mut c.target_series_fraction)?;
        kv.set("series_size_min", &mut c.series_size_min)?;
        kv.set("series_size_max", &mut c.series_size_max)?;
        kv.set("dims", &mut c.dims)?;
        kv.set("target_sparsity", &mut c.target_sparsity)?;
        kv.set("signature_strength", &mut c.signature_strength)?;
        kv.set("n_signature_features", &mut c.n_signature_features)?;
        kv.set("geo_series_sigma_km", &mut c.geo_series_sigma_km)?;
        kv.set("geo_population_extent_km", &mut c.geo_population_extent_km)?;
        kv.set("time_series_gap_days", &mut c.time_series_gap_days)?;
        kv.set("time_extent_days", &mut c.time_extent_days)?;
        kv.set("seed", &mut c.seed)?;
        let mut target = None;
        if kv.entries.contains_key("target_positive_fraction") {
            let mut t = 0.0;
            kv.set("target_positive_fraction", &mut t)?;
            target = Some(t);
        }
        c.validate()?;
        Ok(GenFile {
            config: c,
            target_positive_fraction: target,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }
}

pub fn gen_canonical_lines(c: &GenConfig) -> Vec<String> {
    canonical(vec![
        ("n_cases", c.n_cases.to_string()),
        ("target_series_fraction", c.target_series_fraction.to_string()),
        ("series_size_min", c.series_size_min.to_string()),
        ("series_size_max", c.series_size_max.to_string()),
        ("dims", c.dims.to_string()),
        ("target_sparsity", c.target_sparsity.to_string()),
        ("signature_strength", c.signature_strength.to_string()),
        ("n_signature_features", c.n_signature_features.to_string()),
        ("geo_series_sigma_km", c.geo_series_sigma_km.to_string()),
        ("geo_population_extent_km", c.geo_population_extent_km.to_string()),
        ("time_series_gap_days", c.time_series_gap_days.to_string()),
        ("time_extent_days", c.time_extent_days.to_string()),
        ("seed", c.seed.to_string()),
    ])
}

pub fn gen_config_hash(c: &GenConfig) -> String {
    hash_lines(&gen_canonical_lines(c))
}
