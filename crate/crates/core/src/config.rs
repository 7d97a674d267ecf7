//! Run configuration and its flat `section.key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::collab::BprConfig;
use crate::dataset::SynthConfig;
use crate::decoder::DecodeConfig;
use crate::evaluation::EvalMode;
use crate::fusion::ModalityMask;
use crate::generator::GeneratorConfig;
use crate::rqvae::RqVaeConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// `user<delim>item<delim>timestamp` lines.
    pub interactions: String,
    pub delimiter: String,
    /// EMB matrix plus a file of raw item ids, one per row.
    pub visual: String,
    pub visual_ids: String,
    pub text: String,
    pub text_ids: String,
    pub k_core: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            interactions: String::new(),
            delimiter: "\t".into(),
            visual: String::new(),
            visual_ids: String::new(),
            text: String::new(),
            text_ids: String::new(),
            k_core: 5,
        }
    }
}

impl DataConfig {
    pub fn delimiter_char(&self) -> Result<char> {
        let mut chars = self.delimiter.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Ok(c),
            _ => Err(Error::config(format!(
                "data.delimiter must be a single character, got {:?}",
                self.delimiter
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollabConfig {
    pub n_layers: u32,
    pub lr: f64,
    pub epochs: usize,
    pub reg: f64,
    pub batch_size: usize,
    pub init_std: f64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        let b = BprConfig::default();
        Self {
            n_layers: b.n_layers,
            lr: b.lr,
            epochs: b.epochs,
            reg: b.reg,
            batch_size: b.batch_size,
            init_std: b.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Std of the noise added to identity `W_q, W_k` at init.
    pub init_noise: f64,
    /// Adam step size for `W_q, W_k` while training with the tokenizer.
    pub lr: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            init_noise: 0.01,
            lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub cold_threshold: u64,
    pub mode: EvalMode,
    /// Evaluate only the first `max_users` users; `0` means all.
    pub max_users: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            cold_threshold: 5,
            mode: EvalMode::Test,
            max_users: 0,
        }
    }
}

/// Everything a pipeline run depends on. The top-level `seed` is copied
/// into every stage, so sub-configs carry no seed of their own in the
/// text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Width of the collaborative and reduced modality vectors.
    pub d: usize,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub collab: CollabConfig,
    pub fusion: FusionConfig,
    pub rqvae: RqVaeConfig,
    pub generator: GeneratorConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub ablation: ModalityMask,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 42,
            d: 768,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            collab: CollabConfig::default(),
            fusion: FusionConfig::default(),
            rqvae: RqVaeConfig::default(),
            generator: GeneratorConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            ablation: ModalityMask::default(),
        };
        c.sync_seeds();
        c
    }
}

const SEEDED: [&str; 3] = ["synth", "rqvae", "generator"];

impl RunConfig {
    /// Small dimensions that run end to end on a laptop CPU in seconds to
    /// minutes on the synthetic generator's default catalog.
    pub fn desk() -> Self {
        let mut c = Self {
            d: 32,
            ..Self::default()
        };
        c.collab.n_layers = 2;
        c.collab.epochs = 30;
        c.collab.batch_size = 1024;
        c.collab.init_std = 0.1;
        c.collab.lr = 0.01;
        c.fusion.lr = 1e-3;
        c.rqvae.codebook_size = 32;
        c.rqvae.hidden = 64;
        c.rqvae.latent = 16;
        c.rqvae.lr = 1e-3;
        c.rqvae.epochs = 60;
        c.rqvae.batch = 64;
        c.generator.n_layers = 2;
        c.generator.n_heads = 2;
        c.generator.width = 32;
        c.generator.ffn_mult = 2;
        c.generator.max_len = 4 * 20 + 1;
        c.generator.lr = 3e-3;
        c.generator.epochs = 12;
        c.generator.batch = 16;
        c.sync_seeds();
        c
    }

    pub fn sync_seeds(&mut self) {
        self.synth.seed = self.seed;
        self.rqvae.seed = self.seed;
        self.generator.seed = self.seed;
    }

    pub fn bpr(&self) -> BprConfig {
        BprConfig {
            d: self.d,
            n_layers: self.collab.n_layers,
            lr: self.collab.lr,
            epochs: self.collab.epochs,
            reg: self.collab.reg,
            batch_size: self.collab.batch_size,
            init_std: self.collab.init_std,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d must be positive"));
        }
        if self.data.k_core == 0 {
            return Err(Error::config("data.k_core must be at least 1"));
        }
        if self.data.source == DataSource::Files {
            for (key, v) in [
                ("data.interactions", &self.data.interactions),
                ("data.visual", &self.data.visual),
                ("data.visual_ids", &self.data.visual_ids),
                ("data.text", &self.data.text),
                ("data.text_ids", &self.data.text_ids),
            ] {
                if v.is_empty() {
                    return Err(Error::config(format!("{key} is required when data.source = files")));
                }
            }
        }
        self.data.delimiter_char()?;
        self.rqvae.validate()?;
        self.generator.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks must list positive cutoffs"));
        }
        let kmax = self.eval.ks.iter().copied().max().unwrap_or(0);
        if self.decode.beam < kmax {
            return Err(Error::config(format!(
                "decode.beam = {} is smaller than the largest cutoff {kmax}",
                self.decode.beam
            )));
        }
        let m = &self.ablation;
        if !(m.use_collab || m.use_image || m.use_text) {
            return Err(Error::config("ablation disables every signal"));
        }
        let max_len = self.generator.max_len;
        if max_len != 0 && max_len < 1 + 2 * self.rqvae.n_levels {
            return Err(Error::config(format!(
                "generator.max_len = {max_len} leaves no room for one history item and a target of {} tokens",
                self.rqvae.n_levels
            )));
        }
        Ok(())
    }

    /// Flat `key = value` lines, keys sorted.
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        for (k, v) in flatten(&self.to_value()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_flat(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_flat(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_flat(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_flat())?;
        Ok(())
    }

    /// Apply every `key = value` line of `text` on top of `self`.
    pub fn apply_flat(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Apply `key=value` strings such as command-line overrides.
    pub fn apply_assignments<'a>(&mut self, items: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut pairs = Vec::new();
        for s in items {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{s}` is not `key=value`")))?;
            pairs.push((k.trim(), v.trim()));
        }
        self.apply_overrides(pairs)
    }

    fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut tree = self.to_value();
        let known = flatten(&tree);
        for (key, raw) in pairs {
            let old = known
                .get(key)
                .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
            let new = parse_value(raw);
            let new = coerce(key, old, new)?;
            set_path(&mut tree, key, new);
        }
        restore_seeds(&mut tree);
        let mut c: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::config(format!("invalid value: {e}")))?;
        c.sync_seeds();
        *self = c;
        Ok(())
    }

    fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for s in SEEDED {
            if let Some(Value::Object(m)) = v.get_mut(s) {
                m.remove("seed");
            }
        }
        v
    }

    /// Stable digest of the given top-level sections.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let full = serde_json::to_value(self).expect("config serializes");
        let picked: BTreeMap<&str, &Value> = sections
            .iter()
            .filter_map(|s| full.get(*s).map(|v| (*s, v)))
            .collect();
        crate::artifacts::sha256_hex(serde_json::to_string(&picked).expect("json").as_bytes())
    }
}

fn restore_seeds(tree: &mut Value) {
    let seed = tree.get("seed").cloned().unwrap_or(Value::from(0));
    for s in SEEDED {
        if let Some(Value::Object(m)) = tree.get_mut(s) {
            m.insert("seed".into(), seed.clone());
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "a section",
    }
}

fn coerce(key: &str, old: &Value, new: Value) -> Result<Value> {
    match (old, &new) {
        (Value::String(_), Value::String(_)) => Ok(new),
        // numbers and booleans written where a string is expected
        (Value::String(_), Value::Number(_) | Value::Bool(_)) => Ok(Value::String(new.to_string())),
        (Value::Number(o), Value::Number(n)) => {
            if (o.is_u64() || o.is_i64()) && !(n.is_u64() || n.is_i64()) {
                Err(Error::config(format!("`{key}` expects an integer, got {new}")))
            } else if o.is_u64() && n.is_i64() && !n.is_u64() {
                Err(Error::config(format!("`{key}` must not be negative")))
            } else {
                Ok(new)
            }
        }
        (a, b) if kind(a) == kind(b) => Ok(new),
        _ => Err(Error::config(format!("`{key}` expects {}, got {}", kind(old), kind(&new)))),
    }
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

fn set_path(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .expect("path validated against defaults")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .expect("path validated against defaults")
        .insert(parts[parts.len() - 1].to_string(), value);
}
