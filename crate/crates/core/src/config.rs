//! Run configuration: a TOML tree with dotted-key overrides.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// Visual intra-modality FFN expert.
    Visual,
    /// Evidence-priority language expert (memory and evidence branches).
    Evidence,
    /// Inter-modality expert operating through hyperbolic lifts.
    Hyperbolic,
    /// Plain FFN visible to both modalities (vanilla MoE baseline).
    Shared,
}

impl ExpertKind {
    pub fn visible_to_visual(self) -> bool {
        !matches!(self, ExpertKind::Evidence)
    }

    pub fn visible_to_language(self) -> bool {
        !matches!(self, ExpertKind::Visual)
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Visual => "visual",
            ExpertKind::Evidence => "evidence",
            ExpertKind::Hyperbolic => "hyperbolic",
            ExpertKind::Shared => "shared",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Containment,
    Conflict,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Containment => "containment",
            Task::Conflict => "conflict",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "containment" => Ok(Task::Containment),
            "conflict" => Ok(Task::Conflict),
            other => Err(Error::InvalidArgument(format!(
                "unknown task `{other}` (expected containment or conflict)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub visual_vocab: usize,
    pub language_vocab: usize,
    /// Every `moe_stride`-th layer (starting at 0) is an AsyMoE layer; the rest use a dense FFN.
    pub moe_stride: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq: 64,
            visual_vocab: 64,
            language_vocab: 128,
            moe_stride: 1,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyMoeConfig {
    pub experts: Vec<ExpertKind>,
    pub k: usize,
    pub d_ff: usize,
    pub activation: Activation,
    pub curvature: f64,
    pub cone_k: f64,
    pub max_norm: f64,
    /// One routing matrix for both modalities instead of W_V / W_L.
    pub shared_router: bool,
    /// Fixes α of every evidence-priority expert to this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_alpha: Option<f64>,
}

impl Default for AsyMoeConfig {
    fn default() -> Self {
        AsyMoeConfig {
            experts: vec![
                ExpertKind::Visual,
                ExpertKind::Evidence,
                ExpertKind::Hyperbolic,
                ExpertKind::Hyperbolic,
            ],
            k: 2,
            d_ff: 256,
            activation: Activation::Gelu,
            curvature: crate::hyperbolic::DEFAULT_CURVATURE,
            cone_k: crate::hyperbolic::DEFAULT_CONE_K,
            max_norm: crate::hyperbolic::DEFAULT_MAX_NORM,
            shared_router: false,
            frozen_alpha: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_order: f64,
    pub lambda_bal: f64,
    pub lambda_align: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            steps: 2000,
            batch_size: 32,
            lambda_order: 0.1,
            lambda_bal: 0.01,
            lambda_align: 0.0,
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            clip_norm: 1.0,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("train.lr", self.lr),
            ("train.weight_decay", self.weight_decay),
            ("train.lambda_order", self.lambda_order),
            ("train.lambda_bal", self.lambda_bal),
            ("train.lambda_align", self.lambda_align),
            ("train.clip_norm", self.clip_norm),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {w}")));
            }
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "train.steps, train.batch_size and train.eval_interval must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Task,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_attributes: usize,
    pub scene_size: usize,
    pub query_size: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub n_fillers: usize,
    pub conflict_rate: f64,
    pub null_context_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: Task::Conflict,
            n_train: 4096,
            n_eval: 512,
            n_attributes: 64,
            scene_size: 16,
            query_size: 2,
            n_keys: 32,
            n_values: 8,
            n_fillers: 3,
            conflict_rate: 0.2,
            null_context_rate: 0.3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub asymoe: AsyMoeConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Keys that may be absent from a serialized config but are still valid override targets.
const OPTIONAL_KEYS: &[&str] = &["asymoe.frozen_alpha"];

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let value: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` (or defaults) and applies `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Like [`Config::resolve`] but starting from TOML text.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        check_known_keys(&table)?;
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let a = &self.asymoe;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must fit in a signed 64-bit integer, got {}", self.seed)));
        }
        if m.d_model == 0 || m.n_layers == 0 || m.n_heads == 0 || m.moe_stride == 0 {
            return Err(Error::Config("model sizes must be ≥ 1".into()));
        }
        if m.d_model % m.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                m.d_model, m.n_heads
            )));
        }
        if a.experts.is_empty() {
            return Err(Error::Config("asymoe.experts must not be empty".into()));
        }
        let visible_v = a.experts.iter().filter(|e| e.visible_to_visual()).count();
        let visible_l = a.experts.iter().filter(|e| e.visible_to_language()).count();
        if visible_v == 0 || visible_l == 0 {
            return Err(Error::Config("each modality needs at least one visible expert".into()));
        }
        if a.k == 0 || a.k > a.experts.len() {
            return Err(Error::Config(format!(
                "asymoe.k = {} must lie in 1..={}",
                a.k,
                a.experts.len()
            )));
        }
        if a.d_ff == 0 {
            return Err(Error::Config("asymoe.d_ff must be ≥ 1".into()));
        }
        if !(a.curvature > 0.0 && a.cone_k > 0.0 && a.max_norm > 0.0) {
            return Err(Error::Config("asymoe.curvature, cone_k and max_norm must be > 0".into()));
        }
        if let Some(alpha) = a.frozen_alpha {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::Config(format!("asymoe.frozen_alpha = {alpha} must lie in (0,1)")));
            }
        }
        if m.language_vocab < 8 {
            return Err(Error::Config("model.language_vocab must hold the 8 special tokens".into()));
        }
        self.train.validate()
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        stream_rng(self.seed, stream)
    }
}

/// Named sub-streams of the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    GradCheck = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn known_keys() -> toml::Table {
    toml::Value::try_from(Config::default())
        .expect("default config serializes")
        .as_table()
        .cloned()
        .expect("config is a table")
}

fn check_known_keys(table: &toml::Table) -> Result<()> {
    let known = known_keys();
    for (k, v) in table {
        let Some(kv) = known.get(k) else {
            return Err(Error::Config(format!("unknown key `{k}`")));
        };
        if let (Some(inner), Some(known_inner)) = (v.as_table(), kv.as_table()) {
            for ik in inner.keys() {
                let dotted = format!("{k}.{ik}");
                if !known_inner.contains_key(ik) && !OPTIONAL_KEYS.contains(&dotted.as_str()) {
                    return Err(Error::Config(format!("unknown key `{dotted}`")));
                }
            }
        }
    }
    Ok(())
}

/// Applies one `section.key=value` override; the value is parsed as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let known = known_keys();
    let path: Vec<&str> = key.split('.').collect();
    let valid = match path.as_slice() {
        [top] => known.get(*top).is_some_and(|v| !v.is_table()),
        [section, field] => {
            known
                .get(*section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key(*field))
                || OPTIONAL_KEYS.contains(&key)
        }
        _ => false,
    };
    if !valid {
        return Err(Error::Config(format!("unknown key `{key}`")));
    }
    let value = parse_literal(raw);
    match path.as_slice() {
        [top] => {
            table.insert(top.to_string(), value);
        }
        [section, field] => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let t = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?;
            t.insert(field.to_string(), value);
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
