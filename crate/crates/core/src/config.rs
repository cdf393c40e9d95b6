//! Campaign configuration: the TOML file format and its validation.
//!
//! ```toml
//! seed = 7
//! trials = 50
//! prompts = ["blue beach umbrellas"]
//! metrics = ["clip", "deviation"]
//!
//! [[targets]]
//! selector = "down.*.t*.sa.wv"   # `*` matches any component
//! bit = 14
//!
//! [model]
//! steps = 10
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::half16::BitPosition;
use crate::injector::ElementPolicy;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::{tensor_specs, DiffuserConfig};
use crate::selector::{NamingScheme, TensorSelector};

pub const DEFAULT_TRIALS: usize = 50;

pub const DEFAULT_PROMPTS: [&str; 5] = [
    "Blue Beach Umbrellas, Point Of Rocks, Crescent Beach, Siesta Key - Spiral Notebook",
    "BMW-M2-M-Performance-Dekor-Long-Beach-Blue-05",
    "Becoming More Than a Good Bible Study Girl: Living the Faith after Bible Class Is Over by Lysa TerKeurst Narrated by Lysa TerKeurst",
    "\"Dynabrade 52632 4-1/2\" Dia. Right Angle Depressed Center Wheel Grinder",
    "MANETTE XBOX ONE",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ValidationError {
    /// Dotted key path, e.g. `targets[2].bit`.
    pub path: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationError {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Validation(#[from] ValidationError),
}

/// Per-image quantity recorded for every generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Clip,
    Deviation,
    CorruptedFraction,
    ComponentCount,
    MeanComponentArea,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Clip,
        Metric::Deviation,
        Metric::CorruptedFraction,
        Metric::ComponentCount,
        Metric::MeanComponentArea,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Clip => "clip",
            Metric::Deviation => "deviation",
            Metric::CorruptedFraction => "corrupted_fraction",
            Metric::ComponentCount => "component_count",
            Metric::MeanComponentArea => "mean_component_area",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Clip => "CLIP Score",
            Metric::Deviation => "Deviation",
            Metric::CorruptedFraction => "Corrupted Fraction",
            Metric::ComponentCount => "Components",
            Metric::MeanComponentArea => "Mean Component Area",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// One injection target: a weight matrix, the bit to flip and, optionally,
/// a fixed element instead of a per-trial random one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub selector: TensorSelector,
    #[serde(default)]
    pub bit: BitPosition,
    #[serde(default)]
    pub index: Option<usize>,
}

impl Target {
    pub fn new(selector: TensorSelector, bit: BitPosition) -> Self {
        Target {
            selector,
            bit,
            index: None,
        }
    }

    /// `down.0.t0.sa.wv@14`, or `down.0.t0.sa.wv@14[5]` for a fixed element.
    pub fn id(&self) -> String {
        match self.index {
            None => format!("{}@{}", self.selector, self.bit.index()),
            Some(i) => format!("{}@{}[{i}]", self.selector, self.bit.index()),
        }
    }

    pub fn element_policy(&self) -> ElementPolicy {
        self.index.map_or(ElementPolicy::UniformRandom, ElementPolicy::Explicit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Master seed for per-trial element draws. The model has its own seed.
    pub seed: u64,
    pub trials: usize,
    pub prompts: Vec<String>,
    pub metrics: Vec<Metric>,
    /// Per-pixel corruption threshold on the `[0, 1]` scale.
    pub threshold: f32,
    pub model: DiffuserConfig,
    pub targets: Vec<Target>,
}

impl CampaignConfig {
    pub fn new(targets: Vec<Target>) -> Self {
        CampaignConfig {
            seed: 0,
            trials: DEFAULT_TRIALS,
            prompts: DEFAULT_PROMPTS.iter().map(|p| p.to_string()).collect(),
            metrics: Metric::ALL.to_vec(),
            threshold: DEFAULT_THRESHOLD,
            model: DiffuserConfig::default(),
            targets,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.validate_settings()?;
        if self.targets.is_empty() {
            return Err(ValidationError::new("targets", "must not be empty"));
        }
        Ok(())
    }

    /// Everything except the requirement that at least one target is listed.
    pub fn validate_settings(&self) -> Result<(), ValidationError> {
        if self.trials == 0 {
            return Err(ValidationError::new("trials", "must be at least 1"));
        }
        if self.prompts.is_empty() {
            return Err(ValidationError::new("prompts", "must not be empty"));
        }
        if self.metrics.is_empty() {
            return Err(ValidationError::new("metrics", "must not be empty"));
        }
        if self.metrics.iter().collect::<BTreeSet<_>>().len() != self.metrics.len() {
            return Err(ValidationError::new("metrics", "contains duplicates"));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(ValidationError::new("threshold", "must be a finite value >= 0"));
        }
        self.model
            .validate()
            .map_err(|e| ValidationError::new("model", e.to_string()))?;
        let topology = self.model.topology();
        let scheme = NamingScheme::canonical();
        let specs = tensor_specs(&self.model);
        let mut seen = BTreeSet::new();
        for (i, t) in self.targets.iter().enumerate() {
            let name = scheme
                .resolve(&t.selector, &topology)
                .map_err(|e| ValidationError::new(format!("targets[{i}].selector"), e.to_string()))?;
            if let Some(index) = t.index {
                let len: usize = specs
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, shape)| shape.iter().product())
                    .unwrap_or(0);
                if index >= len {
                    return Err(ValidationError::new(
                        format!("targets[{i}].index"),
                        format!("{index} is out of range for `{name}` with {len} elements"),
                    ));
                }
            }
            if !seen.insert(*t) {
                return Err(ValidationError::new(format!("targets[{i}]"), format!("duplicate target {}", t.id())));
            }
        }
        Ok(())
    }

    /// Targets in canonical order; campaign results never depend on the
    /// order they were listed in.
    pub fn normalized(&self) -> CampaignConfig {
        let mut cfg = self.clone();
        cfg.targets.sort();
        cfg
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CampaignFile {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default = "default_prompts")]
    prompts: Vec<String>,
    #[serde(default = "default_metrics")]
    metrics: Vec<Metric>,
    #[serde(default = "default_threshold")]
    threshold: f32,
    #[serde(default)]
    model: DiffuserConfig,
    #[serde(default)]
    targets: Vec<TargetFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetFile {
    selector: String,
    #[serde(default = "default_bit")]
    bit: i64,
    index: Option<usize>,
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_prompts() -> Vec<String> {
    DEFAULT_PROMPTS.iter().map(|p| p.to_string()).collect()
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD
}

fn default_bit() -> i64 {
    BitPosition::default().index() as i64
}

const TOP_KEYS: &[&str] = &["seed", "trials", "prompts", "metrics", "threshold", "model", "targets"];
const TARGET_KEYS: &[&str] = &["selector", "bit", "index"];
const MODEL_KEYS: &[&str] = &[
    "latent_size",
    "image_size",
    "latent_channels",
    "channels",
    "transformers_per_down_block",
    "transformers_per_up_block",
    "transformers_per_mid_block",
    "heads",
    "embed_width",
    "text_length",
    "ff_mult",
    "norm_groups",
    "time_dim",
    "steps",
    "seed",
];

fn check_keys(table: &toml::Table, allowed: &[&str], prefix: &str) -> Result<(), ValidationError> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ValidationError::new(
                format!("{prefix}{key}"),
                format!("unknown key `{key}` (expected one of: {})", allowed.join(", ")),
            ));
        }
    }
    Ok(())
}

fn check_all_keys(doc: &toml::Table) -> Result<(), ValidationError> {
    check_keys(doc, TOP_KEYS, "")?;
    if let Some(toml::Value::Table(model)) = doc.get("model") {
        check_keys(model, MODEL_KEYS, "model.")?;
    }
    if let Some(toml::Value::Array(targets)) = doc.get("targets") {
        for (i, t) in targets.iter().enumerate() {
            if let toml::Value::Table(t) = t {
                check_keys(t, TARGET_KEYS, &format!("targets[{i}]."))?;
            }
        }
    }
    Ok(())
}

/// Matches a selector against a pattern whose dot-separated components may
/// be `*` (any value) or end in `*` (any suffix, as in `t*`).
fn pattern_matches(pattern: &str, selector: &TensorSelector) -> bool {
    let text = selector.to_string();
    let (p, s): (Vec<&str>, Vec<&str>) = (pattern.split('.').collect(), text.split('.').collect());
    p.len() == s.len()
        && p.iter().zip(&s).all(|(p, s)| match p.strip_suffix('*') {
            Some(prefix) => s.starts_with(prefix),
            None => p == s,
        })
}

/// Expands a selector or a wildcard pattern against the model topology.
pub fn expand_selector(pattern: &str, model: &DiffuserConfig) -> Result<Vec<TensorSelector>, String> {
    if !pattern.contains('*') {
        return pattern.parse::<TensorSelector>().map(|s| vec![s]).map_err(|e| e.to_string());
    }
    let matched: Vec<TensorSelector> = model
        .topology()
        .selectors()
        .into_iter()
        .filter(|s| pattern_matches(pattern, s))
        .collect();
    if matched.is_empty() {
        return Err(format!("pattern `{pattern}` matches no weight matrix"));
    }
    Ok(matched)
}

/// Parses and validates a TOML campaign definition.
pub fn parse_config(text: &str) -> Result<CampaignConfig, ConfigError> {
    let cfg = parse_settings(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`parse_config`] but accepts a file without targets, for commands
/// that only need the model, prompts and metrics.
pub fn parse_settings(text: &str) -> Result<CampaignConfig, ConfigError> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    check_all_keys(&doc)?;
    let file: CampaignFile = doc
        .try_into()
        .map_err(|e: toml::de::Error| ValidationError::new("<root>", e.message().to_string()))?;
    let mut targets = Vec::new();
    for (i, t) in file.targets.iter().enumerate() {
        let bit = u32::try_from(t.bit)
            .ok()
            .and_then(|b| BitPosition::new(b).ok())
            .ok_or_else(|| ValidationError::new(format!("targets[{i}].bit"), format!("{} is not in 0..=15", t.bit)))?;
        let selectors = expand_selector(&t.selector, &file.model)
            .map_err(|e| ValidationError::new(format!("targets[{i}].selector"), e))?;
        targets.extend(selectors.into_iter().map(|selector| Target {
            selector,
            bit,
            index: t.index,
        }));
    }
    let cfg = CampaignConfig {
        seed: file.seed,
        trials: file.trials,
        prompts: file.prompts,
        metrics: file.metrics,
        threshold: file.threshold,
        model: file.model,
        targets,
    };
    cfg.validate_settings()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<CampaignConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn validation(text: &str) -> ValidationError {
        match parse_config(text) {
            Err(ConfigError::Validation(v)) => v,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("[[targets]]\nselector = \"mid.t0.ffn.w1\"\n").unwrap();
        assert_eq!(cfg.trials, 50);
        assert_eq!(cfg.prompts.len(), 5);
        assert_eq!(cfg.metrics, Metric::ALL);
        assert_eq!(cfg.model, DiffuserConfig::default());
        assert_eq!(cfg.targets, [Target::new("mid.t0.ffn.w1".parse().unwrap(), BitPosition::EXPONENT_MSB)]);
    }

    #[test]
    fn zero_trials_rejected() {
        let e = validation("trials = 0\n[[targets]]\nselector = \"mid.t0.sa.wq\"\n");
        assert_eq!(e.path, "trials");
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = validation("trails = 5\n[[targets]]\nselector = \"mid.t0.sa.wq\"\n");
        assert_eq!(e.path, "trails");
        assert!(e.message.contains("trails"));
        let e = validation("[model]\nstep = 3\n[[targets]]\nselector = \"mid.t0.sa.wq\"\n");
        assert_eq!(e.path, "model.step");
        let e = validation("[[targets]]\nselector = \"mid.t0.sa.wq\"\nbits = 3\n");
        assert_eq!(e.path, "targets[0].bits");
    }

    #[test]
    fn model_keys_match_the_config_struct() {
        let value = toml::Value::try_from(DiffuserConfig::default()).unwrap();
        let keys: Vec<&str> = value.as_table().unwrap().keys().map(String::as_str).collect();
        let mut expected = MODEL_KEYS.to_vec();
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn target_errors_have_paths() {
        assert_eq!(validation("[[targets]]\nselector = \"down.2.t0.sa.wv\"\n").path, "targets[0].selector");
        assert_eq!(validation("[[targets]]\nselector = \"mid.t0.sa.wq\"\nbit = 16\n").path, "targets[0].bit");
        assert_eq!(validation("[[targets]]\nselector = \"mid.t0.sa.wq\"\nindex = 100000000\n").path, "targets[0].index");
        assert_eq!(validation("").path, "targets");
        assert_eq!(
            validation("[[targets]]\nselector = \"mid.t0.sa.wq\"\n[[targets]]\nselector = \"mid.t0.sa.wq\"\n").path,
            "targets[1]"
        );
        assert!(matches!(parse_config("trials = ["), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn wildcards_expand_over_topology() {
        let cfg = parse_config("[[targets]]\nselector = \"down.*.t*.sa.wv\"\n").unwrap();
        let ids: Vec<String> = cfg.targets.iter().map(Target::id).collect();
        assert_eq!(ids, ["down.0.t0.sa.wv@14", "down.0.t1.sa.wv@14", "down.1.t0.sa.wv@14", "down.1.t1.sa.wv@14"]);
        assert!(expand_selector("up.9.*.sa.wv", &DiffuserConfig::default()).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = parse_config("seed = 3\n[[targets]]\nselector = \"up.0.t2.ca.wo\"\nbit = 15\nindex = 4\n").unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<CampaignConfig>(&json).unwrap(), cfg);
        assert_eq!(cfg.targets[0].id(), "up.0.t2.ca.wo@15[4]");
    }
}
