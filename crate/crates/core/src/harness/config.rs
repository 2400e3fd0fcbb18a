//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a valid configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::baselines::{RelaxKind, RelaxPolicy, RoutingSignal, SignalKind};
use crate::drafting::TreeLimits;
use crate::metrics::CostModel;
use crate::models::NoiseKind;
use crate::router::{MarginRule, MarginSource};

use super::corpus::{Tokenizer, BUILTIN_REFERENCE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}': {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    TargetOnly,
    Sd,
    TriSpec,
    SdTree,
    TriSpecTree,
    Relax,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::TargetOnly,
        Method::Sd,
        Method::TriSpec,
        Method::SdTree,
        Method::TriSpecTree,
        Method::Relax,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TargetOnly => "target_only",
            Method::Sd => "sd",
            Method::TriSpec => "trispec",
            Method::SdTree => "sd_tree",
            Method::TriSpecTree => "trispec_tree",
            Method::Relax => "relax",
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self, Method::SdTree | Method::TriSpecTree)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("expected one of {}", names(&Method::ALL.map(|m| m.as_str()))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    /// Three n-gram models of increasing order.
    Ngram,
    /// Target n-gram; drafter and proxy are mixtures of it with noise.
    Perturbed,
    /// A saved family file.
    File,
}

impl FamilyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::Ngram => "ngram",
            FamilyKind::Perturbed => "perturbed",
            FamilyKind::File => "file",
        }
    }
}

impl FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ngram" => Ok(FamilyKind::Ngram),
            "perturbed" => Ok(FamilyKind::Perturbed),
            "file" => Ok(FamilyKind::File),
            _ => Err("expected ngram|perturbed|file".into()),
        }
    }
}

fn names(all: &[&str]) -> String {
    all.join("|")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub corpus: String,
    pub tokenizer: Tokenizer,
    pub family: FamilyKind,
    pub family_path: Option<PathBuf>,
    pub drafter_order: usize,
    pub proxy_order: usize,
    pub target_order: usize,
    pub smoothing: f64,
    /// Perturbed families only: derive the drafter from the target instead
    /// of training an n-gram of `drafter_order`.
    pub drafter_epsilon: Option<f64>,
    pub proxy_epsilon: f64,
    pub noise: NoiseKind,
    pub method: Method,
    pub k: usize,
    pub tree_depth: usize,
    pub tree_topk: usize,
    pub tree_budget: usize,
    pub signal: SignalKind,
    pub lambda: f64,
    pub relax_policy: RelaxKind,
    pub relax_param: Option<f64>,
    pub temperature: f64,
    pub margin_source: MarginSource,
    pub raw_bonus: bool,
    pub cost: CostModel,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub prompt_fraction: f64,
    pub max_prompts: usize,
    pub perplexity: bool,
    pub hist_bins: usize,
    pub hist_positions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tree = TreeLimits::default();
        Self {
            run_id: "run".into(),
            corpus: BUILTIN_REFERENCE.into(),
            tokenizer: Tokenizer::Char,
            family: FamilyKind::Ngram,
            family_path: None,
            drafter_order: 2,
            proxy_order: 3,
            target_order: 4,
            smoothing: crate::models::NGramSpec::DEFAULT_SMOOTHING,
            drafter_epsilon: None,
            proxy_epsilon: 0.1,
            noise: NoiseKind::Unigram,
            method: Method::TriSpec,
            k: crate::drafting::DEFAULT_DRAFT_LEN,
            tree_depth: tree.depth,
            tree_topk: tree.branch_topk,
            tree_budget: tree.budget,
            signal: SignalKind::Margin,
            lambda: MarginRule::DEFAULT_LAMBDA,
            relax_policy: RelaxKind::Chow,
            relax_param: None,
            temperature: 0.0,
            margin_source: MarginSource::Shaped,
            raw_bonus: false,
            cost: CostModel::default(),
            seed: 0,
            max_new_tokens: 128,
            prompt_fraction: 0.5,
            max_prompts: 0,
            perplexity: true,
            hist_bins: 10,
            hist_positions: 10_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true|false".into(),
        }),
    }
}

/// Split `key = value` text into pairs, skipping comments and blank lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((key.replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

/// `parse_pairs` over a file's contents.
pub fn parse_pairs_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pairs(&text)
}

impl ExperimentConfig {
    /// Every key `set` accepts, in canonical spelling.
    pub const KEYS: &'static [&'static str] = &[
        "run_id",
        "corpus",
        "tokenizer",
        "family",
        "family_path",
        "drafter_order",
        "proxy_order",
        "target_order",
        "smoothing",
        "drafter_epsilon",
        "proxy_epsilon",
        "noise",
        "method",
        "k",
        "tree_depth",
        "tree_topk",
        "tree_budget",
        "signal",
        "lambda",
        "relax_policy",
        "relax_param",
        "temperature",
        "margin_source",
        "raw_bonus",
        "c_d",
        "c_p",
        "c_t",
        "t_o",
        "c_p_token",
        "c_t_token",
        "baseline_overhead",
        "seed",
        "max_new_tokens",
        "prompt_fraction",
        "max_prompts",
        "perplexity",
        "hist_bins",
        "hist_positions",
    ];

    /// Parse and validate a config file's text.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Set one key; hyphens in keys are treated as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "run_id" => self.run_id = value.to_string(),
            "corpus" => self.corpus = value.to_string(),
            "tokenizer" => self.tokenizer = parse(k, value)?,
            "family" => self.family = parse(k, value)?,
            "family_path" => self.family_path = Some(PathBuf::from(value)),
            "drafter_order" => self.drafter_order = parse(k, value)?,
            "proxy_order" => self.proxy_order = parse(k, value)?,
            "target_order" => self.target_order = parse(k, value)?,
            "smoothing" => self.smoothing = parse(k, value)?,
            "drafter_epsilon" => self.drafter_epsilon = Some(parse(k, value)?),
            "proxy_epsilon" | "epsilon" => self.proxy_epsilon = parse(k, value)?,
            "noise" => self.noise = parse(k, value)?,
            "method" => self.method = parse(k, value)?,
            "k" => self.k = parse(k, value)?,
            "tree_depth" => self.tree_depth = parse(k, value)?,
            "tree_topk" => self.tree_topk = parse(k, value)?,
            "tree_budget" => self.tree_budget = parse(k, value)?,
            "signal" | "routing_signal" => self.signal = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "relax_policy" => self.relax_policy = parse(k, value)?,
            "relax_param" | "threshold" => self.relax_param = Some(parse(k, value)?),
            "temperature" | "t" => self.temperature = parse(k, value)?,
            "margin_source" => {
                self.margin_source = match value {
                    "shaped" => MarginSource::Shaped,
                    "raw" => MarginSource::Raw,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key,
                            value: value.into(),
                            reason: "expected shaped|raw".into(),
                        })
                    }
                }
            }
            "raw_bonus" => self.raw_bonus = parse_bool(k, value)?,
            "c_d" => self.cost.c_d = parse(k, value)?,
            "c_p" => self.cost.c_p = parse(k, value)?,
            "c_t" => self.cost.c_t = parse(k, value)?,
            "t_o" => self.cost.t_o = parse(k, value)?,
            "c_p_token" => self.cost.c_p_token = parse(k, value)?,
            "c_t_token" => self.cost.c_t_token = parse(k, value)?,
            "baseline_overhead" => self.cost.baseline_overhead = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "max_new_tokens" => self.max_new_tokens = parse(k, value)?,
            "prompt_fraction" => self.prompt_fraction = parse(k, value)?,
            "max_prompts" => self.max_prompts = parse(k, value)?,
            "perplexity" => self.perplexity = parse_bool(k, value)?,
            "hist_bins" => self.hist_bins = parse(k, value)?,
            "hist_positions" => self.hist_positions = parse(k, value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.corpus != BUILTIN_REFERENCE && self.family != FamilyKind::File && !Path::new(&self.corpus).is_file() {
            return bad(format!("corpus file '{}' does not exist", self.corpus));
        }
        if self.family == FamilyKind::File {
            match &self.family_path {
                Some(p) if p.is_file() => {}
                Some(p) => return bad(format!("family file '{}' does not exist", p.display())),
                None => return bad("family = file needs family_path".into()),
            }
        }
        for (name, order) in [
            ("drafter_order", self.drafter_order),
            ("proxy_order", self.proxy_order),
            ("target_order", self.target_order),
        ] {
            if order == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.smoothing.is_finite() && self.smoothing > 0.0) {
            return bad(format!("smoothing must be > 0, got {}", self.smoothing));
        }
        for (name, eps) in [
            ("drafter_epsilon", self.drafter_epsilon.unwrap_or(0.0)),
            ("proxy_epsilon", self.proxy_epsilon),
        ] {
            if !(0.0..=1.0).contains(&eps) {
                return bad(format!("{name} must lie in [0, 1], got {eps}"));
            }
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        self.tree_limits().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.method.is_tree() && self.temperature != 0.0 {
            return bad("tree methods run at temperature 0 only".into());
        }
        if self.method == Method::TriSpecTree && self.signal != SignalKind::Margin {
            return bad("trispec_tree supports the margin signal only".into());
        }
        self.relax().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cost.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be >= 1".into());
        }
        if !(self.prompt_fraction > 0.0 && self.prompt_fraction < 1.0) {
            return bad(format!(
                "prompt_fraction must lie in (0, 1), got {}",
                self.prompt_fraction
            ));
        }
        if self.hist_bins == 0 || self.hist_positions == 0 {
            return bad("hist_bins and hist_positions must be >= 1".into());
        }
        Ok(())
    }

    pub fn tree_limits(&self) -> Result<TreeLimits, crate::drafting::DraftError> {
        TreeLimits::new(self.tree_depth, self.tree_topk, self.tree_budget)
    }

    pub fn relax(&self) -> Result<RelaxPolicy, crate::baselines::PolicyError> {
        let param = self.relax_param.unwrap_or(self.relax_policy.default_threshold());
        RelaxPolicy::new(self.relax_policy, param)
    }

    pub fn routing_signal(&self) -> RoutingSignal {
        RoutingSignal::new(self.signal, self.lambda)
    }

    /// Render as `key = value` text that parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("run_id", self.run_id.clone()),
            ("corpus", self.corpus.clone()),
            ("tokenizer", self.tokenizer.as_str().into()),
            ("family", self.family.as_str().into()),
        ];
        if let Some(p) = &self.family_path {
            pairs.push(("family_path", p.display().to_string()));
        }
        pairs.extend([
            ("drafter_order", self.drafter_order.to_string()),
            ("proxy_order", self.proxy_order.to_string()),
            ("target_order", self.target_order.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("proxy_epsilon", self.proxy_epsilon.to_string()),
            (
                "noise",
                match self.noise {
                    NoiseKind::Uniform => "uniform",
                    NoiseKind::Unigram => "unigram",
                }
                .into(),
            ),
            ("method", self.method.as_str().into()),
            ("k", self.k.to_string()),
            ("tree_depth", self.tree_depth.to_string()),
            ("tree_topk", self.tree_topk.to_string()),
            ("tree_budget", self.tree_budget.to_string()),
            ("signal", self.signal.as_str().into()),
            ("lambda", self.lambda.to_string()),
            ("relax_policy", self.relax_policy.as_str().into()),
        ]);
        if let Some(e) = self.drafter_epsilon {
            pairs.push(("drafter_epsilon", e.to_string()));
        }
        if let Some(p) = self.relax_param {
            pairs.push(("relax_param", p.to_string()));
        }
        pairs.extend([
            ("temperature", self.temperature.to_string()),
            (
                "margin_source",
                match self.margin_source {
                    MarginSource::Shaped => "shaped",
                    MarginSource::Raw => "raw",
                }
                .into(),
            ),
            ("raw_bonus", self.raw_bonus.to_string()),
            ("c_d", self.cost.c_d.to_string()),
            ("c_p", self.cost.c_p.to_string()),
            ("c_t", self.cost.c_t.to_string()),
            ("t_o", self.cost.t_o.to_string()),
            ("c_p_token", self.cost.c_p_token.to_string()),
            ("c_t_token", self.cost.c_t_token.to_string()),
            ("baseline_overhead", self.cost.baseline_overhead.to_string()),
            ("seed", self.seed.to_string()),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("prompt_fraction", self.prompt_fraction.to_string()),
            ("max_prompts", self.max_prompts.to_string()),
            ("perplexity", self.perplexity.to_string()),
            ("hist_bins", self.hist_bins.to_string()),
            ("hist_positions", self.hist_positions.to_string()),
        ]);
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
