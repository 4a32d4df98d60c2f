//! Run configuration: one JSON document with dotted-path overrides.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::check_tau;
use crate::env::{generate_dataset, load_dataset, Dataset, MazeSpec};
use crate::error::{Error, Result};
use crate::mixer::MixerConfig;
use crate::objectives::LossWeights;
use crate::policy::PolicyConfig;
use crate::trainer::{GoalSampleSpec, TrainConfig};
use crate::value::ValueConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Built-in maze name or path to a maze JSON file.
    pub maze: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub weights: LossWeights,
    pub goal_sampling: GoalSampleSpec,
    pub eval: EvalConfig,
    pub decoder: DecoderConfig,
    pub out: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Existing dataset file; generated in memory from the fields below when absent.
    pub path: Option<String>,
    pub n_traj: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub token_mixer_hidden: Vec<usize>,
    pub channel_mixer_hidden: Vec<usize>,
    pub n_blocks: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub goal_encoder_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_pair: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub enabled: bool,
    pub weight: f64,
    pub hidden: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            maze: "corridor".into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            weights: LossWeights::default(),
            goal_sampling: GoalSampleSpec::default(),
            eval: EvalConfig::default(),
            decoder: DecoderConfig::default(),
            out: None,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            n_traj: 200,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            token_mixer_hidden: vec![32, 32],
            channel_mixer_hidden: vec![32, 32],
            n_blocks: 1,
            encoder_hidden: vec![64],
            head_hidden: vec![64],
            goal_encoder_hidden: vec![64],
            value_hidden: vec![64, 64],
        }
    }
}

impl ModelConfig {
    /// Full-size value network of the original navigation setup.
    pub fn navigation_large(embed_dim: usize) -> Self {
        ModelConfig {
            embed_dim,
            value_hidden: vec![512, 512, 512],
            ..Default::default()
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes_per_pair: 10 }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            enabled: false,
            weight: 1.0,
            hidden: vec![64],
        }
    }
}

/// Every dotted leaf path of a JSON object.
pub fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, c) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(c, &p, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

/// Set `key` (dotted path) to `raw`, parsed as JSON or else taken as a string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let valid = || leaf_keys(&serde_json::to_value(RunConfig::default()).unwrap()).join(", ");
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("'{key}' descends into a non-object; valid keys: {}", valid()))
        })?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown key '{key}'; valid keys: {}", valid())));
        }
        cur = obj.get_mut(*part).unwrap();
        if n + 1 == parts.len() {
            if cur.is_object() {
                return Err(Error::Config(format!(
                    "'{key}' is a section, not a value; valid keys: {}",
                    valid()
                )));
            }
            *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
    }
    Ok(())
}

fn parse(v: Value) -> Result<RunConfig> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Optional config file, then `KEY=VALUE` overrides in order.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let base = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg
            }
            None => RunConfig::default(),
        };
        base.with_overrides(sets)
    }

    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{s}' is not KEY=VALUE")))?;
            apply_override(&mut doc, k.trim(), v.trim())?;
        }
        let cfg = parse(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&self, key: &str, value: Value) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        apply_override(&mut doc, key, &value.to_string())?;
        let cfg = parse(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        let bad = |m: String| Err(Error::Config(m));
        if t.k == 0 {
            return bad("trainer.k must be ≥ 1".into());
        }
        if t.batch_size == 0 {
            return bad("trainer.batch_size must be ≥ 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("trainer.lr {} must be > 0", t.lr));
        }
        if !(t.gamma > 0.0 && t.gamma < 1.0) {
            return bad(format!("trainer.gamma {} must lie in (0, 1)", t.gamma));
        }
        check_tau(t.tau)?;
        if !(t.target_rate > 0.0 && t.target_rate <= 1.0) {
            return bad(format!("trainer.target_rate {} must lie in (0, 1]", t.target_rate));
        }
        if t.log_interval == 0 || t.eval_interval == 0 || t.checkpoint_interval == 0 {
            return bad("trainer intervals must be ≥ 1".into());
        }
        self.weights.validate()?;
        self.goal_sampling.validate()?;
        self.mixer_config().validate()?;
        let m = &self.model;
        let widths = [&m.encoder_hidden, &m.head_hidden, &m.goal_encoder_hidden, &m.value_hidden];
        if widths.iter().any(|w| w.contains(&0)) || self.decoder.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.eval.episodes_per_pair == 0 {
            return bad("eval.episodes_per_pair must be ≥ 1".into());
        }
        if self.dataset.n_traj == 0 {
            return bad("dataset.n_traj must be ≥ 1".into());
        }
        if !(self.dataset.noise_sigma >= 0.0) {
            return bad("dataset.noise_sigma must be ≥ 0".into());
        }
        if !(self.decoder.weight >= 0.0 && self.decoder.weight.is_finite()) {
            return bad("decoder.weight must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn maze_spec(&self) -> Result<MazeSpec> {
        MazeSpec::resolve(&self.maze)
    }

    /// Loads `dataset.path` when set, otherwise generates from `dataset.*`.
    pub fn dataset(&self, maze: &MazeSpec) -> Result<Dataset> {
        let d = &self.dataset;
        match &d.path {
            Some(p) => {
                let ds = load_dataset(Path::new(p))?;
                if let Some(prov) = &ds.provenance {
                    if prov.maze != maze.name {
                        warn!("dataset {p} was generated on maze '{}', training on '{}'", prov.maze, maze.name);
                    }
                }
                Ok(ds)
            }
            None => generate_dataset(maze, d.n_traj, d.noise_sigma, d.seed),
        }
    }

    pub fn mixer_config(&self) -> MixerConfig {
        let m = &self.model;
        MixerConfig {
            embed_dim: m.embed_dim,
            horizon: self.trainer.horizon,
            token_mixer_hidden: m.token_mixer_hidden.clone(),
            channel_mixer_hidden: m.channel_mixer_hidden.clone(),
            n_blocks: m.n_blocks,
            causal_mixer_mode: self.trainer.causal_mixer_mode,
        }
    }

    pub fn policy_config(&self, obs_dim: usize, act_dim: usize, action_bound: f64) -> PolicyConfig {
        PolicyConfig {
            obs_dim,
            act_dim,
            action_bound,
            mixer: self.mixer_config(),
            encoder_hidden: self.model.encoder_hidden.clone(),
            head_hidden: self.model.head_hidden.clone(),
            generation_order: self.trainer.generation_order,
        }
    }

    pub fn value_config(&self, obs_dim: usize) -> ValueConfig {
        ValueConfig {
            obs_dim,
            embed_dim: self.model.embed_dim,
            goal_encoder_hidden: self.model.goal_encoder_hidden.clone(),
            hidden: self.model.value_hidden.clone(),
        }
    }
}
