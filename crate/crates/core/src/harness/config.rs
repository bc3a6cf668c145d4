//! Experiment configuration: a TOML document with dotted sections, plus
//! `key=value` overrides applied on top of it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive_rr::RRConfig;
use crate::agent::AgentConfig;
use crate::augment::ShiftAugmentConfig;
use crate::envlab::EnvSpec;
use crate::error::{config_err, LabError, Result};
use crate::plasticity::InterventionConfig;

/// Environment variable that, when set, replaces the output root.
pub const OUTPUT_ROOT_VAR: &str = "PLAB_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One arm exactly as configured.
    Standard,
    /// {DA on, DA off} × {Reset on, Reset off}.
    FactorialDaReset,
    /// DA always on, always off, turned on late, turned off early.
    DaToggle,
    /// One static arm per value of `rr.sweep`.
    RrSweep,
    /// Adaptive controller against static low and static high.
    AdaptiveRr,
    /// Many updates on a small buffer, then normal training.
    HeavyPriming,
}

/// Heavy-priming phase settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimingConfig {
    pub transitions: u64,
    pub updates: u64,
}

impl Default for PrimingConfig {
    fn default() -> Self {
        Self {
            transitions: 200,
            updates: 10_000,
        }
    }
}

/// Optional noiseless evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub enabled: bool,
    pub every_episodes: u64,
    pub episodes: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            every_episodes: 20,
            episodes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocol: Protocol,
    /// Agent (environment) steps per run; a multiple of the episode length.
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    /// Uniform-random steps collected before learning starts.
    pub seed_steps: u64,
    pub replay_capacity: usize,
    /// FAU and weight norms are logged every this many episodes.
    pub fau_every_episodes: u64,
    pub fau_batch: usize,
    pub output_dir: PathBuf,
    pub save_checkpoint: bool,
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub da: ShiftAugmentConfig,
    pub interventions: InterventionConfig,
    pub rr: RRConfig,
    pub priming: PrimingConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            protocol: Protocol::Standard,
            total_steps: 50_000,
            seeds: vec![1, 2, 3, 4, 5],
            seed_steps: 1_000,
            replay_capacity: 100_000,
            fau_every_episodes: 10,
            fau_batch: 256,
            output_dir: PathBuf::from("runs"),
            save_checkpoint: true,
            env: EnvSpec::default(),
            agent: AgentConfig::default(),
            da: ShiftAugmentConfig::default(),
            interventions: InterventionConfig::default(),
            rr: RRConfig::default(),
            priming: PrimingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.da.validate()?;
        self.interventions.validate()?;
        self.rr.validate()?;
        if self.seeds.is_empty() {
            return config_err("seeds must not be empty");
        }
        let ep = self.env.episode_len as u64;
        if self.total_steps == 0 || self.total_steps % ep != 0 {
            return config_err(format!(
                "total_steps {} must be a positive multiple of the episode length {ep}",
                self.total_steps
            ));
        }
        if self.replay_capacity == 0 || self.fau_batch == 0 || self.fau_every_episodes == 0 {
            return config_err("replay_capacity, fau_batch and fau_every_episodes must be positive");
        }
        if self.eval.enabled && (self.eval.every_episodes == 0 || self.eval.episodes == 0) {
            return config_err("eval.every_episodes and eval.episodes must be positive");
        }
        if self.agent.n_step > self.env.episode_len {
            return config_err("n_step longer than an episode");
        }
        if self.protocol == Protocol::RrSweep && self.rr.sweep.is_empty() {
            return config_err("rr_sweep protocol needs rr.sweep values");
        }
        Ok(())
    }

    /// Output root, honouring [`OUTPUT_ROOT_VAR`].
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.name),
            _ => self.output_dir.join(&self.name),
        }
    }
}

/// Parses `a.b.c=value` and writes `value` into the table. The value is read
/// as a TOML literal when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return config_err(format!("bad override key '{key}'"));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Expands `"1,2,5"`, `"1..4"` (inclusive) or mixtures of both.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| LabError::Config(format!("bad seed '{s}'")))
        };
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
                if b < a {
                    return config_err(format!("empty seed range '{part}'"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return config_err("no seeds given");
    }
    Ok(out)
}
