use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{NonstatConfig, PpoConfig, Td3Config};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::heads::{GumbelConfig, HeadKind, SemConfig, VqConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Td3,
    Ppo,
    Nonstat,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Td3 => "td3",
            Algorithm::Ppo => "ppo",
            Algorithm::Nonstat => "nonstat",
        }
    }

    pub fn default_env(self) -> EnvKind {
        match self {
            Algorithm::Ppo => EnvKind::Gridworld,
            _ => EnvKind::PointMass,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadName {
    #[default]
    Baseline,
    Sem,
    GumbelSt,
    Vq,
    Crelu,
}

impl HeadName {
    pub fn name(self) -> &'static str {
        match self {
            HeadName::Baseline => "baseline",
            HeadName::Sem => "sem",
            HeadName::GumbelSt => "gumbel_st",
            HeadName::Vq => "vq",
            HeadName::Crelu => "crelu",
        }
    }
}

/// Head selection as written in config files. `L` and `V` may be left out,
/// in which case they are derived from the layer width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub kind: HeadName,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(rename = "V", skip_serializing_if = "Option::is_none")]
    pub v: Option<usize>,
    pub tau: f64,
    /// Gumbel head only.
    pub hard: bool,
    /// VQ head only; `L` is the number of code slices per row.
    pub codebook_size: usize,
    pub beta: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            kind: HeadName::Baseline,
            l: None,
            v: None,
            tau: 1.0,
            hard: true,
            codebook_size: 64,
            beta: 0.25,
        }
    }
}

impl HeadSpec {
    pub fn sem(l: usize, v: usize, tau: f64) -> Self {
        Self {
            kind: HeadName::Sem,
            l: Some(l),
            v: Some(v),
            tau,
            ..Self::default()
        }
    }

    fn blocks(&self, width: usize) -> Result<(usize, usize)> {
        if self.l == Some(0) {
            return Err(Error::Config("head.L must be >= 1".into()));
        }
        if self.v == Some(0) {
            return Err(Error::Config("head.V must be >= 1".into()));
        }
        let (l, v) = match (self.l, self.v) {
            (Some(l), Some(v)) => (l, v),
            (Some(l), None) => (l, width / l),
            (None, Some(v)) => (width / v, v),
            (None, None) => {
                let s = SemConfig::for_width(width).map_err(config)?;
                (s.groups, s.group_dim)
            }
        };
        if l * v != width {
            return Err(Error::Config(format!(
                "head.L * head.V = {l} * {v} does not match hidden width {width}"
            )));
        }
        Ok((l, v))
    }

    /// Concrete head for a hidden layer of `width` units.
    pub fn resolve(&self, width: usize) -> Result<HeadKind> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("head.tau must be > 0, got {}", self.tau)));
        }
        let head = match self.kind {
            HeadName::Baseline => HeadKind::Baseline,
            HeadName::Crelu => HeadKind::CRelu,
            HeadName::Sem => {
                let (l, v) = self.blocks(width)?;
                HeadKind::Sem(SemConfig::new(l, v, self.tau).map_err(config)?)
            }
            HeadName::GumbelSt => {
                let (l, v) = self.blocks(width)?;
                HeadKind::GumbelSt(GumbelConfig {
                    groups: l,
                    group_dim: v,
                    tau: self.tau,
                    hard: self.hard,
                })
            }
            HeadName::Vq => {
                let slices = self.l.unwrap_or(8);
                if slices == 0 || !width.is_multiple_of(slices) {
                    return Err(Error::Config(format!(
                        "head.L = {slices} must divide hidden width {width}"
                    )));
                }
                HeadKind::Vq(VqConfig {
                    codebook_size: self.codebook_size,
                    code_dim: width / slices,
                    beta: self.beta,
                })
            }
        };
        head.validate(width).map_err(config)?;
        Ok(head)
    }
}

/// Axes of an experiment matrix. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub head: Vec<HeadName>,
    pub num_envs: Vec<usize>,
    pub buffer: Vec<usize>,
    pub batch: Vec<usize>,
    pub use_cdq: Vec<bool>,
    pub use_c51: Vec<bool>,
    pub sigma_explore: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<usize>,
    #[serde(rename = "V")]
    pub v: Vec<usize>,
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Defaults to the algorithm's usual environment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvKind>,
    pub head: HeadSpec,
    pub seeds: Vec<u64>,
    /// Environment steps (epochs for `nonstat`); algorithm default if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_interval: Option<usize>,
    pub out_dir: PathBuf,
    /// Mirror every metrics CSV as JSON lines.
    pub jsonl: bool,
    pub ablation: Ablation,
    pub td3: Td3Config,
    pub ppo: PpoConfig,
    pub nonstat: NonstatConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Td3,
            env: None,
            head: HeadSpec::default(),
            seeds: vec![0],
            total_steps: None,
            eval_interval: None,
            out_dir: PathBuf::from("runs"),
            jsonl: false,
            ablation: Ablation::default(),
            td3: Td3Config::default(),
            ppo: PpoConfig::default(),
            nonstat: NonstatConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn env(&self) -> EnvKind {
        self.env.unwrap_or(self.algorithm.default_env())
    }

    /// Checks every cell of the matrix, so a bad axis value fails before
    /// anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.total_steps == Some(0) || self.eval_interval == Some(0) {
            return Err(Error::Config("total_steps and eval_interval must be >= 1".into()));
        }
        let env = self.env();
        if let (Algorithm::Td3, crate::envs::ActionKind::Discrete(_)) = (self.algorithm, env.spec().action_kind) {
            return Err(Error::Config(format!(
                "td3 needs a continuous env, {} is discrete",
                env.name()
            )));
        }
        let a = &self.ablation;
        if self.algorithm != Algorithm::Td3
            && !(a.buffer.is_empty() && a.use_cdq.is_empty() && a.use_c51.is_empty() && a.sigma_explore.is_empty())
        {
            return Err(Error::Config(format!(
                "ablation axes buffer, use_cdq, use_c51 and sigma_explore only apply to td3, not {}",
                self.algorithm.name()
            )));
        }
        if self.algorithm == Algorithm::Nonstat && !a.num_envs.is_empty() {
            return Err(Error::Config("ablation.num_envs does not apply to nonstat".into()));
        }
        super::expand(self).map(|_| ())
    }
}

fn config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Parses a CLI override value as a TOML literal, falling back to a bare
/// string.
fn override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a config document and applies `(dotted key, value)` overrides on
/// top of it. Unknown keys and mistyped values are rejected.
pub fn config_parse(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        set_path(&mut table, k, override_value(v))?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`config_parse`] on a file, or on an empty document when `path` is `None`.
pub fn config_load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    config_parse(&text, overrides)
}

/// Splits `--a.b value` and `--a.b=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key value, got {a:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override --{key} has no value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(config_parse("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn cli_overrides_beat_file() {
        let text = "[head]\nkind = \"sem\"\nV = 4\nL = 32\n";
        let cfg = config_parse(text, &ov(&[("head.V", "16"), ("head.L", "8")])).unwrap();
        assert_eq!(cfg.head.v, Some(16));
        assert_eq!(cfg.head.l, Some(8));
        assert_eq!(
            cfg.head.resolve(128).unwrap(),
            HeadKind::Sem(SemConfig::new(8, 16, 1.0).unwrap())
        );
    }

    #[test]
    fn zero_v_is_rejected() {
        let err = config_parse("[head]\nkind = \"sem\"\n", &ov(&[("head.V", "0")])).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("V")), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = config_parse("[td3]\nlearning_rate = 1.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = config_parse("", &ov(&[("head.colour", "1")])).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn type_mismatch_names_expected_type() {
        let err = config_parse("seeds = \"three\"\n", &[]).unwrap_err();
        assert!(
            err.to_string().contains("sequence") || err.to_string().contains("array"),
            "{err}"
        );
    }

    #[test]
    fn override_pairs() {
        let args: Vec<String> = ["--head.V", "16", "--seeds=[1,2]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pairs = parse_overrides(&args).unwrap();
        assert_eq!(pairs, ov(&[("head.V", "16"), ("seeds", "[1,2]")]));
        let cfg = config_parse("", &pairs[1..]).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert!(parse_overrides(&["--x".to_string()]).is_err());
    }

    #[test]
    fn inapplicable_axes_rejected() {
        assert!(config_parse("algorithm = \"ppo\"\n[ablation]\nuse_cdq = [true, false]\n", &[]).is_err());
        assert!(config_parse("algorithm = \"td3\"\nenv = \"gridworld\"\n", &[]).is_err());
    }
}
