use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{Algorithm, HeadName, RunConfig};
use super::log::{fmt_sig9, read_metrics_csv, CellSink};
use super::write_atomic;
use crate::agents::{nonstationary_train, ppo_train, td3_train, NonstatConfig, PpoConfig, Td3Config};
use crate::diffcore::{Rng, Tensor};
use crate::envs::{ActionKind, EnvKind, VecEnv};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::networks::{checkpoint_save, Checkpoint};
use crate::par;

/// One (ablation setting, seed) pair with fully resolved configs.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// `axis=value` pairs joined by commas, or `default`.
    pub setting: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub head: HeadKind,
    pub td3: Td3Config,
    pub ppo: PpoConfig,
    pub nonstat: NonstatConfig,
}

impl Cell {
    /// Output directory relative to the experiment root.
    pub fn rel_dir(&self) -> PathBuf {
        let setting: String = self
            .setting
            .chars()
            .map(|c| match c {
                ',' => '_',
                '=' => '-',
                c if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' => c,
                _ => '~',
            })
            .collect();
        PathBuf::from(setting).join(format!("seed-{}", self.seed))
    }

    /// `None` for the supervised demo.
    pub fn env_used(&self) -> Option<EnvKind> {
        (self.algorithm != Algorithm::Nonstat).then_some(self.env)
    }

    /// The algorithm config that actually drives this cell, as JSON.
    fn config_echo(&self) -> serde_json::Value {
        let algo = match self.algorithm {
            Algorithm::Td3 => serde_json::to_value(&self.td3),
            Algorithm::Ppo => serde_json::to_value(&self.ppo),
            Algorithm::Nonstat => serde_json::to_value(&self.nonstat),
        }
        .unwrap_or(serde_json::Value::Null);
        let env = self.env_used().map(EnvKind::name);
        serde_json::json!({
            "algorithm": self.algorithm.name(),
            "env": env,
            "head": serde_json::to_value(&self.head).unwrap_or(serde_json::Value::Null),
            self.algorithm.name(): algo,
        })
    }
}

#[derive(Clone, Debug)]
enum AxisValue {
    Head(HeadName),
    NumEnvs(usize),
    Buffer(usize),
    Batch(usize),
    UseCdq(bool),
    UseC51(bool),
    Sigma(f64),
    L(usize),
    V(usize),
    Tau(f64),
}

impl AxisValue {
    fn label(&self) -> String {
        match self {
            AxisValue::Head(h) => format!("head={}", h.name()),
            AxisValue::NumEnvs(n) => format!("num_envs={n}"),
            AxisValue::Buffer(n) => format!("buffer={n}"),
            AxisValue::Batch(n) => format!("batch={n}"),
            AxisValue::UseCdq(b) => format!("use_cdq={b}"),
            AxisValue::UseC51(b) => format!("use_c51={b}"),
            AxisValue::Sigma(s) => format!("sigma_explore={s}"),
            AxisValue::L(n) => format!("L={n}"),
            AxisValue::V(n) => format!("V={n}"),
            AxisValue::Tau(t) => format!("tau={t}"),
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        match *self {
            AxisValue::Head(h) => cfg.head.kind = h,
            AxisValue::NumEnvs(n) => {
                cfg.td3.num_envs = n;
                cfg.ppo.num_envs = n;
            }
            AxisValue::Buffer(n) => cfg.td3.buffer_capacity = n,
            AxisValue::Batch(n) => {
                cfg.td3.batch_size = n;
                cfg.ppo.minibatch_size = n;
                cfg.nonstat.batch_size = n;
            }
            AxisValue::UseCdq(b) => cfg.td3.use_cdq = b,
            AxisValue::UseC51(b) => cfg.td3.use_c51 = b,
            AxisValue::Sigma(s) => cfg.td3.sigma_explore = s,
            AxisValue::L(n) => cfg.head.l = Some(n),
            AxisValue::V(n) => cfg.head.v = Some(n),
            AxisValue::Tau(t) => cfg.head.tau = t,
        }
    }
}

fn axes(cfg: &RunConfig) -> Vec<Vec<AxisValue>> {
    let a = &cfg.ablation;
    let all = vec![
        a.head.iter().copied().map(AxisValue::Head).collect::<Vec<_>>(),
        a.num_envs.iter().copied().map(AxisValue::NumEnvs).collect(),
        a.buffer.iter().copied().map(AxisValue::Buffer).collect(),
        a.batch.iter().copied().map(AxisValue::Batch).collect(),
        a.use_cdq.iter().copied().map(AxisValue::UseCdq).collect(),
        a.use_c51.iter().copied().map(AxisValue::UseC51).collect(),
        a.sigma_explore.iter().copied().map(AxisValue::Sigma).collect(),
        a.l.iter().copied().map(AxisValue::L).collect(),
        a.v.iter().copied().map(AxisValue::V).collect(),
        a.tau.iter().copied().map(AxisValue::Tau).collect(),
    ];
    all.into_iter().filter(|v| !v.is_empty()).collect()
}

fn to_config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn resolve(base: &RunConfig, choice: &[AxisValue], seed: u64) -> Result<Cell> {
    let mut cfg = base.clone();
    for v in choice {
        v.apply(&mut cfg);
    }
    let setting = if choice.is_empty() {
        "default".to_string()
    } else {
        choice.iter().map(AxisValue::label).collect::<Vec<_>>().join(",")
    };
    let width = match cfg.algorithm {
        Algorithm::Td3 => cfg.td3.hidden,
        Algorithm::Ppo => cfg.ppo.hidden,
        Algorithm::Nonstat => cfg.nonstat.hidden,
    };
    let head = cfg.head.resolve(width).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("cell {setting}: {m}")),
        other => other,
    })?;
    if let Some(n) = cfg.total_steps {
        cfg.td3.total_steps = n;
        cfg.ppo.total_steps = n;
        cfg.nonstat.total_epochs = n;
    }
    if let Some(n) = cfg.eval_interval {
        cfg.td3.eval_interval = n;
        cfg.ppo.eval_interval = n;
    }
    cfg.nonstat.head = head.clone();
    match cfg.algorithm {
        Algorithm::Td3 => cfg.td3.validate(),
        Algorithm::Ppo => cfg.ppo.validate(),
        Algorithm::Nonstat => cfg.nonstat.validate(),
    }
    .map_err(to_config_err)?;
    Ok(Cell {
        setting,
        seed,
        algorithm: cfg.algorithm,
        env: cfg.env(),
        head,
        td3: cfg.td3,
        ppo: cfg.ppo,
        nonstat: cfg.nonstat,
    })
}

/// Every (setting, seed) cell, settings in axis order, seeds innermost.
/// The count is `|seeds| × Π |axis|` over non-empty axes.
pub fn expand(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let axes = axes(cfg);
    let mut choices: Vec<Vec<AxisValue>> = vec![Vec::new()];
    for axis in &axes {
        choices = choices
            .iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    let mut cells = Vec::with_capacity(choices.len() * cfg.seeds.len());
    for choice in &choices {
        for &seed in &cfg.seeds {
            cells.push(resolve(cfg, choice, seed)?);
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub setting: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub env: Option<EnvKind>,
    pub config: serde_json::Value,
    pub build: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `running`, `ok`, `aborted` or `failed`.
    pub status: String,
    pub error: Option<String>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let mode = if par::PARALLEL { "parallel" } else { "sequential" };
    format!(
        "{} {} ({profile}, {mode})",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    )
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Contract(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub setting: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub status: String,
    pub error: Option<String>,
}

impl CellOutcome {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn train_cell(cell: &Cell, sink: &mut CellSink) -> Result<Checkpoint> {
    Ok(match cell.algorithm {
        Algorithm::Td3 => td3_train(cell.env, &cell.td3, &cell.head, cell.seed, sink)?
            .agent
            .checkpoint(),
        Algorithm::Ppo => ppo_train(cell.env, &cell.ppo, &cell.head, cell.seed, sink)?
            .agent
            .checkpoint(),
        Algorithm::Nonstat => {
            let run = nonstationary_train(&cell.nonstat, cell.seed, sink)?;
            let mut c = Checkpoint::new();
            c.push_params("net", run.net.params());
            c
        }
    })
}

/// Runs one cell into `root/<cell dir>`. Training errors are recorded in
/// the manifest rather than returned.
pub fn run_cell(cell: &Cell, root: &Path, jsonl: bool) -> Result<CellOutcome> {
    let dir = root.join(cell.rel_dir());
    std::fs::create_dir_all(&dir)?;
    let manifest_path = dir.join("manifest.json");
    let mut manifest = RunManifest {
        setting: cell.setting.clone(),
        seed: cell.seed,
        algorithm: cell.algorithm,
        env: cell.env_used(),
        config: cell.config_echo(),
        build: build_id(),
        started_unix: now_unix(),
        finished_unix: None,
        status: "running".into(),
        error: None,
    };
    write_manifest(&manifest_path, &manifest)?;

    let mut sink = CellSink::new(&dir, jsonl);
    let result = train_cell(cell, &mut sink).and_then(|ckpt| checkpoint_save(&ckpt, &dir.join("checkpoint.sacx")));
    let (status, error) = match result {
        Ok(()) => ("ok", None),
        Err(e @ Error::Aborted { .. }) => ("aborted", Some(e.to_string())),
        Err(e) => ("failed", Some(e.to_string())),
    };
    manifest.status = status.into();
    manifest.error = error.clone();
    manifest.finished_unix = Some(now_unix());
    write_manifest(&manifest_path, &manifest)?;
    Ok(CellOutcome {
        setting: cell.setting.clone(),
        seed: cell.seed,
        dir,
        status: status.into(),
        error,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub outcomes: Vec<CellOutcome>,
    pub summary: Summary,
}

impl ExperimentReport {
    /// 0 when every cell finished, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.outcomes.iter().all(CellOutcome::ok) {
            0
        } else {
            1
        }
    }
}

/// Runs every cell (in parallel when the feature is on), then writes
/// `summary.csv` under `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cells = expand(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let outcomes = par::map_range(cells.len(), |i| run_cell(&cells[i], &cfg.out_dir, cfg.jsonl))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&cfg.out_dir)?;
    Ok(ExperimentReport { outcomes, summary })
}

/// Mean eval return over all logged evaluation points.
pub fn area_under_curve(rows: &[crate::diagnostics::MetricsRow]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.eval_return).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Lowest episode return of a uniformly random policy over 16 episodes.
pub fn random_policy_return(env: EnvKind, seed: u64) -> Result<f64> {
    let episodes = 16;
    let rng = Rng::new(seed);
    let mut envs = VecEnv::new(env, episodes, &rng.split(0))?;
    let mut act = rng.split(1);
    let mut returns: Vec<Option<f64>> = vec![None; episodes];
    while returns.iter().any(Option::is_none) {
        let steps = match env.spec().action_kind {
            ActionKind::Continuous(d) => {
                let a = Tensor::matrix(episodes, d, act.uniform_vec(episodes * d, -1.0, 1.0))?;
                envs.step_continuous(a.data())?
            }
            ActionKind::Discrete(n) => {
                let a: Vec<usize> = (0..episodes).map(|_| act.below(n)).collect();
                envs.step_discrete(&a)?
            }
        };
        for (slot, s) in returns.iter_mut().zip(steps) {
            if slot.is_none() {
                *slot = s.episode_return;
            }
        }
    }
    Ok(returns.into_iter().flatten().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SettingSummary {
    pub setting: String,
    pub n_seeds: usize,
    pub final_mean: f64,
    pub final_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// `(random-policy floor, solve threshold)`; absent for nonstat.
    pub norm_bounds: Option<(f64, f64)>,
    pub normalized_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub settings: Vec<SettingSummary>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_manifests(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Recomputes per-setting statistics from the cell CSVs under `root` and
/// writes `root/summary.csv`. Cells that did not finish are left out.
pub fn summarize(root: &Path) -> Result<Summary> {
    let mut manifests = Vec::new();
    find_manifests(root, &mut manifests)?;
    let mut groups: BTreeMap<String, (RunManifest, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for path in manifests {
        let text = std::fs::read_to_string(&path)?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.status != "ok" {
            continue;
        }
        let rows = read_metrics_csv(&path.with_file_name("metrics.csv"))?;
        let (Some(fin), Some(auc)) = (rows.last().and_then(|r| r.eval_return), area_under_curve(&rows)) else {
            continue;
        };
        let g = groups
            .entry(m.setting.clone())
            .or_insert_with(|| (m, Vec::new(), Vec::new()));
        g.1.push(fin);
        g.2.push(auc);
    }

    let mut summary = Summary::default();
    for (setting, (m, finals, aucs)) in groups {
        let (final_mean, final_std) = mean_std(&finals);
        let (auc_mean, auc_std) = mean_std(&aucs);
        let norm_bounds = match m.env {
            Some(env) => Some((random_policy_return(env, 0)?, env.spec().solve_threshold)),
            None => None,
        };
        let normalized_mean = norm_bounds.map(|(lo, hi)| (final_mean - lo) / (hi - lo));
        summary.settings.push(SettingSummary {
            setting,
            n_seeds: finals.len(),
            final_mean,
            final_std,
            auc_mean,
            auc_std,
            norm_bounds,
            normalized_mean,
        });
    }
    write_atomic(&root.join("summary.csv"), summary.to_csv().as_bytes())?;
    Ok(summary)
}

impl Summary {
    pub const COLUMNS: [&'static str; 10] = [
        "setting",
        "n_seeds",
        "final_return_mean",
        "final_return_std",
        "auc_mean",
        "auc_std",
        "normalized_return",
        "norm_random_floor",
        "norm_solve_threshold",
        "normalization",
    ];

    pub fn to_csv(&self) -> String {
        let mut s = Self::COLUMNS.join(",");
        s.push('\n');
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        for r in &self.settings {
            let _ = writeln!(
                s,
                "\"{}\",{},{},{},{},{},{},{},{},{}",
                r.setting,
                r.n_seeds,
                fmt_sig9(r.final_mean),
                fmt_sig9(r.final_std),
                fmt_sig9(r.auc_mean),
                fmt_sig9(r.auc_std),
                opt(r.normalized_mean),
                opt(r.norm_bounds.map(|b| b.0)),
                opt(r.norm_bounds.map(|b| b.1)),
                if r.norm_bounds.is_some() {
                    "min-max(random floor, solve threshold)"
                } else {
                    "none"
                },
            );
        }
        s
    }
}
