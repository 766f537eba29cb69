//! Command-line entry point: JSON config files with key=value overrides,
//! subcommands for the experiments, and deterministic result persistence
//! (schema-versioned CSVs, SVG plots, a manifest of content hashes).

use crate::env::{Env, EnvConfig, Variant};
use crate::harness::{
    self, BonusKind, HeatmapCell, MethodKind, MethodParams, SearchSpec, TrialConfig, TrialRecord,
    DEFAULT_EVAL_STEPS, DEFAULT_ITERATIONS, DEFAULT_TRAIN_STEPS,
};
use crate::nn::{load_checkpoint, save_checkpoint, QNetwork};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const ENV_OUT_DIR: &str = "MULEX_OUT_DIR";

// ---------------------------------------------------------------------------
// Config file schema
// ---------------------------------------------------------------------------

fn default_experiment() -> String {
    "run".into()
}

fn default_variant() -> Variant {
    Variant::Standard
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSection {
    pub room_size: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Defaults to the room-size-scaled cap.
    #[serde(default)]
    pub episode_cap: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

impl EnvSection {
    pub fn to_env_config(&self) -> EnvConfig {
        EnvConfig {
            room_size: self.room_size,
            variant: self.variant,
            episode_cap: self
                .episode_cap
                .unwrap_or_else(|| EnvConfig::default_cap(self.room_size)),
            seed: self.seed,
        }
    }
}

fn default_lr() -> f64 {
    2.5e-4
}
fn default_iterations() -> u32 {
    DEFAULT_ITERATIONS
}
fn default_train_steps() -> u32 {
    DEFAULT_TRAIN_STEPS
}
fn default_eval_steps() -> u32 {
    DEFAULT_EVAL_STEPS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_train_steps")]
    pub train_steps_per_iter: u32,
    #[serde(default = "default_eval_steps")]
    pub eval_steps_per_iter: u32,
    #[serde(default)]
    pub bonus: BonusKind,
    #[serde(default)]
    pub stop_at_return: Option<f64>,
    /// None: on for every method except two_task_heads.
    #[serde(default)]
    pub prioritized_task: Option<bool>,
}

impl Default for LearnerSection {
    fn default() -> Self {
        LearnerSection {
            learning_rate: default_lr(),
            iterations: default_iterations(),
            train_steps_per_iter: default_train_steps(),
            eval_steps_per_iter: default_eval_steps(),
            bonus: BonusKind::default(),
            stop_at_return: None,
            prioritized_task: None,
        }
    }
}

fn default_n_trials() -> usize {
    16
}
fn default_seeds_per_trial() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSection {
    pub method: MethodKind,
    #[serde(default = "default_n_trials")]
    pub n_trials: usize,
    #[serde(default = "default_seeds_per_trial")]
    pub seeds_per_trial: usize,
}

fn default_p1_values() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5]
}
fn default_offpolicy_gamma_steps() -> f64 {
    0.95
}
fn default_offpolicy_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OffpolicySection {
    #[serde(default = "default_p1_values")]
    pub p1_values: Vec<f64>,
    #[serde(default = "default_offpolicy_gamma_steps")]
    pub gamma_steps: f64,
    #[serde(default = "default_offpolicy_epsilon")]
    pub epsilon: f64,
}

impl Default for OffpolicySection {
    fn default() -> Self {
        OffpolicySection {
            p1_values: default_p1_values(),
            gamma_steps: default_offpolicy_gamma_steps(),
            epsilon: default_offpolicy_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutputsSection {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default = "default_experiment")]
    pub experiment: String,
    pub env: EnvSection,
    #[serde(default)]
    pub method: Option<MethodParams>,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub offpolicy: Option<OffpolicySection>,
    #[serde(default)]
    pub outputs: OutputsSection,
    #[serde(default)]
    pub seed: u64,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config error: {e}")))
    }

    pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        ConfigFile::parse(&text)
    }

    pub fn trial_config(&self) -> Result<TrialConfig, CliError> {
        let method = self
            .method
            .clone()
            .ok_or_else(|| CliError::Config("missing required field `method`".into()))?;
        let prioritized_task = self
            .learner
            .prioritized_task
            .unwrap_or(!matches!(method, MethodParams::TwoTaskHeads { .. }));
        Ok(TrialConfig {
            method,
            env: self.env.to_env_config(),
            learning_rate: self.learner.learning_rate,
            iterations: self.learner.iterations,
            train_steps_per_iter: self.learner.train_steps_per_iter,
            eval_steps_per_iter: self.learner.eval_steps_per_iter,
            seed: self.seed,
            bonus: self.learner.bonus,
            stop_at_return: self.learner.stop_at_return,
            prioritized_task,
        })
    }

    pub fn search_spec(&self) -> Result<SearchSpec, CliError> {
        let sweep = self
            .sweep
            .clone()
            .ok_or_else(|| CliError::Config("missing required section `sweep`".into()))?;
        Ok(SearchSpec {
            method: sweep.method,
            env: self.env.to_env_config(),
            iterations: self.learner.iterations,
            train_steps_per_iter: self.learner.train_steps_per_iter,
            eval_steps_per_iter: self.learner.eval_steps_per_iter,
            n_trials: sweep.n_trials,
            seeds_per_trial: sweep.seeds_per_trial,
            seed: self.seed,
            bonus: self.learner.bonus,
            stop_at_return: self.learner.stop_at_return,
        })
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Apply one `key=value` override; keys address the flattened schema.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
        let bad = |what: &str| CliError::Config(format!("override {key}={value}: {what}"));
        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| bad(concat!("expected ", stringify!($ty))))?
            };
        }
        match key {
            "experiment" => self.experiment = value.to_string(),
            "seed" => self.seed = parse!(u64),
            "room_size" => self.env.room_size = parse!(usize),
            "episode_cap" => self.env.episode_cap = Some(parse!(u32)),
            "env_seed" => self.env.seed = parse!(u64),
            "variant" => {
                self.env.variant = match value {
                    "standard" => Variant::Standard,
                    "teleport_walls" => Variant::TeleportWalls,
                    "ghosts" => Variant::Ghosts,
                    "textured" => Variant::Textured,
                    _ => return Err(bad("unknown variant")),
                }
            }
            "lr" | "learning_rate" => self.learner.learning_rate = parse!(f64),
            "iterations" => self.learner.iterations = parse!(u32),
            "train_steps_per_iter" => self.learner.train_steps_per_iter = parse!(u32),
            "eval_steps_per_iter" => self.learner.eval_steps_per_iter = parse!(u32),
            "stop_at_return" => self.learner.stop_at_return = Some(parse!(f64)),
            "bonus" => {
                self.learner.bonus = match value {
                    "oracle" => BonusKind::Oracle,
                    "simhash" => BonusKind::SimHash,
                    _ => return Err(bad("expected oracle|simhash")),
                }
            }
            "method" => {
                self.method = Some(match value {
                    "mulex" => MethodParams::MuleX {
                        p_task: 0.7,
                        gamma_steps: 0.95,
                    },
                    "additive" => MethodParams::Additive { beta: 1.0 },
                    "epsilon_greedy" => MethodParams::EpsilonGreedy { epsilon: 0.05 },
                    _ => return Err(bad("unknown method")),
                })
            }
            "p_task" => match &mut self.method {
                Some(MethodParams::MuleX { p_task, .. }) => *p_task = parse!(f64),
                _ => return Err(bad("method is not mulex")),
            },
            "gamma_steps" => match &mut self.method {
                Some(MethodParams::MuleX { gamma_steps, .. })
                | Some(MethodParams::TwoTaskHeads { gamma_steps, .. }) => {
                    *gamma_steps = parse!(f64)
                }
                _ => return Err(bad("method has no gamma_steps")),
            },
            "beta" => match &mut self.method {
                Some(MethodParams::Additive { beta }) => *beta = parse!(f64),
                _ => return Err(bad("method is not additive")),
            },
            "epsilon" => match &mut self.method {
                Some(MethodParams::EpsilonGreedy { epsilon })
                | Some(MethodParams::TwoTaskHeads { epsilon, .. }) => *epsilon = parse!(f64),
                _ => return Err(bad("method has no epsilon")),
            },
            "n_trials" => {
                self.sweep
                    .as_mut()
                    .ok_or_else(|| bad("no sweep section"))?
                    .n_trials = parse!(usize)
            }
            "seeds_per_trial" => {
                self.sweep
                    .as_mut()
                    .ok_or_else(|| bad("no sweep section"))?
                    .seeds_per_trial = parse!(usize)
            }
            _ => return Err(CliError::Config(format!("unknown override key `{key}`"))),
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifest and output writing
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_digest: String,
    pub out_dir: String,
    pub files: Vec<ManifestFile>,
}

/// Collects emitted files and their hashes; writes manifest.json at the end.
pub struct OutputWriter {
    dir: PathBuf,
    files: Vec<ManifestFile>,
}

impl OutputWriter {
    pub fn new(dir: PathBuf) -> Result<OutputWriter, CliError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutputWriter {
            dir,
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("mkdir {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))?;
        self.record(rel, bytes);
        Ok(())
    }

    /// Note a file written through other means (e.g. checkpoint saver).
    pub fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.files.push(ManifestFile {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn finish(mut self, experiment: &str, config_digest: &str) -> Result<RunManifest, CliError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            experiment: experiment.to_string(),
            config_digest: config_digest.to_string(),
            out_dir: self.dir.display().to_string(),
            files: self.files,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.dir.join("manifest.json"), &json)
            .map_err(|e| CliError::Runtime(format!("write manifest: {e}")))?;
        Ok(manifest)
    }
}

// ---------------------------------------------------------------------------
// CSV / SVG emission
// ---------------------------------------------------------------------------

fn trial_curve_csv(record: &TrialRecord) -> String {
    let mut out = String::from("schema=trial_curve.v1\niteration,mean_return,auc_so_far\n");
    let mut acc = 0.0;
    for (i, &r) in record.returns.iter().enumerate() {
        acc += r;
        let _ = writeln!(out, "{},{r},{acc}", i + 1);
    }
    out
}

fn method_columns(m: &MethodParams) -> (String, String, String, String, String) {
    let blank = String::new();
    match m {
        MethodParams::MuleX { p_task, gamma_steps } => (
            "mulex".into(),
            p_task.to_string(),
            gamma_steps.to_string(),
            blank.clone(),
            blank,
        ),
        MethodParams::Additive { beta } => (
            "additive".into(),
            blank.clone(),
            blank.clone(),
            beta.to_string(),
            blank,
        ),
        MethodParams::EpsilonGreedy { epsilon } => (
            "epsilon_greedy".into(),
            blank.clone(),
            blank.clone(),
            blank,
            epsilon.to_string(),
        ),
        MethodParams::TwoTaskHeads {
            p1,
            gamma_steps,
            epsilon,
        } => (
            "two_task_heads".into(),
            p1.to_string(),
            gamma_steps.to_string(),
            blank,
            epsilon.to_string(),
        ),
    }
}

fn sweep_summary_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(
        "schema=sweep_summary.v1\nmethod,p_task,gamma_steps,beta,epsilon,learning_rate,seed,auc,normalized_auc,diverged,first_hit\n",
    );
    for r in records {
        let (m, p, g, b, e) = method_columns(&r.config.method);
        let hit = r.first_hit.map(|h| h.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{m},{p},{g},{b},{e},{},{},{},{},{},{hit}",
            r.config.learning_rate, r.config.seed, r.auc, r.normalized_auc, r.diverged
        );
    }
    out
}

fn violin_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("schema=violin_data.v1\nmethod,normalized_auc\n");
    for r in records {
        let _ = writeln!(out, "{},{}", r.config.method.name(), r.normalized_auc);
    }
    out
}

fn curves_csv(summary: &harness::SweepSummary) -> String {
    let mut out = String::from("schema=sweep_curves.v1\niteration,mean_all,mean_topk\n");
    for (i, (a, t)) in summary
        .mean_curve
        .iter()
        .zip(&summary.topk_curve)
        .enumerate()
    {
        let _ = writeln!(out, "{},{a},{t}", i + 1);
    }
    out
}

fn heatmap_cells_csv(cells: &[HeatmapCell]) -> String {
    let mut out = String::from("schema=heatmap_cells.v1\nrow,col,steps,optimal,reached\n");
    for c in cells {
        let opt = c.optimal.map(|o| o.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{opt},{}",
            c.state.agent_cell.0, c.state.agent_cell.1, c.steps, c.reached
        );
    }
    out
}

/// Full n-by-n grid; -1 marks cells that are not start states.
fn heatmap_grid_csv(cells: &[HeatmapCell], grid_side: usize) -> String {
    let mut grid = vec![vec![-1i64; grid_side]; grid_side];
    for c in cells {
        grid[c.state.agent_cell.0][c.state.agent_cell.1] = c.steps as i64;
    }
    let mut out = String::from("schema=heatmap_grid.v1\n");
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Minimal self-contained line plot.
fn svg_line_plot(title: &str, y_max: f64, curves: &[(&str, &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>",
        W / 2.0
    );
    // Axes.
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>",
        H - M
    );
    let x_of = |i: usize| {
        if n <= 1 {
            M
        } else {
            M + (W - 2.0 * M) * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| H - M - (H - 2.0 * M) * (v / y_max).clamp(0.0, 1.0);
    for (ci, (label, curve)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>",
            W - M + 4.0 - 120.0,
            M + 16.0 * ci as f64
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">iteration</text>",
        W / 2.0,
        H - 12.0
    );
    s.push_str("</svg>\n");
    s
}

/// Wall-clock varies run to run; keep emitted artifacts reproducible.
fn sanitized(record: &TrialRecord) -> TrialRecord {
    let mut r = record.clone();
    r.wall_clock_secs = 0.0;
    r
}

// ---------------------------------------------------------------------------
// Command-line interface
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Configuration / validation problems: exit code 2.
    Config(String),
    /// Everything else: exit code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<harness::HarnessError> for CliError {
    fn from(e: harness::HarnessError) -> CliError {
        match e {
            harness::HarnessError::BadConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mulex", about = "Multi-head exploration RL laboratory", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. --override lr=1e-4 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root; defaults to config, then $MULEX_OUT_DIR, then ./out.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for parallel trials.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one agent and write its learning curve and checkpoint.
    Train(CommonArgs),
    /// Random hyperparameter search with per-trial records and summaries.
    Sweep(CommonArgs),
    /// Start-state robustness map for a trained checkpoint.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Two-task-head acting-probability ablation.
    Offpolicy(CommonArgs),
    /// Print the mean greedy return of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: u32,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn effective_config(common: &CommonArgs) -> Result<ConfigFile, CliError> {
    let mut cfg = ConfigFile::load(&common.config)?;
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.workers {
        // Ignored if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &ConfigFile) -> PathBuf {
    let root = common
        .out_dir
        .clone()
        .or_else(|| cfg.outputs.dir.clone().map(PathBuf::from))
        .or_else(|| std::env::var(ENV_OUT_DIR).ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    root.join(&cfg.experiment)
}

fn cmd_train(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    let trial_cfg = cfg.trial_config()?;
    trial_cfg.validate()?;
    let digest = cfg.digest();
    let mut writer = OutputWriter::new(out_dir(common, &cfg))?;
    let (record, net) = harness::run_trial_full(&trial_cfg)?;
    writer.write("trial_curve.csv", trial_curve_csv(&record).as_bytes())?;
    writer.write(
        "record.json",
        serde_json::to_string_pretty(&sanitized(&record))
            .expect("record serializes")
            .as_bytes(),
    )?;
    let ckpt_path = writer.dir().join("checkpoint.bin");
    save_checkpoint(&net, &ckpt_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let ckpt_bytes =
        std::fs::read(&ckpt_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    writer.record("checkpoint.bin", &ckpt_bytes);
    writer.write(
        "curve.svg",
        svg_line_plot(
            "mean evaluation return",
            harness::IDEAL_RETURN,
            &[("return", &record.returns)],
        )
        .as_bytes(),
    )?;
    writer.finish(&cfg.experiment, &digest)?;
    println!(
        "trial done: auc={:.3} normalized_auc={:.3} diverged={} wall_clock={:.1}s",
        record.auc, record.normalized_auc, record.diverged, record.wall_clock_secs
    );
    Ok(())
}

fn cmd_sweep(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    let spec = cfg.search_spec()?;
    let digest = cfg.digest();
    let dir = out_dir(common, &cfg);
    std::fs::create_dir_all(dir.join("trials"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let configs = harness::search_configs(&spec);
    // Resume: trials whose record file already exists are not re-run.
    let records: Vec<TrialRecord> = configs
        .par_iter()
        .enumerate()
        .map(|(i, tc)| -> Result<TrialRecord, CliError> {
            let path = dir.join(format!("trials/trial_{i:04}.json"));
            if let Ok(text) = std::fs::read_to_string(&path) {
                if let Ok(record) = serde_json::from_str::<TrialRecord>(&text) {
                    if &record.config == tc {
                        return Ok(record);
                    }
                }
            }
            let record = sanitized(&harness::run_trial(tc)?);
            let json =
                serde_json::to_string_pretty(&record).expect("record serializes");
            std::fs::write(&path, json).map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(record)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut writer = OutputWriter::new(dir)?;
    for (i, record) in records.iter().enumerate() {
        let rel = format!("trials/trial_{i:04}.json");
        let bytes = std::fs::read(writer.dir().join(&rel))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        writer.record(&rel, &bytes);
        writer.write(
            &format!("trials/trial_{i:04}.csv"),
            trial_curve_csv(record).as_bytes(),
        )?;
    }
    let summary = harness::summarize(&records, spec.iterations as usize);
    writer.write("sweep_summary.csv", sweep_summary_csv(&records).as_bytes())?;
    writer.write("violin_data.csv", violin_csv(&records).as_bytes())?;
    writer.write("sweep_curves.csv", curves_csv(&summary).as_bytes())?;
    writer.write(
        "sweep_curves.svg",
        svg_line_plot(
            &format!("{} sweep", spec.method.name()),
            harness::IDEAL_RETURN,
            &[
                ("mean of all", summary.mean_curve.as_slice()),
                ("mean of top-k", summary.topk_curve.as_slice()),
            ],
        )
        .as_bytes(),
    )?;
    writer.finish(&cfg.experiment, &digest)?;
    println!(
        "sweep done: {} records, normalized AUC min={:.3} median={:.3} max={:.3}",
        records.len(),
        summary.min_normalized_auc,
        summary.median_normalized_auc,
        summary.max_normalized_auc
    );
    Ok(())
}

fn load_checked_net(
    checkpoint: &Path,
    env: &EnvConfig,
) -> Result<QNetwork<f32>, CliError> {
    let net: QNetwork<f32> =
        load_checkpoint(checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let (rows, cols) = Env::frame_shape(env);
    let expected = (4, rows, cols);
    if net.spec().input != expected {
        return Err(CliError::Config(format!(
            "checkpoint input {:?} does not match environment frames {:?}",
            net.spec().input,
            expected
        )));
    }
    Ok(net)
}

fn cmd_heatmap(checkpoint: &Path, common: &CommonArgs) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    let env_cfg = cfg.env.to_env_config();
    env_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let net = load_checked_net(checkpoint, &env_cfg)?;
    let digest = cfg.digest();
    let mut writer = OutputWriter::new(out_dir(common, &cfg))?;
    let cells = harness::heatmap_experiment(&net, &env_cfg)?;
    let grid_side = 2 * env_cfg.room_size + 3;
    writer.write("heatmap_grid.csv", heatmap_grid_csv(&cells, grid_side).as_bytes())?;
    writer.write("heatmap_cells.csv", heatmap_cells_csv(&cells).as_bytes())?;
    writer.finish(&cfg.experiment, &digest)?;
    let reached = cells.iter().filter(|c| c.reached).count();
    println!("heatmap done: {}/{} start states reach the goal", reached, cells.len());
    Ok(())
}

fn cmd_offpolicy(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    let section = cfg.offpolicy.clone().unwrap_or_default();
    let digest = cfg.digest();
    let base = TrialConfig {
        method: MethodParams::TwoTaskHeads {
            p1: 0.5,
            gamma_steps: section.gamma_steps,
            epsilon: section.epsilon,
        },
        env: cfg.env.to_env_config(),
        learning_rate: cfg.learner.learning_rate,
        iterations: cfg.learner.iterations,
        train_steps_per_iter: cfg.learner.train_steps_per_iter,
        eval_steps_per_iter: cfg.learner.eval_steps_per_iter,
        seed: cfg.seed,
        bonus: BonusKind::Oracle,
        stop_at_return: None,
        prioritized_task: false,
    };
    base.validate()?;
    let mut writer = OutputWriter::new(out_dir(common, &cfg))?;
    let results = harness::offpolicy_experiment(&section.p1_values, &base)?;
    let mut labels: Vec<String> = Vec::new();
    for (p1, record) in &results {
        writer.write(
            &format!("offpolicy_p1_{p1}.csv"),
            trial_curve_csv(record).as_bytes(),
        )?;
        labels.push(format!("p1={p1}"));
    }
    let curves: Vec<(&str, &[f64])> = results
        .iter()
        .zip(&labels)
        .map(|((_, r), l)| (l.as_str(), r.returns.as_slice()))
        .collect();
    writer.write(
        "offpolicy_curves.svg",
        svg_line_plot("policy 1 evaluation return", harness::IDEAL_RETURN, &curves).as_bytes(),
    )?;
    writer.finish(&cfg.experiment, &digest)?;
    for (p1, record) in &results {
        println!("p1={p1}: final return {:.3}", record.final_return());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, episodes: u32, common: &CommonArgs) -> Result<(), CliError> {
    let cfg = effective_config(common)?;
    let env_cfg = cfg.env.to_env_config();
    env_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let net = load_checked_net(checkpoint, &env_cfg)?;
    let mut env = Env::new(env_cfg.clone()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut total = 0.0f64;
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut ep = 0.0f64;
        loop {
            let a = crate::actor::eval_action(&net, &obs, 0)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let (next_obs, outcome, _) =
                env.step(a).map_err(|e| CliError::Runtime(e.to_string()))?;
            ep += outcome.reward as f64;
            if outcome.done {
                break;
            }
            obs = next_obs;
        }
        total += ep;
    }
    println!("mean greedy return over {episodes} episodes: {}", total / episodes as f64);
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Heatmap { checkpoint, common } => cmd_heatmap(checkpoint, common),
        Command::Offpolicy(c) => cmd_offpolicy(c),
        Command::Eval {
            checkpoint,
            episodes,
            common,
        } => cmd_eval(checkpoint, *episodes, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
