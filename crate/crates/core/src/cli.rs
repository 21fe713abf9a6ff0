//! Command-line front end: argument types, the run manifest and one function
//! per subcommand. The binary only parses arguments and maps errors to exit codes.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{
    converged, evaluate_from, read_metrics, train, AgentConfig, Converged, EpisodeMetrics,
    GreedyPolicy, Td3Agent,
};
use crate::approximator::{Archive, ExtractorKind};
use crate::dataio::{market_to_series, synth_scenario, write_series, SynthProfile};
use crate::domain::{Scenario, SCENARIO_HEADER};
use crate::error::{Error, Result};
use crate::market_env::{write_trace, FixedActions};
use crate::oracle::{certify, dp_optimal, DpLimits, GridSpec};
use crate::penalty::PenaltyState;

pub const OUT_ENV: &str = "DRLAB_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.drla";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";

#[derive(Debug, Parser)]
#[command(name = "drlab", version, about = "Demand-response pricing lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent per seed and write logs, checkpoints and traces.
    Train(TrainArgs),
    /// Roll out a checkpoint's greedy policy.
    Evaluate(EvaluateArgs),
    /// Compare a policy with the dynamic-programming optimum on a short episode.
    Certify(CertifyArgs),
    /// Train over a list of penalty step sizes and tabulate the outcome.
    Sensitivity(SensitivityArgs),
    /// Aggregate run directories into plot-ready tables.
    Export(ExportArgs),
    /// Write a synthetic scenario file with its series files.
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Train(_) => "train",
            Self::Evaluate(_) => "evaluate",
            Self::Certify(_) => "certify",
            Self::Sensitivity(_) => "sensitivity",
            Self::Export(_) => "export",
            Self::Synth(_) => "synth",
        }
    }
}

/// Episode window and observation lengths applied on top of a scenario.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct WindowArgs {
    /// First period of the episode, relative to the scenario's episode.
    #[arg(long)]
    pub start_hour: Option<usize>,
    /// Episode length in periods.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Keep only the first N users.
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub t_his: Option<usize>,
    #[arg(long)]
    pub t_pre: Option<usize>,
}

impl WindowArgs {
    fn apply(&self, s: Scenario) -> Result<Scenario> {
        let mut s = if self.start_hour.is_some() || self.horizon.is_some() || self.users.is_some()
        {
            let offset = self.start_hour.unwrap_or(0);
            let horizon = self.horizon.unwrap_or(s.horizon.saturating_sub(offset));
            s.window(offset, horizon, self.users.unwrap_or(s.users.len()))?
        } else {
            s
        };
        if let Some(h) = self.t_his {
            s.t_his = h;
        }
        if let Some(p) = self.t_pre {
            s.t_pre = p;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "synth")]
    pub scenario: Option<PathBuf>,
    /// Synthetic scenario profile; the default when no file is given.
    #[arg(long)]
    pub synth: Option<SynthProfile>,
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Disable the satisfaction penalty.
    #[arg(long)]
    pub penalty_off: bool,
    /// Restore the initial penalty coefficients at every reset.
    #[arg(long)]
    pub reset_penalty: bool,
}

impl ScenarioArgs {
    pub fn resolve(&self) -> Result<Scenario> {
        let base = match &self.scenario {
            Some(path) => Scenario::from_toml_file(path)?,
            None => synth_scenario(self.synth_seed, self.synth.unwrap_or(SynthProfile::Winter)),
        };
        let mut s = self.window.apply(base)?;
        if self.penalty_off {
            s.penalty.enabled = false;
        }
        if self.reset_penalty {
            s.penalty.persist_across_episodes = false;
        }
        s.validated()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct AgentArgs {
    /// Agent configuration file (TOML); flags below override it.
    #[arg(long)]
    pub agent_config: Option<PathBuf>,
    #[arg(long)]
    pub extractor: Option<ExtractorKind>,
    /// Total environment steps per run.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr_actor: Option<f64>,
    #[arg(long)]
    pub lr_critic: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub reward_scale: Option<f64>,
    /// Greedy evaluation cadence in episodes (0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

impl AgentArgs {
    pub fn resolve(&self) -> Result<AgentConfig> {
        let mut cfg = match &self.agent_config {
            Some(p) => toml::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?,
            None => AgentConfig::default(),
        };
        if let Some(x) = self.extractor {
            cfg.extractor = x;
        }
        if let Some(x) = self.steps {
            cfg.total_steps = x;
        }
        if let Some(x) = self.warmup {
            cfg.warmup_steps = x;
        }
        if let Some(x) = self.lr_actor {
            cfg.lr_actor = x;
        }
        if let Some(x) = self.lr_critic {
            cfg.lr_critic = x;
        }
        if let Some(x) = self.batch {
            cfg.batch = x;
        }
        if let Some(x) = self.reward_scale {
            cfg.reward_scale = x;
        }
        if let Some(x) = self.eval_every {
            cfg.eval_every = x;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct SeedArgs {
    /// Number of seeds.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
}

impl SeedArgs {
    fn list(&self) -> Result<Vec<u64>> {
        if self.seeds == 0 {
            return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
        }
        Ok((self.first_seed..self.first_seed + self.seeds).collect())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub agent: AgentArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    /// Output directory; defaults to a hash-named directory under $DRLAB_OUT or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Re-run an existing manifest instead of building one from flags.
    #[arg(long, conflicts_with_all = ["scenario", "synth"])]
    pub manifest: Option<PathBuf>,
    /// Run only this seed of the manifest.
    #[arg(long, requires = "manifest")]
    pub only_seed: Option<u64>,
    /// Worker processes, one seed each.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    /// Start from the scenario's initial penalty coefficients instead of the checkpoint's.
    #[arg(long)]
    pub initial_penalty: bool,
    /// Write the trace and summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long, required_unless_present = "oracle_replay")]
    pub checkpoint: Option<PathBuf>,
    /// Certify the oracle's own action sequence.
    #[arg(long)]
    pub oracle_replay: bool,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 3)]
    pub grid_price: usize,
    #[arg(long, default_value_t = 3)]
    pub grid_battery: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub agent: AgentArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    /// Comma-separated `eta_lin:eta_sqr` pairs, e.g. `5:1,5:5`.
    #[arg(long, value_parser = parse_pairs)]
    pub pairs: Option<PairList>,
    /// Initial coefficients `beta_lin:beta_sqr`; the scenario's when absent.
    #[arg(long, value_parser = parse_pair)]
    pub beta0: Option<(f64, f64)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory written by `train` or `sensitivity`.
    #[arg(long)]
    pub from: PathBuf,
    /// Destination; defaults to `<from>/export`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub profile: SynthProfile,
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
    #[command(flatten)]
    pub window: WindowArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairList(pub Vec<(f64, f64)>);

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected 'a:b', got '{s}'"))?;
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}"));
    Ok((num(a)?, num(b)?))
}

fn parse_pairs(s: &str) -> std::result::Result<PairList, String> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(parse_pair)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(PairList)
}

/// Everything needed to regenerate a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub scenario: ScenarioArgs,
    /// Resolved scenario stored next to the manifest.
    pub scenario_file: String,
    /// Content hash of `scenario_file`.
    pub scenario_hash: String,
    pub agent: AgentConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<(f64, f64)>,
    pub out_dir: PathBuf,
}

impl RunManifest {
    /// Hash of everything except the output directory.
    pub fn id(&self) -> String {
        let mut m = self.clone();
        m.out_dir = PathBuf::new();
        content_hash(serde_json::to_string(&m).unwrap_or_default().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.into()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Loads the scenario stored beside a manifest and checks its hash.
    fn scenario_beside(&self, manifest_dir: &Path) -> Result<Scenario> {
        let path = manifest_dir.join(&self.scenario_file);
        let text = fs::read(&path)?;
        let h = content_hash(&text);
        if h != self.scenario_hash {
            return Err(Error::InvalidArgument(format!(
                "{} hash {h} does not match the manifest ({})",
                path.display(),
                self.scenario_hash
            )));
        }
        Scenario::from_toml_file(&path)?.validated()
    }
}

/// SHA-256 over a git-style blob header (`blob <len>\0`) and the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// 2 for invalid input, 3 for a search guard, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::InvalidArgument(_)
        | Error::ScenarioFile(_)
        | Error::Series { .. }
        | Error::Calendar(_) => 2,
        Error::Guard(_) => 3,
        _ => 1,
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
}

fn json_string<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.into()))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Builds the manifest, writes it with the resolved scenario and returns both.
fn start_run(
    command: &str,
    scenario_args: &ScenarioArgs,
    agent: AgentConfig,
    seeds: Vec<u64>,
    pairs: Option<Vec<(f64, f64)>>,
    beta0: Option<(f64, f64)>,
    out: Option<&Path>,
) -> Result<(RunManifest, Scenario)> {
    let scenario = scenario_args.resolve()?;
    let mut text = String::from(SCENARIO_HEADER);
    text.push_str(&scenario.to_toml_string()?);
    let mut m = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: scenario_args.clone(),
        scenario_file: SCENARIO_FILE.into(),
        scenario_hash: content_hash(text.as_bytes()),
        agent,
        seeds,
        pairs,
        beta0,
        out_dir: PathBuf::new(),
    };
    m.out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => out_root().join(format!("{command}-{}", &m.id()[..12])),
    };
    fs::create_dir_all(&m.out_dir)?;
    fs::write(m.out_dir.join(SCENARIO_FILE), &text)?;
    m.write(&m.out_dir)?;
    Ok((m, scenario))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub manifest: String,
    pub seed: u64,
    pub episodes: usize,
    pub converged: Option<Converged>,
    /// Greedy return of the final policy from the final penalty coefficients.
    pub final_return: f64,
    pub final_c_ave: f64,
}

/// Trains one seed into `dir`: metrics log, checkpoint, greedy trace and summary.
pub fn run_seed(
    manifest: &RunManifest,
    scenario: &Scenario,
    cfg: &AgentConfig,
    seed: u64,
    dir: &Path,
) -> Result<SeedSummary> {
    fs::create_dir_all(dir)?;
    let mut log = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    let outcome = train(scenario, cfg.clone(), seed, Some(&mut log))?;
    log.flush()?;
    let mut ckpt = outcome.agent.to_archive(Some(&outcome.penalty))?;
    ckpt.meta.insert("manifest".into(), manifest.id());
    ckpt.meta.insert("seed".into(), seed.to_string());
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    let eval = evaluate_from(&outcome.agent, scenario, 1, outcome.penalty)?;
    write_trace(fs::File::create(dir.join(TRACE_FILE))?, &eval.traces[0])?;
    let summary = SeedSummary {
        manifest: manifest.id(),
        seed,
        episodes: outcome.metrics.len(),
        converged: converged(&outcome.metrics),
        final_return: eval.mean_return,
        final_c_ave: eval.mean_c_ave,
    };
    fs::write(dir.join(SUMMARY_FILE), json_string(&summary)? + "\n")?;
    Ok(summary)
}

fn print_summaries(rows: &[SeedSummary]) {
    println!("seed  episodes  conv_return  conv_sd  conv_c_ave  final_return  final_c_ave");
    for r in rows {
        let c = r.converged.unwrap_or(Converged {
            episodes: 0,
            mean_return: f64::NAN,
            return_sd: f64::NAN,
            c_ave: f64::NAN,
            penalty: f64::NAN,
        });
        println!(
            "{:<5} {:<9} {:<12.3} {:<8.3} {:<11.3} {:<13.3} {:.3}",
            r.seed, r.episodes, c.mean_return, c.return_sd, c.c_ave, r.final_return, r.final_c_ave
        );
    }
}

/// Runs `seeds` either in this process or in `jobs` worker processes of the
/// current executable, each re-reading the manifest.
fn run_seeds(m: &RunManifest, scenario: &Scenario, seeds: &[u64], jobs: usize, quiet: bool) -> Result<()> {
    if jobs <= 1 {
        let mut rows = Vec::new();
        for &seed in seeds {
            rows.push(run_seed(m, scenario, &m.agent, seed, &seed_dir(&m.out_dir, seed))?);
        }
        if !quiet {
            print_summaries(&rows);
        }
        return Ok(());
    }
    let exe = std::env::current_exe()?;
    let manifest_path = m.out_dir.join(MANIFEST_FILE);
    for chunk in seeds.chunks(jobs) {
        let children = chunk
            .iter()
            .map(|seed| {
                Process::new(&exe)
                    .arg("train")
                    .arg("--manifest")
                    .arg(&manifest_path)
                    .arg("--only-seed")
                    .arg(seed.to_string())
                    .spawn()
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        for (mut child, seed) in children.into_iter().zip(chunk) {
            let status = child.wait()?;
            if !status.success() {
                return Err(Error::InvalidArgument(format!("worker for seed {seed} failed: {status}")));
            }
        }
    }
    let rows = seeds
        .iter()
        .map(|&s| {
            let text = fs::read_to_string(seed_dir(&m.out_dir, s).join(SUMMARY_FILE))?;
            serde_json::from_str(&text).map_err(|e| Error::Io(e.into()))
        })
        .collect::<Result<Vec<SeedSummary>>>()?;
    print_summaries(&rows);
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    if let Some(path) = &args.manifest {
        let mut m = RunManifest::load(path)?;
        if m.command != "train" {
            return Err(Error::InvalidArgument(format!(
                "manifest was written by '{}', not 'train'",
                m.command
            )));
        }
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let scenario = m.scenario_beside(dir)?;
        let seeds: Vec<u64> = match args.only_seed {
            Some(s) if m.seeds.contains(&s) => vec![s],
            Some(s) => {
                return Err(Error::InvalidArgument(format!("seed {s} is not in the manifest")))
            }
            None => m.seeds.clone(),
        };
        if let Some(out) = &args.out {
            if out.as_path() != dir {
                fs::create_dir_all(out)?;
                fs::copy(dir.join(&m.scenario_file), out.join(&m.scenario_file))?;
                m.out_dir = out.clone();
                m.write(out)?;
            }
        } else {
            m.out_dir = dir.to_path_buf();
        }
        let worker = args.only_seed.is_some();
        return run_seeds(&m, &scenario, &seeds, if worker { 1 } else { args.jobs }, worker);
    }
    let cfg = args.agent.resolve()?;
    let seeds = args.seeds.list()?;
    let (m, scenario) = start_run(
        "train",
        &args.scenario,
        cfg,
        seeds.clone(),
        None,
        None,
        args.out.as_deref(),
    )?;
    println!("manifest {} -> {}", m.id(), m.out_dir.display());
    run_seeds(&m, &scenario, &seeds, args.jobs, false)
}

fn load_checkpoint(path: &Path) -> Result<(Td3Agent, Option<PenaltyState>)> {
    let a = Archive::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Archive(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let seed = a.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    Td3Agent::from_archive(&a, seed)
}

fn check_seq_len(agent: &Td3Agent, s: &Scenario) -> Result<()> {
    if agent.seq_len() != s.seq_len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint expects t_his + t_pre = {}, scenario has {}",
            agent.seq_len(),
            s.seq_len()
        )));
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let scenario = args.scenario.resolve()?;
    let (agent, saved) = load_checkpoint(&args.checkpoint)?;
    check_seq_len(&agent, &scenario)?;
    let penalty = match saved {
        Some(p) if !args.initial_penalty => PenaltyState { cfg: scenario.penalty, ..p },
        _ => PenaltyState::new(scenario.penalty),
    };
    let e = evaluate_from(&agent, &scenario, args.episodes, penalty)?;
    println!("episodes {}  mean_return {:.4}  mean_c_ave {:.4}", args.episodes.max(1), e.mean_return, e.mean_c_ave);
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_trace(fs::File::create(out.join(TRACE_FILE))?, &e.traces[0])?;
        let summary = serde_json::json!({
            "checkpoint": args.checkpoint,
            "episodes": args.episodes.max(1),
            "mean_return": e.mean_return,
            "mean_c_ave": e.mean_c_ave,
        });
        fs::write(out.join(SUMMARY_FILE), json_string(&summary)? + "\n")?;
    }
    Ok(())
}

/// The short episode certification uses when no window is given.
pub fn default_certify_window() -> WindowArgs {
    WindowArgs {
        start_hour: Some(12),
        horizon: Some(4),
        users: Some(1),
        t_his: Some(4),
        t_pre: Some(4),
    }
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<()> {
    let mut sargs = args.scenario.clone();
    if sargs.scenario.is_none() && sargs.window == WindowArgs::default() {
        sargs.window = default_certify_window();
    }
    let scenario = sargs.resolve()?;
    let grid = GridSpec::new(args.grid_price, args.grid_battery);
    let limits = DpLimits::default();
    let report = if args.oracle_replay {
        let o = dp_optimal(&scenario, &grid, &limits)?;
        certify(&mut FixedActions(o.best_actions), &scenario, &grid, &limits)?
    } else {
        let path = args.checkpoint.as_ref().expect("clap requires a checkpoint");
        let (agent, _) = load_checkpoint(path)?;
        check_seq_len(&agent, &scenario)?;
        certify(&mut GreedyPolicy(&agent), &scenario, &grid, &limits)?
    };
    println!(
        "ratio {:.6}  agent_return {:.4}  oracle_value {:.4}",
        report.ratio, report.agent_return, report.oracle.best_value
    );
    println!("t   agent_price  oracle_price  agent_p_b  oracle_p_b  agent_reward  oracle_reward");
    for (a, o) in report.agent_trace.iter().zip(&report.oracle.trace) {
        println!(
            "{:<3} {:<12.5} {:<13.5} {:<10.3} {:<11.3} {:<13.4} {:.4}",
            a.t, a.price, o.price, a.p_b, o.p_b, a.reward, o.reward
        );
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_trace(fs::File::create(out.join("agent_trace.csv"))?, &report.agent_trace)?;
        write_trace(fs::File::create(out.join("oracle_trace.csv"))?, &report.oracle.trace)?;
        let summary = serde_json::json!({
            "ratio": report.ratio,
            "agent_return": report.agent_return,
            "oracle_value": report.oracle.best_value,
            "oracle_actions": report.oracle.best_actions.iter().map(|a| [a.a1, a.a2]).collect::<Vec<_>>(),
        });
        fs::write(out.join(SUMMARY_FILE), json_string(&summary)? + "\n")?;
    }
    Ok(())
}

/// One row of the sensitivity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub eta_lin: f64,
    pub eta_sqr: f64,
    pub seed: u64,
    pub c_ave: f64,
    #[serde(rename = "return")]
    pub mean_return: f64,
    pub penalty: f64,
}

fn pair_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("pair-{i}"))
}

pub fn cmd_sensitivity(args: &SensitivityArgs) -> Result<()> {
    let pairs = args.pairs.as_ref().map(|p| p.0.clone()).unwrap_or_default();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("--pairs needs at least one eta_lin:eta_sqr pair".into()));
    }
    let cfg = args.agent.resolve()?;
    let seeds = args.seeds.list()?;
    let (m, base) = start_run(
        "sensitivity",
        &args.scenario,
        cfg,
        seeds.clone(),
        Some(pairs.clone()),
        args.beta0,
        args.out.as_deref(),
    )?;
    println!("manifest {} -> {}", m.id(), m.out_dir.display());
    let mut rows = Vec::new();
    for (i, &(eta_lin, eta_sqr)) in pairs.iter().enumerate() {
        let mut s = base.clone();
        s.penalty.eta_lin = eta_lin;
        s.penalty.eta_sqr = eta_sqr;
        if let Some((bl, bs)) = args.beta0 {
            s.penalty.beta_lin0 = bl;
            s.penalty.beta_sqr0 = bs;
        }
        let s = s.validated()?;
        for &seed in &seeds {
            let dir = seed_dir(&pair_dir(&m.out_dir, i), seed);
            let summary = run_seed(&m, &s, &m.agent, seed, &dir)?;
            let c = summary.converged.ok_or_else(|| {
                Error::InvalidArgument("no episode finished; raise --steps".into())
            })?;
            rows.push(SensitivityRow {
                eta_lin,
                eta_sqr,
                seed,
                c_ave: c.c_ave,
                mean_return: c.mean_return,
                penalty: c.penalty,
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.eta_lin, a.eta_sqr)
            .partial_cmp(&(b.eta_lin, b.eta_sqr))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.seed.cmp(&b.seed))
    });
    let mut w = csv::Writer::from_path(m.out_dir.join(SENSITIVITY_FILE)).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    println!("eta_lin  eta_sqr  seed  c_ave    return      penalty");
    for r in &rows {
        println!(
            "{:<8} {:<8} {:<5} {:<8.3} {:<11.3} {:.3}",
            r.eta_lin, r.eta_sqr, r.seed, r.c_ave, r.mean_return, r.penalty
        );
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Seed directories below `dir` holding a metrics log, in path order.
fn find_seed_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join(METRICS_FILE).is_file() {
            found.push(d.clone());
        }
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() && !p.ends_with("export") {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

pub const CURVE_COLUMNS: [&str; 5] = ["return", "c_ave", "eval_return", "eval_c_ave", "penalty"];

/// Training curves across runs: for every episode index present in all runs,
/// mean, min and max of each curve column. Columns without values are empty.
pub fn curve_table(runs: &[Vec<EpisodeMetrics>]) -> Vec<Vec<String>> {
    let mut header = vec!["episode".to_string(), "runs".to_string()];
    for c in CURVE_COLUMNS {
        for s in ["mean", "min", "max"] {
            header.push(format!("{c}_{s}"));
        }
    }
    header.push("beta_lin_mean".into());
    header.push("beta_sqr_mean".into());
    let mut rows = vec![header];
    let n = runs.iter().map(Vec::len).min().unwrap_or(0);
    for ep in 0..n {
        let at: Vec<&EpisodeMetrics> = runs.iter().map(|r| &r[ep]).collect();
        let mut row = vec![ep.to_string(), at.len().to_string()];
        let cols: [Vec<f64>; 5] = [
            at.iter().map(|m| m.episode_return).collect(),
            at.iter().map(|m| m.c_ave).collect(),
            at.iter().filter_map(|m| m.eval_return).collect(),
            at.iter().filter_map(|m| m.eval_c_ave).collect(),
            at.iter().map(|m| m.penalty).collect(),
        ];
        for xs in &cols {
            match Band::of(xs) {
                Some(b) if xs.len() == at.len() => {
                    row.extend([b.mean, b.min, b.max].map(|v| v.to_string()))
                }
                _ => row.extend(std::iter::repeat(String::new()).take(3)),
            }
        }
        let mean = |f: fn(&EpisodeMetrics) -> f64| at.iter().map(|m| f(m)).sum::<f64>() / at.len() as f64;
        row.push(mean(|m| m.beta_lin).to_string());
        row.push(mean(|m| m.beta_sqr).to_string());
        rows.push(row);
    }
    rows
}

fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean, min and max of the sensitivity columns per step-size pair.
pub fn sensitivity_grid(rows: &[SensitivityRow]) -> Vec<Vec<String>> {
    let mut out = vec![[
        "eta_lin", "eta_sqr", "runs", "c_ave_mean", "c_ave_min", "c_ave_max", "return_mean",
        "return_min", "return_max", "penalty_mean",
    ]
    .map(String::from)
    .to_vec()];
    let mut i = 0;
    while i < rows.len() {
        let key = (rows[i].eta_lin, rows[i].eta_sqr);
        let group: Vec<&SensitivityRow> = rows[i..]
            .iter()
            .take_while(|r| (r.eta_lin, r.eta_sqr) == key)
            .collect();
        i += group.len();
        let c = Band::of(&group.iter().map(|r| r.c_ave).collect::<Vec<_>>()).unwrap();
        let r = Band::of(&group.iter().map(|r| r.mean_return).collect::<Vec<_>>()).unwrap();
        let p = group.iter().map(|r| r.penalty).sum::<f64>() / group.len() as f64;
        out.push(
            [key.0, key.1, group.len() as f64, c.mean, c.min, c.max, r.mean, r.min, r.max, p]
                .map(|v| v.to_string())
                .to_vec(),
        );
    }
    out
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let dirs = find_seed_dirs(&args.from)?;
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {METRICS_FILE} below {}",
            args.from.display()
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.from.join("export"));
    fs::create_dir_all(&out)?;

    // Sensitivity runs are grouped per pair directory; plain runs form one group.
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for d in &dirs {
        let parent = d.parent().unwrap_or(&args.from);
        let label = parent
            .strip_prefix(&args.from)
            .ok()
            .and_then(|p| p.to_str())
            .filter(|s| !s.is_empty())
            .map_or_else(String::new, |s| s.replace(std::path::MAIN_SEPARATOR, "_"));
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(d.clone()),
            None => groups.push((label, vec![d.clone()])),
        }
    }
    for (label, members) in &groups {
        let runs = members
            .iter()
            .map(|d| read_metrics(BufReader::new(fs::File::open(d.join(METRICS_FILE))?)))
            .collect::<Result<Vec<_>>>()?;
        let name = if label.is_empty() { "curves.csv".to_string() } else { format!("curves_{label}.csv") };
        write_rows(&out.join(name), &curve_table(&runs))?;
    }
    for d in &dirs {
        let trace = d.join(TRACE_FILE);
        if trace.is_file() {
            let rel = d.strip_prefix(&args.from).unwrap_or(d);
            let tag = rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "_");
            fs::copy(&trace, out.join(format!("decisions_{tag}.csv")))?;
        }
    }
    let sens = args.from.join(SENSITIVITY_FILE);
    if sens.is_file() {
        let mut r = csv::Reader::from_path(&sens).map_err(csv_err)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<SensitivityRow>, _>>()
            .map_err(csv_err)?;
        write_rows(&out.join("sensitivity_grid.csv"), &sensitivity_grid(&rows))?;
    }
    println!("exported {} run(s) to {}", dirs.len(), out.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let s = args
        .window
        .apply(synth_scenario(args.synth_seed, args.profile))?
        .validated()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("synth-{}-{}", args.profile, args.synth_seed)));
    fs::create_dir_all(&out)?;
    let day = match args.profile {
        SynthProfile::Winter => "2024-01-14",
        SynthProfile::Summer => "2024-10-04",
    };
    let first = chrono::NaiveDate::parse_from_str(day, "%Y-%m-%d")
        .expect("fixed date")
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    let (pv, price) = market_to_series(&s, first);
    write_series(&out.join("pv.csv"), "pv", &pv)?;
    write_series(&out.join("price.csv"), "dso_price", &price)?;

    let mut doc: toml::Table = toml::from_str(&s.to_toml_string()?)
        .map_err(|e| Error::ScenarioFile(e.to_string()))?;
    let mut market = toml::Table::new();
    market.insert("pv_file".into(), "pv.csv".into());
    market.insert("price_file".into(), "price.csv".into());
    doc.insert("market".into(), toml::Value::Table(market));
    let mut body = String::from(SCENARIO_HEADER);
    body.push_str(&toml::to_string(&doc).map_err(|e| Error::ScenarioFile(e.to_string()))?);
    let path = out.join(SCENARIO_FILE);
    fs::write(&path, body)?;
    // Reload through the file path so a broken reference fails here, not later.
    Scenario::from_toml_file(&path)?.validated()?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Export(a) => cmd_export(a),
        Command::Synth(a) => cmd_synth(a),
    }
}
