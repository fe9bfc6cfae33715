//! Command-line pipeline: collect, label, train, self-play, evaluate, and
//! inspect, with every run's artifacts and manifest under one directory.
//!
//! Setting precedence is flags > environment variables > config file >
//! built-in defaults. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actor::{Actor, ChatActor, ScriptedActor};
use crate::chat::{ChatServiceClient, ChatStrategist};
use crate::envs::{generate_scenarios, vocabulary, EnvError, ScenarioSplit};
use crate::eval::{
    config_matrix, evaluate, matrix_csv, EvalConfig, EvalError, EvalReport, SideConfig,
};
use crate::model::{Trajectory, ValidationError};
use crate::policy::{BackendError, ContextSoftmaxPolicy, Decoding, PolicyBackend};
use crate::prompts::TemplateSet;
use crate::reward::{label_batch, ChatPrm, LabelOutcome, OraclePrm, ProcessRewardModel, RewardMode};
use crate::rollout::{run_batch, RolloutConfig};
use crate::store::{read_trajectories, StoreError, TrajectoryWriter};
use crate::train::{self_play_rl, train_iteration, LrSchedule, TrainConfig, TrainError};

/// Environment variables configuring the chat backend.
pub const CHAT_ENDPOINT_VAR: &str = "EPO_CHAT_ENDPOINT";
pub const CHAT_MODEL_VAR: &str = "EPO_CHAT_MODEL";
pub const CHAT_KEY_VAR: &str = "EPO_CHAT_KEY";

/// Default learning rate when training the tabular toy backend.
pub const TOY_LEARNING_RATE: f64 = 200.0;

// --- argument grammar -------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "epo", version, about = "Strategist-policy RL over text environments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// JSON config file; flags and environment variables override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for scenario draws, decoding, and batching.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    env: Option<EnvName>,
    /// Parent directory for run artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true, value_enum)]
    prm: Option<PrmKind>,
    #[arg(long, global = true, value_enum)]
    reward_mode: Option<RewardModeArg>,
    /// Bypass the strategist entirely (ablation baseline).
    #[arg(long, global = true)]
    no_strategist: bool,
    /// Cap on concurrently simulated episodes.
    #[arg(long, global = true, value_name = "N")]
    parallelism: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect trajectories by running scripted or chat-backed episodes.
    Rollout(RolloutArgs),
    /// Label a trajectory file with per-turn process rewards.
    Label(LabelArgs),
    /// One training iteration over an already-labeled trajectory file.
    Train(TrainArgs),
    /// Full iterative self-play reinforcement learning.
    Selfplay(SelfplayArgs),
    /// Score a policy over held-out scenarios.
    Eval(EvalArgs),
    /// Pretty-print a trajectory file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct RolloutArgs {
    /// Number of scenarios to roll out.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Seen)]
    split: SplitArg,
    /// Saved policy to collect with (toy backend only); defaults to uniform.
    #[arg(long, value_name = "PATH")]
    policy_in: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Trajectory JSONL file to label.
    #[arg(long, value_name = "PATH")]
    trajectories: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Labeled trajectory JSONL file to train on.
    #[arg(long, value_name = "PATH")]
    labels: PathBuf,
    /// Saved policy to start from; defaults to a fresh uniform policy.
    #[arg(long, value_name = "PATH")]
    policy_in: Option<PathBuf>,
    #[arg(long, value_name = "RATE")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct SelfplayArgs {
    #[arg(long)]
    iterations: Option<u32>,
    /// Scenarios collected per iteration.
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long, value_name = "RATE")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Decode temperature during collection; 0 means greedy.
    #[arg(long)]
    temperature: Option<f64>,
    /// Saved policy to continue training from.
    #[arg(long, value_name = "PATH")]
    policy_in: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Number of scenarios to evaluate on.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Unseen)]
    split: SplitArg,
    /// Cross-play every side configuration against every other.
    #[arg(long)]
    matrix: bool,
    /// Saved policy to evaluate (toy backend only); defaults to uniform.
    #[arg(long, value_name = "PATH")]
    policy_in: Option<PathBuf>,
    /// Decode temperature; 0 means greedy. Defaults per environment.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Trajectory JSONL file to summarize.
    #[arg(value_name = "FILE")]
    file: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EnvName {
    Negotiation,
    Shop,
    Household,
}

impl EnvName {
    fn id(self) -> &'static str {
        match self {
            EnvName::Negotiation => "negotiation",
            EnvName::Shop => "shop",
            EnvName::Household => "household",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Toy,
    Chat,
}

impl BackendKind {
    fn id(self) -> &'static str {
        match self {
            BackendKind::Toy => "toy",
            BackendKind::Chat => "chat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PrmKind {
    Oracle,
    Chat,
}

impl PrmKind {
    fn id(self) -> &'static str {
        match self {
            PrmKind::Oracle => "oracle",
            PrmKind::Chat => "chat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RewardModeArg {
    Prm,
    Terminal,
}

impl RewardModeArg {
    fn to_mode(self) -> RewardMode {
        match self {
            RewardModeArg::Prm => RewardMode::Prm,
            RewardModeArg::Terminal => RewardMode::TerminalOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
}

impl SplitArg {
    fn to_split(self) -> ScenarioSplit {
        match self {
            SplitArg::Seen => ScenarioSplit::Seen,
            SplitArg::Unseen => ScenarioSplit::Unseen,
        }
    }

    fn id(self) -> &'static str {
        match self {
            SplitArg::Seen => "seen",
            SplitArg::Unseen => "unseen",
        }
    }
}

// --- config file and environment layers -------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    env: Option<EnvName>,
    backend: Option<BackendKind>,
    prm: Option<PrmKind>,
    reward_mode: Option<RewardModeArg>,
    no_strategist: Option<bool>,
    train: TrainOverlay,
    chat: ChatFileConfig,
}

/// The config file's training section: every field optional so the file only
/// pins what it cares about.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOverlay {
    gamma: Option<f64>,
    learning_rate: Option<f64>,
    warmup_fraction: Option<f64>,
    schedule: Option<LrSchedule>,
    epochs: Option<u32>,
    batch_size: Option<usize>,
    iterations: Option<u32>,
    scenarios_per_iteration: Option<usize>,
    sample_temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ChatFileConfig {
    endpoint: Option<String>,
    model: Option<String>,
    key: Option<String>,
    temperature: Option<f64>,
    timeout_secs: Option<u64>,
    max_retries: Option<u32>,
}

/// Chat settings read from the process environment, separated out so
/// resolution is testable without mutating global state.
#[derive(Debug, Clone, Default)]
struct ChatEnv {
    endpoint: Option<String>,
    model: Option<String>,
    key: Option<String>,
}

impl ChatEnv {
    fn from_process() -> Self {
        ChatEnv {
            endpoint: std::env::var(CHAT_ENDPOINT_VAR).ok(),
            model: std::env::var(CHAT_MODEL_VAR).ok(),
            key: std::env::var(CHAT_KEY_VAR).ok(),
        }
    }
}

/// Per-command overrides that feed the training config.
#[derive(Debug, Clone, Copy, Default)]
struct TrainFlags {
    iterations: Option<u32>,
    scenarios: Option<usize>,
    learning_rate: Option<f64>,
    epochs: Option<u32>,
    batch_size: Option<usize>,
    gamma: Option<f64>,
    temperature: Option<f64>,
}

impl TrainFlags {
    fn from_train(args: &TrainArgs) -> Self {
        TrainFlags {
            learning_rate: args.learning_rate,
            epochs: args.epochs,
            batch_size: args.batch_size,
            gamma: args.gamma,
            ..Default::default()
        }
    }

    fn from_selfplay(args: &SelfplayArgs) -> Self {
        TrainFlags {
            iterations: args.iterations,
            scenarios: args.scenarios,
            learning_rate: args.learning_rate,
            epochs: args.epochs,
            batch_size: args.batch_size,
            gamma: args.gamma,
            temperature: args.temperature,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ChatSettings {
    endpoint: Option<String>,
    model: Option<String>,
    key: Option<String>,
    temperature: Option<f64>,
    timeout_secs: Option<u64>,
    max_retries: Option<u32>,
}

/// Everything a subcommand needs, with all precedence already applied.
#[derive(Debug, Clone)]
struct Resolved {
    env_id: String,
    env_explicit: bool,
    seed: u64,
    backend: BackendKind,
    prm: PrmKind,
    reward_mode: RewardMode,
    strategist_enabled: bool,
    train: TrainConfig,
    chat: ChatSettings,
}

impl Resolved {
    fn chat_client(&self) -> Result<ChatServiceClient, RuntimeError> {
        let endpoint = self.chat.endpoint.clone().ok_or_else(|| {
            RuntimeError::Config(format!(
                "chat backend needs an endpoint: set {CHAT_ENDPOINT_VAR} or `chat.endpoint` in the config file"
            ))
        })?;
        let model = self.chat.model.clone().ok_or_else(|| {
            RuntimeError::Config(format!(
                "chat backend needs a model name: set {CHAT_MODEL_VAR} or `chat.model` in the config file"
            ))
        })?;
        let mut client = ChatServiceClient::new(endpoint, model).with_api_key(self.chat.key.clone());
        if let Some(t) = self.chat.temperature {
            client = client.with_temperature(t);
        }
        if let Some(secs) = self.chat.timeout_secs {
            client = client.with_timeout(Duration::from_secs(secs));
        }
        if let Some(n) = self.chat.max_retries {
            client = client.with_max_retries(n);
        }
        Ok(client)
    }
}

fn resolve(global: &GlobalArgs, file: &FileConfig, chat_env: &ChatEnv, flags: TrainFlags) -> Resolved {
    let env_id = global
        .env
        .or(file.env)
        .map(|e| e.id().to_string())
        .unwrap_or_else(|| "negotiation".to_string());
    let seed = global.seed.or(file.seed).unwrap_or(0);
    let backend = global.backend.or(file.backend).unwrap_or(BackendKind::Toy);
    let prm = global.prm.or(file.prm).unwrap_or(PrmKind::Oracle);
    let reward_mode = global
        .reward_mode
        .or(file.reward_mode)
        .map(RewardModeArg::to_mode)
        .unwrap_or(RewardMode::Prm);
    let strategist_enabled = !(global.no_strategist || file.no_strategist.unwrap_or(false));

    let overlay = &file.train;
    let mut train = TrainConfig::default();
    if let Some(v) = flags.gamma.or(overlay.gamma) {
        train.gamma = v;
    }
    if let Some(v) = overlay.warmup_fraction {
        train.warmup_fraction = v;
    }
    if let Some(v) = overlay.schedule {
        train.schedule = v;
    }
    if let Some(v) = flags.epochs.or(overlay.epochs) {
        train.epochs = v;
    }
    if let Some(v) = flags.batch_size.or(overlay.batch_size) {
        train.batch_size = v;
    }
    if let Some(v) = flags.iterations.or(overlay.iterations) {
        train.iterations = v;
    }
    if let Some(v) = flags.scenarios.or(overlay.scenarios_per_iteration) {
        train.scenarios_per_iteration = v;
    }
    if let Some(v) = flags.temperature.or(overlay.sample_temperature) {
        train.sample_temperature = v;
    }
    match flags.learning_rate.or(overlay.learning_rate) {
        Some(v) => train.learning_rate = v,
        // The built-in default rate suits fine-tuning-scale backends. The
        // tabular policy's gradient is averaged over batch, turns, and
        // tokens, so moving a logit by O(1) needs a step in the hundreds;
        // this applies unless a rate was pinned explicitly.
        None if backend == BackendKind::Toy => train.learning_rate = TOY_LEARNING_RATE,
        None => {}
    }
    train.env_id = env_id.clone();
    train.seed = seed;
    train.reward_mode = reward_mode;

    let chat = ChatSettings {
        endpoint: chat_env.endpoint.clone().or_else(|| file.chat.endpoint.clone()),
        model: chat_env.model.clone().or_else(|| file.chat.model.clone()),
        key: chat_env.key.clone().or_else(|| file.chat.key.clone()),
        temperature: file.chat.temperature,
        timeout_secs: file.chat.timeout_secs,
        max_retries: file.chat.max_retries,
    };

    Resolved {
        env_id,
        env_explicit: global.env.is_some() || file.env.is_some(),
        seed,
        backend,
        prm,
        reward_mode,
        strategist_enabled,
        train,
        chat,
    }
}

// --- errors and exit codes ---------------------------------------------------

#[derive(Debug, Error)]
enum RuntimeError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] ValidationError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// --- run directory plumbing ---------------------------------------------------

type ArtifactMap = BTreeMap<&'static str, PathBuf>;

#[derive(Debug, Serialize)]
struct RunManifest {
    run_id: String,
    command: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    config: serde_json::Value,
    /// Only paths that actually exist on disk at write time.
    artifacts: BTreeMap<String, String>,
    started_unix_ms: u64,
    elapsed_ms: u64,
}

/// Twelve hex chars of the resolved config digest. The output directory is
/// deliberately excluded so the same logical run lands on the same id
/// wherever its artifacts go.
fn run_id_for(snapshot: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(snapshot).expect("config snapshot serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut id = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        id.push_str(&format!("{byte:02x}"));
    }
    id
}

fn config_snapshot(res: &Resolved, command: &str, extras: serde_json::Value) -> serde_json::Value {
    let mut snapshot = json!({
        "command": command,
        "env": res.env_id,
        "seed": res.seed,
        "backend": res.backend.id(),
        "prm": res.prm.id(),
        "reward_mode": res.reward_mode,
        "strategist": res.strategist_enabled,
        "train": res.train,
    });
    if res.backend == BackendKind::Chat || res.prm == PrmKind::Chat {
        // Endpoint and model only — credentials never reach disk.
        snapshot["chat"] = json!({
            "endpoint": res.chat.endpoint,
            "model": res.chat.model,
        });
    }
    if let serde_json::Value::Object(extra) = extras {
        let map = snapshot.as_object_mut().expect("snapshot is an object");
        for (k, v) in extra {
            map.insert(k, v);
        }
    }
    snapshot
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One line of JSON per record, flushed as written so partial runs still
/// leave readable metrics.
struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    fn create(path: &Path) -> Result<Self, RuntimeError> {
        Ok(JsonlSink { out: BufWriter::new(File::create(path)?) })
    }

    fn line(&mut self, record: &impl Serialize) -> Result<(), RuntimeError> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Remove a stale artifact so reruns into the same directory start clean.
fn fresh(path: &Path) -> Result<(), RuntimeError> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    Ok(())
}

// --- backend construction ------------------------------------------------------

fn toy_policy(res: &Resolved, policy_in: Option<&PathBuf>) -> Result<Arc<ContextSoftmaxPolicy>, RuntimeError> {
    let vocab = vocabulary(&res.env_id)?.tokens;
    match policy_in {
        Some(path) => {
            let policy = ContextSoftmaxPolicy::load(path)?;
            if policy.vocab() != vocab.as_slice() {
                return Err(RuntimeError::Config(format!(
                    "policy file {} has a different vocabulary than environment {}",
                    path.display(),
                    res.env_id
                )));
            }
            Ok(Arc::new(policy))
        }
        None => Ok(Arc::new(ContextSoftmaxPolicy::new(vocab, 1.0)?)),
    }
}

fn strategist_for(
    res: &Resolved,
    policy_in: Option<&PathBuf>,
) -> Result<Arc<dyn PolicyBackend>, RuntimeError> {
    match res.backend {
        BackendKind::Toy => Ok(toy_policy(res, policy_in)?),
        BackendKind::Chat => {
            if policy_in.is_some() {
                return Err(RuntimeError::Config(
                    "--policy-in applies to the toy backend; the chat strategist has no local weights".into(),
                ));
            }
            let templates = TemplateSet::for_env(&res.env_id)?;
            Ok(Arc::new(ChatStrategist::new(res.chat_client()?, templates)))
        }
    }
}

fn actor_for(res: &Resolved) -> Result<Arc<dyn Actor>, RuntimeError> {
    match res.backend {
        BackendKind::Toy => Ok(Arc::new(ScriptedActor::new(res.env_id.clone()))),
        BackendKind::Chat => {
            let templates = TemplateSet::for_env(&res.env_id)?;
            Ok(Arc::new(ChatActor::new(res.chat_client()?, templates)))
        }
    }
}

fn prm_for(res: &Resolved, env_id: &str) -> Result<Box<dyn ProcessRewardModel>, RuntimeError> {
    match res.prm {
        PrmKind::Oracle => Ok(Box::new(OraclePrm)),
        PrmKind::Chat => {
            let templates = TemplateSet::for_env(env_id)?;
            Ok(Box::new(ChatPrm::new(res.chat_client()?, templates)))
        }
    }
}

/// The environment a trajectory file belongs to, cross-checked against an
/// explicitly requested one.
fn infer_env(trajectories: &[Trajectory], res: &Resolved) -> Result<String, RuntimeError> {
    let mut inferred: Option<String> = None;
    for t in trajectories {
        let (env_id, _) = crate::envs::parse_scenario_id(&t.scenario_id)?;
        match &inferred {
            None => inferred = Some(env_id.to_string()),
            Some(seen) if seen != env_id => {
                return Err(RuntimeError::Config(format!(
                    "mixed environments in input: {seen} and {env_id}"
                )))
            }
            Some(_) => {}
        }
    }
    let inferred = inferred.unwrap_or_else(|| res.env_id.clone());
    if res.env_explicit && inferred != res.env_id {
        return Err(RuntimeError::Config(format!(
            "input trajectories are from {} but --env {} was requested",
            inferred, res.env_id
        )));
    }
    Ok(inferred)
}

// --- subcommands ---------------------------------------------------------------

#[derive(Serialize)]
struct RolloutStats {
    collected: usize,
    failures: usize,
    mean_score: f64,
}

fn cmd_rollout(res: &Resolved, args: &RolloutArgs, run_dir: &Path) -> Result<ArtifactMap, RuntimeError> {
    let scenarios = generate_scenarios(&res.env_id, res.seed, args.count, args.split.to_split())?;
    let policy = strategist_for(res, args.policy_in.as_ref())?;
    let actor = actor_for(res)?;
    let config = RolloutConfig {
        seed: res.seed,
        strategist_enabled: res.strategist_enabled,
        decoding: res.train.decoding(),
        max_turns: None,
    };
    let outcome = run_batch(&scenarios, policy, actor, &config);
    for failure in &outcome.failures {
        log::warn!("episode {} failed: {}", failure.scenario_id, failure.error);
    }

    let trajectories_path = run_dir.join("trajectories.jsonl");
    crate::store::write_trajectories(&trajectories_path, &outcome.trajectories)?;
    let stats = RolloutStats {
        collected: outcome.trajectories.len(),
        failures: outcome.failures.len(),
        mean_score: outcome.mean_score(),
    };
    let metrics_path = run_dir.join("metrics.jsonl");
    JsonlSink::create(&metrics_path)?.line(&stats)?;
    println!(
        "collected {} trajectories over {} scenarios (mean score {:.3}, {} failures)",
        stats.collected,
        scenarios.len(),
        stats.mean_score,
        stats.failures
    );
    Ok(ArtifactMap::from([
        ("trajectories", trajectories_path),
        ("metrics", metrics_path),
    ]))
}

#[derive(Serialize)]
struct LabelStats {
    kept: usize,
    dropped: usize,
}

fn cmd_label(res: &Resolved, args: &LabelArgs, run_dir: &Path) -> Result<ArtifactMap, RuntimeError> {
    let trajectories = read_trajectories(&args.trajectories)?;
    let env_id = infer_env(&trajectories, res)?;
    let prm = prm_for(res, &env_id)?;
    let (_, score_max) = crate::envs::score_range(&env_id)?;
    let outcomes = label_batch(trajectories, res.reward_mode, prm.as_ref(), score_max);

    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for outcome in outcomes {
        match outcome {
            LabelOutcome::Labeled(t) => kept.push(t),
            LabelOutcome::Dropped { trajectory, reason } => {
                log::warn!("dropped {}: {reason}", trajectory.trajectory_id);
                dropped += 1;
            }
        }
    }
    let labels_path = run_dir.join("labels.jsonl");
    crate::store::write_trajectories(&labels_path, &kept)?;
    let stats = LabelStats { kept: kept.len(), dropped };
    let metrics_path = run_dir.join("metrics.jsonl");
    JsonlSink::create(&metrics_path)?.line(&stats)?;
    println!("labeled {} trajectories, dropped {}", stats.kept, stats.dropped);
    Ok(ArtifactMap::from([("labels", labels_path), ("metrics", metrics_path)]))
}

fn cmd_train(res: &Resolved, args: &TrainArgs, run_dir: &Path) -> Result<ArtifactMap, RuntimeError> {
    let trajectories = read_trajectories(&args.labels)?;
    let env_id = infer_env(&trajectories, res)?;
    if res.backend == BackendKind::Chat {
        return Err(RuntimeError::Config(
            "the chat strategist cannot be trained in-process; use --backend toy".into(),
        ));
    }
    let mut config = res.train.clone();
    config.env_id = env_id.clone();
    let policy = {
        let scoped = Resolved { env_id, ..res.clone() };
        toy_policy(&scoped, args.policy_in.as_ref())?
    };
    let outcomes: Vec<LabelOutcome> = trajectories.into_iter().map(LabelOutcome::Labeled).collect();
    let report = train_iteration(&policy, &outcomes, &config, 1)?;

    let policy_path = run_dir.join("policy.json");
    policy.save(&policy_path)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    JsonlSink::create(&metrics_path)?.line(&report)?;
    println!(
        "trained on {} trajectories: loss {:.6}, policy {}",
        report.kept, report.mean_loss, report.policy_version
    );
    Ok(ArtifactMap::from([("policy", policy_path), ("metrics", metrics_path)]))
}

fn cmd_selfplay(res: &Resolved, args: &SelfplayArgs, run_dir: &Path) -> Result<ArtifactMap, RuntimeError> {
    if res.backend == BackendKind::Chat {
        return Err(RuntimeError::Config(
            "the chat strategist cannot be trained in-process; use --backend toy".into(),
        ));
    }
    if !res.strategist_enabled {
        return Err(RuntimeError::Config(
            "--no-strategist leaves nothing to train; drop the flag or run eval instead".into(),
        ));
    }
    let policy = toy_policy(res, args.policy_in.as_ref())?;
    let actor = actor_for(res)?;
    let prm = prm_for(res, &res.env_id)?;

    let trajectories_path = run_dir.join("trajectories.jsonl");
    let labels_path = run_dir.join("labels.jsonl");
    let metrics_path = run_dir.join("metrics.jsonl");
    fresh(&trajectories_path)?;
    fresh(&labels_path)?;
    let mut trajectory_writer = TrajectoryWriter::append_to(&trajectories_path)?;
    let mut label_writer = TrajectoryWriter::append_to(&labels_path)?;
    let mut metrics = JsonlSink::create(&metrics_path)?;

    let sink_err = |e: RuntimeError| TrainError::Sink(e.to_string());
    let outcome = self_play_rl(
        Arc::clone(&policy),
        actor,
        prm.as_ref(),
        &res.train,
        |report, outcomes| {
            let collected: Vec<Trajectory> = outcomes.iter().map(|o| o.trajectory().clone()).collect();
            let labeled: Vec<Trajectory> =
                outcomes.iter().filter_map(|o| o.labeled().cloned()).collect();
            trajectory_writer
                .append_all(&collected)
                .map_err(|e| TrainError::Sink(e.to_string()))?;
            label_writer
                .append_all(&labeled)
                .map_err(|e| TrainError::Sink(e.to_string()))?;
            metrics.line(report).map_err(sink_err)?;
            println!(
                "iter {:>2}/{}  mean_score {:.3}  loss {:+.6}  kept {}  dropped {}  → {}",
                report.iteration,
                res.train.iterations,
                report.mean_score,
                report.mean_loss,
                report.kept,
                report.dropped,
                report.policy_version
            );
            Ok(())
        },
    )?;
    trajectory_writer.finish()?;
    label_writer.finish()?;

    let policy_path = run_dir.join("policy.json");
    policy.save(&policy_path)?;
    if outcome.actor_digest_before != outcome.actor_digest_after {
        return Err(RuntimeError::Config(
            "actor digest changed during self-play; the actor must stay frozen".into(),
        ));
    }
    let first = outcome.reports.first().map(|r| r.mean_score).unwrap_or(0.0);
    let last = outcome.reports.last().map(|r| r.mean_score).unwrap_or(0.0);
    println!(
        "self-play finished at {}: mean score {:.3} → {:.3} over {} iterations",
        outcome.final_policy_version,
        first,
        last,
        outcome.reports.len()
    );
    Ok(ArtifactMap::from([
        ("trajectories", trajectories_path),
        ("labels", labels_path),
        ("metrics", metrics_path),
        ("policy", policy_path),
    ]))
}

fn cmd_eval(res: &Resolved, args: &EvalArgs, run_dir: &Path) -> Result<ArtifactMap, RuntimeError> {
    let scenarios = generate_scenarios(&res.env_id, res.seed, args.count, args.split.to_split())?;
    let actor = actor_for(res)?;
    let policy: Option<Arc<dyn PolicyBackend>> = if res.strategist_enabled {
        Some(strategist_for(res, args.policy_in.as_ref())?)
    } else {
        None
    };
    let policy_label = if !res.strategist_enabled {
        "none"
    } else if args.policy_in.is_some() {
        "trained"
    } else if res.backend == BackendKind::Chat {
        "chat"
    } else {
        "uniform"
    };
    let mut config = EvalConfig::new(policy_label, res.seed);
    config.decoding = args.temperature.map(|t| {
        if t == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Sample { temperature: t }
        }
    });

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = JsonlSink::create(&metrics_path)?;
    let mut artifacts = ArtifactMap::from([("metrics", metrics_path.clone())]);

    if args.matrix {
        let mut sides = vec![SideConfig::new(policy_label, policy)];
        if policy_label != "none" {
            sides.push(SideConfig::new("none", None));
        }
        let matrix = config_matrix(&sides, &sides, actor, &scenarios, &config)?;
        for row in &matrix {
            for report in row {
                metrics.line(report)?;
            }
        }
        let csv = matrix_csv(&matrix);
        let csv_path = run_dir.join("matrix.csv");
        std::fs::write(&csv_path, &csv)?;
        print!("{csv}");
        artifacts.insert("matrix_csv", csv_path);
    } else {
        let report: EvalReport = evaluate(policy, actor, &scenarios, &config)?;
        metrics.line(&report)?;
        print!("{}", report.text_table());
    }
    Ok(artifacts)
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), RuntimeError> {
    let trajectories = read_trajectories(&args.file)?;
    println!("{} trajectories", trajectories.len());
    for t in &trajectories {
        let labeled = t.turns.iter().filter(|turn| turn.process_reward.is_some()).count();
        let rewarded = t.turns.iter().filter(|turn| turn.process_reward == Some(1.0)).count();
        println!(
            "  {}  {}  {}  policy {}  {}  score {:.3}  turns {} (strategies {}, labeled {}, rewarded {})",
            t.trajectory_id,
            t.scenario_id,
            t.participant_id,
            t.policy_version,
            if t.terminal { "terminal" } else { "truncated" },
            t.final_score,
            t.turns.len(),
            t.strategist_turn_count(),
            labeled,
            rewarded
        );
    }
    Ok(())
}

// --- dispatch --------------------------------------------------------------------

/// Parse and run one invocation. Returns the process exit code; never panics
/// on bad input.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ClapErrorKind::DisplayHelp
                | ClapErrorKind::DisplayVersion
                | ClapErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    run(cli)
}

fn run(cli: Cli) -> i32 {
    // Inspection is a pure reader: no artifacts, no run directory.
    if let Command::Inspect(args) = &cli.command {
        return match cmd_inspect(args) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error: {err}");
                2
            }
        };
    }

    if let Some(threads) = cli.global.parallelism {
        let built = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        if built.is_err() {
            log::warn!("thread pool already initialized; --parallelism ignored");
        }
    }

    let file_config = match load_file_config(cli.global.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return 2;
        }
    };
    let flags = match &cli.command {
        Command::Train(args) => TrainFlags::from_train(args),
        Command::Selfplay(args) => TrainFlags::from_selfplay(args),
        _ => TrainFlags::default(),
    };
    let resolved = resolve(&cli.global, &file_config, &ChatEnv::from_process(), flags);
    if let Err(err) = resolved.train.validate() {
        eprintln!("error: {err}");
        return 2;
    }

    let (command_name, extras) = match &cli.command {
        Command::Rollout(args) => (
            "rollout",
            json!({
                "count": args.count,
                "split": args.split.id(),
                "policy_in": args.policy_in.as_ref().map(|p| p.display().to_string()),
            }),
        ),
        Command::Label(args) => (
            "label",
            json!({ "input": args.trajectories.display().to_string() }),
        ),
        Command::Train(args) => (
            "train",
            json!({
                "input": args.labels.display().to_string(),
                "policy_in": args.policy_in.as_ref().map(|p| p.display().to_string()),
            }),
        ),
        Command::Selfplay(args) => (
            "selfplay",
            json!({ "policy_in": args.policy_in.as_ref().map(|p| p.display().to_string()) }),
        ),
        Command::Eval(args) => (
            "eval",
            json!({
                "count": args.count,
                "split": args.split.id(),
                "matrix": args.matrix,
                "policy_in": args.policy_in.as_ref().map(|p| p.display().to_string()),
                "decode_temperature": args.temperature,
            }),
        ),
        Command::Inspect(_) => unreachable!("inspect returns above"),
    };
    let snapshot = config_snapshot(&resolved, command_name, extras);
    let run_id = run_id_for(&snapshot);
    let run_dir = cli.global.out.join(format!("run-{run_id}"));
    if let Err(err) = std::fs::create_dir_all(&run_dir) {
        eprintln!("error: cannot create {}: {err}", run_dir.display());
        return 2;
    }

    let started_unix_ms = now_unix_ms();
    let clock = Instant::now();
    let result = match &cli.command {
        Command::Rollout(args) => cmd_rollout(&resolved, args, &run_dir),
        Command::Label(args) => cmd_label(&resolved, args, &run_dir),
        Command::Train(args) => cmd_train(&resolved, args, &run_dir),
        Command::Selfplay(args) => cmd_selfplay(&resolved, args, &run_dir),
        Command::Eval(args) => cmd_eval(&resolved, args, &run_dir),
        Command::Inspect(_) => unreachable!("inspect returns above"),
    };

    // The manifest goes to disk on success *and* failure: a failed run still
    // documents what it was asked to do and which artifacts it got to.
    let (status, error, artifacts) = match &result {
        Ok(artifacts) => ("ok", None, artifacts.clone()),
        Err(err) => {
            let mut partial = ArtifactMap::new();
            for name in ["trajectories", "labels", "metrics", "policy", "matrix_csv"] {
                let candidate = run_dir.join(artifact_filename(name));
                if candidate.exists() {
                    partial.insert(name, candidate);
                }
            }
            ("error", Some(err.to_string()), partial)
        }
    };
    let manifest = RunManifest {
        run_id: run_id.clone(),
        command: command_name.to_string(),
        status: status.to_string(),
        error,
        config: snapshot,
        artifacts: artifacts
            .iter()
            .filter(|(_, path)| path.exists())
            .map(|(name, path)| (name.to_string(), path.display().to_string()))
            .collect(),
        started_unix_ms,
        elapsed_ms: clock.elapsed().as_millis() as u64,
    };
    let manifest_path = run_dir.join("manifest.json");
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    if let Err(err) = std::fs::write(&manifest_path, manifest_json) {
        eprintln!("error: cannot write {}: {err}", manifest_path.display());
        return 2;
    }

    match result {
        Ok(_) => {
            println!("artifacts: {}", run_dir.display());
            0
        }
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn artifact_filename(name: &str) -> &'static str {
    match name {
        "trajectories" => "trajectories.jsonl",
        "labels" => "labels.jsonl",
        "metrics" => "metrics.jsonl",
        "policy" => "policy.json",
        "matrix_csv" => "matrix.csv",
        other => unreachable!("unknown artifact {other}"),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, RuntimeError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                RuntimeError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                RuntimeError::Config(format!("config {} is not valid: {e}", path.display()))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).expect("argv parses")
    }

    fn resolved_for(args: &[&str], file: FileConfig, chat_env: ChatEnv) -> Resolved {
        let cli = parse(args);
        let flags = match &cli.command {
            Command::Train(a) => TrainFlags::from_train(a),
            Command::Selfplay(a) => TrainFlags::from_selfplay(a),
            _ => TrainFlags::default(),
        };
        resolve(&cli.global, &file, &chat_env, flags)
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: FileConfig = serde_json::from_str(
            r#"{"seed": 11, "env": "shop", "train": {"learning_rate": 0.5, "epochs": 7}}"#,
        )
        .unwrap();
        let res = resolved_for(
            &["epo", "selfplay", "--seed", "3", "--learning-rate", "0.25"],
            file,
            ChatEnv::default(),
        );
        assert_eq!(res.seed, 3, "flag beats file");
        assert_eq!(res.env_id, "shop", "file beats default");
        assert_eq!(res.train.learning_rate, 0.25, "flag beats file");
        assert_eq!(res.train.epochs, 7, "file beats default");
        assert_eq!(res.train.seed, 3);
        assert_eq!(res.train.env_id, "shop");
    }

    #[test]
    fn chat_env_vars_override_file_settings() {
        let file: FileConfig = serde_json::from_str(
            r#"{"chat": {"endpoint": "http://file", "model": "file-model", "key": "file-key"}}"#,
        )
        .unwrap();
        let env = ChatEnv {
            endpoint: Some("http://env".into()),
            model: None,
            key: Some("env-key".into()),
        };
        let res = resolved_for(&["epo", "rollout"], file, env);
        assert_eq!(res.chat.endpoint.as_deref(), Some("http://env"));
        assert_eq!(res.chat.model.as_deref(), Some("file-model"));
        assert_eq!(res.chat.key.as_deref(), Some("env-key"));
    }

    #[test]
    fn toy_backend_defaults_to_a_macroscopic_learning_rate() {
        let res = resolved_for(&["epo", "selfplay"], FileConfig::default(), ChatEnv::default());
        assert_eq!(res.train.learning_rate, TOY_LEARNING_RATE);

        let pinned = resolved_for(
            &["epo", "selfplay", "--learning-rate", "1e-6"],
            FileConfig::default(),
            ChatEnv::default(),
        );
        assert_eq!(pinned.train.learning_rate, 1e-6);

        let chat = resolved_for(
            &["epo", "selfplay", "--backend", "chat"],
            FileConfig::default(),
            ChatEnv::default(),
        );
        assert_eq!(chat.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn run_id_ignores_the_output_directory_but_not_the_seed() {
        let a = resolved_for(&["epo", "rollout", "--out", "x"], FileConfig::default(), ChatEnv::default());
        let b = resolved_for(&["epo", "rollout", "--out", "y"], FileConfig::default(), ChatEnv::default());
        let snap_a = config_snapshot(&a, "rollout", json!({"count": 16, "split": "seen"}));
        let snap_b = config_snapshot(&b, "rollout", json!({"count": 16, "split": "seen"}));
        assert_eq!(run_id_for(&snap_a), run_id_for(&snap_b));

        let c = resolved_for(&["epo", "rollout", "--seed", "9"], FileConfig::default(), ChatEnv::default());
        let snap_c = config_snapshot(&c, "rollout", json!({"count": 16, "split": "seen"}));
        assert_ne!(run_id_for(&snap_a), run_id_for(&snap_c));
        assert_eq!(run_id_for(&snap_a).len(), 12);
    }

    #[test]
    fn credentials_never_reach_the_config_snapshot() {
        let file: FileConfig = serde_json::from_str(
            r#"{"backend": "chat", "chat": {"endpoint": "http://svc", "model": "m", "key": "s3cret"}}"#,
        )
        .unwrap();
        let res = resolved_for(&["epo", "rollout"], file, ChatEnv::default());
        let snapshot = config_snapshot(&res, "rollout", json!({}));
        let text = serde_json::to_string(&snapshot).unwrap();
        assert!(!text.contains("s3cret"), "snapshot leaked a credential: {text}");
        assert!(text.contains("http://svc"), "endpoint belongs in the snapshot");
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<FileConfig>(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(cli_dispatch(["epo", "frobnicate"]), 1);
        assert_eq!(cli_dispatch(["epo", "rollout", "--bogus-flag"]), 1);
        assert_eq!(cli_dispatch(["epo", "--help"]), 0);
        assert_eq!(cli_dispatch(["epo", "--version"]), 0);
    }

    #[test]
    fn inspect_missing_file_is_a_runtime_error() {
        assert_eq!(cli_dispatch(["epo", "inspect", "/nonexistent/zilch.jsonl"]), 2);
    }

    #[test]
    fn no_strategist_flag_disables_the_strategist() {
        let res = resolved_for(&["epo", "eval", "--no-strategist"], FileConfig::default(), ChatEnv::default());
        assert!(!res.strategist_enabled);
        let file: FileConfig = serde_json::from_str(r#"{"no_strategist": true}"#).unwrap();
        let res = resolved_for(&["epo", "eval"], file, ChatEnv::default());
        assert!(!res.strategist_enabled);
    }

    #[test]
    fn reward_mode_terminal_maps_to_terminal_only() {
        let res = resolved_for(
            &["epo", "selfplay", "--reward-mode", "terminal"],
            FileConfig::default(),
            ChatEnv::default(),
        );
        assert_eq!(res.reward_mode, RewardMode::TerminalOnly);
        assert_eq!(res.train.reward_mode, RewardMode::TerminalOnly);
    }
}
