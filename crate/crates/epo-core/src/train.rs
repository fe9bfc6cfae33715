//! Policy-gradient training for the strategist: the advantage-weighted
//! log-likelihood loss, its analytic gradient over the tabular policy,
//! learning-rate scheduling, and the iterative self-play loop.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::Actor;
use crate::envs::{generate_scenarios, score_range, EnvError, ScenarioSplit};
use crate::model::{Goal, Trajectory, ValidationError};
use crate::policy::{
    context_key, splitmix64, BackendError, ContextSoftmaxPolicy, Decoding, HistoryStep,
    PolicyBackend, PolicyContext, PolicyGradient,
};
use crate::reward::{
    label_batch, trajectory_advantages, LabelOutcome, ProcessRewardModel, RewardError, RewardMode,
};
use crate::rollout::{run_batch, RolloutConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no trainable data: every collected trajectory was dropped or empty")]
    NoTrainableData,
    #[error("bad configuration: {field} {reason}")]
    BadConfig { field: &'static str, reason: String },
    #[error("artifact write failed: {0}")]
    Sink(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// How the learning rate decays after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Discount over strategist turns.
    pub gamma: f64,
    /// Peak learning rate reached after warmup.
    pub learning_rate: f64,
    /// Fraction of total optimizer steps spent ramping up linearly.
    pub warmup_fraction: f64,
    pub schedule: LrSchedule,
    /// Passes over each iteration's collected data.
    pub epochs: u32,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub reward_mode: RewardMode,
    /// Self-play improvement rounds.
    pub iterations: u32,
    /// Scenario count collected per iteration (fixed set, drawn once).
    pub scenarios_per_iteration: usize,
    pub env_id: String,
    pub seed: u64,
    /// Decode temperature during collection; 0 means greedy.
    pub sample_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            learning_rate: 1e-6,
            warmup_fraction: 0.03,
            schedule: LrSchedule::Cosine,
            epochs: 3,
            batch_size: 32,
            reward_mode: RewardMode::Prm,
            iterations: 8,
            scenarios_per_iteration: 64,
            env_id: "negotiation".to_string(),
            seed: 0,
            sample_temperature: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| Err(TrainError::BadConfig { field, reason });
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", format!("must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(
                "warmup_fraction",
                format!("must lie in [0, 1), got {}", self.warmup_fraction),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if self.scenarios_per_iteration == 0 {
            return bad("scenarios_per_iteration", "must be at least 1".into());
        }
        if !(self.sample_temperature >= 0.0 && self.sample_temperature.is_finite()) {
            return bad(
                "sample_temperature",
                format!("must be ≥ 0, got {}", self.sample_temperature),
            );
        }
        crate::envs::vocabulary(&self.env_id)?;
        Ok(())
    }

    pub fn decoding(&self) -> Decoding {
        if self.sample_temperature == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Sample { temperature: self.sample_temperature }
        }
    }
}

/// Learning rate at one optimizer step: linear warmup to the base rate over
/// `ceil(warmup_fraction · total)` steps, then the chosen decay.
pub fn lr_at_step(
    base: f64,
    warmup_fraction: f64,
    schedule: LrSchedule,
    step: usize,
    total_steps: usize,
) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = (total_steps - warmup).max(1) as f64;
            let progress = (step - warmup) as f64 / span;
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// One strategist turn prepared for the optimizer: the context key and token
/// index of every strategy token, plus the turn's advantage.
#[derive(Debug, Clone)]
pub struct StrategyUpdate {
    pub context_keys: Vec<u64>,
    pub token_indexes: Vec<usize>,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryUpdate {
    pub trajectory_id: String,
    pub turns: Vec<StrategyUpdate>,
}

/// An iteration's worth of prepared updates.
#[derive(Debug, Clone, Default)]
pub struct UpdateBatch {
    pub trajectories: Vec<TrajectoryUpdate>,
}

/// Replay a labeled trajectory into optimizer-ready updates.
///
/// Context keys are rebuilt exactly as the rollout built them. The key only
/// depends on the participant id, the recent strategy tokens, and the
/// digit-normalized observation — all recorded on the trajectory — so the
/// replayed keys match the collection-time keys bit for bit.
pub fn build_update(
    policy: &ContextSoftmaxPolicy,
    trajectory: &Trajectory,
    gamma: f64,
) -> Result<TrajectoryUpdate, TrainError> {
    let advantages = trajectory_advantages(trajectory, gamma)?;
    let goal = Goal {
        agent_id: trajectory.participant_id.clone(),
        description: "(training replay)".to_string(),
        score_spec: String::new(),
    };
    let mut history: Vec<HistoryStep> = Vec::new();
    let mut prior: Vec<crate::model::Strategy> = Vec::new();
    let mut turns = Vec::new();
    let mut strategist_ordinal = 0usize;
    for turn in &trajectory.turns {
        if let Some(strategy) = &turn.strategy {
            let ctx = PolicyContext {
                goal: goal.clone(),
                scenario_context: String::new(),
                history: history.clone(),
                prior_strategies: prior.clone(),
                observation: turn.observation.clone(),
            };
            let key = context_key(&ctx);
            let mut context_keys = Vec::with_capacity(strategy.tokens.len());
            let mut token_indexes = Vec::with_capacity(strategy.tokens.len());
            for token in &strategy.tokens {
                let text = token
                    .as_text()
                    .ok_or_else(|| BackendError::UnknownToken(token.to_string()))?;
                context_keys.push(key);
                token_indexes.push(policy.token_index(text)?);
            }
            turns.push(StrategyUpdate {
                context_keys,
                token_indexes,
                advantage: advantages[strategist_ordinal],
            });
            strategist_ordinal += 1;
        }
        history.push(HistoryStep {
            observation: turn.observation.clone(),
            behavior: turn.behavior.clone(),
        });
        if let Some(strategy) = &turn.strategy {
            prior.push(strategy.clone());
        }
    }
    Ok(TrajectoryUpdate { trajectory_id: trajectory.trajectory_id.clone(), turns })
}

/// The training objective on explicit numbers: minus the mean over
/// trajectories of the turn-averaged, advantage-weighted mean token
/// log-probability. `terms[n]` lists a trajectory's strategist turns as
/// `(advantage, token log-probabilities)`.
pub fn reinforce_loss(terms: &[Vec<(f64, Vec<f64>)>]) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for turns in terms {
        if turns.is_empty() {
            continue;
        }
        let mut weighted = 0.0;
        for (advantage, logprobs) in turns {
            if logprobs.is_empty() {
                continue;
            }
            let mean_lp = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
            weighted += advantage * mean_lp;
        }
        total += weighted / turns.len() as f64;
    }
    -total / terms.len() as f64
}

/// Loss of a prepared batch under the policy's current parameters.
pub fn batch_loss(
    policy: &ContextSoftmaxPolicy,
    batch: &[TrajectoryUpdate],
) -> Result<f64, TrainError> {
    let mut terms = Vec::with_capacity(batch.len());
    for update in batch {
        let mut turns = Vec::with_capacity(update.turns.len());
        for turn in &update.turns {
            let mut logprobs = Vec::with_capacity(turn.token_indexes.len());
            for (key, token) in turn.context_keys.iter().zip(&turn.token_indexes) {
                logprobs.push(policy.softmax_logprob(*key, *token)?);
            }
            turns.push((turn.advantage, logprobs));
        }
        terms.push(turns);
    }
    Ok(reinforce_loss(&terms))
}

/// Loss and its analytic gradient with respect to every touched logit row.
/// Applied with `apply_gradient` (a descent step), this is one REINFORCE
/// update.
pub fn batch_gradient(
    policy: &ContextSoftmaxPolicy,
    batch: &[TrajectoryUpdate],
) -> Result<(f64, PolicyGradient), TrainError> {
    let loss = batch_loss(policy, batch)?;
    let mut gradient = PolicyGradient::default();
    if batch.is_empty() {
        return Ok((loss, gradient));
    }
    let per_trajectory = 1.0 / batch.len() as f64;
    for update in batch {
        if update.turns.is_empty() {
            continue;
        }
        let per_turn = per_trajectory / update.turns.len() as f64;
        for turn in &update.turns {
            if turn.token_indexes.is_empty() {
                continue;
            }
            let per_token = per_turn * turn.advantage / turn.token_indexes.len() as f64;
            for (key, token) in turn.context_keys.iter().zip(&turn.token_indexes) {
                let dlogpi = policy.softmax_grad(*key, *token)?;
                let scaled: Vec<f64> = dlogpi.iter().map(|g| -per_token * g).collect();
                gradient.accumulate(*key, &scaled);
            }
        }
    }
    Ok((loss, gradient))
}

/// One line of `metrics.jsonl`: field order is part of the file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub mean_score: f64,
    pub mean_loss: f64,
    pub kept: usize,
    pub dropped: usize,
    pub policy_version: String,
}

/// Train the policy on one iteration's labeled collection: `epochs` passes
/// in fixed batch order, scheduled learning rate, descent via the policy's
/// own update hook.
pub fn train_iteration(
    policy: &ContextSoftmaxPolicy,
    outcomes: &[LabelOutcome],
    config: &TrainConfig,
    iteration: u32,
) -> Result<IterationReport, TrainError> {
    let total = outcomes.len();
    let kept: Vec<&Trajectory> = outcomes.iter().filter_map(|o| o.labeled()).collect();
    let dropped = total - kept.len();
    if total > 0 && dropped as f64 > 0.2 * total as f64 {
        log::warn!(
            "iteration {iteration}: dropped {dropped} of {total} trajectories (> 20%); \
             check the judge"
        );
    }
    let mean_score = if total == 0 {
        0.0
    } else {
        outcomes.iter().map(|o| o.trajectory().final_score).sum::<f64>() / total as f64
    };

    let updates: Vec<TrajectoryUpdate> = kept
        .iter()
        .filter(|t| t.strategist_turn_count() > 0)
        .map(|t| build_update(policy, t, config.gamma))
        .collect::<Result<_, _>>()?;
    if updates.is_empty() {
        return Err(TrainError::NoTrainableData);
    }

    let batches_per_epoch = updates.len().div_ceil(config.batch_size);
    let total_steps = config.epochs as usize * batches_per_epoch;
    let mut losses = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut version = policy.version();
    for _epoch in 0..config.epochs {
        for chunk in updates.chunks(config.batch_size) {
            let (loss, gradient) = batch_gradient(policy, chunk)?;
            let lr = lr_at_step(
                config.learning_rate,
                config.warmup_fraction,
                config.schedule,
                step,
                total_steps,
            );
            version = policy.apply_gradient(&gradient, lr)?;
            losses.push(loss);
            step += 1;
        }
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(IterationReport {
        iteration,
        mean_score,
        mean_loss,
        kept: kept.len(),
        dropped,
        policy_version: version,
    })
}

/// Everything a finished self-play run reports.
#[derive(Debug)]
pub struct SelfPlayOutcome {
    pub reports: Vec<IterationReport>,
    pub actor_digest_before: String,
    pub actor_digest_after: String,
    pub final_policy_version: String,
}

/// Iterative self-play RL: one fixed scenario set, and per iteration a fresh
/// on-policy collection (earlier iterations' data is discarded), judge
/// labeling, and `train_iteration`. The callback sees each iteration's
/// report and labeled collection — the hook for persisting artifacts.
pub fn self_play_rl(
    policy: Arc<ContextSoftmaxPolicy>,
    actor: Arc<dyn Actor>,
    prm: &dyn ProcessRewardModel,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationReport, &[LabelOutcome]) -> Result<(), TrainError>,
) -> Result<SelfPlayOutcome, TrainError> {
    config.validate()?;
    let scenarios = generate_scenarios(
        &config.env_id,
        config.seed,
        config.scenarios_per_iteration,
        ScenarioSplit::Seen,
    )?;
    let (_, score_max) = score_range(&config.env_id)?;
    let actor_digest_before = actor.digest();

    let mut reports = Vec::with_capacity(config.iterations as usize);
    for iteration in 1..=config.iterations {
        let batch_seed = splitmix64(
            config.seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let rollout_config = RolloutConfig {
            seed: batch_seed,
            strategist_enabled: true,
            decoding: config.decoding(),
            max_turns: None,
        };
        let backend: Arc<dyn crate::policy::PolicyBackend> = policy.clone();
        let collected = run_batch(&scenarios, backend, Arc::clone(&actor), &rollout_config);
        for failure in &collected.failures {
            log::warn!(
                "iteration {iteration}: episode on {} failed: {}",
                failure.scenario_id,
                failure.error
            );
        }
        let outcomes = label_batch(collected.trajectories, config.reward_mode, prm, score_max);
        let report = train_iteration(&policy, &outcomes, config, iteration)?;
        on_iteration(&report, &outcomes)?;
        reports.push(report);
    }

    Ok(SelfPlayOutcome {
        final_policy_version: policy.version(),
        actor_digest_before,
        actor_digest_after: actor.digest(),
        reports,
    })
}
