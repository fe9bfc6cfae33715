//! Reward shaping: discounted returns, peak-normalized advantages, and
//! process-reward assignment from judge labels (oracle or chat-based).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{
    chat_complete, parse_prm_response, ChatMessage, ChatServiceClient, PrmParseError,
    ProcessRewardLabel,
};
use crate::envs::{oracle_prm_label, scenario_from_id, EnvError};
use crate::model::Trajectory;
use crate::policy::BackendError;
use crate::prompts::{prm_vars, TemplateSet};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("trajectory {trajectory_id:?} has unlabeled strategist turns")]
    MissingRewards { trajectory_id: String },
}

/// Discounted return at every step: `R_t = r_t + gamma * R_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    returns
}

/// Advantages: discounted returns scaled by the trajectory's own peak
/// magnitude, so every advantage lies in [-1, 1].
///
/// The rewards are divided by their own peak *before* the recursion. For
/// reward vectors whose entries are all 0 or ±peak — which is every vector
/// this pipeline produces, since process rewards are binary and terminal-only
/// rewards have a single nonzero entry — IEEE division makes that
/// pre-scaling exact (`x/x == 1`, `0/x == 0`), so rescaling all rewards by
/// any positive factor yields bit-identical advantages, not merely close
/// ones. An all-zero reward vector yields all-zero advantages.
pub fn advantages(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let peak = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if peak == 0.0 {
        return vec![0.0; rewards.len()];
    }
    let scaled: Vec<f64> = rewards.iter().map(|r| r / peak).collect();
    let returns = discounted_returns(&scaled, gamma);
    let max_abs = returns.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if max_abs == 0.0 {
        return returns;
    }
    returns.iter().map(|r| r / max_abs).collect()
}

/// Advantages over a labeled trajectory's strategist turns.
pub fn trajectory_advantages(trajectory: &Trajectory, gamma: f64) -> Result<Vec<f64>, RewardError> {
    let rewards = trajectory.process_rewards().ok_or_else(|| RewardError::MissingRewards {
        trajectory_id: trajectory.trajectory_id.clone(),
    })?;
    Ok(advantages(&rewards, gamma))
}

/// Write a judge label onto a trajectory: the i-th strategist turn (1-based)
/// gets reward 1.0 when the label marks it critical, 0.0 otherwise. Turns
/// without a strategy are left untouched.
pub fn assign_process_rewards(trajectory: &mut Trajectory, label: &ProcessRewardLabel) {
    let mut index = 0usize;
    for turn in trajectory.turns.iter_mut() {
        if turn.strategy.is_some() {
            index += 1;
            turn.process_reward = Some(if label.is_critical(index) { 1.0 } else { 0.0 });
        }
    }
}

/// Ablation labeling: zero everywhere except the last strategist turn, which
/// receives the final score normalized by the environment's score ceiling.
pub fn terminal_only_rewards(trajectory: &mut Trajectory, score_max: f64) {
    let count = trajectory.strategist_turn_count();
    let final_score = trajectory.final_score;
    let mut index = 0usize;
    for turn in trajectory.turns.iter_mut() {
        if turn.strategy.is_some() {
            index += 1;
            let reward = if index == count && score_max > 0.0 {
                (final_score / score_max).clamp(0.0, 1.0)
            } else {
                0.0
            };
            turn.process_reward = Some(reward);
        }
    }
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("judge reply stayed unparseable after a retry: {source}")]
    Unparseable {
        #[source]
        source: PrmParseError,
        attempts: u32,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A judge that marks which strategist turns of a trajectory were critical.
pub trait ProcessRewardModel: Send + Sync {
    fn label(&self, trajectory: &Trajectory) -> Result<ProcessRewardLabel, LabelError>;
    fn id(&self) -> String;
}

/// Deterministic judge that recomputes criticality from the environment's
/// own rules — the ground truth the chat judge approximates.
pub struct OraclePrm;

impl ProcessRewardModel for OraclePrm {
    fn label(&self, trajectory: &Trajectory) -> Result<ProcessRewardLabel, LabelError> {
        Ok(oracle_prm_label(trajectory)?)
    }

    fn id(&self) -> String {
        "oracle".to_string()
    }
}

/// Chat-service judge. One malformed reply earns exactly one retry with a
/// sharper instruction; a second malformed reply is a labeling failure.
pub struct ChatPrm {
    client: ChatServiceClient,
    templates: TemplateSet,
}

impl ChatPrm {
    pub fn new(client: ChatServiceClient, templates: TemplateSet) -> Self {
        ChatPrm { client, templates }
    }

    fn ask(&self, prompt: &str, extra: Option<&str>) -> Result<String, BackendError> {
        let mut user = "Label the critical strategy turns now.".to_string();
        if let Some(extra) = extra {
            user.push(' ');
            user.push_str(extra);
        }
        let messages = [ChatMessage::system(prompt), ChatMessage::user(user)];
        chat_complete(&self.client, &messages)
    }
}

impl ProcessRewardModel for ChatPrm {
    fn label(&self, trajectory: &Trajectory) -> Result<ProcessRewardLabel, LabelError> {
        let scenario = scenario_from_id(&trajectory.scenario_id)?;
        let goal = scenario
            .goal_for(&trajectory.participant_id)
            .map(|g| g.description.clone())
            .unwrap_or_else(|| scenario.context.clone());
        let vars = prm_vars(&goal, trajectory);
        let prompt = self.templates.prm.render(&vars);
        let turn_count = trajectory.strategist_turn_count();

        let text = self.ask(&prompt, None)?;
        match parse_prm_response(&text, turn_count) {
            Ok(label) => Ok(label),
            Err(first) => {
                log::warn!(
                    "judge reply for {} unparseable ({first}); retrying once",
                    trajectory.trajectory_id
                );
                let text = self.ask(
                    &prompt,
                    Some("Output the JSON object only, with keys \"indexes\" and \"reasoning\"."),
                )?;
                parse_prm_response(&text, turn_count)
                    .map_err(|source| LabelError::Unparseable { source, attempts: 2 })
            }
        }
    }

    fn id(&self) -> String {
        format!("chat-{}", self.client.model)
    }
}

/// What happened to one trajectory during labeling.
#[derive(Debug)]
pub enum LabelOutcome {
    Labeled(Trajectory),
    Dropped { trajectory: Trajectory, reason: String },
}

impl LabelOutcome {
    pub fn labeled(&self) -> Option<&Trajectory> {
        match self {
            LabelOutcome::Labeled(t) => Some(t),
            LabelOutcome::Dropped { .. } => None,
        }
    }

    /// The trajectory regardless of labeling outcome — dropped episodes still
    /// count toward performance statistics.
    pub fn trajectory(&self) -> &Trajectory {
        match self {
            LabelOutcome::Labeled(t) => t,
            LabelOutcome::Dropped { trajectory, .. } => trajectory,
        }
    }
}

/// Label one trajectory, turning judge failures into a drop rather than an
/// abort: training continues on whatever labeled cleanly.
pub fn label_trajectory(prm: &dyn ProcessRewardModel, mut trajectory: Trajectory) -> LabelOutcome {
    match prm.label(&trajectory) {
        Ok(label) => {
            assign_process_rewards(&mut trajectory, &label);
            LabelOutcome::Labeled(trajectory)
        }
        Err(error) => {
            log::warn!("dropping {} from training: {error}", trajectory.trajectory_id);
            LabelOutcome::Dropped { trajectory, reason: error.to_string() }
        }
    }
}

/// How strategist turns earn their reward signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// A process reward model marks critical turns.
    Prm,
    /// Only the last strategist turn is rewarded, with the normalized score.
    TerminalOnly,
}

/// Label a whole batch under the chosen mode, preserving order.
pub fn label_batch(
    trajectories: Vec<Trajectory>,
    mode: RewardMode,
    prm: &dyn ProcessRewardModel,
    score_max: f64,
) -> Vec<LabelOutcome> {
    match mode {
        RewardMode::Prm => trajectories
            .into_par_iter()
            .map(|trajectory| label_trajectory(prm, trajectory))
            .collect(),
        RewardMode::TerminalOnly => trajectories
            .into_iter()
            .map(|mut trajectory| {
                terminal_only_rewards(&mut trajectory, score_max);
                LabelOutcome::Labeled(trajectory)
            })
            .collect(),
    }
}
