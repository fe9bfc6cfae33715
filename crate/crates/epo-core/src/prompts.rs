//! Embedded prompt assets and the render rules that fill them.
//!
//! Three templates per environment — strategist, actor, PRM — shipped as
//! text assets with `{name}` placeholders. The render helpers here turn
//! policy contexts and trajectories into the placeholder values; the
//! substitution itself lives in [`PromptTemplate::render`].

use std::collections::BTreeMap;

use crate::model::{PromptTemplate, Strategy, TemplateRole, Trajectory, ValidationError};
use crate::policy::{HistoryStep, PolicyContext};

const NEGOTIATION_STRATEGIST: &str = include_str!("../assets/prompts/negotiation_strategist.txt");
const NEGOTIATION_ACTOR: &str = include_str!("../assets/prompts/negotiation_actor.txt");
const NEGOTIATION_PRM: &str = include_str!("../assets/prompts/negotiation_prm.txt");
const SHOP_STRATEGIST: &str = include_str!("../assets/prompts/shop_strategist.txt");
const SHOP_ACTOR: &str = include_str!("../assets/prompts/shop_actor.txt");
const SHOP_PRM: &str = include_str!("../assets/prompts/shop_prm.txt");
const HOUSEHOLD_STRATEGIST: &str = include_str!("../assets/prompts/household_strategist.txt");
const HOUSEHOLD_ACTOR: &str = include_str!("../assets/prompts/household_actor.txt");
const HOUSEHOLD_PRM: &str = include_str!("../assets/prompts/household_prm.txt");

/// The three role prompts used by one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub strategist: PromptTemplate,
    pub actor: PromptTemplate,
    pub prm: PromptTemplate,
}

impl TemplateSet {
    /// Load the shipped templates for an environment id.
    pub fn for_env(env_id: &str) -> Result<Self, ValidationError> {
        let (strategist, actor, prm) = match env_id {
            "negotiation" => (NEGOTIATION_STRATEGIST, NEGOTIATION_ACTOR, NEGOTIATION_PRM),
            "shop" => (SHOP_STRATEGIST, SHOP_ACTOR, SHOP_PRM),
            "household" => (HOUSEHOLD_STRATEGIST, HOUSEHOLD_ACTOR, HOUSEHOLD_PRM),
            other => {
                return Err(ValidationError::new(
                    "env_id",
                    format!("no prompt templates for {other:?}"),
                ))
            }
        };
        Ok(TemplateSet {
            strategist: PromptTemplate::new(TemplateRole::StrategistSys, strategist)?,
            actor: PromptTemplate::new(TemplateRole::ActorSys, actor)?,
            prm: PromptTemplate::new(TemplateRole::PrmSys, prm)?,
        })
    }
}

/// Render an in-flight interaction history as alternating observation /
/// own-behavior lines.
pub fn render_history(history: &[HistoryStep]) -> String {
    if history.is_empty() {
        return "(no prior turns)".to_string();
    }
    let mut out = String::new();
    for step in history {
        out.push_str(&format!("[{}] {}\n", step.observation.source, step.observation.content));
        out.push_str(&format!("[self] {}\n", step.behavior));
    }
    out.truncate(out.trim_end().len());
    out
}

/// Render strategies as a numbered list; the numbering is what process-reward
/// indexes refer to.
pub fn render_strategies(strategies: &[Strategy]) -> String {
    if strategies.is_empty() {
        return "(none yet)".to_string();
    }
    strategies
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.rendered))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Full interaction history of a finished trajectory, for judging.
pub fn render_trajectory_history(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for turn in &trajectory.turns {
        out.push_str(&format!(
            "[{}] {}\n",
            turn.observation.source, turn.observation.content
        ));
        out.push_str(&format!("[{}] {}\n", trajectory.participant_id, turn.behavior));
    }
    if out.is_empty() {
        return "(no turns)".to_string();
    }
    out.truncate(out.trim_end().len());
    out
}

/// Numbered strategies of a finished trajectory. Turns where the strategist
/// was bypassed do not appear, so entry `i` is the i-th strategist turn —
/// exactly the indexing a process-reward label uses.
pub fn render_trajectory_strategies(trajectory: &Trajectory) -> String {
    let strategies: Vec<Strategy> =
        trajectory.strategist_turns().filter_map(|t| t.strategy.clone()).collect();
    render_strategies(&strategies)
}

/// Placeholder values for a strategist prompt at one turn.
pub fn strategist_vars(ctx: &PolicyContext) -> BTreeMap<&'static str, String> {
    let mut vars = BTreeMap::new();
    vars.insert("goal", ctx.goal.description.clone());
    vars.insert("history", render_history(&ctx.history));
    vars.insert("strategies", render_strategies(&ctx.prior_strategies));
    vars.insert("observation", ctx.observation.content.clone());
    vars
}

/// Placeholder values for an actor prompt at one turn. The actor additionally
/// sees the strategy just produced for the current turn, when there is one.
pub fn actor_vars(
    ctx: &PolicyContext,
    current_strategy: Option<&Strategy>,
) -> BTreeMap<&'static str, String> {
    let mut strategies = ctx.prior_strategies.clone();
    if let Some(s) = current_strategy {
        strategies.push(s.clone());
    }
    let mut vars = BTreeMap::new();
    vars.insert("goal", ctx.goal.description.clone());
    vars.insert("history", render_history(&ctx.history));
    vars.insert("strategies", render_strategies(&strategies));
    vars.insert("observation", ctx.observation.content.clone());
    vars
}

/// Placeholder values for judging a finished trajectory.
pub fn prm_vars(goal_text: &str, trajectory: &Trajectory) -> BTreeMap<&'static str, String> {
    let mut vars = BTreeMap::new();
    vars.insert("goal", goal_text.to_string());
    vars.insert("history", render_trajectory_history(trajectory));
    vars.insert("strategies", render_trajectory_strategies(trajectory));
    vars.insert("score", format!("{}", trajectory.final_score));
    vars
}
