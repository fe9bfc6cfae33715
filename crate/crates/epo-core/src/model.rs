//! Core domain model: goals, scenarios, strategies, turns, and trajectories,
//! plus the prompt-template type shared by every backend.
//!
//! Every type here is plain data, immutable after construction, and validated
//! explicitly via `validate()` so that persistence can re-check invariants on
//! load.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A structural-invariant violation, naming the offending field.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        ValidationError { field, reason: reason.into() }
    }
}

// --- goals and scenarios ---------------------------------------------------

/// One participant's private objective inside a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    /// Participant this goal belongs to; unique within a scenario.
    pub agent_id: String,
    /// Human-readable goal text; never shown to the other participant.
    pub description: String,
    /// Identifier of the programmatic scorer that judges this goal.
    pub score_spec: String,
}

impl Goal {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.description.is_empty() {
            return Err(ValidationError::new("description", "goal description is empty"));
        }
        if self.agent_id.is_empty() {
            return Err(ValidationError::new("agent_id", "goal agent_id is empty"));
        }
        Ok(())
    }
}

/// A playable episode setup: shared context plus one private goal per participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    /// Public situation text visible to every participant.
    pub context: String,
    /// One or two participants, each with a private goal.
    pub goals: Vec<Goal>,
    pub env_id: String,
    pub max_turns: u32,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.max_turns < 1 {
            return Err(ValidationError::new("max_turns", "must be ≥ 1"));
        }
        if self.goals.is_empty() || self.goals.len() > 2 {
            return Err(ValidationError::new(
                "goals",
                format!("expected 1 or 2 participants, got {}", self.goals.len()),
            ));
        }
        let mut seen = Vec::new();
        for goal in &self.goals {
            goal.validate()?;
            if seen.contains(&goal.agent_id.as_str()) {
                return Err(ValidationError::new(
                    "agent_id",
                    format!("duplicate participant {:?}", goal.agent_id),
                ));
            }
            seen.push(&goal.agent_id);
        }
        Ok(())
    }

    pub fn goal_for(&self, participant_id: &str) -> Option<&Goal> {
        self.goals.iter().find(|g| g.agent_id == participant_id)
    }

    /// Redacted serialization for one participant: the other side's goal is
    /// dropped entirely, so no substring of it can leak into prompts or logs.
    pub fn participant_view(&self, participant_id: &str) -> Result<ScenarioView, ValidationError> {
        let goal = self
            .goal_for(participant_id)
            .ok_or_else(|| ValidationError::new("agent_id", format!("no such participant {participant_id:?}")))?;
        Ok(ScenarioView {
            scenario_id: self.scenario_id.clone(),
            context: self.context.clone(),
            goal: goal.clone(),
            env_id: self.env_id.clone(),
            max_turns: self.max_turns,
        })
    }
}

/// What a single participant is allowed to see of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioView {
    pub scenario_id: String,
    pub context: String,
    pub goal: Goal,
    pub env_id: String,
    pub max_turns: u32,
}

// --- per-turn records -------------------------------------------------------

/// Where an observation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationSource {
    Environment,
    Partner,
}

impl fmt::Display for ObservationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationSource::Environment => write!(f, "environment"),
            ObservationSource::Partner => write!(f, "partner"),
        }
    }
}

/// What a participant perceives at the start of one of its turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 1-based position within the participant's own trajectory.
    pub turn_index: u32,
    pub source: ObservationSource,
    #[serde(rename = "observation")]
    pub content: String,
}

/// A single strategy token: either a backend-native id or plain text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Token {
    Id(u64),
    Text(String),
}

impl Token {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Token::Text(t) => Some(t),
            Token::Id(_) => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Id(id) => write!(f, "{id}"),
            Token::Text(t) => write!(f, "{t}"),
        }
    }
}

/// A strategist proposal: the token sequence it emitted for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    /// Emitted tokens, in order; never empty.
    pub tokens: Vec<Token>,
    /// Log-probability of each token under the strategist that produced it,
    /// when the backend can report them (finite-vocabulary backends can;
    /// remote chat services cannot).
    pub token_logprobs: Option<Vec<f64>>,
    /// The strategy as the actor sees it.
    pub rendered: String,
}

impl Strategy {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.tokens.is_empty() {
            return Err(ValidationError::new("tokens", "strategy has no tokens"));
        }
        if let Some(lps) = &self.token_logprobs {
            if lps.len() != self.tokens.len() {
                return Err(ValidationError::new(
                    "token_logprobs",
                    format!("{} logprobs for {} tokens", lps.len(), self.tokens.len()),
                ));
            }
            for lp in lps {
                if !lp.is_finite() || *lp > 0.0 {
                    return Err(ValidationError::new(
                        "token_logprobs",
                        format!("logprob {lp} is not a finite value ≤ 0"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// What the actor actually did with a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    /// Concrete action or utterance text handed to the environment.
    pub content: String,
    pub actor_id: String,
}

impl Behavior {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.content.is_empty() {
            return Err(ValidationError::new("behavior", "behavior content is empty"));
        }
        Ok(())
    }
}

/// One recorded turn: observation in, optional strategy, behavior out, and the
/// process reward once a judge has labeled the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(flatten)]
    pub observation: Observation,
    /// Absent when the strategist was bypassed (no-strategist ablation).
    pub strategy: Option<Strategy>,
    pub behavior: String,
    /// Exactly 0.0 or 1.0 once assigned; `None` until labeling.
    pub process_reward: Option<f64>,
}

impl Turn {
    pub fn new(observation: Observation, strategy: Option<Strategy>, behavior: &Behavior) -> Self {
        Turn {
            observation,
            strategy,
            behavior: behavior.content.clone(),
            process_reward: None,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.behavior.is_empty() {
            return Err(ValidationError::new("behavior", "behavior content is empty"));
        }
        if let Some(s) = &self.strategy {
            s.validate()?;
        }
        if let Some(r) = self.process_reward {
            if r != 0.0 && r != 1.0 {
                return Err(ValidationError::new(
                    "process_reward",
                    format!("must be exactly 0.0 or 1.0, got {r}"),
                ));
            }
        }
        Ok(())
    }
}

// --- trajectories -----------------------------------------------------------

/// The full record of one participant's episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub scenario_id: String,
    pub participant_id: String,
    /// Version tag of the strategist snapshot that generated this episode.
    pub policy_version: String,
    /// True when the environment finished the episode (naturally or by cap);
    /// false marks a partial record attached to an error.
    pub terminal: bool,
    pub final_score: f64,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    /// Number of turns that carry a strategy — the `T` every reward and loss
    /// computation indexes over.
    pub fn strategist_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.strategy.is_some()).count()
    }

    /// Turns that carry a strategy, in order.
    pub fn strategist_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.strategy.is_some())
    }

    /// Process rewards over strategist turns; `None` if any is unassigned.
    pub fn process_rewards(&self) -> Option<Vec<f64>> {
        self.strategist_turns().map(|t| t.process_reward).collect()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.policy_version.is_empty() {
            return Err(ValidationError::new("policy_version", "must be non-empty"));
        }
        if !self.final_score.is_finite() {
            return Err(ValidationError::new(
                "final_score",
                format!("must be finite, got {}", self.final_score),
            ));
        }
        let mut prev = 0u32;
        for turn in &self.turns {
            turn.validate()?;
            if turn.observation.turn_index <= prev {
                return Err(ValidationError::new(
                    "turn_index",
                    format!(
                        "must be strictly increasing: {} after {}",
                        turn.observation.turn_index, prev
                    ),
                ));
            }
            prev = turn.observation.turn_index;
        }
        Ok(())
    }
}

// --- prompt templates --------------------------------------------------------

/// Which slot of the pipeline a template fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRole {
    StrategistSys,
    ActorSys,
    PrmSys,
}

impl TemplateRole {
    /// Placeholders the render rule for this role will substitute.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateRole::StrategistSys | TemplateRole::ActorSys => {
                &["goal", "history", "strategies", "observation"]
            }
            TemplateRole::PrmSys => &["goal", "history", "strategies", "score"],
        }
    }
}

/// A system-prompt template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub role: TemplateRole,
    pub template: String,
}

impl PromptTemplate {
    pub fn new(role: TemplateRole, template: impl Into<String>) -> Result<Self, ValidationError> {
        let t = PromptTemplate { role, template: template.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        for name in self.role.required_placeholders() {
            if !self.template.contains(&format!("{{{name}}}")) {
                return Err(ValidationError::new(
                    "template",
                    format!("missing required placeholder {{{name}}}"),
                ));
            }
        }
        Ok(())
    }

    /// Substitute `{name}` for every provided variable. Unknown placeholders
    /// are left verbatim so render bugs are visible in the output.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> String {
        let mut out = self.template.clone();
        for (name, value) in vars {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}
