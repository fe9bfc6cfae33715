//! Desk-scale simulated environments with deterministic programmatic scorers:
//! a two-party price negotiation, a tiny web shop, and a text household.
//!
//! Scenario content is a pure function of the scenario id, so any scenario
//! can be regenerated from its id alone; seeds only choose which ids a batch
//! uses. Episodes are replayable: identical (scenario, seed, behaviors) give
//! identical observations and scores.

pub mod household;
pub mod negotiation;
pub mod shop;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{PrmParseError, ProcessRewardLabel};
use crate::model::{ObservationSource, Scenario, Trajectory, ValidationError};
use crate::policy::splitmix64;

/// Environment ids the registry accepts.
pub const REGISTERED_ENV_IDS: [&str; 3] = ["negotiation", "shop", "household"];

/// Scenario indexes below this bound are the seen split; at or above it (and
/// below twice it) the unseen split.
pub const SPLIT_SIZE: u64 = 50_000;

fn registered_ids() -> String {
    REGISTERED_ENV_IDS.join(", ")
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment {requested:?}; registered ids: {registered}")]
    UnknownEnv { requested: String, registered: String },
    #[error("scenario {scenario_id:?} belongs to environment {actual:?}, not {expected:?}")]
    ScenarioMismatch { scenario_id: String, expected: String, actual: String },
    #[error("malformed scenario id {scenario_id:?}: {reason}")]
    BadScenarioId { scenario_id: String, reason: String },
    #[error("participant {participant_id:?} moved out of turn; expected {expected:?}")]
    OutOfTurn { participant_id: String, expected: String },
    #[error("unknown participant {participant_id:?} for this scenario")]
    UnknownParticipant { participant_id: String },
    #[error("episode is finished; no steps accepted after done")]
    StepAfterDone,
    #[error("score requested before the episode finished")]
    ScoreBeforeDone,
    #[error("cannot label non-terminal trajectory {trajectory_id:?}")]
    NotTerminal { trajectory_id: String },
    #[error("cannot draw {requested} distinct scenarios from a pool of {pool}")]
    PoolExhausted { requested: usize, pool: usize },
    #[error("oracle label invalid: {0}")]
    BadLabel(#[from] PrmParseError),
    #[error("invalid scenario: {0}")]
    Invalid(#[from] ValidationError),
}

impl EnvError {
    pub(crate) fn unknown_env(requested: &str) -> Self {
        EnvError::UnknownEnv { requested: requested.to_string(), registered: registered_ids() }
    }
}

/// Which half of the scenario index space to draw from. The household
/// environment keys its object–receptacle pools off the split, so unseen
/// scenarios use combinations that never occur in the seen split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSplit {
    Seen,
    Unseen,
}

impl ScenarioSplit {
    pub fn index_base(self) -> u64 {
        match self {
            ScenarioSplit::Seen => 0,
            ScenarioSplit::Unseen => SPLIT_SIZE,
        }
    }
}

/// The named strategy tokens a toy policy chooses between for one environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyVocabulary {
    pub env_id: String,
    pub tokens: Vec<String>,
}

impl StrategyVocabulary {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.tokens.is_empty() {
            return Err(ValidationError::new("tokens", "vocabulary must be non-empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for token in &self.tokens {
            if !seen.insert(token.as_str()) {
                return Err(ValidationError::new("tokens", format!("duplicate token {token:?}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }
}

/// A running episode. Environments are single-threaded state machines; run
/// distinct episodes concurrently by giving each its own instance.
pub trait Environment: Send {
    fn env_id(&self) -> &'static str;
    /// Participant ids in scenario goal order.
    fn participants(&self) -> Vec<String>;
    /// Whose turn it is; `None` once the episode is done.
    fn current_participant(&self) -> Option<String>;
    fn done(&self) -> bool;
    /// Total steps taken across all participants.
    fn turn_count(&self) -> u32;
    fn max_turns(&self) -> u32;
    /// The observation waiting for a participant. Does not advance state.
    fn observe(&mut self, participant_id: &str) -> Result<(ObservationSource, String), EnvError>;
    /// Apply one behavior for the participant whose turn it is.
    fn step(&mut self, participant_id: &str, behavior: &str) -> Result<(), EnvError>;
    /// Final score; only available once done.
    fn score(&self, participant_id: &str) -> Result<f64, EnvError>;
}

/// Construct the environment an episode of this scenario runs in.
pub fn make_env(scenario: &Scenario, seed: u64) -> Result<Box<dyn Environment>, EnvError> {
    match scenario.env_id.as_str() {
        "negotiation" => Ok(Box::new(negotiation::NegotiationEnv::new(scenario, seed)?)),
        "shop" => Ok(Box::new(shop::ShopEnv::new(scenario, seed)?)),
        "household" => Ok(Box::new(household::HouseholdEnv::new(scenario, seed)?)),
        other => Err(EnvError::unknown_env(other)),
    }
}

/// Per-environment default turn caps.
pub fn default_max_turns(env_id: &str) -> Result<u32, EnvError> {
    match env_id {
        "negotiation" => Ok(20),
        "shop" => Ok(10),
        "household" => Ok(40),
        other => Err(EnvError::unknown_env(other)),
    }
}

/// Inclusive score range the environment's scorer can emit.
pub fn score_range(env_id: &str) -> Result<(f64, f64), EnvError> {
    match env_id {
        "negotiation" => Ok((0.0, 10.0)),
        "shop" => Ok((0.0, 1.0)),
        "household" => Ok((0.0, 1.0)),
        other => Err(EnvError::unknown_env(other)),
    }
}

/// The shipped strategy vocabulary for an environment.
pub fn vocabulary(env_id: &str) -> Result<StrategyVocabulary, EnvError> {
    let tokens = match env_id {
        "negotiation" => negotiation::vocabulary_tokens(),
        "shop" => shop::vocabulary_tokens(),
        "household" => household::vocabulary_tokens(),
        other => return Err(EnvError::unknown_env(other)),
    };
    Ok(StrategyVocabulary { env_id: env_id.to_string(), tokens })
}

fn scenario_for_index(env_id: &str, index: u64) -> Result<Scenario, EnvError> {
    let scenario = match env_id {
        "negotiation" => negotiation::scenario_for_index(index),
        "shop" => shop::scenario_for_index(index),
        "household" => household::scenario_for_index(index),
        other => return Err(EnvError::unknown_env(other)),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Draw `count` distinct scenarios from the split. The seed picks which
/// indexes are used; the content of each scenario depends only on its id.
pub fn generate_scenarios(
    env_id: &str,
    seed: u64,
    count: usize,
    split: ScenarioSplit,
) -> Result<Vec<Scenario>, EnvError> {
    if !REGISTERED_ENV_IDS.contains(&env_id) {
        return Err(EnvError::unknown_env(env_id));
    }
    let pool = SPLIT_SIZE as usize;
    if count > pool {
        return Err(EnvError::PoolExhausted { requested: count, pool });
    }
    let mut salt = 0u64;
    for b in env_id.bytes() {
        salt = splitmix64(salt ^ u64::from(b));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(splitmix64(seed ^ salt));
    rand::seq::index::sample(&mut rng, pool, count)
        .iter()
        .map(|offset| scenario_for_index(env_id, split.index_base() + offset as u64))
        .collect()
}

/// Split a scenario id like `negotiation-00042` into (env id, index).
pub fn parse_scenario_id(scenario_id: &str) -> Result<(&str, u64), EnvError> {
    let (env_id, digits) = scenario_id.rsplit_once('-').ok_or_else(|| EnvError::BadScenarioId {
        scenario_id: scenario_id.to_string(),
        reason: "expected <env>-<index>".into(),
    })?;
    let index: u64 = digits.parse().map_err(|_| EnvError::BadScenarioId {
        scenario_id: scenario_id.to_string(),
        reason: format!("index {digits:?} is not an integer"),
    })?;
    if !REGISTERED_ENV_IDS.contains(&env_id) {
        return Err(EnvError::unknown_env(env_id));
    }
    if index >= 2 * SPLIT_SIZE {
        return Err(EnvError::BadScenarioId {
            scenario_id: scenario_id.to_string(),
            reason: format!("index {index} outside the scenario space"),
        });
    }
    Ok((env_id, index))
}

/// Regenerate the full scenario from its id alone.
pub fn scenario_from_id(scenario_id: &str) -> Result<Scenario, EnvError> {
    let (env_id, index) = parse_scenario_id(scenario_id)?;
    scenario_for_index(env_id, index)
}

/// Programmatic stand-in for a judge model: label the strategist turns that
/// demonstrably moved the episode toward its score. Rules per environment:
/// negotiation — own moves cutting the offer gap by at least 10% of the
/// initial gap, plus deal-closing moves; shop — moves that strictly increased
/// the attribute-match count, plus the purchase; household — moves that
/// completed a subgoal.
pub fn oracle_prm_label(trajectory: &Trajectory) -> Result<ProcessRewardLabel, EnvError> {
    if !trajectory.terminal {
        return Err(EnvError::NotTerminal { trajectory_id: trajectory.trajectory_id.clone() });
    }
    let (env_id, _) = parse_scenario_id(&trajectory.scenario_id)?;
    match env_id {
        "negotiation" => negotiation::oracle_label(trajectory),
        "shop" => shop::oracle_label(trajectory),
        "household" => household::oracle_label(trajectory),
        other => Err(EnvError::unknown_env(other)),
    }
}
