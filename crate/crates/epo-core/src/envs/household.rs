//! A text household: four rooms of receptacles, one task object, and ordered
//! subgoals (take, treat, place) that gate a binary score.
//!
//! Invalid or impossible actions get the literal feedback "Nothing happens."
//! and cost a turn, so an agent that thrashes runs out its 40-turn budget.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::Deserialize;

use super::{EnvError, Environment, SPLIT_SIZE};
use crate::chat::ProcessRewardLabel;
use crate::model::{Goal, ObservationSource, Scenario, Trajectory};

#[derive(Deserialize)]
struct HouseholdAsset {
    #[allow(dead_code)]
    version: u32,
    vocabulary: Vec<String>,
    rooms: std::collections::BTreeMap<String, Vec<String>>,
    containers: Vec<String>,
    appliances: std::collections::BTreeMap<String, String>,
    object_sources: std::collections::BTreeMap<String, String>,
    tasks: std::collections::BTreeMap<String, TaskPools>,
}

#[derive(Deserialize)]
struct TaskPools {
    seen: Vec<(String, String)>,
    unseen: Vec<(String, String)>,
}

fn asset() -> &'static HouseholdAsset {
    static ASSET: OnceLock<HouseholdAsset> = OnceLock::new();
    ASSET.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/envs/household.json"))
            .expect("household asset is valid JSON")
    })
}

pub(crate) fn vocabulary_tokens() -> Vec<String> {
    asset().vocabulary.clone()
}

pub const ROBOT: &str = "robot";

/// Task templates in scenario-index order.
pub const TEMPLATE_ORDER: [&str; 6] =
    ["place", "clean_place", "heat_place", "cool_place", "examine_light", "container_place"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Place,
    CleanPlace,
    HeatPlace,
    CoolPlace,
    ExamineLight,
    ContainerPlace,
}

impl TaskKind {
    fn from_name(name: &str) -> TaskKind {
        match name {
            "place" => TaskKind::Place,
            "clean_place" => TaskKind::CleanPlace,
            "heat_place" => TaskKind::HeatPlace,
            "cool_place" => TaskKind::CoolPlace,
            "examine_light" => TaskKind::ExamineLight,
            "container_place" => TaskKind::ContainerPlace,
            other => unreachable!("unknown task template {other}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Place => "place",
            TaskKind::CleanPlace => "clean_place",
            TaskKind::HeatPlace => "heat_place",
            TaskKind::CoolPlace => "cool_place",
            TaskKind::ExamineLight => "examine_light",
            TaskKind::ContainerPlace => "container_place",
        }
    }

    fn subgoals(self) -> Vec<Milestone> {
        match self {
            TaskKind::Place => vec![Milestone::Take, Milestone::Put],
            TaskKind::CleanPlace => vec![Milestone::Take, Milestone::Clean, Milestone::Put],
            TaskKind::HeatPlace => vec![Milestone::Take, Milestone::Heat, Milestone::Put],
            TaskKind::CoolPlace => vec![Milestone::Take, Milestone::Cool, Milestone::Put],
            TaskKind::ExamineLight => vec![Milestone::Take, Milestone::UseLamp],
            TaskKind::ContainerPlace => vec![Milestone::Open, Milestone::Take, Milestone::Put],
        }
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Milestone {
    Open,
    Take,
    Clean,
    Heat,
    Cool,
    UseLamp,
    Put,
}

/// One household task, derived purely from the scenario index. Indexes in the
/// unseen half of the id space draw from object–receptacle pools disjoint
/// from the seen ones.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdParams {
    pub index: u64,
    pub task: TaskKind,
    pub object: String,
    pub destination: String,
    pub source: String,
}

pub fn params_for_index(index: u64) -> HouseholdParams {
    let effective = index % SPLIT_SIZE;
    let unseen = index >= SPLIT_SIZE;
    let template = TEMPLATE_ORDER[(effective % 6) as usize];
    let pools = &asset().tasks[template];
    let pool = if unseen { &pools.unseen } else { &pools.seen };
    let (object, destination) = pool[((effective / 6) as usize) % pool.len()].clone();
    let source = asset().object_sources[&object].clone();
    HouseholdParams { index, task: TaskKind::from_name(template), object, destination, source }
}

fn goal_text(p: &HouseholdParams) -> String {
    match p.task {
        TaskKind::Place => format!("Put a {} on the {}.", p.object, p.destination),
        TaskKind::CleanPlace => format!("Put a clean {} on the {}.", p.object, p.destination),
        TaskKind::HeatPlace => format!("Put a hot {} on the {}.", p.object, p.destination),
        TaskKind::CoolPlace => format!("Put a cool {} on the {}.", p.object, p.destination),
        TaskKind::ExamineLight => format!("Examine the {} under the desklamp.", p.object),
        TaskKind::ContainerPlace => {
            format!("Take the {} from the {} and put it on the {}.", p.object, p.source, p.destination)
        }
    }
}

pub(crate) fn scenario_for_index(index: u64) -> Scenario {
    let p = params_for_index(index);
    Scenario {
        scenario_id: format!("household-{index:05}"),
        context: "A small four-room house.".to_string(),
        goals: vec![Goal {
            agent_id: ROBOT.to_string(),
            description: goal_text(&p),
            score_spec: "household_subgoals".to_string(),
        }],
        env_id: "household".to_string(),
        max_turns: 40,
    }
}

fn is_container(recep: &str) -> bool {
    asset().containers.iter().any(|c| c == recep)
}

fn is_receptacle(recep: &str) -> bool {
    asset().rooms.values().any(|receps| receps.iter().any(|r| r == recep))
}

fn in_or_on(recep: &str) -> &'static str {
    if is_container(recep) || recep == "fridge" || recep == "sinkbasin" {
        "in"
    } else {
        "on"
    }
}

enum Action {
    GoTo(String),
    Open(String),
    Take { object: String, recep: String },
    Put { object: String, recep: String },
    Treat { verb: Milestone, object: String, recep: String },
    Use(String),
    Look,
    Invalid,
}

fn parse_action(text: &str) -> Action {
    let t = text.trim().to_lowercase();
    if t == "look" || t.starts_with("examine ") || t == "inventory" {
        return Action::Look;
    }
    if let Some(rest) = t.strip_prefix("go to ") {
        return Action::GoTo(rest.trim().to_string());
    }
    if let Some(rest) = t.strip_prefix("open ") {
        return Action::Open(rest.trim().to_string());
    }
    if let Some(rest) = t.strip_prefix("use ") {
        return Action::Use(rest.trim().to_string());
    }
    if let Some(rest) = t.strip_prefix("take ") {
        if let Some((object, recep)) = rest.split_once(" from ") {
            return Action::Take { object: object.trim().into(), recep: recep.trim().into() };
        }
    }
    if let Some(rest) = t.strip_prefix("put ") {
        for separator in [" in/on ", " on ", " in "] {
            if let Some((object, recep)) = rest.split_once(separator) {
                return Action::Put { object: object.trim().into(), recep: recep.trim().into() };
            }
        }
    }
    for (prefix, verb) in
        [("clean ", Milestone::Clean), ("heat ", Milestone::Heat), ("cool ", Milestone::Cool)]
    {
        if let Some(rest) = t.strip_prefix(prefix) {
            if let Some((object, recep)) = rest.split_once(" with ") {
                return Action::Treat {
                    verb,
                    object: object.trim().into(),
                    recep: recep.trim().into(),
                };
            }
        }
    }
    Action::Invalid
}

pub struct HouseholdEnv {
    params: HouseholdParams,
    subgoals: Vec<Milestone>,
    completed: usize,
    location: String,
    holding: bool,
    object_at: Option<String>,
    opened: BTreeSet<String>,
    pending: String,
    turn_count: u32,
    max_turns: u32,
    done: bool,
}

impl HouseholdEnv {
    pub fn new(scenario: &Scenario, _seed: u64) -> Result<Self, EnvError> {
        let (env_id, index) = super::parse_scenario_id(&scenario.scenario_id)?;
        if env_id != "household" || scenario.env_id != "household" {
            return Err(EnvError::ScenarioMismatch {
                scenario_id: scenario.scenario_id.clone(),
                expected: "household".into(),
                actual: scenario.env_id.clone(),
            });
        }
        let params = params_for_index(index);
        let subgoals = params.task.subgoals();
        let mut env = HouseholdEnv {
            object_at: Some(params.source.clone()),
            params,
            subgoals,
            completed: 0,
            location: "hallway".to_string(),
            holding: false,
            opened: BTreeSet::new(),
            pending: String::new(),
            turn_count: 0,
            max_turns: scenario.max_turns,
            done: false,
        };
        env.pending = env.initial_observation();
        Ok(env)
    }

    fn initial_observation(&self) -> String {
        let rooms = asset()
            .rooms
            .iter()
            .map(|(room, receps)| format!("{room} ({})", receps.join(", ")))
            .collect::<Vec<_>>()
            .join("; ");
        format!(
            "You are in the hallway of a small house. Rooms: {rooms}. The {} is {} the {}. \
             Task: {} {}",
            self.params.object,
            in_or_on(&self.params.source),
            self.params.source,
            goal_text(&self.params),
            self.tag()
        )
    }

    fn tag(&self) -> String {
        format!("[subgoals {}/{}]", self.completed, self.subgoals.len())
    }

    /// Credit a milestone only when it is the next one the task requires.
    fn credit(&mut self, milestone: Milestone) {
        if self.subgoals.get(self.completed) == Some(&milestone) {
            self.completed += 1;
            if self.completed == self.subgoals.len() {
                self.done = true;
            }
        }
    }

    fn holding_note(&self) -> String {
        if self.holding {
            format!(" You are holding the {}.", self.params.object)
        } else {
            String::new()
        }
    }

    fn set_pending(&mut self, sentence: &str) {
        self.pending = format!("{sentence}{} {}", self.holding_note(), self.tag());
    }

    fn nothing_happens(&mut self) {
        self.set_pending("Nothing happens.");
    }

    fn describe_location(&self) -> String {
        if self.location == "hallway" {
            return "You are in the hallway.".to_string();
        }
        let recep = &self.location;
        let mut text = format!("You are at the {recep}.");
        if is_container(recep) && !self.opened.contains(recep) {
            text.push_str(&format!(" The {recep} is closed."));
        } else if self.object_at.as_deref() == Some(recep.as_str()) {
            text.push_str(&format!(" You see a {} here.", self.params.object));
        } else {
            text.push_str(" There is nothing task-relevant here.");
        }
        text
    }
}

impl Environment for HouseholdEnv {
    fn env_id(&self) -> &'static str {
        "household"
    }

    fn participants(&self) -> Vec<String> {
        vec![ROBOT.to_string()]
    }

    fn current_participant(&self) -> Option<String> {
        if self.done {
            None
        } else {
            Some(ROBOT.to_string())
        }
    }

    fn done(&self) -> bool {
        self.done
    }

    fn turn_count(&self) -> u32 {
        self.turn_count
    }

    fn max_turns(&self) -> u32 {
        self.max_turns
    }

    fn observe(&mut self, participant_id: &str) -> Result<(ObservationSource, String), EnvError> {
        if participant_id != ROBOT {
            return Err(EnvError::UnknownParticipant {
                participant_id: participant_id.to_string(),
            });
        }
        Ok((ObservationSource::Environment, self.pending.clone()))
    }

    fn step(&mut self, participant_id: &str, behavior: &str) -> Result<(), EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if participant_id != ROBOT {
            return Err(EnvError::UnknownParticipant {
                participant_id: participant_id.to_string(),
            });
        }
        match parse_action(behavior) {
            Action::GoTo(recep) => {
                if is_receptacle(&recep) {
                    self.location = recep;
                    let text = self.describe_location();
                    self.set_pending(&text);
                } else {
                    self.nothing_happens();
                }
            }
            Action::Open(recep) => {
                if self.location == recep && is_container(&recep) && !self.opened.contains(&recep)
                {
                    self.opened.insert(recep.clone());
                    let inside = if self.object_at.as_deref() == Some(recep.as_str()) {
                        format!("Inside you see a {}.", self.params.object)
                    } else {
                        "It is empty.".to_string()
                    };
                    if recep == self.params.source {
                        self.credit(Milestone::Open);
                    }
                    self.set_pending(&format!("You open the {recep}. {inside}"));
                } else {
                    self.nothing_happens();
                }
            }
            Action::Take { object, recep } => {
                let reachable = !is_container(&recep) || self.opened.contains(&recep);
                if object == self.params.object
                    && self.location == recep
                    && self.object_at.as_deref() == Some(recep.as_str())
                    && reachable
                {
                    self.holding = true;
                    self.object_at = None;
                    self.credit(Milestone::Take);
                    self.set_pending(&format!("You take the {object} from the {recep}."));
                } else {
                    self.nothing_happens();
                }
            }
            Action::Put { object, recep } => {
                if object == self.params.object && self.holding && self.location == recep {
                    self.holding = false;
                    self.object_at = Some(recep.clone());
                    if recep == self.params.destination {
                        self.credit(Milestone::Put);
                    }
                    self.set_pending(&format!(
                        "You put the {object} {} the {recep}.",
                        in_or_on(&recep)
                    ));
                } else {
                    self.nothing_happens();
                }
            }
            Action::Treat { verb, object, recep } => {
                let wanted = match verb {
                    Milestone::Clean => asset().appliances.get("clean"),
                    Milestone::Heat => asset().appliances.get("heat"),
                    Milestone::Cool => asset().appliances.get("cool"),
                    _ => None,
                };
                if object == self.params.object
                    && self.holding
                    && wanted.map(String::as_str) == Some(recep.as_str())
                    && self.location == recep
                {
                    self.credit(verb);
                    let verb_word = match verb {
                        Milestone::Clean => "clean",
                        Milestone::Heat => "heat",
                        Milestone::Cool => "cool",
                        _ => unreachable!(),
                    };
                    self.set_pending(&format!("You {verb_word} the {object} with the {recep}."));
                } else {
                    self.nothing_happens();
                }
            }
            Action::Use(recep) => {
                let lamp = asset().appliances.get("light").map(String::as_str);
                if Some(recep.as_str()) == lamp && self.location == recep && self.holding {
                    self.credit(Milestone::UseLamp);
                    self.set_pending(&format!(
                        "You turn on the {recep} and examine the {} under its light.",
                        self.params.object
                    ));
                } else {
                    self.nothing_happens();
                }
            }
            Action::Look => {
                let text = self.describe_location();
                self.set_pending(&text);
            }
            Action::Invalid => self.nothing_happens(),
        }
        self.turn_count += 1;
        if self.turn_count >= self.max_turns {
            self.done = true;
        }
        Ok(())
    }

    fn score(&self, participant_id: &str) -> Result<f64, EnvError> {
        if !self.done {
            return Err(EnvError::ScoreBeforeDone);
        }
        if participant_id != ROBOT {
            return Err(EnvError::UnknownParticipant {
                participant_id: participant_id.to_string(),
            });
        }
        Ok(if self.completed == self.subgoals.len() { 1.0 } else { 0.0 })
    }
}

/// Pull `(completed, total)` out of a state tag like `[subgoals 1/3]`.
pub(crate) fn parse_subgoals_tag(text: &str) -> Option<(usize, usize)> {
    let at = text.rfind("[subgoals ")?;
    let rest = &text[at + "[subgoals ".len()..];
    let slash = rest.find('/')?;
    let completed = rest[..slash].trim().parse().ok()?;
    let end = rest[slash + 1..].find(|c: char| !c.is_ascii_digit())?;
    let total = rest[slash + 1..slash + 1 + end].parse().ok()?;
    Some((completed, total))
}

/// Judge a finished household trajectory from its transcript: credit
/// strategist turns whose move completed a subgoal (the counter in the next
/// observation's tag rises, or the final move finished the task).
pub(crate) fn oracle_label(trajectory: &Trajectory) -> Result<ProcessRewardLabel, EnvError> {
    let (env_id, _) = super::parse_scenario_id(&trajectory.scenario_id)?;
    if env_id != "household" {
        return Err(EnvError::ScenarioMismatch {
            scenario_id: trajectory.scenario_id.clone(),
            expected: "household".into(),
            actual: env_id.to_string(),
        });
    }
    let mut ordinal = 0usize;
    let mut indexes = Vec::new();
    for (i, turn) in trajectory.turns.iter().enumerate() {
        if turn.strategy.is_none() {
            continue;
        }
        ordinal += 1;
        let before = parse_subgoals_tag(&turn.observation.content).map(|(k, _)| k);
        match trajectory.turns.get(i + 1) {
            Some(next) => {
                let after = parse_subgoals_tag(&next.observation.content).map(|(k, _)| k);
                if let (Some(before), Some(after)) = (before, after) {
                    if after > before {
                        indexes.push(ordinal);
                    }
                }
            }
            None => {
                if trajectory.final_score == 1.0 {
                    indexes.push(ordinal);
                }
            }
        }
    }
    Ok(ProcessRewardLabel::new(
        indexes,
        "moves that completed a task subgoal",
        trajectory.strategist_turn_count(),
    )?)
}
