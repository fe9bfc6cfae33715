//! Frozen actors: they turn the current strategy plus interaction context
//! into one environment behavior and are never touched by training.
//!
//! The scripted actors work purely from text the environment already showed
//! them (goal, observations, state tags), so they stay deterministic and
//! carry no hidden channel to environment internals. A strategy token they
//! do not recognize is ignored in favor of a hold-pattern move; a missing
//! strategy (strategist disabled) falls back to a simple built-in policy.

use crate::chat::{chat_complete, ChatMessage, ChatServiceClient};
use crate::envs::negotiation::{
    parse_list_tag, parse_offers_tag, LARGE_CONCESSION, SMALL_CONCESSION,
};
use crate::envs::household;
use crate::model::{Behavior, Goal, Observation, Strategy, TemplateRole};
use crate::policy::{BackendError, HistoryStep};
use crate::prompts::{render_history, render_strategies, TemplateSet};

/// Everything an actor may condition on at one turn. Mirrors the strategist's
/// context plus the strategy just produced for this turn (when there is one).
#[derive(Debug, Clone)]
pub struct ActorContext<'a> {
    pub goal: &'a Goal,
    pub scenario_context: &'a str,
    pub history: &'a [HistoryStep],
    pub prior_strategies: &'a [Strategy],
    pub strategy: Option<&'a Strategy>,
    pub observation: &'a Observation,
}

pub trait Actor: Send + Sync {
    fn act(&self, context: &ActorContext) -> Result<Behavior, BackendError>;
    /// Identifier recorded on every behavior this actor emits.
    fn actor_id(&self) -> String;
    /// Digest of everything that determines this actor's behavior. Training
    /// must leave it unchanged — that is the frozen-actor contract.
    fn digest(&self) -> String;
}

fn primary_token(strategy: Option<&Strategy>) -> Option<String> {
    strategy.and_then(|s| s.tokens.first()).and_then(|t| t.as_text().map(str::to_string))
}

/// Deterministic per-environment actor driven by strategy tokens.
pub struct ScriptedActor {
    env_id: String,
}

impl ScriptedActor {
    pub fn new(env_id: impl Into<String>) -> Self {
        ScriptedActor { env_id: env_id.into() }
    }
}

impl Actor for ScriptedActor {
    fn act(&self, context: &ActorContext) -> Result<Behavior, BackendError> {
        let content = match self.env_id.as_str() {
            "negotiation" => negotiation_behavior(context),
            "shop" => shop_behavior(context),
            "household" => household_behavior(context),
            _ => "hold".to_string(),
        };
        Ok(Behavior { content, actor_id: self.actor_id() })
    }

    fn actor_id(&self) -> String {
        format!("scripted-{}", self.env_id)
    }

    fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(b"scripted-actor-rules-v1:");
        hasher.update(self.env_id.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

// --- negotiation ------------------------------------------------------------

fn latest_tagged_observation<'a>(context: &'a ActorContext) -> Option<&'a str> {
    if parse_offers_tag(&context.observation.content).is_some() {
        return Some(context.observation.content.as_str());
    }
    context
        .history
        .iter()
        .rev()
        .map(|step| step.observation.content.as_str())
        .find(|content| parse_offers_tag(content).is_some())
}

/// The price named after "close to $" in a negotiation goal description.
fn parse_goal_target(description: &str) -> Option<i64> {
    let (_, rest) = description.split_once("close to $")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn negotiation_behavior(context: &ActorContext) -> String {
    let selling = context.goal.description.contains("selling");
    let Some(tagged) = latest_tagged_observation(context) else {
        return "hold".to_string();
    };
    let Some((ask, offer)) = parse_offers_tag(tagged) else {
        return "hold".to_string();
    };
    let Some(list) = parse_list_tag(tagged) else {
        return "hold".to_string();
    };
    let gap0 = list * 2 / 5;
    let small = ((gap0 as f64 * SMALL_CONCESSION).round() as i64).max(1);
    let large = ((gap0 as f64 * LARGE_CONCESSION).round() as i64).max(1);
    let target = parse_goal_target(&context.goal.description).unwrap_or(0);
    let partner_standing = if selling { offer } else { ask };
    let close_enough = (partner_standing - target).abs() <= (target / 100).max(1);

    let concede = |step: i64| {
        if selling {
            format!("offer {}", ask - step)
        } else {
            format!("offer {}", offer + step)
        }
    };

    match primary_token(context.strategy).as_deref() {
        Some("open_high") => {
            if selling {
                format!("offer {list}")
            } else {
                format!("offer {}", list * 3 / 5)
            }
        }
        Some("concede_small") => concede(small),
        Some("concede_large") => concede(large),
        Some("hold_firm") => "hold".to_string(),
        Some("create_urgency") => "hold — this offer won't stay on the table".to_string(),
        Some("value_claim") => "hold — it's in great condition and worth it".to_string(),
        Some("accept") => "accept".to_string(),
        Some("leave") => {
            // Override a walk-away the moment the partner's standing offer is
            // within one percent of the own target.
            if close_enough {
                "accept".to_string()
            } else {
                "leave".to_string()
            }
        }
        Some(_) => "hold".to_string(),
        None => {
            // Strategist disabled: accept good offers, otherwise inch forward.
            if close_enough {
                "accept".to_string()
            } else {
                concede(small)
            }
        }
    }
}

// --- shop --------------------------------------------------------------------

struct ShopGoal {
    title: String,
    required: Vec<String>,
}

fn parse_shop_goal(description: &str) -> Option<ShopGoal> {
    let rest = description.strip_prefix("Buy a ")?;
    let (title, rest) = rest.split_once(" — required: ")?;
    let (required, _) = rest.split_once(" — budget ")?;
    let required = required
        .split(", ")
        .filter_map(|pair| pair.split_once('=').map(|(_, value)| value.to_string()))
        .collect();
    Some(ShopGoal { title: title.to_string(), required })
}

fn best_result_id(observation: &str, title: &str) -> Option<String> {
    let results = observation.split("Results: ").nth(1)?;
    let title_words: Vec<&str> = title.split_whitespace().collect();
    let mut best: Option<(usize, String)> = None;
    for entry in results.split(" | ") {
        let (id, rest) = entry.split_once(": ")?;
        let hits = title_words.iter().filter(|w| rest.contains(*w)).count();
        let candidate = (hits, id.trim().to_string());
        if best.as_ref().map(|(h, _)| candidate.0 > *h).unwrap_or(true) {
            best = Some(candidate);
        }
    }
    best.map(|(_, id)| id)
}

fn next_unselected_required(observation: &str, required: &[String]) -> Option<String> {
    let options = observation.split("options: ").nth(1)?;
    let selected = observation.split("selected: ").nth(1).unwrap_or("");
    required
        .iter()
        .find(|value| {
            options.contains(value.as_str()) && !selected.contains(&format!("={value}"))
        })
        .cloned()
}

fn shop_behavior(context: &ActorContext) -> String {
    let Some(goal) = parse_shop_goal(&context.goal.description) else {
        return "look".to_string();
    };
    let observation = context.observation.content.as_str();
    match primary_token(context.strategy).as_deref() {
        Some("search_exact") => format!("search[{}]", goal.title),
        Some("broaden_search") => {
            let word = goal.title.split_whitespace().last().unwrap_or(&goal.title);
            format!("search[{word}]")
        }
        Some("open_result") => match best_result_id(observation, &goal.title) {
            Some(id) => format!("click[{id}]"),
            None => format!("search[{}]", goal.title),
        },
        Some("select_option") => match next_unselected_required(observation, &goal.required) {
            Some(value) => format!("click[{value}]"),
            None => "look".to_string(),
        },
        Some("check_price") => "look".to_string(),
        Some("buy_now") => "buy now".to_string(),
        Some(_) => "look".to_string(),
        None => {
            // Strategist disabled: a straight-line search → open → select →
            // buy routine driven by the visible page.
            if observation.contains("options: ") {
                match next_unselected_required(observation, &goal.required) {
                    Some(value) => format!("click[{value}]"),
                    None => "buy now".to_string(),
                }
            } else if observation.contains("Results: ") {
                match best_result_id(observation, &goal.title) {
                    Some(id) => format!("click[{id}]"),
                    None => format!("search[{}]", goal.title),
                }
            } else {
                format!("search[{}]", goal.title)
            }
        }
    }
}

// --- household ----------------------------------------------------------------

struct HouseholdGoal {
    task: household::TaskKind,
    object: String,
    destination: String,
    source_hint: Option<String>,
}

fn parse_household_goal(description: &str) -> Option<HouseholdGoal> {
    use household::TaskKind;
    if let Some(rest) = description.strip_prefix("Examine the ") {
        let (object, _) = rest.split_once(" under the ")?;
        return Some(HouseholdGoal {
            task: TaskKind::ExamineLight,
            object: object.to_string(),
            destination: "desklamp".to_string(),
            source_hint: None,
        });
    }
    if let Some(rest) = description.strip_prefix("Take the ") {
        let (object, rest) = rest.split_once(" from the ")?;
        let (source, rest) = rest.split_once(" and put it on the ")?;
        let destination = rest.trim_end_matches('.');
        return Some(HouseholdGoal {
            task: TaskKind::ContainerPlace,
            object: object.to_string(),
            destination: destination.to_string(),
            source_hint: Some(source.to_string()),
        });
    }
    let rest = description.strip_prefix("Put a ")?;
    let (task, rest) = if let Some(r) = rest.strip_prefix("clean ") {
        (TaskKind::CleanPlace, r)
    } else if let Some(r) = rest.strip_prefix("hot ") {
        (TaskKind::HeatPlace, r)
    } else if let Some(r) = rest.strip_prefix("cool ") {
        (TaskKind::CoolPlace, r)
    } else {
        (TaskKind::Place, rest)
    };
    let (object, rest) = rest.split_once(" on the ")?;
    let destination = rest.trim_end_matches('.');
    Some(HouseholdGoal {
        task,
        object: object.to_string(),
        destination: destination.to_string(),
        source_hint: None,
    })
}

fn household_source(context: &ActorContext, goal: &HouseholdGoal) -> Option<String> {
    if let Some(hint) = &goal.source_hint {
        return Some(hint.clone());
    }
    let marker = format!("The {} is ", goal.object);
    std::iter::once(context.observation.content.as_str())
        .chain(context.history.iter().map(|step| step.observation.content.as_str()))
        .find_map(|content| {
            let at = content.find(&marker)?;
            let rest = &content[at + marker.len()..];
            let rest = rest.strip_prefix("in the ").or_else(|| rest.strip_prefix("on the "))?;
            Some(rest.split(['.', ',']).next()?.trim().to_string())
        })
}

fn household_appliance(task: household::TaskKind) -> Option<&'static str> {
    use household::TaskKind;
    match task {
        TaskKind::CleanPlace => Some("sinkbasin"),
        TaskKind::HeatPlace => Some("microwave"),
        TaskKind::CoolPlace => Some("fridge"),
        TaskKind::ExamineLight => Some("desklamp"),
        TaskKind::Place | TaskKind::ContainerPlace => None,
    }
}

fn household_plan(goal: &HouseholdGoal, source: &str) -> Vec<String> {
    use household::TaskKind;
    let mut plan = vec![format!("go to {source}")];
    if goal.task == TaskKind::ContainerPlace {
        plan.push(format!("open {source}"));
    }
    plan.push(format!("take {} from {source}", goal.object));
    match goal.task {
        TaskKind::CleanPlace => {
            plan.push("go to sinkbasin".to_string());
            plan.push(format!("clean {} with sinkbasin", goal.object));
        }
        TaskKind::HeatPlace => {
            plan.push("go to microwave".to_string());
            plan.push(format!("heat {} with microwave", goal.object));
        }
        TaskKind::CoolPlace => {
            plan.push("go to fridge".to_string());
            plan.push(format!("cool {} with fridge", goal.object));
        }
        TaskKind::ExamineLight => {
            plan.push("go to desklamp".to_string());
            plan.push("use desklamp".to_string());
            return plan;
        }
        TaskKind::Place | TaskKind::ContainerPlace => {}
    }
    plan.push(format!("go to {}", goal.destination));
    plan.push(format!("put {} on {}", goal.object, goal.destination));
    plan
}

fn household_behavior(context: &ActorContext) -> String {
    use household::TaskKind;
    let Some(goal) = parse_household_goal(&context.goal.description) else {
        return "look".to_string();
    };
    let Some(source) = household_source(context, &goal) else {
        return "look".to_string();
    };
    let treat_verb = |object: &str| match goal.task {
        TaskKind::CleanPlace => format!("clean {object} with sinkbasin"),
        TaskKind::HeatPlace => format!("heat {object} with microwave"),
        TaskKind::CoolPlace => format!("cool {object} with fridge"),
        TaskKind::ExamineLight => "use desklamp".to_string(),
        TaskKind::Place | TaskKind::ContainerPlace => "look".to_string(),
    };
    match primary_token(context.strategy).as_deref() {
        Some("go_source") => format!("go to {source}"),
        Some("open_source") => format!("open {source}"),
        Some("take_object") => format!("take {} from {source}", goal.object),
        Some("go_appliance") => match household_appliance(goal.task) {
            Some(appliance) => format!("go to {appliance}"),
            None => "look".to_string(),
        },
        Some("apply_appliance") => treat_verb(&goal.object),
        Some("use_light") => "use desklamp".to_string(),
        Some("go_destination") => format!("go to {}", goal.destination),
        Some("put_object") => format!("put {} on {}", goal.object, goal.destination),
        Some("look_around") => "look".to_string(),
        Some(_) => "look".to_string(),
        None => {
            // Strategist disabled: walk the canonical plan one step per turn.
            let plan = household_plan(&goal, &source);
            let step = context.history.len().min(plan.len() - 1);
            plan[step].clone()
        }
    }
}

/// Actor backed by a chat service; its identity (endpoint, model) is the
/// digest, so a training run provably leaves it untouched.
pub struct ChatActor {
    client: ChatServiceClient,
    templates: TemplateSet,
}

impl ChatActor {
    pub fn new(client: ChatServiceClient, templates: TemplateSet) -> Self {
        ChatActor { client, templates }
    }
}

impl Actor for ChatActor {
    fn act(&self, context: &ActorContext) -> Result<Behavior, BackendError> {
        debug_assert_eq!(self.templates.actor.role, TemplateRole::ActorSys);
        let mut strategies: Vec<Strategy> = context.prior_strategies.to_vec();
        if let Some(current) = context.strategy {
            strategies.push(current.clone());
        }
        let mut vars = std::collections::BTreeMap::new();
        vars.insert("goal", context.goal.description.clone());
        vars.insert("history", render_history(context.history));
        vars.insert("strategies", render_strategies(&strategies));
        vars.insert("observation", context.observation.content.clone());
        let prompt = self.templates.actor.render(&vars);
        let messages =
            [ChatMessage::system(prompt), ChatMessage::user("Reply with your next action.")];
        let text = chat_complete(&self.client, &messages)?;
        let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string();
        Ok(Behavior { content: line, actor_id: self.actor_id() })
    }

    fn actor_id(&self) -> String {
        format!("chat-{}", self.client.model)
    }

    fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.client.endpoint.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.client.model.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}
