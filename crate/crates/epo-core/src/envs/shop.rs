//! A tiny web shop: keyword search over a fixed catalog, option selection on
//! item pages, and a single purchase that ends the episode.
//!
//! The scorer is the classic attribute-match rule: the fraction of required
//! option values selected on the bought item, halved when the price
//! constraint is violated.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::{EnvError, Environment};
use crate::chat::ProcessRewardLabel;
use crate::model::{Goal, ObservationSource, Scenario, Trajectory};
use crate::policy::splitmix64;

#[derive(Deserialize)]
struct ShopAsset {
    #[allow(dead_code)]
    version: u32,
    vocabulary: Vec<String>,
    catalog: Vec<CatalogItem>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub title: String,
    pub keywords: Vec<String>,
    pub price: i64,
    pub options: BTreeMap<String, Vec<String>>,
}

fn asset() -> &'static ShopAsset {
    static ASSET: OnceLock<ShopAsset> = OnceLock::new();
    ASSET.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/envs/shop.json"))
            .expect("shop asset is valid JSON")
    })
}

pub(crate) fn vocabulary_tokens() -> Vec<String> {
    asset().vocabulary.clone()
}

pub const SHOPPER: &str = "shopper";

const RESULT_PAGE_SIZE: usize = 5;

/// What one shop scenario asks for, derived purely from the scenario index.
#[derive(Debug, Clone, PartialEq)]
pub struct ShopParams {
    pub index: u64,
    pub target: usize,
    pub required: Vec<(String, String)>,
    pub price_cap: i64,
}

pub fn params_for_index(index: u64) -> ShopParams {
    let catalog = &asset().catalog;
    let target = (index as usize) % catalog.len();
    let item = &catalog[target];
    let h = splitmix64(index ^ 0x7368_6f70);
    let required = item
        .options
        .iter()
        .enumerate()
        .map(|(i, (group, values))| {
            let pick = splitmix64(h.wrapping_add(i as u64)) as usize % values.len();
            (group.clone(), values[pick].clone())
        })
        .collect();
    ShopParams { index, target, required, price_cap: item.price + 1 + (h % 10) as i64 }
}

pub(crate) fn scenario_for_index(index: u64) -> Scenario {
    let p = params_for_index(index);
    let item = &asset().catalog[p.target];
    let required = p
        .required
        .iter()
        .map(|(g, v)| format!("{g}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    Scenario {
        scenario_id: format!("shop-{index:05}"),
        context: "A small web shop with keyword search.".to_string(),
        goals: vec![Goal {
            agent_id: SHOPPER.to_string(),
            description: format!(
                "Buy a {} — required: {} — budget ${}.",
                item.title, required, p.price_cap
            ),
            score_spec: "shop_checkout".to_string(),
        }],
        env_id: "shop".to_string(),
        max_turns: 10,
    }
}

/// Final score: matched attribute fraction, halved if over budget.
pub(crate) fn score_value(matched: usize, required: usize, price_ok: bool) -> f64 {
    let fraction = matched as f64 / required.max(1) as f64;
    fraction * if price_ok { 1.0 } else { 0.5 }
}

enum Action {
    Search(String),
    Click(String),
    Buy,
    Invalid,
}

fn parse_action(text: &str) -> Action {
    let t = text.trim().to_lowercase();
    if let Some(inner) = t.strip_prefix("search[").and_then(|r| r.strip_suffix(']')) {
        return Action::Search(inner.to_string());
    }
    if let Some(inner) = t.strip_prefix("click[").and_then(|r| r.strip_suffix(']')) {
        return Action::Click(inner.to_string());
    }
    if t == "buy now" || t.starts_with("buy") {
        return Action::Buy;
    }
    Action::Invalid
}

enum Page {
    Start,
    Results(Vec<usize>),
    Item { idx: usize, selected: BTreeMap<String, String> },
}

pub struct ShopEnv {
    params: ShopParams,
    page: Page,
    last_results: Vec<usize>,
    pending: String,
    turn_count: u32,
    max_turns: u32,
    done: bool,
    bought: Option<(usize, usize, i64)>, // (catalog idx, matched count, price)
}

impl ShopEnv {
    pub fn new(scenario: &Scenario, _seed: u64) -> Result<Self, EnvError> {
        let (env_id, index) = super::parse_scenario_id(&scenario.scenario_id)?;
        if env_id != "shop" || scenario.env_id != "shop" {
            return Err(EnvError::ScenarioMismatch {
                scenario_id: scenario.scenario_id.clone(),
                expected: "shop".into(),
                actual: scenario.env_id.clone(),
            });
        }
        let params = params_for_index(index);
        let mut env = ShopEnv {
            params,
            page: Page::Start,
            last_results: Vec::new(),
            pending: String::new(),
            turn_count: 0,
            max_turns: scenario.max_turns,
            done: false,
            bought: None,
        };
        env.pending = format!(
            "Welcome to the shop. Search the catalog to find your item. {}",
            env.tag()
        );
        Ok(env)
    }

    fn matched_on(&self, selected: &BTreeMap<String, String>) -> usize {
        self.params
            .required
            .iter()
            .filter(|(group, value)| selected.get(group).map(String::as_str) == Some(value))
            .count()
    }

    /// Machine-readable state summary appended to every observation.
    fn tag(&self) -> String {
        let n = self.params.required.len();
        match &self.page {
            Page::Item { idx, selected } => {
                let price_word =
                    if asset().catalog[*idx].price <= self.params.price_cap { "ok" } else { "high" };
                format!("[match {}/{}; price {}]", self.matched_on(selected), n, price_word)
            }
            _ => format!("[match 0/{n}; price -]"),
        }
    }

    fn render_page(&self) -> String {
        let catalog = &asset().catalog;
        match &self.page {
            Page::Start => "Welcome to the shop. Search the catalog to find your item.".to_string(),
            Page::Results(indexes) => {
                if indexes.is_empty() {
                    "No results found.".to_string()
                } else {
                    let lines = indexes
                        .iter()
                        .map(|&i| format!("{}: {} (${})", catalog[i].id, catalog[i].title, catalog[i].price))
                        .collect::<Vec<_>>()
                        .join(" | ");
                    format!("Results: {lines}")
                }
            }
            Page::Item { idx, selected } => {
                let item = &catalog[*idx];
                let options = item
                    .options
                    .iter()
                    .map(|(group, values)| format!("{group}: {}", values.join(" | ")))
                    .collect::<Vec<_>>()
                    .join("; ")
                    ;
                let chosen = if selected.is_empty() {
                    "(none)".to_string()
                } else {
                    selected
                        .iter()
                        .map(|(g, v)| format!("{g}={v}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                };
                format!(
                    "{} — ${}. options: {}. selected: {}. Type buy now to purchase.",
                    item.title, item.price, options, chosen
                )
            }
        }
    }

    fn set_pending_from_page(&mut self) {
        self.pending = format!("{} {}", self.render_page(), self.tag());
    }

    fn nothing_happens(&mut self) {
        self.pending = format!("Nothing happens. {}", self.tag());
    }

    fn run_search(&mut self, query: &str) {
        let words: Vec<&str> = query.split_whitespace().collect();
        let catalog = &asset().catalog;
        let mut scored: Vec<(usize, usize)> = catalog
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let hits = item
                    .keywords
                    .iter()
                    .filter(|k| words.iter().any(|w| w == &k.as_str()))
                    .count();
                (i, hits)
            })
            .filter(|&(_, hits)| hits > 0)
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let indexes: Vec<usize> = scored.into_iter().take(RESULT_PAGE_SIZE).map(|(i, _)| i).collect();
        self.last_results = indexes.clone();
        self.page = Page::Results(indexes);
        self.set_pending_from_page();
    }

    fn run_click(&mut self, arg: &str) {
        let catalog = &asset().catalog;
        match &mut self.page {
            Page::Results(indexes) => {
                if let Some(&idx) =
                    indexes.iter().find(|&&i| catalog[i].id == arg || catalog[i].title == arg)
                {
                    self.page = Page::Item { idx, selected: BTreeMap::new() };
                    self.set_pending_from_page();
                } else {
                    self.nothing_happens();
                }
            }
            Page::Item { idx, selected } => {
                if arg == "back" {
                    self.page = Page::Results(self.last_results.clone());
                    self.set_pending_from_page();
                    return;
                }
                let group = catalog[*idx]
                    .options
                    .iter()
                    .find(|(_, values)| values.iter().any(|v| v == arg))
                    .map(|(group, _)| group.clone());
                if let Some(group) = group {
                    selected.insert(group, arg.to_string());
                    self.set_pending_from_page();
                } else {
                    self.nothing_happens();
                }
            }
            Page::Start => self.nothing_happens(),
        }
    }
}

impl Environment for ShopEnv {
    fn env_id(&self) -> &'static str {
        "shop"
    }

    fn participants(&self) -> Vec<String> {
        vec![SHOPPER.to_string()]
    }

    fn current_participant(&self) -> Option<String> {
        if self.done {
            None
        } else {
            Some(SHOPPER.to_string())
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
        if participant_id != SHOPPER {
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
        if participant_id != SHOPPER {
            return Err(EnvError::UnknownParticipant {
                participant_id: participant_id.to_string(),
            });
        }
        match parse_action(behavior) {
            Action::Search(query) => self.run_search(&query),
            Action::Click(arg) => self.run_click(&arg),
            Action::Buy => match &self.page {
                Page::Item { idx, selected } => {
                    let matched = self.matched_on(selected);
                    let price = asset().catalog[*idx].price;
                    self.bought = Some((*idx, matched, price));
                    self.done = true;
                    self.pending = format!("Order placed. {}", self.tag());
                }
                _ => self.nothing_happens(),
            },
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
        if participant_id != SHOPPER {
            return Err(EnvError::UnknownParticipant {
                participant_id: participant_id.to_string(),
            });
        }
        Ok(match self.bought {
            Some((_, matched, price)) => {
                score_value(matched, self.params.required.len(), price <= self.params.price_cap)
            }
            None => 0.0,
        })
    }
}

/// Pull `(matched, required)` out of a state tag like `[match 1/2; price ok]`.
pub(crate) fn parse_match_tag(text: &str) -> Option<(usize, usize)> {
    let at = text.rfind("[match ")?;
    let rest = &text[at + "[match ".len()..];
    let slash = rest.find('/')?;
    let matched = rest[..slash].trim().parse().ok()?;
    let end = rest[slash + 1..].find(|c: char| !c.is_ascii_digit())?;
    let required = rest[slash + 1..slash + 1 + end].parse().ok()?;
    Some((matched, required))
}

/// Judge a finished shop trajectory from its transcript: credit strategist
/// turns whose move strictly raised the attribute-match count (visible in the
/// next observation's tag) and the purchase turn.
pub(crate) fn oracle_label(trajectory: &Trajectory) -> Result<ProcessRewardLabel, EnvError> {
    let (env_id, _) = super::parse_scenario_id(&trajectory.scenario_id)?;
    if env_id != "shop" {
        return Err(EnvError::ScenarioMismatch {
            scenario_id: trajectory.scenario_id.clone(),
            expected: "shop".into(),
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
        // A buy that closed the episode is the trajectory's last turn; a
        // failed buy attempt bounces and the transcript continues.
        if matches!(parse_action(&turn.behavior), Action::Buy) && i + 1 == trajectory.turns.len() {
            indexes.push(ordinal);
            continue;
        }
        let before = parse_match_tag(&turn.observation.content).map(|(m, _)| m);
        let after = trajectory
            .turns
            .get(i + 1)
            .and_then(|t| parse_match_tag(&t.observation.content))
            .map(|(m, _)| m);
        if let (Some(before), Some(after)) = (before, after) {
            if after > before {
                indexes.push(ordinal);
            }
        }
    }
    Ok(ProcessRewardLabel::new(
        indexes,
        "turns that raised the attribute-match count, plus the purchase",
        trajectory.strategist_turn_count(),
    )?)
}
