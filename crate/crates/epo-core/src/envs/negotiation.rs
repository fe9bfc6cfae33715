//! Two-party used-goods price negotiation with a deterministic scorer.
//!
//! Both sides hold standing offers; moves are plain text ("offer 4200",
//! "accept", "leave", anything else holds). A deal closes when a side accepts
//! or the offers cross. Every observation carries a machine-readable state
//! tag so judges and scripted actors can work from the transcript alone.

use std::sync::OnceLock;

use serde::Deserialize;

use super::{EnvError, Environment};
use crate::chat::ProcessRewardLabel;
use crate::model::{Goal, ObservationSource, Scenario, Trajectory};
use crate::policy::splitmix64;

#[derive(Deserialize)]
struct NegotiationAsset {
    #[allow(dead_code)]
    version: u32,
    vocabulary: Vec<String>,
    items: Vec<String>,
}

fn asset() -> &'static NegotiationAsset {
    static ASSET: OnceLock<NegotiationAsset> = OnceLock::new();
    ASSET.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/envs/negotiation.json"))
            .expect("negotiation asset is valid JSON")
    })
}

pub(crate) fn vocabulary_tokens() -> Vec<String> {
    asset().vocabulary.clone()
}

pub const SELLER: &str = "seller";
pub const BUYER: &str = "buyer";

/// Scoring band as a fraction of the listing price: credit fades to zero at
/// this distance from a side's target.
pub const BAND_FRACTION: f64 = 0.35;
/// Concession step sizes as fractions of the initial offer gap.
pub const SMALL_CONCESSION: f64 = 0.02;
pub const LARGE_CONCESSION: f64 = 0.15;
/// A turn is judge-critical when it cuts the gap by at least this fraction of
/// the initial gap (or closes the deal).
pub const ORACLE_GAP_FRACTION: f64 = 0.10;

const STANCE_MET_SCORE: f64 = 9.5;
const STANCE_NEAR_SCORE: f64 = 7.0;
const SPREAD_WIDE: f64 = 0.6;
const SPREAD_NARROW: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Seller,
    Buyer,
}

impl Role {
    pub fn participant_id(self) -> &'static str {
        match self {
            Role::Seller => SELLER,
            Role::Buyer => BUYER,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Seller => Role::Buyer,
            Role::Buyer => Role::Seller,
        }
    }

    fn from_participant(participant_id: &str) -> Option<Role> {
        match participant_id {
            SELLER => Some(Role::Seller),
            BUYER => Some(Role::Buyer),
            _ => None,
        }
    }
}

/// Everything about one negotiation instance, derived purely from the
/// scenario index.
#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationParams {
    pub index: u64,
    pub item: String,
    pub list_price: i64,
    pub seller_target: i64,
    pub buyer_target: i64,
    pub buyer_opening: i64,
    pub band: f64,
    pub small_step: i64,
    pub large_step: i64,
    pub first_mover: Role,
}

impl NegotiationParams {
    pub fn initial_gap(&self) -> i64 {
        self.list_price - self.buyer_opening
    }

    pub fn target_for(&self, role: Role) -> i64 {
        match role {
            Role::Seller => self.seller_target,
            Role::Buyer => self.buyer_target,
        }
    }
}

/// Score a deal price for one side: full credit at the side's target, fading
/// linearly to zero at `band` dollars away.
pub(crate) fn price_score(params: &NegotiationParams, price: i64, role: Role) -> f64 {
    let distance = (price - params.target_for(role)).abs() as f64;
    10.0 * (1.0 - distance / params.band).clamp(0.0, 1.0)
}

pub fn params_for_index(index: u64) -> NegotiationParams {
    let items = &asset().items;
    let h = splitmix64(index ^ 0x6e65_676f);
    let list_price = 2000 + (h % 141) as i64 * 50;
    let gap0 = list_price * 2 / 5;
    NegotiationParams {
        index,
        item: items[(index as usize) % items.len()].clone(),
        list_price,
        seller_target: list_price * 9 / 10,
        buyer_target: list_price * 7 / 10,
        buyer_opening: list_price * 3 / 5,
        band: BAND_FRACTION * list_price as f64,
        small_step: ((gap0 as f64 * SMALL_CONCESSION).round() as i64).max(1),
        large_step: ((gap0 as f64 * LARGE_CONCESSION).round() as i64).max(1),
        first_mover: if index % 2 == 0 { Role::Seller } else { Role::Buyer },
    }
}

pub(crate) fn scenario_for_index(index: u64) -> Scenario {
    let p = params_for_index(index);
    let band = p.band.round() as i64;
    let seller_goal = Goal {
        agent_id: SELLER.to_string(),
        description: format!(
            "You are selling a used {} listed at ${}. Close a deal as close to ${} as possible; \
             credit fades to zero ${} away from it. No deal scores zero.",
            p.item, p.list_price, p.seller_target, band
        ),
        score_spec: "negotiation_band".to_string(),
    };
    let buyer_goal = Goal {
        agent_id: BUYER.to_string(),
        description: format!(
            "You want to buy a used {} listed at ${}. Close a deal as close to ${} as possible; \
             credit fades to zero ${} away from it. No deal scores zero.",
            p.item, p.list_price, p.buyer_target, band
        ),
        score_spec: "negotiation_band".to_string(),
    };
    Scenario {
        scenario_id: format!("negotiation-{index:05}"),
        context: format!("A used {} is listed for sale at ${}.", p.item, p.list_price),
        goals: vec![seller_goal, buyer_goal],
        env_id: "negotiation".to_string(),
        max_turns: 20,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Move {
    Offer(i64),
    Accept,
    Leave,
    Hold,
}

fn first_integer(text: &str) -> Option<i64> {
    let mut digits = String::new();
    for c in text.chars() {
        if c.is_ascii_digit() {
            if digits.len() < 12 {
                digits.push(c);
            }
        } else if !digits.is_empty() {
            break;
        }
    }
    digits.parse().ok()
}

/// Interpret a free-text utterance as a negotiation move. Anything without a
/// recognizable commitment holds the current position.
pub(crate) fn parse_move(text: &str) -> Move {
    let lower = text.to_lowercase();
    if lower.contains("accept") {
        return Move::Accept;
    }
    if lower.contains("leave") || lower.contains("walk away") {
        return Move::Leave;
    }
    if let Some(n) = first_integer(&lower) {
        return Move::Offer(n);
    }
    Move::Hold
}

/// Pull the standing offers out of a state tag like
/// `[list $2500; offers $2500 vs $1500; ...]` → (seller ask, buyer offer).
pub(crate) fn parse_offers_tag(text: &str) -> Option<(i64, i64)> {
    let at = text.rfind("offers $")?;
    let rest = &text[at + "offers $".len()..];
    let ask = first_integer(rest)?;
    let at_vs = rest.find("vs $")?;
    let offer = first_integer(&rest[at_vs + "vs $".len()..])?;
    Some((ask, offer))
}

/// Pull the listing price out of a state tag (`[list $2500; ...]`).
pub(crate) fn parse_list_tag(text: &str) -> Option<i64> {
    let at = text.rfind("[list $")?;
    first_integer(&text[at + "[list $".len()..])
}

pub struct NegotiationEnv {
    params: NegotiationParams,
    max_turns: u32,
    seller_ask: i64,
    buyer_offer: i64,
    deal_price: Option<i64>,
    turn_count: u32,
    done: bool,
    current: Role,
    pending_seller: (ObservationSource, String),
    pending_buyer: (ObservationSource, String),
    observed_seller: bool,
    observed_buyer: bool,
}

impl NegotiationEnv {
    pub fn new(scenario: &Scenario, _seed: u64) -> Result<Self, EnvError> {
        let (env_id, index) = super::parse_scenario_id(&scenario.scenario_id)?;
        if env_id != "negotiation" || scenario.env_id != "negotiation" {
            return Err(EnvError::ScenarioMismatch {
                scenario_id: scenario.scenario_id.clone(),
                expected: "negotiation".into(),
                actual: scenario.env_id.clone(),
            });
        }
        let params = params_for_index(index);
        let mut env = NegotiationEnv {
            seller_ask: params.list_price,
            buyer_offer: params.buyer_opening,
            deal_price: None,
            turn_count: 0,
            done: false,
            current: params.first_mover,
            max_turns: scenario.max_turns,
            pending_seller: (ObservationSource::Environment, String::new()),
            pending_buyer: (ObservationSource::Environment, String::new()),
            observed_seller: false,
            observed_buyer: false,
            params,
        };
        env.pending_seller = (ObservationSource::Environment, env.initial_observation(Role::Seller));
        env.pending_buyer = (ObservationSource::Environment, env.initial_observation(Role::Buyer));
        Ok(env)
    }

    fn initial_observation(&self, role: Role) -> String {
        let p = &self.params;
        match role {
            Role::Seller => format!(
                "You are the seller of a used {} listed at ${}. A buyer is interested. {}",
                p.item,
                p.list_price,
                self.tag(Role::Seller)
            ),
            Role::Buyer => format!(
                "You are the buyer of a used {} listed at ${}. The seller is waiting. {}",
                p.item,
                p.list_price,
                self.tag(Role::Buyer)
            ),
        }
    }

    fn score_at(&self, price: i64, role: Role) -> f64 {
        price_score(&self.params, price, role)
    }

    fn spread_word(&self) -> &'static str {
        let ratio = (self.seller_ask - self.buyer_offer) as f64 / self.params.initial_gap() as f64;
        if ratio >= SPREAD_WIDE {
            "wide"
        } else if ratio >= SPREAD_NARROW {
            "narrow"
        } else {
            "closing"
        }
    }

    fn stance_word(&self, viewer: Role) -> &'static str {
        let standing = match viewer {
            Role::Buyer => self.seller_ask,
            Role::Seller => self.buyer_offer,
        };
        let score = self.score_at(standing, viewer);
        if score >= STANCE_MET_SCORE {
            "met"
        } else if score >= STANCE_NEAR_SCORE {
            "near"
        } else {
            "far"
        }
    }

    /// Machine-readable state summary appended to every observation. The
    /// stance word describes how good accepting the partner's standing offer
    /// would be for the viewer.
    fn tag(&self, viewer: Role) -> String {
        format!(
            "[list ${}; offers ${} vs ${}; spread {}; stance {}]",
            self.params.list_price,
            self.seller_ask,
            self.buyer_offer,
            self.spread_word(),
            self.stance_word(viewer)
        )
    }

    fn observed(&self, role: Role) -> bool {
        match role {
            Role::Seller => self.observed_seller,
            Role::Buyer => self.observed_buyer,
        }
    }

    fn set_pending(&mut self, role: Role, source: ObservationSource, content: String) {
        match role {
            Role::Seller => self.pending_seller = (source, content),
            Role::Buyer => self.pending_buyer = (source, content),
        }
    }
}

impl Environment for NegotiationEnv {
    fn env_id(&self) -> &'static str {
        "negotiation"
    }

    fn participants(&self) -> Vec<String> {
        vec![SELLER.to_string(), BUYER.to_string()]
    }

    fn current_participant(&self) -> Option<String> {
        if self.done {
            None
        } else {
            Some(self.current.participant_id().to_string())
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
        let role = Role::from_participant(participant_id).ok_or_else(|| {
            EnvError::UnknownParticipant { participant_id: participant_id.to_string() }
        })?;
        match role {
            Role::Seller => self.observed_seller = true,
            Role::Buyer => self.observed_buyer = true,
        }
        Ok(match role {
            Role::Seller => self.pending_seller.clone(),
            Role::Buyer => self.pending_buyer.clone(),
        })
    }

    fn step(&mut self, participant_id: &str, behavior: &str) -> Result<(), EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let role = Role::from_participant(participant_id).ok_or_else(|| {
            EnvError::UnknownParticipant { participant_id: participant_id.to_string() }
        })?;
        if role != self.current {
            return Err(EnvError::OutOfTurn {
                participant_id: participant_id.to_string(),
                expected: self.current.participant_id().to_string(),
            });
        }

        match (role, parse_move(behavior)) {
            (Role::Buyer, Move::Accept) => {
                self.deal_price = Some(self.seller_ask);
                self.done = true;
            }
            (Role::Seller, Move::Accept) => {
                self.deal_price = Some(self.buyer_offer);
                self.done = true;
            }
            (_, Move::Leave) => self.done = true,
            (Role::Buyer, Move::Offer(n)) => {
                if n >= self.seller_ask {
                    self.deal_price = Some(self.seller_ask);
                    self.done = true;
                } else {
                    self.buyer_offer = n;
                }
            }
            (Role::Seller, Move::Offer(n)) => {
                if n <= self.buyer_offer {
                    self.deal_price = Some(self.buyer_offer);
                    self.done = true;
                } else {
                    self.seller_ask = n;
                }
            }
            (_, Move::Hold) => {}
        }

        self.turn_count += 1;
        if self.turn_count >= self.max_turns {
            self.done = true;
        }

        let partner = role.other();
        let mut content = String::new();
        if !self.observed(partner) {
            content.push_str(&format!(
                "The used {} is listed at ${}. ",
                self.params.item, self.params.list_price
            ));
        }
        content.push_str(behavior.trim());
        if self.done {
            match self.deal_price {
                Some(p) => content.push_str(&format!(" Deal struck at ${p}.")),
                None => content.push_str(" The negotiation ended without a deal."),
            }
        }
        let tag = self.tag(partner);
        content.push(' ');
        content.push_str(&tag);
        self.set_pending(partner, ObservationSource::Partner, content);

        let own_tag = self.tag(role);
        self.set_pending(
            role,
            ObservationSource::Environment,
            format!("You said: {}. {}", behavior.trim(), own_tag),
        );

        self.current = partner;
        Ok(())
    }

    fn score(&self, participant_id: &str) -> Result<f64, EnvError> {
        if !self.done {
            return Err(EnvError::ScoreBeforeDone);
        }
        let role = Role::from_participant(participant_id).ok_or_else(|| {
            EnvError::UnknownParticipant { participant_id: participant_id.to_string() }
        })?;
        Ok(match self.deal_price {
            Some(price) => self.score_at(price, role),
            None => 0.0,
        })
    }
}

/// Judge a finished negotiation trajectory without replaying the partner:
/// each strategist turn's pre-move state comes from its observation tag, the
/// move from its recorded behavior, and the initial gap from the scenario id.
pub(crate) fn oracle_label(trajectory: &Trajectory) -> Result<ProcessRewardLabel, EnvError> {
    let (env_id, index) = super::parse_scenario_id(&trajectory.scenario_id)?;
    if env_id != "negotiation" {
        return Err(EnvError::ScenarioMismatch {
            scenario_id: trajectory.scenario_id.clone(),
            expected: "negotiation".into(),
            actual: env_id.to_string(),
        });
    }
    let role = Role::from_participant(&trajectory.participant_id).ok_or_else(|| {
        EnvError::UnknownParticipant { participant_id: trajectory.participant_id.clone() }
    })?;
    let params = params_for_index(index);
    let gap0 = params.initial_gap() as f64;

    let mut ordinal = 0usize;
    let mut indexes = Vec::new();
    for turn in &trajectory.turns {
        if turn.strategy.is_none() {
            continue;
        }
        ordinal += 1;
        let Some((ask, offer)) = parse_offers_tag(&turn.observation.content) else {
            continue;
        };
        let gap_before = ask - offer;
        let (closed, gap_after) = match (role, parse_move(&turn.behavior)) {
            (_, Move::Accept) => (true, 0),
            (_, Move::Leave) | (_, Move::Hold) => (false, gap_before),
            (Role::Buyer, Move::Offer(n)) => {
                if n >= ask {
                    (true, 0)
                } else {
                    (false, ask - n)
                }
            }
            (Role::Seller, Move::Offer(n)) => {
                if n <= offer {
                    (true, 0)
                } else {
                    (false, n - offer)
                }
            }
        };
        let reduction = (gap_before - gap_after) as f64;
        let critical = if closed {
            // A closing move only counts when it locks in a price near the
            // mover's own target ("near" stance or better): sealing a bad
            // deal ended the episode but did not serve the goal.
            let price = match role {
                Role::Buyer => ask,
                Role::Seller => offer,
            };
            price_score(&params, price, role) >= STANCE_NEAR_SCORE - 1e-9
        } else {
            reduction >= ORACLE_GAP_FRACTION * gap0 - 1e-9
        };
        if critical {
            indexes.push(ordinal);
        }
    }
    Ok(ProcessRewardLabel::new(
        indexes,
        "own moves that cut the offer gap by at least 10% of the initial gap or closed a deal near the mover's target",
        trajectory.strategist_turn_count(),
    )?)
}
