//! Randomized invariants over the reward math, the trajectory schema, and
//! full episodes in every registered environment.

use std::sync::Arc;

use proptest::prelude::*;

use epo_core::actor::{Actor, ActorContext, ScriptedActor};
use epo_core::envs::{
    default_max_turns, oracle_prm_label, scenario_from_id, score_range, vocabulary, EnvError,
    Environment, SPLIT_SIZE,
};
use epo_core::model::{
    self, Behavior, Goal, Observation, ObservationSource, Scenario, Token, Trajectory, Turn,
};
use epo_core::policy::{
    BackendError, ContextSoftmaxPolicy, Decoding, PolicyBackend, PolicyContext, PolicyGradient,
};
use epo_core::reward::{advantages, discounted_returns};
use epo_core::rollout::{run_episode_in, self_play_episode, EpoInstance, RolloutConfig};

// --- oracles -----------------------------------------------------------------

/// O(T²) discounted-return reference: explicit power sums, no recursion.
fn returns_by_power_sum(rewards: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            rewards[t..]
                .iter()
                .enumerate()
                .map(|(offset, r)| gamma.powi(offset as i32) * r)
                .sum()
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0f64.max(a.abs()).max(b.abs())
}

// --- reward math -------------------------------------------------------------

proptest! {
    #[test]
    fn discounted_returns_match_the_power_sum(
        rewards in prop::collection::vec(-1.0e6..1.0e6f64, 0..40),
        gamma in 0.0..=1.0f64,
    ) {
        let fast = discounted_returns(&rewards, gamma);
        let slow = returns_by_power_sum(&rewards, gamma);
        prop_assert_eq!(fast.len(), slow.len());
        for (f, s) in fast.iter().zip(&slow) {
            prop_assert!(close(*f, *s, 1e-12), "fast {f} vs slow {s}");
        }
    }

    #[test]
    fn advantages_stay_inside_the_unit_interval(
        rewards in prop::collection::vec(-1.0e6..1.0e6f64, 0..40),
        gamma in 0.0..=1.0f64,
    ) {
        for a in advantages(&rewards, gamma) {
            prop_assert!(a.is_finite());
            prop_assert!(a.abs() <= 1.0, "advantage {a} escapes [-1, 1]");
        }
    }

    #[test]
    fn advantages_never_flip_the_return_sign(
        rewards in prop::collection::vec(-100.0..100.0f64, 1..20),
        gamma in 0.0..=1.0f64,
    ) {
        let advs = advantages(&rewards, gamma);
        let refs = returns_by_power_sum(&rewards, gamma);
        for (a, r) in advs.iter().zip(&refs) {
            // Either the product is non-negative or the advantage is noise-level.
            prop_assert!(a * r >= 0.0 || a.abs() < 1e-9, "advantage {a} against return {r}");
        }
    }

    #[test]
    fn zero_rewards_give_zero_advantages(
        len in 0usize..30,
        gamma in 0.0..=1.0f64,
    ) {
        prop_assert_eq!(advantages(&vec![0.0; len], gamma), vec![0.0; len]);
    }

    /// Binary reward vectors — all entries 0 or one shared magnitude, which is
    /// every vector the labeling pipeline emits — give bit-identical
    /// advantages under any positive rescaling.
    #[test]
    fn binary_rewards_make_scaling_exact(
        mask in prop::collection::vec(any::<bool>(), 1..30),
        magnitude in 1.0e-6..1.0e6f64,
        factor in 1.0e-3..1.0e3f64,
        gamma in 0.0..=1.0f64,
    ) {
        let base: Vec<f64> = mask.iter().map(|&on| if on { magnitude } else { 0.0 }).collect();
        let scaled: Vec<f64> = base.iter().map(|r| r * factor).collect();
        let a = advantages(&base, gamma);
        let b = advantages(&scaled, gamma);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.to_bits(), y.to_bits(), "{} vs {} differ in bits", x, y);
        }
    }
}

// --- trajectory schema -------------------------------------------------------

fn token_strategy() -> impl Strategy<Value = Token> {
    prop_oneof![
        any::<u64>().prop_map(Token::Id),
        "[a-z_]{1,12}".prop_map(Token::Text),
    ]
}

fn strategy_strategy() -> impl Strategy<Value = model::Strategy> {
    (prop::collection::vec(token_strategy(), 1..4), any::<bool>(), "[a-z ]{1,20}").prop_map(
        |(tokens, with_lps, rendered)| {
            let token_logprobs =
                with_lps.then(|| tokens.iter().map(|_| -0.25f64).collect::<Vec<_>>());
            model::Strategy { tokens, token_logprobs, rendered }
        },
    )
}

fn turn_strategy() -> impl Strategy<Value = (Turn, u32)> {
    (
        1u32..3,
        prop_oneof![
            Just(ObservationSource::Environment),
            Just(ObservationSource::Partner)
        ],
        ".{0,40}",
        prop::option::of(strategy_strategy()),
        "[a-z 0-9$]{1,30}",
        prop::option::of(prop_oneof![Just(0.0f64), Just(1.0f64)]),
    )
        .prop_map(|(gap, source, content, strategy, behavior, process_reward)| {
            let turn = Turn {
                observation: Observation { turn_index: 0, source, content },
                strategy,
                behavior,
                process_reward,
            };
            (turn, gap)
        })
}

fn trajectory_strategy() -> impl Strategy<Value = Trajectory> {
    (
        "[a-z0-9:-]{1,24}",
        0u64..2 * SPLIT_SIZE,
        "[a-z_]{1,10}",
        "v[0-9]{1,3}",
        any::<bool>(),
        -1.0e3..1.0e3f64,
        prop::collection::vec(turn_strategy(), 0..8),
    )
        .prop_map(|(tid, index, participant, version, terminal, score, raw_turns)| {
            let mut next_index = 0u32;
            let turns = raw_turns
                .into_iter()
                .map(|(mut turn, gap)| {
                    next_index += gap;
                    turn.observation.turn_index = next_index;
                    turn
                })
                .collect();
            Trajectory {
                trajectory_id: tid,
                scenario_id: format!("negotiation-{index:05}"),
                participant_id: participant,
                policy_version: version,
                terminal,
                final_score: score,
                turns,
            }
        })
}

proptest! {
    #[test]
    fn trajectories_round_trip_through_jsonl(trajectory in trajectory_strategy()) {
        prop_assert!(trajectory.validate().is_ok());
        let line = serde_json::to_string(&trajectory).unwrap();
        prop_assert!(!line.contains('\n'), "one record per line");
        prop_assert!(
            line.starts_with("{\"trajectory_id\":"),
            "record must lead with its id: {line}"
        );
        let back: Trajectory = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, trajectory);
    }
}

// --- full episodes over the registered environments ---------------------------

fn env_ids() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("negotiation"), Just("shop"), Just("household")]
}

fn toy_instances(env_id: &str) -> (Arc<ContextSoftmaxPolicy>, Arc<ScriptedActor>) {
    let vocab = vocabulary(env_id).unwrap();
    let policy = Arc::new(ContextSoftmaxPolicy::new(vocab.tokens.clone(), 0.7).unwrap());
    (policy, Arc::new(ScriptedActor::new(env_id)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn episodes_replay_identically_and_respect_the_contract(
        env_id in env_ids(),
        index in 0u64..2 * SPLIT_SIZE,
        seed in any::<u64>(),
    ) {
        let scenario = scenario_from_id(&format!("{env_id}-{index:05}")).unwrap();
        let (policy, actor) = toy_instances(env_id);
        let config = RolloutConfig::new(seed);

        let first = self_play_episode(&scenario, policy.clone(), actor.clone(), &config).unwrap();
        let second = self_play_episode(&scenario, policy, actor, &config).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&first).unwrap(),
            serde_json::to_string(&second).unwrap(),
            "same seed must replay byte-for-byte"
        );

        let cap = default_max_turns(env_id).unwrap();
        let total_turns: usize = first.iter().map(|t| t.turns.len()).sum();
        prop_assert!(total_turns as u32 <= cap, "{total_turns} turns over cap {cap}");

        let (lo, hi) = score_range(env_id).unwrap();
        let vocab = vocabulary(env_id).unwrap();
        for trajectory in &first {
            prop_assert!(trajectory.terminal, "episodes must finish within the cap");
            prop_assert!(
                (lo..=hi).contains(&trajectory.final_score),
                "score {} outside [{lo}, {hi}]", trajectory.final_score
            );
            for (i, turn) in trajectory.turns.iter().enumerate() {
                prop_assert_eq!(turn.observation.turn_index as usize, i + 1);
                let strategy = turn.strategy.as_ref().unwrap();
                let token = strategy.tokens[0].as_text().unwrap();
                prop_assert!(vocab.contains(token), "token {token:?} not in vocabulary");
            }

            // Judging the same episode twice picks the same critical turns.
            let once = oracle_prm_label(trajectory).unwrap();
            let twice = oracle_prm_label(trajectory).unwrap();
            prop_assert_eq!(once.indexes, twice.indexes);
        }
    }

    #[test]
    fn observations_never_leak_the_partner_goal(
        index in 0u64..2 * SPLIT_SIZE,
        seed in any::<u64>(),
    ) {
        let scenario = scenario_from_id(&format!("negotiation-{index:05}")).unwrap();
        let (policy, actor) = toy_instances("negotiation");
        let episode = self_play_episode(&scenario, policy, actor, &RolloutConfig::new(seed)).unwrap();
        prop_assert_eq!(episode.len(), 2);
        for trajectory in &episode {
            let partner_goal = scenario
                .goals
                .iter()
                .find(|g| g.agent_id != trajectory.participant_id)
                .unwrap();
            let serialized = serde_json::to_string(trajectory).unwrap();
            prop_assert!(
                !serialized.contains(&partner_goal.description),
                "partner goal text leaked into {}", trajectory.participant_id
            );
        }
    }
}

// --- seat symmetry under a mirrored environment --------------------------------

/// Two seats, strict alternation, and observations that only ever reveal the
/// partner's move from the *previous* round — so neither seat has an
/// information edge and swapping the policies must mirror the outcome.
struct MirrorEnv {
    moves: Vec<(String, String)>,
    cap: u32,
}

impl MirrorEnv {
    fn new(rounds: u32) -> Self {
        MirrorEnv { moves: Vec::new(), cap: rounds * 2 }
    }

    fn moves_by(&self, id: &str) -> Vec<&str> {
        self.moves.iter().filter(|(p, _)| p == id).map(|(_, b)| b.as_str()).collect()
    }
}

impl Environment for MirrorEnv {
    fn env_id(&self) -> &'static str {
        "mirror"
    }

    fn participants(&self) -> Vec<String> {
        vec!["left".into(), "right".into()]
    }

    fn current_participant(&self) -> Option<String> {
        if self.done() {
            None
        } else if self.moves.len() % 2 == 0 {
            Some("left".into())
        } else {
            Some("right".into())
        }
    }

    fn done(&self) -> bool {
        self.moves.len() as u32 >= self.cap
    }

    fn turn_count(&self) -> u32 {
        self.moves.len() as u32
    }

    fn max_turns(&self) -> u32 {
        self.cap
    }

    fn observe(&mut self, participant_id: &str) -> Result<(ObservationSource, String), EnvError> {
        let own = self.moves_by(participant_id).len();
        let partner = if participant_id == "left" { "right" } else { "left" };
        let revealed = if own == 0 {
            "nothing yet".to_string()
        } else {
            self.moves_by(partner)[own - 1].to_string()
        };
        Ok((ObservationSource::Partner, format!("round {}. partner previously: {revealed}", own + 1)))
    }

    fn step(&mut self, participant_id: &str, behavior: &str) -> Result<(), EnvError> {
        match self.current_participant() {
            Some(expected) if expected == participant_id => {
                self.moves.push((participant_id.to_string(), behavior.to_string()));
                Ok(())
            }
            Some(expected) => Err(EnvError::OutOfTurn {
                participant_id: participant_id.to_string(),
                expected,
            }),
            None => Err(EnvError::StepAfterDone),
        }
    }

    fn score(&self, participant_id: &str) -> Result<f64, EnvError> {
        if !self.done() {
            return Err(EnvError::ScoreBeforeDone);
        }
        let partner = if participant_id == "left" { "right" } else { "left" };
        let own = self.moves_by(participant_id);
        let theirs = self.moves_by(partner);
        let shared = own.iter().filter(|b| **b == "share").count() as f64;
        let mutual = own
            .iter()
            .zip(&theirs)
            .filter(|(a, b)| **a == "share" && **b == "share")
            .count() as f64;
        Ok(shared * 0.25 + mutual * 0.5)
    }
}

/// Stateless policy that plays a fixed script keyed off the turn index.
struct CyclingPolicy {
    script: Vec<String>,
}

impl PolicyBackend for CyclingPolicy {
    fn sample(
        &self,
        ctx: &PolicyContext,
        _decoding: Decoding,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<model::Strategy, BackendError> {
        let pick = (ctx.observation.turn_index as usize - 1) % self.script.len();
        let token = self.script[pick].clone();
        Ok(model::Strategy {
            tokens: vec![Token::Text(token.clone())],
            token_logprobs: None,
            rendered: token,
        })
    }

    fn logprobs(&self, _ctx: &PolicyContext, tokens: &[Token]) -> Result<Vec<f64>, BackendError> {
        Ok(vec![0.0; tokens.len()])
    }

    fn apply_gradient(&self, _gradient: &PolicyGradient, _step: f64) -> Result<String, BackendError> {
        Err(BackendError::Unsupported("scripted test policy"))
    }

    fn version(&self) -> String {
        format!("script:{}", self.script.join(","))
    }

    fn param_digest(&self) -> String {
        self.script.join("|")
    }
}

/// Actor that does exactly what the strategist asked.
struct EchoActor;

impl Actor for EchoActor {
    fn act(&self, context: &ActorContext) -> Result<Behavior, BackendError> {
        let content = context
            .strategy
            .map(|s| s.rendered.clone())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "wait".to_string());
        Ok(Behavior { content, actor_id: self.actor_id() })
    }

    fn actor_id(&self) -> String {
        "echo".to_string()
    }

    fn digest(&self) -> String {
        "echo-v1".to_string()
    }
}

fn mirror_scenario(rounds: u32) -> Scenario {
    let goal = |agent: &str| Goal {
        agent_id: agent.to_string(),
        description: "earn points by sharing when it pays".to_string(),
        score_spec: "mirror_points".to_string(),
    };
    Scenario {
        scenario_id: "mirror-0".to_string(),
        context: "Two players exchange moves for a fixed number of rounds.".to_string(),
        goals: vec![goal("left"), goal("right")],
        env_id: "mirror".to_string(),
        max_turns: rounds * 2,
    }
}

fn run_mirror(
    rounds: u32,
    left: Arc<dyn PolicyBackend>,
    right: Arc<dyn PolicyBackend>,
    seed: u64,
) -> Vec<Trajectory> {
    let scenario = mirror_scenario(rounds);
    let actor: Arc<dyn Actor> = Arc::new(EchoActor);
    let instances = vec![
        EpoInstance { participant_id: "left".into(), strategist: Some(left), actor: actor.clone() },
        EpoInstance { participant_id: "right".into(), strategist: Some(right), actor },
    ];
    let mut env = MirrorEnv::new(rounds);
    let config = RolloutConfig { decoding: Decoding::Greedy, ..RolloutConfig::new(seed) };
    run_episode_in(&mut env, &scenario, &instances, &config).unwrap()
}

fn move_token() -> impl Strategy<Value = String> {
    prop_oneof![Just("share".to_string()), Just("hold".to_string()), Just("probe".to_string())]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn swapping_seats_mirrors_scores_and_transcripts(
        script_a in prop::collection::vec(move_token(), 1..4),
        script_b in prop::collection::vec(move_token(), 1..4),
        rounds in 1u32..5,
        seed in any::<u64>(),
    ) {
        let a: Arc<dyn PolicyBackend> = Arc::new(CyclingPolicy { script: script_a });
        let b: Arc<dyn PolicyBackend> = Arc::new(CyclingPolicy { script: script_b });

        let forward = run_mirror(rounds, a.clone(), b.clone(), seed);
        let swapped = run_mirror(rounds, b, a, seed);

        // Policy A's record in the left seat equals its record in the right
        // seat, move for move, and the scores swap exactly.
        let behaviors = |t: &Trajectory| t.turns.iter().map(|x| x.behavior.clone()).collect::<Vec<_>>();
        prop_assert_eq!(behaviors(&forward[0]), behaviors(&swapped[1]));
        prop_assert_eq!(behaviors(&forward[1]), behaviors(&swapped[0]));
        prop_assert_eq!(forward[0].final_score.to_bits(), swapped[1].final_score.to_bits());
        prop_assert_eq!(forward[1].final_score.to_bits(), swapped[0].final_score.to_bits());
    }
}
