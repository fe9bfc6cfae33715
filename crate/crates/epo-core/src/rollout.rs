//! Episode driver: strategist proposes, frozen actor acts, environment
//! advances, and everything is recorded as one trajectory per participant.
//!
//! Each participant slot keeps its own history, its own strategy list, and
//! its own RNG substream, so a two-party episode never leaks one side's
//! private context into the other's — self-play privacy is enforced by
//! construction, not by filtering afterwards.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::actor::{Actor, ActorContext};
use crate::envs::{make_env, parse_scenario_id, EnvError, Environment};
use crate::model::{Observation, Scenario, Strategy, Trajectory, Turn, ValidationError};
use crate::policy::{splitmix64, BackendError, Decoding, HistoryStep, PolicyBackend, PolicyContext};

/// One participant's wiring: which strategist proposes (None = this side
/// plays without one) and which frozen actor executes. Two slots may share
/// the same strategist for self-play.
#[derive(Clone)]
pub struct EpoInstance {
    pub participant_id: String,
    pub strategist: Option<Arc<dyn PolicyBackend>>,
    pub actor: Arc<dyn Actor>,
}

impl EpoInstance {
    /// Policy version recorded on this side's trajectories.
    fn policy_version(&self) -> String {
        self.strategist.as_ref().map(|s| s.version()).unwrap_or_else(|| "none".to_string())
    }
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub seed: u64,
    /// When false the strategist is bypassed entirely and turns record no
    /// strategy — the ablation baseline.
    pub strategist_enabled: bool,
    pub decoding: Decoding,
    /// Optional cap below the environment's own turn limit, for short runs.
    pub max_turns: Option<u32>,
}

impl RolloutConfig {
    pub fn new(seed: u64) -> Self {
        RolloutConfig {
            seed,
            strategist_enabled: true,
            decoding: Decoding::Sample { temperature: 0.7 },
            max_turns: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("environment error: {source}")]
    Env {
        #[source]
        source: EnvError,
        /// Turns recorded before the failure, for debugging.
        partial: Vec<Trajectory>,
    },
    #[error("backend error for {participant_id:?}: {source}")]
    Backend {
        participant_id: String,
        #[source]
        source: BackendError,
        partial: Vec<Trajectory>,
    },
    #[error("no instance provided for participant {participant_id:?}")]
    MissingInstance { participant_id: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

impl EpisodeError {
    /// Best-effort trajectories recorded up to the failure point.
    pub fn partial(&self) -> &[Trajectory] {
        match self {
            EpisodeError::Env { partial, .. } | EpisodeError::Backend { partial, .. } => partial,
            _ => &[],
        }
    }
}

/// Per-slot mutable episode state.
struct SlotState {
    history: Vec<HistoryStep>,
    strategies: Vec<Strategy>,
    turns: Vec<Turn>,
    rng: ChaCha8Rng,
}

fn trajectory_id(scenario: &Scenario, participant_id: &str, seed: u64) -> String {
    format!("{}:{}:{:016x}", scenario.scenario_id, participant_id, seed)
}

fn drive(
    env: &mut dyn Environment,
    scenario: &Scenario,
    instances: &[EpoInstance],
    config: &RolloutConfig,
) -> Result<Vec<Trajectory>, EpisodeError> {
    let mut slots: Vec<SlotState> = instances
        .iter()
        .enumerate()
        .map(|(i, _)| SlotState {
            history: Vec::new(),
            strategies: Vec::new(),
            turns: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(splitmix64(
                config.seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            )),
        })
        .collect();
    let turn_cap = config.max_turns.map(|m| m.min(env.max_turns())).unwrap_or(env.max_turns());

    // Closure-free snapshot used to attach partial trajectories to errors.
    let snapshot = |slots: &[SlotState], env: &dyn Environment| -> Vec<Trajectory> {
        instances
            .iter()
            .zip(slots)
            .map(|(instance, slot)| Trajectory {
                trajectory_id: trajectory_id(scenario, &instance.participant_id, config.seed),
                scenario_id: scenario.scenario_id.clone(),
                participant_id: instance.participant_id.clone(),
                policy_version: instance.policy_version(),
                terminal: env.done(),
                final_score: 0.0,
                turns: slot.turns.clone(),
            })
            .collect()
    };

    while !env.done() {
        let Some(participant_id) = env.current_participant() else {
            break;
        };
        let Some(slot_index) =
            instances.iter().position(|i| i.participant_id == participant_id)
        else {
            return Err(EpisodeError::MissingInstance { participant_id });
        };
        if slots[slot_index].turns.len() as u32 >= turn_cap {
            break;
        }
        let instance = &instances[slot_index];
        let goal = scenario
            .goal_for(&participant_id)
            .ok_or(EpisodeError::MissingInstance { participant_id: participant_id.clone() })?;

        let (source, content) = env.observe(&participant_id).map_err(|source| {
            EpisodeError::Env { source, partial: snapshot(&slots, env) }
        })?;
        let observation = Observation {
            turn_index: slots[slot_index].turns.len() as u32 + 1,
            source,
            content,
        };

        let strategist = if config.strategist_enabled { instance.strategist.as_ref() } else { None };
        let strategy = if let Some(strategist) = strategist {
            let ctx = PolicyContext {
                goal: goal.clone(),
                scenario_context: scenario.context.clone(),
                history: slots[slot_index].history.clone(),
                prior_strategies: slots[slot_index].strategies.clone(),
                observation: observation.clone(),
            };
            let slot = &mut slots[slot_index];
            match strategist.sample(&ctx, config.decoding, &mut slot.rng) {
                Ok(s) => Some(s),
                Err(source) => {
                    return Err(EpisodeError::Backend {
                        participant_id,
                        source,
                        partial: snapshot(&slots, env),
                    })
                }
            }
        } else {
            None
        };

        let actor_ctx = ActorContext {
            goal,
            scenario_context: &scenario.context,
            history: &slots[slot_index].history,
            prior_strategies: &slots[slot_index].strategies,
            strategy: strategy.as_ref(),
            observation: &observation,
        };
        let behavior = instance.actor.act(&actor_ctx).map_err(|source| {
            EpisodeError::Backend {
                participant_id: participant_id.clone(),
                source,
                partial: snapshot(&slots, env),
            }
        })?;

        env.step(&participant_id, &behavior.content).map_err(|source| {
            EpisodeError::Env { source, partial: snapshot(&slots, env) }
        })?;

        let slot = &mut slots[slot_index];
        slot.turns.push(Turn::new(observation.clone(), strategy.clone(), &behavior));
        slot.history.push(HistoryStep { observation, behavior: behavior.content.clone() });
        if let Some(s) = strategy {
            slot.strategies.push(s);
        }
    }

    let mut trajectories = Vec::with_capacity(instances.len());
    for (instance, slot) in instances.iter().zip(&mut slots) {
        let final_score = if env.done() {
            env.score(&instance.participant_id)
                .map_err(|source| EpisodeError::Env { source, partial: Vec::new() })?
        } else {
            0.0
        };
        let trajectory = Trajectory {
            trajectory_id: trajectory_id(scenario, &instance.participant_id, config.seed),
            scenario_id: scenario.scenario_id.clone(),
            participant_id: instance.participant_id.clone(),
            policy_version: instance.policy_version(),
            terminal: env.done(),
            final_score,
            turns: std::mem::take(&mut slot.turns),
        };
        trajectory.validate()?;
        trajectories.push(trajectory);
    }
    Ok(trajectories)
}

/// Run one episode with explicit participant wiring.
pub fn run_episode(
    scenario: &Scenario,
    instances: &[EpoInstance],
    config: &RolloutConfig,
) -> Result<Vec<Trajectory>, EpisodeError> {
    let mut env = make_env(scenario, config.seed)
        .map_err(|source| EpisodeError::Env { source, partial: Vec::new() })?;
    drive(env.as_mut(), scenario, instances, config)
}

/// Run one episode inside a caller-supplied environment — the injection
/// point for environments that live outside the built-in registry.
pub fn run_episode_in(
    env: &mut dyn Environment,
    scenario: &Scenario,
    instances: &[EpoInstance],
    config: &RolloutConfig,
) -> Result<Vec<Trajectory>, EpisodeError> {
    drive(env, scenario, instances, config)
}

/// Run one episode where every participant is driven by the same policy and
/// the same frozen actor — iterative self-play over a shared policy.
pub fn self_play_episode(
    scenario: &Scenario,
    policy: Arc<dyn PolicyBackend>,
    actor: Arc<dyn Actor>,
    config: &RolloutConfig,
) -> Result<Vec<Trajectory>, EpisodeError> {
    let mut env = make_env(scenario, config.seed)
        .map_err(|source| EpisodeError::Env { source, partial: Vec::new() })?;
    let instances: Vec<EpoInstance> = env
        .participants()
        .into_iter()
        .map(|participant_id| EpoInstance {
            participant_id,
            strategist: Some(Arc::clone(&policy)),
            actor: Arc::clone(&actor),
        })
        .collect();
    drive(env.as_mut(), scenario, &instances, config)
}

#[derive(Debug)]
pub struct BatchFailure {
    pub scenario_id: String,
    pub error: EpisodeError,
}

/// Result of rolling out a whole scenario batch: completed trajectories in
/// scenario order, plus any per-episode failures (a failed episode never
/// aborts the batch).
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub trajectories: Vec<Trajectory>,
    pub failures: Vec<BatchFailure>,
}

impl BatchOutcome {
    pub fn mean_score(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.final_score).sum::<f64>()
            / self.trajectories.len() as f64
    }
}

/// Episode seed: the batch seed XOR the scenario's own numeric index, so a
/// scenario keeps its seed no matter where it lands in the batch.
pub(crate) fn episode_seed(batch_seed: u64, scenario: &Scenario, position: usize) -> u64 {
    let index = parse_scenario_id(&scenario.scenario_id)
        .map(|(_, index)| index)
        .unwrap_or(position as u64);
    batch_seed ^ index
}

/// Roll out every scenario in parallel with self-play wiring. Output order
/// follows scenario order regardless of thread scheduling.
pub fn run_batch(
    scenarios: &[Scenario],
    policy: Arc<dyn PolicyBackend>,
    actor: Arc<dyn Actor>,
    config: &RolloutConfig,
) -> BatchOutcome {
    let episodes: Vec<Result<Vec<Trajectory>, (String, EpisodeError)>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(position, scenario)| {
            let episode_config = RolloutConfig {
                seed: episode_seed(config.seed, scenario, position),
                ..config.clone()
            };
            self_play_episode(scenario, Arc::clone(&policy), Arc::clone(&actor), &episode_config)
                .map_err(|error| (scenario.scenario_id.clone(), error))
        })
        .collect();

    let mut outcome = BatchOutcome::default();
    for episode in episodes {
        match episode {
            Ok(trajectories) => outcome.trajectories.extend(trajectories),
            Err((scenario_id, error)) => {
                log::warn!("episode failed for {scenario_id}: {error}");
                outcome.failures.push(BatchFailure { scenario_id, error });
            }
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor::ScriptedActor;
    use crate::envs::{scenario_from_id, vocabulary};
    use crate::model::Token;
    use crate::policy::ContextSoftmaxPolicy;
    use rand::RngCore;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn toy_policy(env_id: &str) -> Arc<ContextSoftmaxPolicy> {
        let vocab = vocabulary(env_id).unwrap();
        Arc::new(ContextSoftmaxPolicy::new(vocab.tokens.clone(), 0.7).unwrap())
    }

    fn shop_scenario(index: u64) -> Scenario {
        scenario_from_id(&format!("shop-{index:05}")).unwrap()
    }

    #[test]
    fn disabled_strategist_records_no_strategies() {
        let scenario = scenario_from_id("household-00000").unwrap();
        let config = RolloutConfig { strategist_enabled: false, ..RolloutConfig::new(11) };
        let trajectories = self_play_episode(
            &scenario,
            toy_policy("household"),
            Arc::new(ScriptedActor::new("household")),
            &config,
        )
        .unwrap();
        assert_eq!(trajectories.len(), 1);
        let t = &trajectories[0];
        assert!(t.terminal);
        assert!(t.turns.iter().all(|turn| turn.strategy.is_none()));
        // The built-in plan solves a plain place task on its own.
        assert_eq!(t.final_score, 1.0);
    }

    #[test]
    fn greedy_decoding_with_a_fixed_seed_reproduces_the_episode_exactly() {
        let scenario = scenario_from_id("negotiation-00004").unwrap();
        let config = RolloutConfig { decoding: Decoding::Greedy, ..RolloutConfig::new(5) };
        let run = |policy: Arc<ContextSoftmaxPolicy>| {
            self_play_episode(
                &scenario,
                policy,
                Arc::new(ScriptedActor::new("negotiation")),
                &config,
            )
            .unwrap()
        };
        let a = run(toy_policy("negotiation"));
        let b = run(toy_policy("negotiation"));
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn sampled_self_play_is_reproducible_and_private() {
        let scenario = scenario_from_id("negotiation-00007").unwrap();
        let config = RolloutConfig::new(42);
        let run = || {
            self_play_episode(
                &scenario,
                toy_policy("negotiation"),
                Arc::new(ScriptedActor::new("negotiation")),
                &config,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 2);
        for t in &a {
            t.validate().unwrap();
            // Every strategist turn carries its own strategy with logprobs;
            // nothing from the partner's side appears.
            assert_eq!(t.strategist_turn_count(), t.turns.len());
            assert!(t
                .turns
                .iter()
                .all(|turn| turn.strategy.as_ref().unwrap().token_logprobs.is_some()));
        }
        assert_ne!(a[0].participant_id, a[1].participant_id);
    }

    /// Strategist that replays a fixed token script — used to pin down what a
    /// known-good strategy sequence earns.
    struct ScriptedStrategist {
        script: Vec<&'static str>,
        cursor: AtomicUsize,
    }

    impl PolicyBackend for ScriptedStrategist {
        fn sample(
            &self,
            _ctx: &PolicyContext,
            _decoding: Decoding,
            _rng: &mut dyn RngCore,
        ) -> Result<Strategy, BackendError> {
            let at = self.cursor.fetch_add(1, Ordering::SeqCst).min(self.script.len() - 1);
            let token = self.script[at];
            Ok(Strategy {
                tokens: vec![Token::Text(token.to_string())],
                token_logprobs: Some(vec![-0.5]),
                rendered: token.to_string(),
            })
        }

        fn logprobs(
            &self,
            _ctx: &PolicyContext,
            tokens: &[Token],
        ) -> Result<Vec<f64>, BackendError> {
            Ok(vec![-0.5; tokens.len()])
        }

        fn apply_gradient(
            &self,
            _gradient: &crate::policy::PolicyGradient,
            _step_size: f64,
        ) -> Result<String, BackendError> {
            Err(BackendError::Unsupported("scripted strategist is fixed"))
        }

        fn version(&self) -> String {
            "scripted".to_string()
        }

        fn param_digest(&self) -> String {
            "scripted".to_string()
        }
    }

    #[test]
    fn a_sound_strategy_script_buys_the_right_item() {
        let scenario = shop_scenario(3);
        let strategist = Arc::new(ScriptedStrategist {
            script: vec!["search_exact", "open_result", "select_option", "select_option", "buy_now"],
            cursor: AtomicUsize::new(0),
        });
        let trajectories = self_play_episode(
            &scenario,
            strategist,
            Arc::new(ScriptedActor::new("shop")),
            &RolloutConfig::new(1),
        )
        .unwrap();
        assert_eq!(trajectories.len(), 1);
        assert_eq!(trajectories[0].final_score, 1.0);
        assert!(trajectories[0].terminal);
    }

    /// Backend that fails whenever the goal mentions a marker string.
    struct SabotagedPolicy {
        inner: Arc<ContextSoftmaxPolicy>,
        marker: String,
    }

    impl PolicyBackend for SabotagedPolicy {
        fn sample(
            &self,
            ctx: &PolicyContext,
            decoding: Decoding,
            rng: &mut dyn RngCore,
        ) -> Result<Strategy, BackendError> {
            if ctx.goal.description.contains(&self.marker) {
                return Err(BackendError::Unsupported("injected failure"));
            }
            self.inner.sample(ctx, decoding, rng)
        }

        fn logprobs(&self, ctx: &PolicyContext, tokens: &[Token]) -> Result<Vec<f64>, BackendError> {
            self.inner.logprobs(ctx, tokens)
        }

        fn apply_gradient(
            &self,
            gradient: &crate::policy::PolicyGradient,
            step_size: f64,
        ) -> Result<String, BackendError> {
            self.inner.apply_gradient(gradient, step_size)
        }

        fn version(&self) -> String {
            self.inner.version()
        }

        fn param_digest(&self) -> String {
            self.inner.param_digest()
        }
    }

    #[test]
    fn a_failed_episode_is_reported_without_sinking_the_batch() {
        let scenarios: Vec<Scenario> = (0..10).map(shop_scenario).collect();
        let marker_scenario = &scenarios[3];
        let marker = marker_scenario.goals[0]
            .description
            .split(" — ")
            .next()
            .unwrap()
            .to_string();
        let policy = Arc::new(SabotagedPolicy { inner: toy_policy("shop"), marker });
        let outcome = run_batch(
            &scenarios,
            policy,
            Arc::new(ScriptedActor::new("shop")),
            &RolloutConfig::new(9),
        );
        assert_eq!(outcome.trajectories.len(), 9);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].scenario_id, marker_scenario.scenario_id);
        assert!(matches!(
            outcome.failures[0].error,
            EpisodeError::Backend { .. }
        ));
        // The failure carries whatever had been recorded up to that point.
        assert!(outcome.failures[0].error.partial().iter().all(|t| !t.terminal));
        // Order is stable: remaining trajectories follow scenario order.
        let ids: Vec<&str> = outcome.trajectories.iter().map(|t| t.scenario_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn batch_output_order_ignores_thread_scheduling() {
        let scenarios: Vec<Scenario> = (20..28).map(shop_scenario).collect();
        let run = || {
            run_batch(
                &scenarios,
                toy_policy("shop"),
                Arc::new(ScriptedActor::new("shop")),
                &RolloutConfig::new(77),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a.trajectories).unwrap(),
            serde_json::to_string(&b.trajectories).unwrap()
        );
        assert!(a.failures.is_empty());
    }

    #[test]
    fn empty_batch_yields_empty_outcome() {
        let outcome = run_batch(
            &[],
            toy_policy("shop"),
            Arc::new(ScriptedActor::new("shop")),
            &RolloutConfig::new(0),
        );
        assert!(outcome.trajectories.is_empty());
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.mean_score(), 0.0);
    }

    #[test]
    fn turn_cap_override_shortens_the_episode() {
        let scenario = scenario_from_id("household-00001").unwrap();
        let config = RolloutConfig {
            strategist_enabled: false,
            max_turns: Some(2),
            ..RolloutConfig::new(3)
        };
        let trajectories = self_play_episode(
            &scenario,
            toy_policy("household"),
            Arc::new(ScriptedActor::new("household")),
            &config,
        )
        .unwrap();
        assert_eq!(trajectories[0].turns.len(), 2);
        assert!(!trajectories[0].terminal);
        assert_eq!(trajectories[0].final_score, 0.0);
    }
}
