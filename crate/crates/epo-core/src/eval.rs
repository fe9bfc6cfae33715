//! Evaluation: seeded episode sweeps that estimate expected return, per side
//! and averaged, plus the pairing matrix that compares strategist
//! configurations against each other on two-party environments.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::Actor;
use crate::envs::{make_env, EnvError};
use crate::model::{Scenario, Trajectory};
use crate::policy::{Decoding, PolicyBackend};
use crate::rollout::{episode_seed, run_episode, EpoInstance, RolloutConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scenarios to evaluate")]
    NoScenarios,
    #[error("scenario {scenario_id:?} belongs to {actual:?}, expected {expected:?}")]
    MixedEnvs { scenario_id: String, expected: String, actual: String },
    #[error("pairing matrix needs a two-party environment, {env_id:?} has {participants}")]
    NotTwoParty { env_id: String, participants: usize },
    #[error("evaluation mutated the policy: parameter digest changed")]
    PolicyMutated,
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Decode mode used when the caller does not pin one: sampling at the
/// collection temperature for dialogue, greedy for the deterministic tasks.
pub fn default_decoding(env_id: &str) -> Decoding {
    match env_id {
        "negotiation" => Decoding::Sample { temperature: 0.7 },
        _ => Decoding::Greedy,
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub label: String,
    pub seed: u64,
    /// None picks `default_decoding` for the environment.
    pub decoding: Option<Decoding>,
    pub max_turns: Option<u32>,
}

impl EvalConfig {
    pub fn new(label: impl Into<String>, seed: u64) -> Self {
        EvalConfig { label: label.into(), seed, decoding: None, max_turns: None }
    }
}

/// One evaluated scenario: each participant's score plus the dialogue length
/// (total turns across participants).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario_id: String,
    pub scores: BTreeMap<String, f64>,
    pub episode_turns: usize,
}

impl ScenarioOutcome {
    /// Average payoff across this scenario's sides.
    pub fn payoff(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.values().sum::<f64>() / self.scores.len() as f64
    }
}

/// Aggregate over one configuration's evaluation sweep. `mean_score` is the
/// empirical estimate of the expected return under the evaluated policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub env_id: String,
    pub scenarios: Vec<ScenarioOutcome>,
    pub mean_score: f64,
    pub mean_episode_length: f64,
    /// Per-participant mean across scenarios (one entry on one-party envs).
    pub side_means: BTreeMap<String, f64>,
    /// Scenario ids whose episode failed and was excluded from the means.
    pub failures: Vec<String>,
}

impl EvalReport {
    fn from_outcomes(
        label: &str,
        env_id: &str,
        outcomes: Vec<ScenarioOutcome>,
        failures: Vec<String>,
    ) -> Self {
        let n = outcomes.len().max(1) as f64;
        let mean_score = outcomes.iter().map(|o| o.payoff()).sum::<f64>() / n;
        let mean_episode_length = outcomes.iter().map(|o| o.episode_turns as f64).sum::<f64>() / n;
        let mut side_totals: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for outcome in &outcomes {
            for (participant, score) in &outcome.scores {
                let slot = side_totals.entry(participant.clone()).or_insert((0.0, 0));
                slot.0 += score;
                slot.1 += 1;
            }
        }
        let side_means = side_totals
            .into_iter()
            .map(|(participant, (total, count))| (participant, total / count.max(1) as f64))
            .collect();
        EvalReport {
            label: label.to_string(),
            env_id: env_id.to_string(),
            scenarios: outcomes,
            mean_score,
            mean_episode_length,
            side_means,
            failures,
        }
    }

    /// Plain-text summary table, one row per side plus the average.
    pub fn text_table(&self) -> String {
        let mut out = format!(
            "config: {}\nenv: {}  scenarios: {}  failures: {}\n",
            self.label,
            self.env_id,
            self.scenarios.len(),
            self.failures.len()
        );
        for (participant, mean) in &self.side_means {
            out.push_str(&format!("  {participant:<12} {mean:>8.4}\n"));
        }
        out.push_str(&format!(
            "  {:<12} {:>8.4}   (mean episode length {:.2})\n",
            "average", self.mean_score, self.mean_episode_length
        ));
        out
    }
}

fn scenario_outcome(scenario_id: &str, trajectories: &[Trajectory]) -> ScenarioOutcome {
    ScenarioOutcome {
        scenario_id: scenario_id.to_string(),
        scores: trajectories
            .iter()
            .map(|t| (t.participant_id.clone(), t.final_score))
            .collect(),
        episode_turns: trajectories.iter().map(|t| t.turns.len()).sum(),
    }
}

fn check_same_env(scenarios: &[Scenario]) -> Result<String, EvalError> {
    let first = scenarios.first().ok_or(EvalError::NoScenarios)?;
    for scenario in scenarios {
        if scenario.env_id != first.env_id {
            return Err(EvalError::MixedEnvs {
                scenario_id: scenario.scenario_id.clone(),
                expected: first.env_id.clone(),
                actual: scenario.env_id.clone(),
            });
        }
    }
    Ok(first.env_id.clone())
}

fn sweep(
    scenarios: &[Scenario],
    instances_for: &(dyn Fn(&Scenario) -> Result<Vec<EpoInstance>, EnvError> + Sync),
    config: &RolloutConfig,
) -> (Vec<ScenarioOutcome>, Vec<String>) {
    let episodes: Vec<Result<Vec<Trajectory>, String>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(position, scenario)| {
            let episode_config = RolloutConfig {
                seed: episode_seed(config.seed, scenario, position),
                ..config.clone()
            };
            let instances = instances_for(scenario).map_err(|error| {
                log::warn!("evaluation setup failed for {}: {error}", scenario.scenario_id);
                scenario.scenario_id.clone()
            })?;
            run_episode(scenario, &instances, &episode_config).map_err(|error| {
                log::warn!("evaluation episode failed for {}: {error}", scenario.scenario_id);
                scenario.scenario_id.clone()
            })
        })
        .collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (scenario, episode) in scenarios.iter().zip(episodes) {
        match episode {
            Ok(trajectories) => {
                outcomes.push(scenario_outcome(&scenario.scenario_id, &trajectories))
            }
            Err(scenario_id) => failures.push(scenario_id),
        }
    }
    (outcomes, failures)
}

/// Evaluate one configuration over a scenario sweep. `policy: None` is the
/// no-strategist ablation. The policy is read-only throughout; a changed
/// parameter digest is reported as an error.
pub fn evaluate(
    policy: Option<Arc<dyn PolicyBackend>>,
    actor: Arc<dyn Actor>,
    scenarios: &[Scenario],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let env_id = check_same_env(scenarios)?;
    let digest_before = policy.as_ref().map(|p| p.param_digest());
    let rollout_config = RolloutConfig {
        seed: config.seed,
        strategist_enabled: policy.is_some(),
        decoding: config.decoding.unwrap_or_else(|| default_decoding(&env_id)),
        max_turns: config.max_turns,
    };
    let instances_for = |scenario: &Scenario| -> Result<Vec<EpoInstance>, EnvError> {
        Ok(make_env(scenario, 0)?
            .participants()
            .into_iter()
            .map(|participant_id| EpoInstance {
                participant_id,
                strategist: policy.clone(),
                actor: Arc::clone(&actor),
            })
            .collect())
    };
    let (outcomes, failures) = sweep(scenarios, &instances_for, &rollout_config);
    if policy.as_ref().map(|p| p.param_digest()) != digest_before {
        return Err(EvalError::PolicyMutated);
    }
    Ok(EvalReport::from_outcomes(&config.label, &env_id, outcomes, failures))
}

/// One side of a pairing: a label and the policy it plays with (None plays
/// without a strategist).
#[derive(Clone)]
pub struct SideConfig {
    pub label: String,
    pub policy: Option<Arc<dyn PolicyBackend>>,
}

impl SideConfig {
    pub fn new(label: impl Into<String>, policy: Option<Arc<dyn PolicyBackend>>) -> Self {
        SideConfig { label: label.into(), policy }
    }
}

/// Evaluate every (side-A config × side-B config) pairing on a two-party
/// environment. Cell `[i][j]` pits `side_a[i]` as the first participant
/// against `side_b[j]` as the second; its report's `side_means` carry the
/// per-side payoffs.
pub fn config_matrix(
    side_a: &[SideConfig],
    side_b: &[SideConfig],
    actor: Arc<dyn Actor>,
    scenarios: &[Scenario],
    config: &EvalConfig,
) -> Result<Vec<Vec<EvalReport>>, EvalError> {
    let env_id = check_same_env(scenarios)?;
    let participants = make_env(&scenarios[0], 0)?.participants();
    if participants.len() != 2 {
        return Err(EvalError::NotTwoParty { env_id, participants: participants.len() });
    }
    let decoding = config.decoding.unwrap_or_else(|| default_decoding(&env_id));
    let mut matrix = Vec::with_capacity(side_a.len());
    for a in side_a {
        let mut row = Vec::with_capacity(side_b.len());
        for b in side_b {
            let rollout_config = RolloutConfig {
                seed: config.seed,
                strategist_enabled: true,
                decoding,
                max_turns: config.max_turns,
            };
            let instances_for = |scenario: &Scenario| -> Result<Vec<EpoInstance>, EnvError> {
                let participants = make_env(scenario, 0)?.participants();
                Ok(vec![
                    EpoInstance {
                        participant_id: participants[0].clone(),
                        strategist: a.policy.clone(),
                        actor: Arc::clone(&actor),
                    },
                    EpoInstance {
                        participant_id: participants[1].clone(),
                        strategist: b.policy.clone(),
                        actor: Arc::clone(&actor),
                    },
                ])
            };
            let (outcomes, failures) = sweep(scenarios, &instances_for, &rollout_config);
            let label = format!("{} × {}", a.label, b.label);
            row.push(EvalReport::from_outcomes(&label, &env_id, outcomes, failures));
        }
        matrix.push(row);
    }
    Ok(matrix)
}

/// CSV rendering of a pairing matrix: one row per cell with per-side means.
pub fn matrix_csv(matrix: &[Vec<EvalReport>]) -> String {
    let mut out = String::from("cell,side_a_mean,side_b_mean,average\n");
    for row in matrix {
        for report in row {
            let mut sides = report.side_means.values();
            let a = sides.next().copied().unwrap_or(0.0);
            let b = sides.next().copied().unwrap_or(0.0);
            out.push_str(&format!(
                "{:?},{a},{b},{}\n",
                report.label, report.mean_score
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor::ScriptedActor;
    use crate::envs::{generate_scenarios, vocabulary, ScenarioSplit};
    use crate::policy::ContextSoftmaxPolicy;

    fn toy_policy(env_id: &str) -> Arc<dyn PolicyBackend> {
        let vocab = vocabulary(env_id).unwrap();
        Arc::new(ContextSoftmaxPolicy::new(vocab.tokens.clone(), 0.7).unwrap())
    }

    fn negotiation_scenarios(count: usize) -> Vec<Scenario> {
        generate_scenarios("negotiation", 5, count, ScenarioSplit::Seen).unwrap()
    }

    #[test]
    fn empty_scenario_lists_are_rejected() {
        let actor = Arc::new(ScriptedActor::new("negotiation"));
        assert!(matches!(
            evaluate(None, actor, &[], &EvalConfig::new("x", 0)),
            Err(EvalError::NoScenarios)
        ));
    }

    #[test]
    fn mixed_environments_are_rejected() {
        let mut scenarios = negotiation_scenarios(1);
        scenarios
            .extend(generate_scenarios("shop", 5, 1, ScenarioSplit::Seen).unwrap());
        let actor = Arc::new(ScriptedActor::new("negotiation"));
        assert!(matches!(
            evaluate(None, actor, &scenarios, &EvalConfig::new("x", 0)),
            Err(EvalError::MixedEnvs { .. })
        ));
    }

    #[test]
    fn single_scenario_mean_is_that_scenarios_payoff() {
        let scenarios = negotiation_scenarios(1);
        let actor = Arc::new(ScriptedActor::new("negotiation"));
        let report =
            evaluate(None, actor, &scenarios, &EvalConfig::new("baseline", 11)).unwrap();
        assert_eq!(report.scenarios.len(), 1);
        assert!((report.mean_score - report.scenarios[0].payoff()).abs() < 1e-12);
        assert_eq!(report.side_means.len(), 2);
    }

    #[test]
    fn mean_is_the_arithmetic_mean_of_scenario_payoffs() {
        let scenarios = negotiation_scenarios(6);
        let report = evaluate(
            Some(toy_policy("negotiation")),
            Arc::new(ScriptedActor::new("negotiation")),
            &scenarios,
            &EvalConfig::new("toy", 3),
        )
        .unwrap();
        let expected =
            report.scenarios.iter().map(|o| o.payoff()).sum::<f64>() / report.scenarios.len() as f64;
        assert!((report.mean_score - expected).abs() < 1e-12);
        assert!(report.mean_episode_length > 0.0);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn evaluation_leaves_the_policy_untouched() {
        let policy = toy_policy("shop");
        let digest = policy.param_digest();
        let scenarios = generate_scenarios("shop", 2, 5, ScenarioSplit::Seen).unwrap();
        let report = evaluate(
            Some(policy.clone()),
            Arc::new(ScriptedActor::new("shop")),
            &scenarios,
            &EvalConfig::new("toy-shop", 1),
        )
        .unwrap();
        assert_eq!(policy.param_digest(), digest);
        assert_eq!(report.scenarios.len(), 5);
        // Shop is single-participant: side means carry exactly one entry.
        assert_eq!(report.side_means.len(), 1);
    }

    #[test]
    fn evaluation_is_reproducible_for_a_fixed_seed() {
        let scenarios = negotiation_scenarios(4);
        let run = || {
            evaluate(
                Some(toy_policy("negotiation")),
                Arc::new(ScriptedActor::new("negotiation")),
                &scenarios,
                &EvalConfig::new("toy", 17),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn pairing_matrix_has_one_report_per_config_pair() {
        let scenarios = negotiation_scenarios(3);
        let trained = SideConfig::new("toy", Some(toy_policy("negotiation")));
        let ablated = SideConfig::new("none", None);
        let matrix = config_matrix(
            &[trained.clone(), ablated.clone()],
            &[trained, ablated],
            Arc::new(ScriptedActor::new("negotiation")),
            &scenarios,
            &EvalConfig::new("matrix", 23),
        )
        .unwrap();
        assert_eq!(matrix.len(), 2);
        assert_eq!(matrix[0].len(), 2);
        assert_eq!(matrix[0][0].label, "toy × toy");
        assert_eq!(matrix[1][1].label, "none × none");
        for row in &matrix {
            for cell in row {
                assert_eq!(cell.scenarios.len(), 3);
                assert_eq!(cell.side_means.len(), 2);
            }
        }
        let csv = matrix_csv(&matrix);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("cell,"));
    }

    #[test]
    fn pairing_matrix_requires_two_parties() {
        let scenarios = generate_scenarios("shop", 2, 2, ScenarioSplit::Seen).unwrap();
        let result = config_matrix(
            &[SideConfig::new("a", None)],
            &[SideConfig::new("b", None)],
            Arc::new(ScriptedActor::new("shop")),
            &scenarios,
            &EvalConfig::new("matrix", 0),
        );
        assert!(matches!(result, Err(EvalError::NotTwoParty { .. })));
    }

    #[test]
    fn text_table_lists_sides_and_average() {
        let scenarios = negotiation_scenarios(2);
        let report = evaluate(
            None,
            Arc::new(ScriptedActor::new("negotiation")),
            &scenarios,
            &EvalConfig::new("baseline", 1),
        )
        .unwrap();
        let table = report.text_table();
        assert!(table.contains("config: baseline"));
        assert!(table.contains("seller"));
        assert!(table.contains("buyer"));
        assert!(table.contains("average"));
    }
}
