//! Exercises the C surface from Rust: status codes, last-error messages,
//! handle lifecycles, and the self-play entry point.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use epo_ffi::*;

fn last_error() -> Option<String> {
    let ptr = epo_last_error();
    if ptr.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(ptr) }.to_string_lossy().into_owned())
    }
}

/// Copy an owned C string out and free it.
fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null(), "expected an owned string");
    let text = unsafe { CStr::from_ptr(ptr) }.to_string_lossy().into_owned();
    unsafe { epo_string_free(ptr) };
    text
}

fn c_path(path: &Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_a_static_semver_string() {
    let version = unsafe { CStr::from_ptr(epo_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn returns_and_advantages_match_the_library() {
    let rewards = [1.0, 0.0, 1.0, 1.0];
    let gamma = 0.99;

    let mut returns = [0.0f64; 4];
    let status = unsafe {
        epo_discounted_returns(rewards.as_ptr(), rewards.len(), gamma, returns.as_mut_ptr())
    };
    assert_eq!(status, EpoStatus::Ok);
    assert_eq!(returns.to_vec(), epo_core::reward::discounted_returns(&rewards, gamma));

    let mut advantages = [0.0f64; 4];
    let status = unsafe {
        epo_advantages(rewards.as_ptr(), rewards.len(), gamma, advantages.as_mut_ptr())
    };
    assert_eq!(status, EpoStatus::Ok);
    assert_eq!(advantages.to_vec(), epo_core::reward::advantages(&rewards, gamma));
    assert!(last_error().is_none(), "successful calls clear the error slot");
}

#[test]
fn zero_length_inputs_need_no_buffers() {
    let status = unsafe { epo_advantages(ptr::null(), 0, 0.99, ptr::null_mut()) };
    assert_eq!(status, EpoStatus::Ok);
}

#[test]
fn null_reward_pointers_are_named() {
    let mut out = [0.0f64; 3];
    let status = unsafe { epo_advantages(ptr::null(), 3, 0.99, out.as_mut_ptr()) };
    assert_eq!(status, EpoStatus::NullPointer);
    assert!(last_error().unwrap().contains("rewards"));
}

#[test]
fn gamma_outside_the_unit_interval_is_rejected() {
    let rewards = [1.0, 0.0];
    let mut out = [0.0f64; 2];
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        let status =
            unsafe { epo_advantages(rewards.as_ptr(), rewards.len(), bad, out.as_mut_ptr()) };
        assert_eq!(status, EpoStatus::InvalidArgument, "gamma {bad}");
        assert!(last_error().unwrap().contains("gamma"));
    }
}

#[test]
fn non_finite_rewards_are_rejected_by_position() {
    let rewards = [1.0, f64::INFINITY, 0.0];
    let mut out = [0.0f64; 3];
    let status =
        unsafe { epo_advantages(rewards.as_ptr(), rewards.len(), 0.99, out.as_mut_ptr()) };
    assert_eq!(status, EpoStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("rewards[1]"));
}

#[test]
fn invalid_utf8_arguments_are_named() {
    let bogus = [0xffu8, 0xfe, 0x00];
    let mut policy: *mut EpoPolicy = ptr::null_mut();
    let status =
        unsafe { epo_policy_new(bogus.as_ptr() as *const c_char, 0.7, &mut policy) };
    assert_eq!(status, EpoStatus::InvalidUtf8);
    assert!(last_error().unwrap().contains("env_id"));
}

#[test]
fn policy_round_trip_preserves_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = c_path(&dir.path().join("policy.json"));

    let env_id = CString::new("negotiation").unwrap();
    let mut policy: *mut EpoPolicy = ptr::null_mut();
    let status = unsafe { epo_policy_new(env_id.as_ptr(), 0.7, &mut policy) };
    assert_eq!(status, EpoStatus::Ok);
    assert!(!policy.is_null());

    let mut version: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { epo_policy_version(policy, &mut version) }, EpoStatus::Ok);
    assert_eq!(take_string(version), "v0");

    let mut digest: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { epo_policy_digest(policy, &mut digest) }, EpoStatus::Ok);
    let fresh_digest = take_string(digest);
    assert_eq!(fresh_digest.len(), 64, "sha-256 hex digest");

    assert_eq!(unsafe { epo_policy_save(policy, path.as_ptr()) }, EpoStatus::Ok);
    unsafe { epo_policy_free(policy) };

    let mut reopened: *mut EpoPolicy = ptr::null_mut();
    assert_eq!(unsafe { epo_policy_open(path.as_ptr(), &mut reopened) }, EpoStatus::Ok);
    let mut digest: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { epo_policy_digest(reopened, &mut digest) }, EpoStatus::Ok);
    assert_eq!(take_string(digest), fresh_digest);
    unsafe { epo_policy_free(reopened) };
}

#[test]
fn unknown_environment_is_an_invalid_argument() {
    let env_id = CString::new("casino").unwrap();
    let mut policy: *mut EpoPolicy = ptr::null_mut();
    let status = unsafe { epo_policy_new(env_id.as_ptr(), 0.7, &mut policy) };
    assert_eq!(status, EpoStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("casino"));
    assert!(policy.is_null(), "out parameter is untouched on failure");
}

#[test]
fn opening_a_missing_policy_file_is_an_io_error() {
    let path = CString::new("/nonexistent/policy.json").unwrap();
    let mut policy: *mut EpoPolicy = ptr::null_mut();
    let status = unsafe { epo_policy_open(path.as_ptr(), &mut policy) };
    assert_eq!(status, EpoStatus::Io);
    assert!(last_error().is_some());
}

#[test]
fn freeing_null_handles_is_a_no_op() {
    unsafe {
        epo_policy_free(ptr::null_mut());
        epo_trajectories_free(ptr::null_mut());
        epo_string_free(ptr::null_mut());
    }
}

/// Write a small rollout to disk with the library, then inspect it over FFI.
#[test]
fn trajectory_files_expose_len_mean_and_json() {
    use epo_core::actor::ScriptedActor;
    use epo_core::envs::{generate_scenarios, vocabulary, ScenarioSplit};
    use epo_core::policy::ContextSoftmaxPolicy;
    use epo_core::rollout::{run_batch, RolloutConfig};

    let scenarios = generate_scenarios("negotiation", 3, 2, ScenarioSplit::Seen).unwrap();
    let vocab = vocabulary("negotiation").unwrap();
    let policy = Arc::new(ContextSoftmaxPolicy::new(vocab.tokens, 0.7).unwrap());
    let actor = Arc::new(ScriptedActor::new("negotiation"));
    let outcome = run_batch(&scenarios, policy, actor, &RolloutConfig::new(3));
    assert!(outcome.failures.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("trajectories.jsonl");
    epo_core::store::write_trajectories(&file, &outcome.trajectories).unwrap();
    let path = c_path(&file);

    let mut set: *mut EpoTrajectorySet = ptr::null_mut();
    assert_eq!(unsafe { epo_trajectories_open(path.as_ptr(), &mut set) }, EpoStatus::Ok);
    assert_eq!(unsafe { epo_trajectories_len(set) }, outcome.trajectories.len());

    let mut mean = 0.0f64;
    assert_eq!(unsafe { epo_trajectories_mean_score(set, &mut mean) }, EpoStatus::Ok);
    assert_eq!(mean.to_bits(), outcome.mean_score().to_bits());

    let mut line: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { epo_trajectories_json(set, 0, &mut line) }, EpoStatus::Ok);
    let parsed: epo_core::model::Trajectory =
        serde_json::from_str(&take_string(line)).unwrap();
    assert_eq!(parsed, outcome.trajectories[0]);

    let mut line: *mut c_char = ptr::null_mut();
    let status =
        unsafe { epo_trajectories_json(set, outcome.trajectories.len(), &mut line) };
    assert_eq!(status, EpoStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("out of range"));

    unsafe { epo_trajectories_free(set) };
}

#[test]
fn malformed_trajectory_files_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.jsonl");
    std::fs::write(&file, "this is not json\n").unwrap();
    let path = c_path(&file);

    let mut set: *mut EpoTrajectorySet = ptr::null_mut();
    assert_eq!(unsafe { epo_trajectories_open(path.as_ptr(), &mut set) }, EpoStatus::Parse);
    assert!(set.is_null());
}

#[test]
fn self_play_writes_metrics_and_a_loadable_policy() {
    let dir = tempfile::tempdir().unwrap();
    let policy_file = dir.path().join("policy.json");
    let config = CString::new(
        r#"{"env_id": "negotiation", "iterations": 2, "scenarios_per_iteration": 4,
            "seed": 7, "learning_rate": 200.0}"#,
    )
    .unwrap();
    let policy_path = c_path(&policy_file);

    let mut metrics: *mut c_char = ptr::null_mut();
    let status =
        unsafe { epo_self_play(config.as_ptr(), policy_path.as_ptr(), &mut metrics) };
    assert_eq!(status, EpoStatus::Ok, "{:?}", last_error());

    let metrics = take_string(metrics);
    let reports: Vec<epo_core::train::IterationReport> = metrics
        .lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].iteration, 1);
    assert_eq!(reports[1].iteration, 2);

    let mut policy: *mut EpoPolicy = ptr::null_mut();
    assert_eq!(unsafe { epo_policy_open(policy_path.as_ptr(), &mut policy) }, EpoStatus::Ok);
    let mut version: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { epo_policy_version(policy, &mut version) }, EpoStatus::Ok);
    assert_eq!(take_string(version), reports[1].policy_version);
    unsafe { epo_policy_free(policy) };
}

#[test]
fn self_play_rejects_unusable_configs() {
    let mut metrics: *mut c_char = ptr::null_mut();

    let config = CString::new(r#"{"env_id": 7}"#).unwrap();
    let status = unsafe { epo_self_play(config.as_ptr(), ptr::null(), &mut metrics) };
    assert_eq!(status, EpoStatus::Parse);
    assert!(last_error().unwrap().contains("config"));

    let config = CString::new(r#"{"env_id": "casino"}"#).unwrap();
    let status = unsafe { epo_self_play(config.as_ptr(), ptr::null(), &mut metrics) };
    assert_eq!(status, EpoStatus::InvalidArgument);
}

#[test]
fn generated_header_declares_the_full_surface() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/epo.h");
    let header = std::fs::read_to_string(header_path).expect("build.rs wrote the header");
    for needle in [
        "typedef struct EpoPolicy EpoPolicy;",
        "typedef struct EpoTrajectorySet EpoTrajectorySet;",
        "EPO_STATUS_OK = 0",
        "const char *epo_last_error(void);",
        "epo_discounted_returns",
        "epo_advantages",
        "epo_policy_new",
        "epo_policy_open",
        "epo_policy_save",
        "epo_policy_version",
        "epo_policy_digest",
        "epo_policy_free",
        "epo_trajectories_open",
        "epo_trajectories_len",
        "epo_trajectories_mean_score",
        "epo_trajectories_json",
        "epo_trajectories_free",
        "epo_self_play",
        "epo_string_free",
        "epo_version",
    ] {
        assert!(header.contains(needle), "header is missing {needle:?}");
    }
}
