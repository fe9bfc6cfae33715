//! C interface to the strategist-training pipeline.
//!
//! Every function returns an [`EpoStatus`]; anything other than `Ok` leaves a
//! human-readable message retrievable with [`epo_last_error`] on the same
//! thread. Handles are opaque and freed with their matching `_free` function;
//! strings returned through `char **` out-parameters are freed with
//! [`epo_string_free`]. All entry points catch panics at the boundary.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use epo_core::actor::{Actor, ScriptedActor};
use epo_core::envs::vocabulary;
use epo_core::model::Trajectory;
use epo_core::policy::{ContextSoftmaxPolicy, PolicyBackend};
use epo_core::reward::OraclePrm;
use epo_core::store::{read_trajectories, StoreError};
use epo_core::train::{self_play_rl, TrainConfig};

/// Result of an FFI call. Non-`Ok` values leave a message in
/// [`epo_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpoStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was out of range or otherwise unusable.
    InvalidArgument = 3,
    /// A file could not be read or written.
    Io = 4,
    /// Input text could not be parsed.
    Parse = 5,
    /// Training or self-play failed after starting.
    Train = 6,
    /// A panic was caught at the boundary; state may be stale but the
    /// process is intact.
    Panic = 7,
}

type Failure = (EpoStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let stored = CString::new(message)
        .unwrap_or_else(|_| CString::new("error message contained a NUL byte").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(stored));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Run an FFI body, translating failures and panics into statuses.
fn guarded(body: impl FnOnce() -> Result<(), Failure>) -> EpoStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            clear_last_error();
            EpoStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("internal panic: {message}"));
            EpoStatus::Panic
        }
    }
}

fn fail(status: EpoStatus, message: impl std::fmt::Display) -> Failure {
    (status, message.to_string())
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(fail(EpoStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(EpoStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(EpoStatus::NullPointer, format!("{name} is null with length {len}")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn handle_arg<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| fail(EpoStatus::NullPointer, format!("{name} is null")))
}

fn require_out<T>(ptr: *mut T, name: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        Err(fail(EpoStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<(), Failure> {
    if gamma.is_finite() && gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(fail(EpoStatus::InvalidArgument, format!("gamma {gamma} is outside (0, 1]")))
    }
}

fn check_rewards(rewards: &[f64]) -> Result<(), Failure> {
    match rewards.iter().position(|r| !r.is_finite()) {
        Some(i) => Err(fail(
            EpoStatus::InvalidArgument,
            format!("rewards[{i}] is not finite"),
        )),
        None => Ok(()),
    }
}

unsafe fn write_string(out: *mut *mut c_char, text: String) -> Result<(), Failure> {
    let stored = CString::new(text)
        .map_err(|_| fail(EpoStatus::InvalidArgument, "output contained a NUL byte"))?;
    out.write(stored.into_raw());
    Ok(())
}

fn store_status(error: &StoreError) -> EpoStatus {
    match error {
        StoreError::Open { .. } | StoreError::PartialWrite { .. } => EpoStatus::Io,
        StoreError::Malformed { .. } | StoreError::Invalid { .. } => EpoStatus::Parse,
    }
}

// --- diagnostics --------------------------------------------------------------

/// Message from the most recent failing call on this thread, or null if the
/// most recent call succeeded. The pointer stays valid until the next call
/// into this library on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn epo_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(std::ptr::null(), |message| message.as_ptr())
    })
}

/// Library version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn epo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Free a string returned through a `char **` out-parameter. Null is ignored.
///
/// # Safety
/// `text` must have come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn epo_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

// --- reward math ---------------------------------------------------------------

/// Discounted reward-to-go for each position: `out[t] = Σ_{j≥t} gamma^(j−t)·rewards[j]`.
/// `out` must have room for `len` doubles.
///
/// # Safety
/// `rewards` must point to `len` readable doubles and `out` to `len`
/// writable doubles (unless `len` is zero).
#[no_mangle]
pub unsafe extern "C" fn epo_discounted_returns(
    rewards: *const f64,
    len: usize,
    gamma: f64,
    out: *mut f64,
) -> EpoStatus {
    guarded(|| {
        let rewards = slice_arg(rewards, len, "rewards")?;
        check_rewards(rewards)?;
        check_gamma(gamma)?;
        if len > 0 {
            require_out(out, "out")?;
        }
        let returns = epo_core::reward::discounted_returns(rewards, gamma);
        for (i, value) in returns.into_iter().enumerate() {
            out.add(i).write(value);
        }
        Ok(())
    })
}

/// Per-position advantages: rewards are peak-scaled, turned into discounted
/// returns, then normalized by the largest absolute return. `out` must have
/// room for `len` doubles.
///
/// # Safety
/// Same pointer contract as [`epo_discounted_returns`].
#[no_mangle]
pub unsafe extern "C" fn epo_advantages(
    rewards: *const f64,
    len: usize,
    gamma: f64,
    out: *mut f64,
) -> EpoStatus {
    guarded(|| {
        let rewards = slice_arg(rewards, len, "rewards")?;
        check_rewards(rewards)?;
        check_gamma(gamma)?;
        if len > 0 {
            require_out(out, "out")?;
        }
        let advantages = epo_core::reward::advantages(rewards, gamma);
        for (i, value) in advantages.into_iter().enumerate() {
            out.add(i).write(value);
        }
        Ok(())
    })
}

// --- policy handles --------------------------------------------------------------

/// A trainable strategist policy. Opaque; free with [`epo_policy_free`].
pub struct EpoPolicy {
    inner: Arc<ContextSoftmaxPolicy>,
}

/// Create a fresh uniform policy over the strategy vocabulary of `env_id`
/// ("negotiation", "shop", or "household") with the given sampling
/// temperature.
///
/// # Safety
/// `env_id` must be a valid C string; `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn epo_policy_new(
    env_id: *const c_char,
    temperature: f64,
    out: *mut *mut EpoPolicy,
) -> EpoStatus {
    guarded(|| {
        let env_id = str_arg(env_id, "env_id")?;
        require_out(out, "out")?;
        let vocab = vocabulary(env_id).map_err(|e| fail(EpoStatus::InvalidArgument, e))?;
        let policy = ContextSoftmaxPolicy::new(vocab.tokens, temperature)
            .map_err(|e| fail(EpoStatus::InvalidArgument, e))?;
        out.write(Box::into_raw(Box::new(EpoPolicy { inner: Arc::new(policy) })));
        Ok(())
    })
}

/// Load a policy previously written by [`epo_policy_save`] (or by the `epo`
/// command-line tool).
///
/// # Safety
/// `path` must be a valid C string; `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn epo_policy_open(
    path: *const c_char,
    out: *mut *mut EpoPolicy,
) -> EpoStatus {
    guarded(|| {
        let path = str_arg(path, "path")?;
        require_out(out, "out")?;
        let policy =
            ContextSoftmaxPolicy::load(path).map_err(|e| fail(EpoStatus::Io, e))?;
        out.write(Box::into_raw(Box::new(EpoPolicy { inner: Arc::new(policy) })));
        Ok(())
    })
}

/// Write the policy to `path` as JSON.
///
/// # Safety
/// `policy` must be a live handle from this library; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn epo_policy_save(
    policy: *const EpoPolicy,
    path: *const c_char,
) -> EpoStatus {
    guarded(|| {
        let policy = handle_arg(policy, "policy")?;
        let path = str_arg(path, "path")?;
        policy.inner.save(path).map_err(|e| fail(EpoStatus::Io, e))
    })
}

/// Version tag of the policy ("v0" when fresh, bumped on every update).
/// The caller owns the returned string; free with [`epo_string_free`].
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epo_policy_version(
    policy: *const EpoPolicy,
    out: *mut *mut c_char,
) -> EpoStatus {
    guarded(|| {
        let policy = handle_arg(policy, "policy")?;
        require_out(out, "out")?;
        write_string(out, policy.inner.version())
    })
}

/// Hex digest of the policy parameters; stable across save/load round trips.
/// The caller owns the returned string; free with [`epo_string_free`].
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epo_policy_digest(
    policy: *const EpoPolicy,
    out: *mut *mut c_char,
) -> EpoStatus {
    guarded(|| {
        let policy = handle_arg(policy, "policy")?;
        require_out(out, "out")?;
        write_string(out, policy.inner.param_digest())
    })
}

/// Free a policy handle. Null is ignored.
///
/// # Safety
/// `policy` must have come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn epo_policy_free(policy: *mut EpoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

// --- trajectory files -------------------------------------------------------------

/// A batch of trajectories read from a JSONL file. Opaque; free with
/// [`epo_trajectories_free`].
pub struct EpoTrajectorySet {
    trajectories: Vec<Trajectory>,
}

/// Read a trajectory JSONL file (one JSON object per line, as written by the
/// rollout stages). Every line is validated; the first bad line fails the
/// whole read.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epo_trajectories_open(
    path: *const c_char,
    out: *mut *mut EpoTrajectorySet,
) -> EpoStatus {
    guarded(|| {
        let path = str_arg(path, "path")?;
        require_out(out, "out")?;
        let trajectories =
            read_trajectories(path).map_err(|e| fail(store_status(&e), e))?;
        out.write(Box::into_raw(Box::new(EpoTrajectorySet { trajectories })));
        Ok(())
    })
}

/// Number of trajectories in the set; zero if `set` is null.
///
/// # Safety
/// `set`, when non-null, must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn epo_trajectories_len(set: *const EpoTrajectorySet) -> usize {
    set.as_ref().map_or(0, |set| set.trajectories.len())
}

/// Mean final score across the set. Fails on an empty set.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epo_trajectories_mean_score(
    set: *const EpoTrajectorySet,
    out: *mut f64,
) -> EpoStatus {
    guarded(|| {
        let set = handle_arg(set, "set")?;
        require_out(out, "out")?;
        if set.trajectories.is_empty() {
            return Err(fail(EpoStatus::InvalidArgument, "trajectory set is empty"));
        }
        let mean = set.trajectories.iter().map(|t| t.final_score).sum::<f64>()
            / set.trajectories.len() as f64;
        out.write(mean);
        Ok(())
    })
}

/// Serialize one trajectory back to its JSON line. The caller owns the
/// returned string; free with [`epo_string_free`].
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epo_trajectories_json(
    set: *const EpoTrajectorySet,
    index: usize,
    out: *mut *mut c_char,
) -> EpoStatus {
    guarded(|| {
        let set = handle_arg(set, "set")?;
        require_out(out, "out")?;
        let trajectory = set.trajectories.get(index).ok_or_else(|| {
            fail(
                EpoStatus::InvalidArgument,
                format!("index {index} out of range for {} trajectories", set.trajectories.len()),
            )
        })?;
        let text = serde_json::to_string(trajectory)
            .map_err(|e| fail(EpoStatus::Parse, e))?;
        write_string(out, text)
    })
}

/// Free a trajectory set. Null is ignored.
///
/// # Safety
/// `set` must have come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn epo_trajectories_free(set: *mut EpoTrajectorySet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

// --- self-play training -------------------------------------------------------------

/// Run iterative self-play training on the simulated environments with the
/// scripted actor and the oracle process-reward labeler.
///
/// `config_json` is a JSON object naming any subset of the training fields
/// (`env_id`, `seed`, `iterations`, `scenarios_per_iteration`,
/// `learning_rate`, `gamma`, `epochs`, `batch_size`, `reward_mode`,
/// `sample_temperature`); missing fields take their defaults, e.g.
/// `{"env_id": "negotiation", "iterations": 2, "scenarios_per_iteration": 4,
/// "seed": 7, "learning_rate": 200.0}`.
///
/// On success `metrics_out` receives one JSON object per iteration
/// (newline-separated, caller frees with [`epo_string_free`]), and the
/// trained policy is written to `policy_path` unless it is null.
///
/// # Safety
/// `config_json` must be a valid C string, `policy_path` a valid C string or
/// null, and `metrics_out` writable.
#[no_mangle]
pub unsafe extern "C" fn epo_self_play(
    config_json: *const c_char,
    policy_path: *const c_char,
    metrics_out: *mut *mut c_char,
) -> EpoStatus {
    guarded(|| {
        let config_json = str_arg(config_json, "config_json")?;
        let policy_path = if policy_path.is_null() {
            None
        } else {
            Some(str_arg(policy_path, "policy_path")?)
        };
        require_out(metrics_out, "metrics_out")?;

        let config: TrainConfig = serde_json::from_str(config_json)
            .map_err(|e| fail(EpoStatus::Parse, format!("config: {e}")))?;
        let vocab = vocabulary(&config.env_id)
            .map_err(|e| fail(EpoStatus::InvalidArgument, e))?;
        let policy = Arc::new(
            ContextSoftmaxPolicy::new(vocab.tokens, config.sample_temperature)
                .map_err(|e| fail(EpoStatus::InvalidArgument, e))?,
        );
        let actor: Arc<dyn Actor> = Arc::new(ScriptedActor::new(config.env_id.clone()));

        let outcome = self_play_rl(Arc::clone(&policy), actor, &OraclePrm, &config, |_, _| Ok(()))
            .map_err(|e| fail(EpoStatus::Train, e))?;

        if let Some(path) = policy_path {
            policy.save(path).map_err(|e| fail(EpoStatus::Io, e))?;
        }

        let mut metrics = String::new();
        for report in &outcome.reports {
            metrics.push_str(
                &serde_json::to_string(report).map_err(|e| fail(EpoStatus::Parse, e))?,
            );
            metrics.push('\n');
        }
        write_string(metrics_out, metrics)
    })
}
