//! C ABI over the cordvip pipeline.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_load`
//! and released with the matching `*_free`. Every fallible call returns a
//! [`CvStatus`]; on failure [`cv_last_error`] describes what went wrong on the
//! calling thread. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cordvip::diffpolicy::{make_schedule, DiffusionSchedule, PolicyRuntime, ScheduleKind};
use cordvip::pcgeom::{contact_map, AlignedDistances};
use cordvip::toyenv::{self, EnvState, ToyHandModel, ARM_DIM, HAND_DIM};
use cordvip::Error;

/// Result of every fallible call. Codes 1-3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvStatus {
    Ok = 0,
    /// Bad argument value or unknown name.
    InvalidArgument = 1,
    /// Unreadable, malformed or mismatched data.
    Data = 2,
    /// Non-finite value or numeric failure.
    Numeric = 3,
    /// A required pointer was null or a string was not UTF-8.
    NullPointer = 4,
    /// The library panicked; the handle involved should be freed.
    Panic = 5,
}

/// Noise schedule shape for [`cv_schedule_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvScheduleKind {
    SquaredCosine = 0,
    Linear = 1,
}

/// Planar-push environment: model geometry plus current state.
pub struct CvEnv {
    model: ToyHandModel,
    state: EnvState,
}

/// Trained policy loaded from a checkpoint.
pub struct CvPolicy {
    runtime: PolicyRuntime,
    model: ToyHandModel,
}

/// Diffusion noise schedule.
pub struct CvSchedule {
    schedule: DiffusionSchedule,
}

/// Observable environment state.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CvEnvState {
    /// Disc x, y, yaw.
    pub object: [f64; 3],
    pub q_arm: [f64; 3],
    pub q_hand: [f64; 2],
    pub step: u64,
    pub success: bool,
}

/// Outcome of one closed-loop rollout.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CvRolloutResult {
    pub success: bool,
    pub steps: u64,
    pub final_distance: f64,
    pub steps_per_second: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CvStatus {
    match e.exit_code() {
        1 => CvStatus::InvalidArgument,
        3 => CvStatus::Numeric,
        _ => CvStatus::Data,
    }
}

struct Fail(CvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CvStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`cv_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CvStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {m}"));
            CvStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(CvStatus::NullPointer, "path is not UTF-8".into()))
}

/// Message of the last failed call on this thread, or null if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Contact values `2 / (1 + exp(theta * d))` for `n` non-negative distances.
///
/// # Safety
/// `distances` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cv_contact_map(distances: *const f64, n: usize, theta: f64, out: *mut f64) -> CvStatus {
    guard(|| {
        let d = slice_in(distances, n, "distances")?;
        let out = slice_out(out, n, "out")?;
        let c = contact_map(&AlignedDistances::new(d.to_vec())?, theta)?;
        out.copy_from_slice(c.values());
        Ok(())
    })
}

/// Creates a planar-push environment with `n_points` per cloud, reset to
/// `seed`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn cv_env_new(n_points: usize, seed: u64, out: *mut *mut CvEnv) -> CvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let env = CvEnv {
            model: ToyHandModel::new(n_points)?,
            state: toyenv::reset(seed),
        };
        *out = Box::into_raw(Box::new(env));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`cv_env_new`] and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn cv_env_free(env: *mut CvEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cv_env_reset(env: *mut CvEnv, seed: u64) -> CvStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        env.state = toyenv::reset(seed);
        Ok(())
    })
}

/// # Safety
/// `env` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cv_env_state(env: *const CvEnv, out: *mut CvEnvState) -> CvStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = &env.state;
        *out = CvEnvState {
            object: s.object,
            q_arm: s.q_arm,
            q_hand: s.q_hand,
            step: s.step as u64,
            success: toyenv::success(s),
        };
        Ok(())
    })
}

/// Applies absolute joint targets (3 arm, 2 finger values).
///
/// # Safety
/// `env` must be a live handle; `arm` and `hand` must hold 3 and 2 doubles.
#[no_mangle]
pub unsafe extern "C" fn cv_env_step(env: *mut CvEnv, arm: *const f64, hand: *const f64) -> CvStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        let arm = slice_in(arm, ARM_DIM, "arm")?;
        let hand = slice_in(hand, HAND_DIM, "hand")?;
        env.state = toyenv::step(&env.model, &env.state, arm, hand)?;
        Ok(())
    })
}

/// Scripted demonstrator's action for the current state.
///
/// # Safety
/// `env` must be a live handle; `arm` and `hand` must have room for 3 and 2
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn cv_env_expert_action(env: *const CvEnv, arm: *mut f64, hand: *mut f64) -> CvStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let arm = slice_out(arm, ARM_DIM, "arm")?;
        let hand = slice_out(hand, HAND_DIM, "hand")?;
        let (a, h) = toyenv::expert_action(&env.state);
        arm.copy_from_slice(&a);
        hand.copy_from_slice(&h);
        Ok(())
    })
}

/// Number of points per cloud of this environment.
///
/// # Safety
/// `env` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cv_env_n_points(env: *const CvEnv) -> usize {
    env.as_ref().map_or(0, |e| e.model.n_points)
}

/// Object and hand clouds (`n_points × 3` row-major each) and the
/// ground-truth contact map (`n_points`) at the current state. Any output may
/// be null to skip it.
///
/// # Safety
/// `env` must be a live handle; non-null outputs must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn cv_env_observe(
    env: *const CvEnv,
    object_pc: *mut f64,
    hand_pc: *mut f64,
    contact: *mut f64,
) -> CvStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let (obs, c) = toyenv::render_observation(&env.model, &env.state)?;
        let n = env.model.n_points;
        for (dst, pc) in [(object_pc, &obs.obj_pc), (hand_pc, &obs.hand_pc)] {
            if !dst.is_null() {
                let out = slice_out(dst, n * 3, "cloud")?;
                for (o, p) in out.chunks_exact_mut(3).zip(pc.points()) {
                    o.copy_from_slice(p);
                }
            }
        }
        if !contact.is_null() {
            slice_out(contact, n, "contact")?.copy_from_slice(c.values());
        }
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn cv_schedule_new(k: usize, kind: CvScheduleKind, out: *mut *mut CvSchedule) -> CvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = match kind {
            CvScheduleKind::SquaredCosine => ScheduleKind::SquaredCosine,
            CvScheduleKind::Linear => ScheduleKind::Linear,
        };
        *out = Box::into_raw(Box::new(CvSchedule {
            schedule: make_schedule(k, kind)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`cv_schedule_new`] and not be used afterwards. Null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn cv_schedule_free(s: *mut CvSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Writes the `K + 1` cumulative signal coefficients, index 0 being clean
/// data.
///
/// # Safety
/// `s` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cv_schedule_alpha_bars(s: *const CvSchedule, out: *mut f64, len: usize) -> CvStatus {
    guard(|| {
        let s = handle(s, "schedule")?;
        let ab = s.schedule.alpha_bars();
        if len != ab.len() {
            return Err(Fail(
                CvStatus::InvalidArgument,
                format!("buffer holds {len} values, schedule has {}", ab.len()),
            ));
        }
        slice_out(out, len, "out")?.copy_from_slice(ab);
        Ok(())
    })
}

/// Loads a policy checkpoint written by `cordvip train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cv_policy_load(path: *const c_char, out: *mut *mut CvPolicy) -> CvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let runtime = PolicyRuntime::load(path_arg(path)?)?;
        let model = ToyHandModel::new(runtime.corr.config.n_points)?;
        *out = Box::into_raw(Box::new(CvPolicy { runtime, model }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`cv_policy_load`] and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn cv_policy_free(p: *mut CvPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Closed-loop rollout from env seed `env_seed`.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cv_policy_rollout(
    p: *const CvPolicy,
    env_seed: u64,
    max_steps: usize,
    sampler_seed: u64,
    out: *mut CvRolloutResult,
) -> CvStatus {
    guard(|| {
        let p = handle(p, "policy")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = p.runtime.rollout(&p.model, env_seed, max_steps, sampler_seed)?;
        *out = CvRolloutResult {
            success: r.success,
            steps: r.steps as u64,
            final_distance: r.final_distance(),
            steps_per_second: r.step_rate(),
        };
        Ok(())
    })
}
