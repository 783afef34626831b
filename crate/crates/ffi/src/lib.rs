//! C ABI over the congrad kernels.
//!
//! Every function returns a [`CgStatus`]. On failure a message is kept per
//! thread and can be read with [`cg_last_error_message`]. Matrices are dense
//! row-major `double` arrays. Handles are created by `*_new` functions and
//! must be released with the matching `*_free`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use congrad::consensus::{consensus, TaskGradients};
use congrad::filtering::{select, Direction, FilterConfig, FilterKind, FilterScore};
use congrad::grad_store::{EmaConfig, LanguageGradientStore};
use congrad::lowrank::{cosine, power_iterate, reconstruct, DenseMatrix, FlatVector};
use congrad::preference::{lp_dpo_loss, sample_gradient, DpoConfig, PreferencePair, Token, ToyPolicy};
use congrad::CongradError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    EmptyStore = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Toy policy handle.
pub struct CgPolicy(ToyPolicy);

/// Single-matrix gradient EMA handle.
pub struct CgGradStore(LanguageGradientStore);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(CgStatus, String);

impl From<CongradError> for Fail {
    fn from(e: CongradError) -> Self {
        let status = match e {
            CongradError::ShapeMismatch { .. } => CgStatus::ShapeMismatch,
            CongradError::NonFiniteGradient { .. } => CgStatus::NonFinite,
            CongradError::EmptyStore { .. } => CgStatus::EmptyStore,
            _ => CgStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

type Res<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> Res<()>) -> CgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CgStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Res<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Res<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_value<'a, T>(ptr: *mut T, what: &str) -> Res<&'a mut T> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Res<&'a T> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn fill(dst: &mut [f64], src: &[f64]) -> Res<()> {
    if dst.len() != src.len() {
        return Err(Fail(
            CgStatus::BufferTooSmall,
            format!("output buffer holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn checked_len(a: usize, b: usize) -> Res<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(CgStatus::InvalidArgument, "dimensions overflow".into()))
}

/// Copy the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cg_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Cosine similarity of two length-`n` vectors; 0 if either is zero.
///
/// # Safety
/// `a` and `b` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_cosine(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> CgStatus {
    guard(|| {
        let (a, b) = (input(a, n, "a")?, input(b, n, "b")?);
        *out_value(out, "out")? = cosine(a, b).value;
        Ok(())
    })
}

/// Rank-`rank` approximation of a `rows`×`cols` matrix by seeded power
/// iteration, written densely to `out`.
///
/// # Safety
/// `m` and `out` must each point to `rows*cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_power_iterate(
    m: *const f64,
    rows: usize,
    cols: usize,
    rank: usize,
    iters: usize,
    seed: u64,
    out: *mut f64,
) -> CgStatus {
    guard(|| {
        let len = checked_len(rows, cols)?;
        let m = DenseMatrix::new(rows, cols, input(m, len, "m")?.to_vec())?;
        let approx = reconstruct(&power_iterate(&m, rank, iters, seed)?);
        fill(output(out, len, "out")?, approx.as_slice())
    })
}

/// De-conflicted sum of `k` task gradients of length `n`, stacked row-major
/// in `grads`.
///
/// # Safety
/// `grads` must point to `k*n` doubles and `out` to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_consensus(
    grads: *const f64,
    k: usize,
    n: usize,
    order_seed: u64,
    out: *mut f64,
) -> CgStatus {
    guard(|| {
        let all = input(grads, checked_len(k, n)?, "grads")?;
        let mut map = BTreeMap::new();
        for (i, row) in all.chunks(n.max(1)).take(k).enumerate() {
            map.insert(format!("task{i:08}"), FlatVector::new(row.to_vec())?);
        }
        let tasks = TaskGradients::new(map)?;
        let c = consensus(&tasks, order_seed)?;
        fill(output(out, n, "out")?, c.gradient.vector.as_slice())
    })
}

/// Keep the top (`keep_max` nonzero) or bottom `ceil(rho*n)` of `n` scores.
/// Ties go to the lower index. `mask[i]` is set to 1 for kept samples.
///
/// # Safety
/// `scores` must point to `n` doubles and `mask` to `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn cg_select(scores: *const f64, n: usize, rho: f64, keep_max: i32, mask: *mut u8) -> CgStatus {
    guard(|| {
        let scores = input(scores, n, "scores")?;
        let mask = output(mask, n, "mask")?;
        let list: Vec<FilterScore> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| FilterScore {
                sample_id: i,
                language: String::new(),
                score: s,
                kind: FilterKind::Congrad,
            })
            .collect();
        let cfg = FilterConfig {
            retain_fraction: rho,
            direction: if keep_max != 0 { Direction::Max } else { Direction::Min },
            ..FilterConfig::default()
        };
        let kept = select(&list, &cfg)?;
        mask.fill(0);
        for &i in kept.values().flatten() {
            mask[i] = 1;
        }
        Ok(())
    })
}

/// New toy policy with Gaussian logits.
///
/// # Safety
/// `out` must be writable; the handle it receives is released with
/// [`cg_policy_free`].
#[no_mangle]
pub unsafe extern "C" fn cg_policy_new(
    num_prompts: usize,
    vocab_size: usize,
    max_len: usize,
    std: f64,
    seed: u64,
    out: *mut *mut CgPolicy,
) -> CgStatus {
    guard(|| {
        let slot = out_value(out, "out")?;
        let p = ToyPolicy::random(num_prompts, vocab_size, max_len, std, seed)?;
        *slot = Box::into_raw(Box::new(CgPolicy(p)));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from [`cg_policy_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cg_policy_free(policy: *mut CgPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of parameters, i.e. the gradient length.
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_policy_num_params(policy: *const CgPolicy, out: *mut usize) -> CgStatus {
    guard(|| {
        *out_value(out, "out")? = handle(policy, "policy")?.0.num_params();
        Ok(())
    })
}

/// Log-probability of `tokens` given `prompt_id`.
///
/// # Safety
/// `policy` must be a live handle, `tokens` must point to `len` tokens and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_policy_log_prob(
    policy: *const CgPolicy,
    prompt_id: usize,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
) -> CgStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        let seq: &[Token] = input(tokens, len, "tokens")?;
        *out_value(out, "out")? = p.0.log_prob(prompt_id, seq)?;
        Ok(())
    })
}

/// A preference pair as seen through the C ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CgPair {
    pub prompt_id: usize,
    pub chosen: *const u32,
    pub chosen_len: usize,
    pub rejected: *const u32,
    pub rejected_len: usize,
}

unsafe fn pair(p: *const CgPair) -> Res<PreferencePair> {
    let p = handle(p, "pair")?;
    Ok(PreferencePair {
        language: String::new(),
        prompt_id: p.prompt_id,
        chosen: input(p.chosen, p.chosen_len, "pair.chosen")?.to_vec(),
        rejected: input(p.rejected, p.rejected_len, "pair.rejected")?.to_vec(),
        chosen_score: 1,
        rejected_score: 0,
    })
}

/// Length-penalized DPO loss of `pair` under `policy` against `reference`.
///
/// # Safety
/// Both handles must be live, `pair` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_lp_dpo_loss(
    policy: *const CgPolicy,
    reference: *const CgPolicy,
    pair_ptr: *const CgPair,
    beta: f64,
    alpha: f64,
    out: *mut f64,
) -> CgStatus {
    guard(|| {
        let (p, r) = (handle(policy, "policy")?, handle(reference, "reference")?);
        let cfg = DpoConfig { beta, alpha };
        *out_value(out, "out")? = lp_dpo_loss(&p.0, &r.0, &pair(pair_ptr)?, &cfg)?;
        Ok(())
    })
}

/// Exact gradient of [`cg_lp_dpo_loss`] with respect to the policy
/// parameters, written to `out` of length [`cg_policy_num_params`].
///
/// # Safety
/// Both handles must be live, `pair` must be valid and `out` must point to
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_lp_dpo_gradient(
    policy: *const CgPolicy,
    reference: *const CgPolicy,
    pair_ptr: *const CgPair,
    beta: f64,
    alpha: f64,
    out: *mut f64,
    out_len: usize,
) -> CgStatus {
    guard(|| {
        let (p, r) = (handle(policy, "policy")?, handle(reference, "reference")?);
        let cfg = DpoConfig { beta, alpha };
        let g = sample_gradient(&p.0, &r.0, &pair(pair_ptr)?, &cfg)?;
        fill(output(out, out_len, "out")?, g.as_slice())
    })
}

/// Gradient EMA for one `rows`×`cols` parameter matrix, stored at rank
/// `min(rank, rows, cols)`.
///
/// # Safety
/// `out` must be writable; the handle it receives is released with
/// [`cg_store_free`].
#[no_mangle]
pub unsafe extern "C" fn cg_store_new(
    rows: usize,
    cols: usize,
    rank: usize,
    gamma: f64,
    power_iters: usize,
    seed: u64,
    out: *mut *mut CgGradStore,
) -> CgStatus {
    guard(|| {
        let slot = out_value(out, "out")?;
        let cfg = EmaConfig {
            gamma,
            rank,
            power_iters,
            seed,
        };
        let s = LanguageGradientStore::new("ffi", &[(rows, cols)], cfg)?;
        *slot = Box::into_raw(Box::new(CgGradStore(s)));
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from [`cg_store_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cg_store_free(store: *mut CgGradStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Fold one gradient of `len == rows*cols` values into the EMA.
///
/// # Safety
/// `store` must be a live handle not used concurrently; `grad` must point to
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_store_update(store: *mut CgGradStore, grad: *const f64, len: usize) -> CgStatus {
    guard(|| {
        let s = store.as_mut().ok_or_else(|| null("store"))?;
        let (rows, cols) = s.0.shapes()[0];
        if len != rows * cols {
            return Err(Fail(
                CgStatus::ShapeMismatch,
                format!("gradient has {len} values, store expects {rows}x{cols}"),
            ));
        }
        let values = input(grad, len, "grad")?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Fail(CgStatus::NonFinite, "gradient contains non-finite values".into()));
        }
        let g = DenseMatrix::new(rows, cols, values.to_vec())?;
        s.0.ema_update(&[g])?;
        Ok(())
    })
}

/// Number of updates applied so far.
///
/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_store_step(store: *const CgGradStore, out: *mut u64) -> CgStatus {
    guard(|| {
        *out_value(out, "out")? = handle(store, "store")?.0.step();
        Ok(())
    })
}

/// Dense reconstruction of the current EMA, row-major.
///
/// # Safety
/// `store` must be a live handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_store_snapshot(store: *const CgGradStore, out: *mut f64, len: usize) -> CgStatus {
    guard(|| {
        let snap = handle(store, "store")?.0.snapshot()?;
        fill(output(out, len, "out")?, snap.as_slice())
    })
}
