//! C ABI over the `physcorr` library.
//!
//! Every function returns a [`PhyStatus`]; results go through out-pointers.
//! On failure, [`phy_last_error`] returns a message for the calling thread.
//! Histograms and policies are opaque handles released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use physcorr::curation::PreferencePair;
use physcorr::mechanics::{score_mechanics, MechanicsVerdict, VerdictSource};
use physcorr::phydpo::{self, BetaMode, DpoConfig, ReweightConfig, ScoreHistogram, ToyPolicy};
use physcorr::score::{self, EmbeddingSequence, HuberConfig, MixerParams, SubjectStats};
use physcorr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Degenerate = 3,
    OutOfRange = 4,
    Divergence = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> PhyStatus {
    match e.root() {
        Error::Degenerate(_) | Error::Stats(_) => PhyStatus::Degenerate,
        Error::Range(_) | Error::Index(_) => PhyStatus::OutOfRange,
        Error::Divergence { .. } => PhyStatus::Divergence,
        _ => PhyStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), PhyStatus>) -> PhyStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PhyStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            PhyStatus::Internal
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PhyStatus>;
}

impl<T> OrStatus<T> for physcorr::Result<T> {
    fn or_status(self) -> Result<T, PhyStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), PhyStatus> {
    if p.is_null() {
        set_error(format!("`{name}` is NULL"));
        Err(PhyStatus::NullPointer)
    } else {
        Ok(())
    }
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), PhyStatus> {
    non_null(out, "out")?;
    out.write(value);
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], PhyStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn phy_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Mean cosine similarity of consecutive frames; `data` holds `frames * dim`
/// values, row-major.
///
/// # Safety
/// `data` must point to `frames * dim` floats and `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn phy_subject_consistency(
    data: *const f32,
    frames: usize,
    dim: usize,
    out: *mut f64,
) -> PhyStatus {
    guard(|| {
        let values = slice(data, frames.saturating_mul(dim), "data")?.to_vec();
        let seq = EmbeddingSequence::new("ffi", frames, dim, values).or_status()?;
        write(out, score::subject_consistency(&seq))
    })
}

/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn phy_normalize_subject(raw: f64, mu: f64, sigma: f64, out: *mut f64) -> PhyStatus {
    guard(|| {
        let stats = SubjectStats::new("ffi", mu, sigma).or_status()?;
        write(out, score::normalize_subject(raw, &stats))
    })
}

/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn phy_mix_scores(s_subj_norm: f64, s_mech: f64, lambda: f64, out: *mut f64) -> PhyStatus {
    guard(|| {
        let params = MixerParams::new(lambda).or_status()?;
        write(out, score::mix_scores(s_subj_norm, s_mech, &params).or_status()?)
    })
}

/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn phy_huber_loss(residual: f64, delta: f64, out: *mut f64) -> PhyStatus {
    guard(|| {
        let cfg = HuberConfig::new(delta).or_status()?;
        write(out, score::huber_loss(residual, &cfg))
    })
}

/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn phy_huber_grad(residual: f64, delta: f64, out: *mut f64) -> PhyStatus {
    guard(|| {
        let cfg = HuberConfig::new(delta).or_status()?;
        write(out, score::huber_grad(residual, &cfg))
    })
}

/// Mechanics score from the two verdicts. `q2_answered` must be false exactly
/// when `q1_correct` is false.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn phy_score_mechanics(
    q1_correct: bool,
    q2_answered: bool,
    q2_correct: bool,
    out: *mut f64,
) -> PhyStatus {
    guard(|| {
        let verdict = |qid: &str, correct| MechanicsVerdict {
            video_id: "ffi".into(),
            question_id: qid.into(),
            answer_text: String::new(),
            correct,
            source: VerdictSource::Replay,
        };
        let v2 = q2_answered.then(|| verdict("q2", q2_correct));
        let s = score_mechanics(&verdict("q1", q1_correct), v2.as_ref()).or_status()?;
        write(out, s.value())
    })
}

/// Opaque score histogram.
pub struct PhyHistogram(ScoreHistogram);

/// # Safety
/// `scores` must point to `len` doubles and `out` to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn phy_histogram_new(
    scores: *const f64,
    len: usize,
    bin_width: f64,
    out: *mut *mut PhyHistogram,
) -> PhyStatus {
    guard(|| {
        non_null(out, "out")?;
        let h = ScoreHistogram::build(slice(scores, len, "scores")?, bin_width).or_status()?;
        write(out, Box::into_raw(Box::new(PhyHistogram(h))))
    })
}

/// # Safety
/// `hist` must come from [`phy_histogram_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn phy_histogram_density(hist: *const PhyHistogram, score: f64, out: *mut f64) -> PhyStatus {
    guard(|| {
        non_null(hist, "hist")?;
        write(out, (*hist).0.density(score).or_status()?)
    })
}

/// Pair weight `(beta / (p(s_win) p(s_lose)))^alpha`. A `beta` of zero or less
/// selects the histogram's peak density.
///
/// # Safety
/// `hist` must come from [`phy_histogram_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn phy_histogram_pair_weight(
    hist: *const PhyHistogram,
    s_win: f64,
    s_lose: f64,
    alpha: f64,
    beta: f64,
    out: *mut f64,
) -> PhyStatus {
    guard(|| {
        non_null(hist, "hist")?;
        let cfg = ReweightConfig {
            alpha,
            beta: if beta > 0.0 {
                BetaMode::Fixed(beta)
            } else {
                BetaMode::ComputedMaxDensity
            },
        };
        write(out, phydpo::pair_weight(&(*hist).0, s_win, s_lose, &cfg).or_status()?)
    })
}

/// # Safety
/// `hist` must come from [`phy_histogram_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn phy_histogram_free(hist: *mut PhyHistogram) {
    if !hist.is_null() {
        drop(Box::from_raw(hist));
    }
}

/// Opaque toy policy: `rows` prompts with `width` candidates each.
pub struct PhyPolicy(ToyPolicy);

/// One preference pair addressed by row and candidate indices.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PhyPair {
    pub row: usize,
    pub win: usize,
    pub lose: usize,
    pub weight: f64,
}

fn item_id(row: usize, i: usize) -> String {
    format!("r{row}/{i}")
}

fn to_pair(p: &PhyPair) -> Result<PreferencePair, PhyStatus> {
    let mut pair = PreferencePair::new(format!("r{}", p.row), item_id(p.row, p.win), item_id(p.row, p.lose), 1.0, 0.0)
        .or_status()?;
    pair.weight = p.weight;
    Ok(pair)
}

/// Policy whose reference equals its seeded initial logits.
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn phy_policy_new(
    rows: usize,
    width: usize,
    seed: u64,
    init_scale: f64,
    out: *mut *mut PhyPolicy,
) -> PhyStatus {
    guard(|| {
        non_null(out, "out")?;
        let prompts = (0..rows).map(|r| format!("r{r}")).collect();
        let items = (0..rows).map(|r| (0..width).map(|i| item_id(r, i)).collect()).collect();
        let p = ToyPolicy::seeded(prompts, items, seed, init_scale).or_status()?;
        write(out, Box::into_raw(Box::new(PhyPolicy(p))))
    })
}

/// # Safety
/// `policy` must come from [`phy_policy_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn phy_policy_dpo_loss(
    policy: *const PhyPolicy,
    pair: PhyPair,
    gamma: f64,
    out: *mut f64,
) -> PhyStatus {
    guard(|| {
        non_null(policy, "policy")?;
        let cfg = DpoConfig {
            gamma,
            ..DpoConfig::default()
        };
        let l = phydpo::dpo_loss(&(*policy).0, &to_pair(&pair)?, &cfg).or_status()?;
        write(out, l.row.loss)
    })
}

/// Full-batch gradient descent on the weighted loss, in place. When `trace`
/// is non-NULL it receives `steps + 1` losses.
///
/// # Safety
/// `policy` must come from [`phy_policy_new`]; `pairs` must point to `len`
/// pairs; `trace`, if non-NULL, must hold `steps + 1` doubles.
#[no_mangle]
pub unsafe extern "C" fn phy_policy_train(
    policy: *mut PhyPolicy,
    pairs: *const PhyPair,
    len: usize,
    gamma: f64,
    learning_rate: f64,
    steps: usize,
    trace: *mut f64,
) -> PhyStatus {
    guard(|| {
        non_null(policy, "policy")?;
        let pairs = slice(pairs, len, "pairs")?
            .iter()
            .map(to_pair)
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = DpoConfig {
            gamma,
            learning_rate,
            steps,
            ..DpoConfig::default()
        };
        let outcome = phydpo::train_toy(&(*policy).0, &pairs, &cfg).or_status()?;
        if !trace.is_null() {
            std::slice::from_raw_parts_mut(trace, outcome.trace.len()).copy_from_slice(&outcome.trace);
        }
        (*policy).0 = outcome.policy;
        Ok(())
    })
}

/// Mean over prompts of the expected value under the policy; `values` is laid
/// out like the logits (`rows * width`).
///
/// # Safety
/// `policy` must come from [`phy_policy_new`]; `values` must hold `len`
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn phy_policy_expected_value(
    policy: *const PhyPolicy,
    values: *const f64,
    len: usize,
    out: *mut f64,
) -> PhyStatus {
    guard(|| {
        non_null(policy, "policy")?;
        let p = &(*policy).0;
        if len != p.logits().len() {
            set_error(format!("expected {} values, got {len}", p.logits().len()));
            return Err(PhyStatus::InvalidArgument);
        }
        write(out, p.expected_value(slice(values, len, "values")?, false))
    })
}

/// Copies the current logits into `buf`, which must hold `rows * width`
/// doubles.
///
/// # Safety
/// `policy` must come from [`phy_policy_new`]; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn phy_policy_logits(policy: *const PhyPolicy, buf: *mut f64, len: usize) -> PhyStatus {
    guard(|| {
        non_null(policy, "policy")?;
        non_null(buf, "buf")?;
        let z = (*policy).0.logits();
        if len != z.len() {
            set_error(format!("buffer holds {len} values, policy has {}", z.len()));
            return Err(PhyStatus::InvalidArgument);
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(z);
        Ok(())
    })
}

/// # Safety
/// `policy` must come from [`phy_policy_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn phy_policy_free(policy: *mut PhyPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}
