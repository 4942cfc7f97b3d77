//! C ABI over the msgm engine.
//!
//! Networks and mixtures are opaque handles created by `msgm_*_new`/`load`
//! functions and released with the matching `free`. Every fallible call
//! returns an [`MsgmStatus`]; on failure `msgm_last_error` describes the
//! cause for the calling thread. Arrays are row-major `double` buffers of
//! `n × d` values; output buffers are allocated by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use msgm::evalbench::{unlearning_ratio, AnalyticScore, Component, MixtureSpec, Split};
use msgm::likelihood::{nll_batch, IntegratorSettings};
use msgm::numcore::{RngState, Tensor};
use msgm::sampler::reverse_sde_sample;
use msgm::scorenet::{divergence_exact, read_checkpoint, write_checkpoint, Architecture, ScoreModel, ScoreNet};
use msgm::sde::{SdeKind, SdeSpec};
use msgm::MsgmError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgmStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Numerical = 3,
    Checkpoint = 4,
    Io = 5,
    NullPointer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgmSdeKind {
    Ve = 0,
    Vp = 1,
}

/// Forward SDE schedule. Unused fields of the other kind are ignored.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsgmSdeParams {
    pub kind: MsgmSdeKind,
    pub t_max: f64,
    pub t_eps: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl MsgmSdeParams {
    fn to_spec(self) -> Result<SdeSpec, MsgmError> {
        let spec = SdeSpec {
            kind: match self.kind {
                MsgmSdeKind::Ve => SdeKind::Ve,
                MsgmSdeKind::Vp => SdeKind::Vp,
            },
            t_max: self.t_max,
            t_eps: self.t_eps,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Opaque trained score network.
pub struct MsgmNet {
    net: ScoreNet,
}

/// Opaque Gaussian mixture.
pub struct MsgmMixture {
    mix: MixtureSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &MsgmError) -> MsgmStatus {
    match err {
        MsgmError::InvalidArgument(_) => MsgmStatus::InvalidArgument,
        MsgmError::Config(_) => MsgmStatus::Config,
        MsgmError::Numerical(_) => MsgmStatus::Numerical,
        MsgmError::Checkpoint(_) => MsgmStatus::Checkpoint,
        MsgmError::Io { .. } | MsgmError::Csv(_) => MsgmStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Engine(MsgmError),
}

impl From<MsgmError> for Failure {
    fn from(e: MsgmError) -> Self {
        Failure::Engine(e)
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> MsgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsgmStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer passed for {what}"));
            MsgmStatus::NullPointer
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MsgmStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn points(x: &[f64], n: usize, d: usize) -> Result<Tensor, Failure> {
    if n == 0 {
        return Err(MsgmError::InvalidArgument("n must be positive".into()).into());
    }
    Ok(Tensor::matrix(n, d, x.to_vec()))
}

/// Message describing the last failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn msgm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default schedule of the given kind.
#[no_mangle]
pub extern "C" fn msgm_sde_default(kind: MsgmSdeKind) -> MsgmSdeParams {
    let s = match kind {
        MsgmSdeKind::Ve => SdeSpec::ve(),
        MsgmSdeKind::Vp => SdeSpec::vp(),
    };
    MsgmSdeParams {
        kind,
        t_max: s.t_max,
        t_eps: s.t_eps,
        sigma_min: s.sigma_min,
        sigma_max: s.sigma_max,
        beta_min: s.beta_min,
        beta_max: s.beta_max,
    }
}

/// Freshly initialized network.
///
/// # Safety
/// `widths` must point to `n_widths` values; `sde` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_init(
    seed: u64,
    d: usize,
    widths: *const usize,
    n_widths: usize,
    embed_freqs: usize,
    sde: *const MsgmSdeParams,
    out: *mut *mut MsgmNet,
) -> MsgmStatus {
    guarded(|| {
        let widths = unsafe { slice(widths, n_widths, "widths") }?.to_vec();
        let sde = unsafe { deref(sde, "sde") }?.to_spec()?;
        let arch = Architecture::new(d, widths, embed_freqs)?;
        unsafe {
            put(
                out,
                MsgmNet {
                    net: ScoreNet::init(seed, arch, sde),
                },
            )
        }
    })
}

/// Network from checkpoint bytes.
///
/// # Safety
/// `bytes` must point to `len` bytes; `sde` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_load(
    bytes: *const u8,
    len: usize,
    sde: *const MsgmSdeParams,
    out: *mut *mut MsgmNet,
) -> MsgmStatus {
    guarded(|| {
        let bytes = unsafe { slice(bytes, len, "bytes") }?;
        let sde = unsafe { deref(sde, "sde") }?.to_spec()?;
        let net = read_checkpoint(bytes, sde)?;
        unsafe { put(out, MsgmNet { net }) }
    })
}

/// Network from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `sde` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_load_file(
    path: *const c_char,
    sde: *const MsgmSdeParams,
    out: *mut *mut MsgmNet,
) -> MsgmStatus {
    guarded(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| MsgmError::InvalidArgument("path is not UTF-8".into()))?;
        let bytes = std::fs::read(path).map_err(|e| MsgmError::Io {
            path: path.into(),
            source: e,
        })?;
        let sde = unsafe { deref(sde, "sde") }?.to_spec()?;
        let net = read_checkpoint(&bytes, sde)?;
        unsafe { put(out, MsgmNet { net }) }
    })
}

/// Serializes the network. With a null `buf` only the required size is
/// stored in `written`.
///
/// # Safety
/// `buf` must hold `cap` bytes when non-null; `net` and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_save(
    net: *const MsgmNet,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> MsgmStatus {
    guarded(|| {
        let net = unsafe { deref(net, "net") }?;
        if written.is_null() {
            return Err(Failure::Null("written"));
        }
        let bytes = write_checkpoint(&net.net);
        unsafe { *written = bytes.len() };
        if buf.is_null() {
            return Ok(());
        }
        if cap < bytes.len() {
            return Err(MsgmError::InvalidArgument(format!("buffer holds {cap} bytes, need {}", bytes.len())).into());
        }
        unsafe { slice_mut(buf, bytes.len(), "buf") }?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Input dimension of the network, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_dim(net: *const MsgmNet) -> usize {
    unsafe { net.as_ref() }.map_or(0, |n| n.net.dim())
}

/// `s_θ(x_i, t)` for `n` points, written to `out` (`n × d`).
///
/// # Safety
/// `x` and `out` must hold `n × d` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_score(
    net: *const MsgmNet,
    x: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let net = unsafe { deref(net, "net") }?;
        let d = net.net.dim();
        let x = points(unsafe { slice(x, n * d, "x") }?, n, d)?;
        let s = net.net.forward(&x, t)?;
        unsafe { slice_mut(out, n * d, "out") }?.copy_from_slice(s.data());
        Ok(())
    })
}

/// Divergence `∇·s_θ(x_i, t)` for `n` points, written to `out` (`n`).
///
/// # Safety
/// `x` must hold `n × d` values and `out` `n` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_divergence(
    net: *const MsgmNet,
    x: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let net = unsafe { deref(net, "net") }?;
        let d = net.net.dim();
        let x = points(unsafe { slice(x, n * d, "x") }?, n, d)?;
        let div = divergence_exact(&net.net, &x, t)?;
        unsafe { slice_mut(out, n, "out") }?.copy_from_slice(&div);
        Ok(())
    })
}

/// `n` reverse-SDE samples written to `out` (`n × d`).
///
/// # Safety
/// `out` must hold `n × d` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_sample(
    net: *const MsgmNet,
    n: usize,
    n_steps: usize,
    seed: u64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let net = unsafe { deref(net, "net") }?;
        let d = net.net.dim();
        let batch = reverse_sde_sample(&net.net, net.net.sde(), n, n_steps, &mut RngState::new(seed))?;
        unsafe { slice_mut(out, n * d, "out") }?.copy_from_slice(batch.points.data());
        Ok(())
    })
}

/// Probability-flow negative log-likelihood (nats) of `n` points.
///
/// # Safety
/// `x` must hold `n × d` values and `out` `n` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_nll(
    net: *const MsgmNet,
    x: *const f64,
    n: usize,
    rtol: f64,
    atol: f64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let net = unsafe { deref(net, "net") }?;
        let d = net.net.dim();
        let x = points(unsafe { slice(x, n * d, "x") }?, n, d)?;
        let settings = IntegratorSettings {
            rtol,
            atol,
            ..IntegratorSettings::default()
        };
        let r = nll_batch(&net.net, net.net.sde(), &x, &settings)?;
        unsafe { slice_mut(out, n, "out") }?.copy_from_slice(&r.nll);
        Ok(())
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msgm_net_free(net: *mut MsgmNet) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// The three-component toy mixture with the centre component flagged.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_toy(out: *mut *mut MsgmMixture) -> MsgmStatus {
    guarded(|| unsafe {
        put(
            out,
            MsgmMixture {
                mix: MixtureSpec::toy(),
            },
        )
    })
}

/// Mixture of `k` components in `d` dimensions. `means` is `k × d`,
/// `covs` is `k × d × d`, `nsfg` holds `k` flags (0 or 1) and may be null.
///
/// # Safety
/// Buffers must have the stated sizes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_new(
    k: usize,
    d: usize,
    weights: *const f64,
    means: *const f64,
    covs: *const f64,
    nsfg: *const u8,
    out: *mut *mut MsgmMixture,
) -> MsgmStatus {
    guarded(|| {
        let w = unsafe { slice(weights, k, "weights") }?;
        let m = unsafe { slice(means, k * d, "means") }?;
        let c = unsafe { slice(covs, k * d * d, "covs") }?;
        let flags = if nsfg.is_null() {
            vec![0; k]
        } else {
            unsafe { slice(nsfg, k, "nsfg") }?.to_vec()
        };
        let comps = (0..k)
            .map(|i| Component {
                weight: w[i],
                mean: m[i * d..(i + 1) * d].to_vec(),
                cov: c[i * d * d..(i + 1) * d * d].to_vec(),
                nsfg: flags[i] != 0,
            })
            .collect();
        let mix = MixtureSpec::new(comps)?;
        unsafe { put(out, MsgmMixture { mix }) }
    })
}

/// Dimension of the mixture, or 0 for a null handle.
///
/// # Safety
/// `mix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_dim(mix: *const MsgmMixture) -> usize {
    unsafe { mix.as_ref() }.map_or(0, |m| m.mix.dim())
}

/// Number of components, or 0 for a null handle.
///
/// # Safety
/// `mix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_components(mix: *const MsgmMixture) -> usize {
    unsafe { mix.as_ref() }.map_or(0, |m| m.mix.components().len())
}

/// Log density of `n` points.
///
/// # Safety
/// `x` must hold `n × d` values and `out` `n` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_logpdf(
    mix: *const MsgmMixture,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let mix = &unsafe { deref(mix, "mix") }?.mix;
        let d = mix.dim();
        let x = unsafe { slice(x, n * d, "x") }?;
        let out = unsafe { slice_mut(out, n, "out") }?;
        for (o, row) in out.iter_mut().zip(x.chunks_exact(d)) {
            *o = mix.logpdf(row);
        }
        Ok(())
    })
}

/// Bayes-optimal component of `n` points. `posterior` (`n × k`) may be null.
///
/// # Safety
/// `x` must hold `n × d` values, `component` `n` values and `posterior`,
/// when non-null, `n × k` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_bayes(
    mix: *const MsgmMixture,
    x: *const f64,
    n: usize,
    component: *mut usize,
    posterior: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let mix = &unsafe { deref(mix, "mix") }?.mix;
        let (d, k) = (mix.dim(), mix.components().len());
        let x = unsafe { slice(x, n * d, "x") }?;
        let comp = unsafe { slice_mut(component, n, "component") }?;
        let mut post = if posterior.is_null() {
            None
        } else {
            Some(unsafe { slice_mut(posterior, n * k, "posterior") }?)
        };
        for (i, row) in x.chunks_exact(d).enumerate() {
            let (c, p) = mix.bayes_component(row);
            comp[i] = c;
            if let Some(post) = post.as_deref_mut() {
                post[i * k..(i + 1) * k].copy_from_slice(&p);
            }
        }
        Ok(())
    })
}

/// `n` draws from the mixture written to `out` (`n × d`).
///
/// # Safety
/// `out` must hold `n × d` values.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_sample(
    mix: *const MsgmMixture,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let mix = &unsafe { deref(mix, "mix") }?.mix;
        let x = mix.sample(n, &mut RngState::new(seed), Split::All)?;
        unsafe { slice_mut(out, n * mix.dim(), "out") }?.copy_from_slice(x.data());
        Ok(())
    })
}

/// Score of the mixture perturbed to time `t` under `sde`, for `n` points.
///
/// # Safety
/// `x` and `out` must hold `n × d` values; `sde` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_score(
    mix: *const MsgmMixture,
    sde: *const MsgmSdeParams,
    x: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let mix = &unsafe { deref(mix, "mix") }?.mix;
        let sde = unsafe { deref(sde, "sde") }?.to_spec()?;
        let d = mix.dim();
        let x = points(unsafe { slice(x, n * d, "x") }?, n, d)?;
        let s = AnalyticScore::new(mix.clone(), sde).score(&x, t)?;
        unsafe { slice_mut(out, n * d, "out") }?.copy_from_slice(s.data());
        Ok(())
    })
}

/// Fraction of `n` points whose posterior mass on flagged components
/// exceeds `threshold`.
///
/// # Safety
/// `x` must hold `n × d` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgm_unlearning_ratio(
    mix: *const MsgmMixture,
    x: *const f64,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> MsgmStatus {
    guarded(|| {
        let mix = &unsafe { deref(mix, "mix") }?.mix;
        let d = mix.dim();
        let x = points(unsafe { slice(x, n * d, "x") }?, n, d)?;
        let ur = unlearning_ratio(mix, &x, threshold)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        unsafe { *out = ur };
        Ok(())
    })
}

/// Releases a mixture. Null is ignored.
///
/// # Safety
/// `mix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msgm_mixture_free(mix: *mut MsgmMixture) {
    if !mix.is_null() {
        drop(unsafe { Box::from_raw(mix) });
    }
}

#[doc(hidden)]
pub fn last_error_string() -> String {
    let p = msgm_last_error();
    if p.is_null() {
        return String::new();
    }
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}
