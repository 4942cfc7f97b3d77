//! Reverse-time generation and the conditional procedures built on it.
//!
//! All samplers step the reverse SDE
//! `dx = [f(x, t) − g(t)²·s(x, t)] dt + g(t) dw̄` with Euler–Maruyama on a
//! uniform grid running from the start time down to `t_eps`.

use std::io::Write;

use crate::error::{MsgmError, Result};
use crate::numcore::{RngState, Tensor};
use crate::scorenet::ScoreModel;
use crate::sde::{SdeKind, SdeSpec};

pub const DEFAULT_STEPS: usize = 1000;
pub const MIN_STEPS: usize = 10;
pub const DEFAULT_T_STAR: f64 = 0.02;

/// Replay information attached to generated points.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub sde: SdeKind,
    /// Free-form identifier of the model, e.g. a checkpoint CRC.
    pub model_id: String,
    pub steps: usize,
    pub seed: u64,
    pub corrector_steps: usize,
    pub snr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub points: Tensor,
    pub meta: SampleMeta,
}

impl SampleBatch {
    /// CSV with one point per row and columns `x0, x1, ...`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_points_csv(&self.points, w)
    }
}

pub fn write_points_csv<W: Write>(points: &Tensor, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let d = points.cols();
    wr.write_record((0..d).map(|j| format!("x{j}")))?;
    for row in points.row_iter() {
        wr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wr.flush().map_err(|e| MsgmError::io("points csv", e))?;
    Ok(())
}

pub fn read_points_csv<R: std::io::Read>(r: R) -> Result<Tensor> {
    let mut rd = csv::Reader::from_reader(r);
    let d = rd.headers()?.len();
    let mut data = Vec::new();
    for rec in rd.records() {
        for field in rec?.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|_| MsgmError::invalid(format!("bad number '{field}' in points csv")))?,
            );
        }
    }
    if d == 0 || data.len() % d != 0 {
        return Err(MsgmError::invalid("ragged points csv"));
    }
    Ok(Tensor::matrix(data.len() / d, d, data))
}

/// Langevin corrector settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corrector {
    pub snr: f64,
    pub steps: usize,
}

impl Corrector {
    pub const NONE: Corrector = Corrector { snr: 0.0, steps: 0 };

    fn active(&self) -> bool {
        self.steps > 0 && self.snr > 0.0
    }
}

/// Knobs of the shared reverse integrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseOptions {
    pub n_steps: usize,
    /// Multiplies the injected noise. Zero gives the drift-only trajectory.
    pub noise_scale: f64,
    pub corrector: Corrector,
}

impl ReverseOptions {
    pub fn euler(n_steps: usize) -> Self {
        ReverseOptions {
            n_steps,
            noise_scale: 1.0,
            corrector: Corrector::NONE,
        }
    }
}

fn check_model(model: &(impl ScoreModel + ?Sized), d: usize) -> Result<()> {
    if model.dim() != d {
        return Err(MsgmError::invalid(format!(
            "model dimension {} does not match data dimension {d}",
            model.dim()
        )));
    }
    Ok(())
}

fn langevin(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    x: &mut Tensor,
    t: f64,
    dt: f64,
    c: Corrector,
    rng: &mut RngState,
) -> Result<()> {
    let d = x.cols();
    let alpha = match sde.kind {
        SdeKind::Ve => 1.0,
        SdeKind::Vp => 1.0 - sde.beta(t) * dt,
    };
    let mut z = vec![0.0; d];
    for _ in 0..c.steps {
        let s = model.score(x, t)?;
        for i in 0..x.rows() {
            rng.fill_normal(&mut z);
            let gn = s.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let eps = if gn > 0.0 {
                2.0 * alpha * (c.snr * zn / gn).powi(2)
            } else {
                0.0
            };
            let noise = (2.0 * eps).sqrt();
            for ((v, g), e) in x.row_mut(i).iter_mut().zip(s.row(i)).zip(&z) {
                *v += eps * g + noise * e;
            }
        }
    }
    Ok(())
}

/// Integrates the reverse SDE from `t_start` down to `t_eps`, calling
/// `project(x, t)` after every predictor step with the new time.
pub fn reverse_integrate(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    mut x: Tensor,
    t_start: f64,
    opts: ReverseOptions,
    rng: &mut RngState,
    mut project: impl FnMut(&mut Tensor, f64, &mut RngState),
) -> Result<Tensor> {
    if opts.n_steps == 0 {
        return Err(MsgmError::invalid("reverse integration needs at least one step"));
    }
    check_model(model, x.cols())?;
    let span = t_start - sde.t_eps;
    if span < 0.0 || t_start > sde.t_max + 1e-12 {
        return Err(MsgmError::invalid(format!(
            "start time {t_start} outside [{}, {}]",
            sde.t_eps, sde.t_max
        )));
    }
    let dt = span / opts.n_steps as f64;
    let mut z = vec![0.0; x.len()];
    for i in 0..opts.n_steps {
        let t = t_start - i as f64 * dt;
        if opts.corrector.active() {
            langevin(model, sde, &mut x, t, dt, opts.corrector, rng)?;
        }
        let s = model.score(&x, t)?;
        let c = sde.drift_coeff(t);
        let g = sde.g(t);
        let g2 = g * g;
        let amp = opts.noise_scale * g * dt.sqrt();
        if amp != 0.0 {
            rng.fill_normal(&mut z);
        }
        for (k, (v, sv)) in x.data_mut().iter_mut().zip(s.data()).enumerate() {
            let drift = c * *v - g2 * sv;
            *v -= drift * dt;
            if amp != 0.0 {
                *v += amp * z[k];
            }
        }
        let t_next = if i + 1 == opts.n_steps { sde.t_eps } else { t - dt };
        project(&mut x, t_next, rng);
        if !x.is_finite() {
            return Err(MsgmError::numerical(format!(
                "reverse sampler state became non-finite at step {i} (t = {t})"
            )));
        }
    }
    Ok(x)
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps < MIN_STEPS {
        return Err(MsgmError::invalid(format!(
            "n_steps must be at least {MIN_STEPS}, got {n_steps}"
        )));
    }
    Ok(())
}

fn meta(sde: &SdeSpec, steps: usize, seed: u64, c: Corrector) -> SampleMeta {
    SampleMeta {
        sde: sde.kind,
        model_id: String::new(),
        steps,
        seed,
        corrector_steps: c.steps,
        snr: c.snr,
    }
}

/// Euler–Maruyama samples started from the prior at `T`.
pub fn reverse_sde_sample(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    n: usize,
    n_steps: usize,
    rng: &mut RngState,
) -> Result<SampleBatch> {
    pc_sample(model, sde, n, n_steps, 0.0, 0, rng)
}

/// Predictor–corrector sampling: each grid point runs `corrector_steps`
/// Langevin updates with step `2α(snr·‖z‖/‖s‖)²` before the predictor.
pub fn pc_sample(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    n: usize,
    n_steps: usize,
    langevin_snr: f64,
    corrector_steps: usize,
    rng: &mut RngState,
) -> Result<SampleBatch> {
    check_steps(n_steps)?;
    if n == 0 {
        return Err(MsgmError::invalid("requested zero samples"));
    }
    if !(langevin_snr >= 0.0 && langevin_snr.is_finite()) {
        return Err(MsgmError::invalid("langevin_snr must be finite and non-negative"));
    }
    let seed = rng.seed();
    let corrector = Corrector {
        snr: langevin_snr,
        steps: corrector_steps,
    };
    let x = sde.prior_sample(n, model.dim(), rng);
    let opts = ReverseOptions {
        corrector,
        ..ReverseOptions::euler(n_steps)
    };
    let points = reverse_integrate(model, sde, x, sde.t_max, opts, rng, |_, _, _| {})?;
    Ok(SampleBatch {
        points,
        meta: meta(sde, n_steps, seed, corrector),
    })
}

/// Completes the free coordinates by the replacement method: after every
/// step the observed coordinates are overwritten with a fresh forward
/// perturbation of their values at the current time. `observed` is either
/// one row shared by all `n` samples or `n` rows.
pub fn inpaint(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    observed: &Tensor,
    mask: &[bool],
    n: usize,
    n_steps: usize,
    rng: &mut RngState,
) -> Result<SampleBatch> {
    check_steps(n_steps)?;
    let d = model.dim();
    if mask.len() != d || observed.cols() != d {
        return Err(MsgmError::invalid(
            "mask and observed values must have the model dimension",
        ));
    }
    if mask.iter().all(|&m| m) || mask.iter().all(|&m| !m) {
        return Err(MsgmError::invalid(
            "mask must have at least one observed and one free coordinate",
        ));
    }
    let rows = observed.rows();
    if rows != 1 && rows != n {
        return Err(MsgmError::invalid("observed must have one row or one row per sample"));
    }
    if n == 0 {
        return Err(MsgmError::invalid("requested zero samples"));
    }
    let seed = rng.seed();
    let obs = |i: usize| observed.row(if rows == 1 { 0 } else { i });
    let replace = |x: &mut Tensor, t: f64, rng: &mut RngState| {
        let (m, std) = sde.marginal(t);
        for i in 0..x.rows() {
            let o = obs(i);
            let row = x.row_mut(i);
            for j in 0..d {
                if mask[j] {
                    row[j] = m * o[j] + std * rng.normal();
                }
            }
        }
    };
    let mut x = sde.prior_sample(n, d, rng);
    replace(&mut x, sde.t_max, rng);
    let mut points = reverse_integrate(model, sde, x, sde.t_max, ReverseOptions::euler(n_steps), rng, replace)?;
    for i in 0..n {
        let o = obs(i).to_vec();
        let row = points.row_mut(i);
        for j in 0..d {
            if mask[j] {
                row[j] = o[j];
            }
        }
    }
    Ok(SampleBatch {
        points,
        meta: meta(sde, n_steps, seed, Corrector::NONE),
    })
}

/// Reverse steps used between `t_star` and `t_eps` when the full interval
/// gets `grid_steps`.
pub fn reconstruct_steps(sde: &SdeSpec, t_star: f64, grid_steps: usize) -> usize {
    let frac = (t_star - sde.t_eps) / (sde.t_max - sde.t_eps);
    ((frac * grid_steps as f64).round() as usize).max(MIN_STEPS)
}

/// Perturbs `x` to `t_star` with the forward kernel and denoises it back to
/// `t_eps` at the default grid density.
pub fn reconstruct(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    x: &Tensor,
    t_star: f64,
    rng: &mut RngState,
) -> Result<Tensor> {
    reconstruct_with(model, sde, x, t_star, DEFAULT_STEPS, rng)
}

pub fn reconstruct_with(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    x: &Tensor,
    t_star: f64,
    grid_steps: usize,
    rng: &mut RngState,
) -> Result<Tensor> {
    if !(t_star >= sde.t_eps && t_star <= sde.t_max) {
        return Err(MsgmError::invalid(format!(
            "t_star = {t_star} outside [{}, {}]",
            sde.t_eps, sde.t_max
        )));
    }
    check_model(model, x.cols())?;
    let x = Tensor::matrix(x.rows(), x.cols(), x.data().to_vec());
    let start = sde.sample_forward(&x, t_star, rng)?;
    let steps = reconstruct_steps(sde, t_star, grid_steps);
    reverse_integrate(
        model,
        sde,
        start,
        t_star,
        ReverseOptions::euler(steps),
        rng,
        |_, _, _| {},
    )
}
