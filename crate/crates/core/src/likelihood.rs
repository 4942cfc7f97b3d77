//! Log-likelihood through the probability-flow ODE
//! `dx/dt = f(x, t) − ½g(t)²·s(x, t)`, integrated from `t_eps` to `T`
//! together with the divergence of its right-hand side.

use std::io::{Read, Write};

use crate::error::{MsgmError, Result};
use crate::numcore::{RngState, Tensor};
use crate::scorenet::{directional_curvature, divergence_exact, DivergenceMode, ScoreModel};
use crate::sde::SdeSpec;
use crate::train::SplitDataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorSettings {
    pub rtol: f64,
    pub atol: f64,
    pub divergence: DivergenceMode,
    /// Seed of the fixed Hutchinson probes.
    pub probe_seed: u64,
    /// Points integrated together; they share one step-size sequence.
    pub chunk: usize,
    pub max_steps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        IntegratorSettings {
            rtol: 1e-5,
            atol: 1e-5,
            divergence: DivergenceMode::Exact,
            probe_seed: 0,
            chunk: 256,
            max_steps: 100_000,
        }
    }
}

impl IntegratorSettings {
    fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.rtol.is_nan() || self.rtol <= 0.0 {
            bad.push("rtol must be positive".to_string());
        }
        if self.atol.is_nan() || self.atol <= 0.0 {
            bad.push("atol must be positive".to_string());
        }
        if self.chunk == 0 {
            bad.push("chunk must be positive".to_string());
        }
        if let DivergenceMode::Hutchinson { probes: 0 } = self.divergence {
            bad.push("Hutchinson mode needs at least one probe".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(MsgmError::Config(bad))
        }
    }
}

/// Per-point negative log-likelihoods in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct NllResult {
    pub nll: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    /// Accepted and rejected integrator steps summed over chunks.
    pub steps: usize,
    pub rejected: usize,
    pub mode: DivergenceMode,
}

impl NllResult {
    fn from_values(nll: Vec<f64>, steps: usize, rejected: usize, mode: DivergenceMode) -> Self {
        let n = nll.len() as f64;
        let mean = nll.iter().sum::<f64>() / n;
        let std_err = if nll.len() > 1 {
            (nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        NllResult {
            nll,
            mean,
            std_err,
            steps,
            rejected,
            mode,
        }
    }
}

/// Mean NLL on the retained and forget splits.
#[derive(Clone, Debug, PartialEq)]
pub struct NllReport {
    pub d_g: NllResult,
    pub d_f: NllResult,
}

impl NllReport {
    /// `NLL(D_f) − NLL(D_g)`.
    pub fn gap(&self) -> f64 {
        self.d_f.mean - self.d_g.mean
    }

    /// Columns `split,point_id,nll`, then one `mean` row per split.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["split", "point_id", "nll"])?;
        for (name, r) in [("D_g", &self.d_g), ("D_f", &self.d_f)] {
            for (i, v) in r.nll.iter().enumerate() {
                wr.write_record([name.to_string(), i.to_string(), v.to_string()])?;
            }
        }
        for (name, r) in [("D_g", &self.d_g), ("D_f", &self.d_f)] {
            wr.write_record([name.to_string(), "mean".to_string(), r.mean.to_string()])?;
        }
        wr.flush().map_err(|e| MsgmError::io("nll csv", e))?;
        Ok(())
    }

    /// Per-point values of both splits, keyed by split name.
    pub fn read_csv<R: Read>(r: R) -> Result<Vec<(String, Option<usize>, f64)>> {
        let mut rd = csv::Reader::from_reader(r);
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let split = rec.get(0).unwrap_or("").to_string();
            let id = match rec.get(1).unwrap_or("") {
                "mean" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| MsgmError::invalid(format!("bad point id '{s}'")))?,
                ),
            };
            let v = rec.get(2).unwrap_or("");
            let v = v.parse().map_err(|_| MsgmError::invalid(format!("bad nll '{v}'")))?;
            out.push((split, id, v));
        }
        Ok(out)
    }
}

const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth- minus embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Right-hand side on a chunk. The state of point `i` is its `d`
/// coordinates followed by the accumulated divergence.
struct Flow<'a, M: ScoreModel + ?Sized> {
    model: &'a M,
    sde: &'a SdeSpec,
    n: usize,
    d: usize,
    probes: Vec<Tensor>,
}

impl<M: ScoreModel + ?Sized> Flow<'_, M> {
    fn eval(&self, y: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let (n, d) = (self.n, self.d);
        let w = d + 1;
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            x.extend_from_slice(&y[i * w..i * w + d]);
        }
        let x = Tensor::matrix(n, d, x);
        let s = self.model.score(&x, t)?;
        let div_s = if self.probes.is_empty() {
            divergence_exact(self.model, &x, t)?
        } else {
            let mut acc = vec![0.0; n];
            for v in &self.probes {
                let part = directional_curvature(self.model, &x, v, t)?;
                acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
            }
            let k = self.probes.len() as f64;
            acc.into_iter().map(|a| a / k).collect()
        };
        let c = self.sde.drift_coeff(t);
        let half_g2 = 0.5 * self.sde.g(t).powi(2);
        for i in 0..n {
            for j in 0..d {
                out[i * w + j] = c * x.row(i)[j] - half_g2 * s.row(i)[j];
            }
            out[i * w + d] = d as f64 * c - half_g2 * div_s[i];
        }
        Ok(())
    }
}

struct ChunkOutcome {
    nll: Vec<f64>,
    steps: usize,
    rejected: usize,
}

fn integrate_chunk<M: ScoreModel + ?Sized>(
    flow: &Flow<'_, M>,
    x0: &[f64],
    settings: &IntegratorSettings,
    first_index: usize,
) -> Result<ChunkOutcome> {
    let (n, d) = (flow.n, flow.d);
    let w = d + 1;
    let sde = flow.sde;
    let mut y = vec![0.0; n * w];
    for i in 0..n {
        y[i * w..i * w + d].copy_from_slice(&x0[i * d..(i + 1) * d]);
    }
    let (t0, t1) = (sde.t_eps, sde.t_max);
    let span = t1 - t0;
    let mut t = t0;
    let mut h = 1e-2 * span;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n * w]; 7];
    flow.eval(&y, t, &mut k[0])?;
    let mut stage = vec![0.0; n * w];
    let mut y_new = vec![0.0; n * w];
    let (mut steps, mut rejected) = (0, 0);
    while t < t1 {
        if steps + rejected >= settings.max_steps {
            return Err(MsgmError::numerical(format!(
                "likelihood integrator exceeded {} steps at t = {t}",
                settings.max_steps
            )));
        }
        h = h.min(t1 - t);
        for s in 0..6 {
            let a = A[s];
            for (idx, v) in stage.iter_mut().enumerate() {
                let mut acc = y[idx];
                for (j, aj) in a.iter().enumerate() {
                    acc += h * aj * k[j][idx];
                }
                *v = acc;
            }
            let ts = if s >= 4 { t + h } else { t + C[s] * h };
            flow.eval(&stage, ts.min(t1), &mut k[s + 1])?;
            if s == 5 {
                y_new.copy_from_slice(&stage);
            }
        }
        // k[6] holds f(y_new), the first stage of the next step.
        let mut worst = 0.0f64;
        let mut worst_point = 0;
        for i in 0..n {
            let mut sq = 0.0;
            for idx in i * w..(i + 1) * w {
                let err: f64 = h * (0..7).map(|j| E[j] * k[j][idx]).sum::<f64>();
                let scale = settings.atol + settings.rtol * y[idx].abs().max(y_new[idx].abs());
                sq += (err / scale).powi(2);
            }
            let e = (sq / w as f64).sqrt();
            if !e.is_finite() {
                return Err(MsgmError::numerical(format!(
                    "likelihood integrator produced a non-finite state for point {}",
                    first_index + i
                )));
            }
            if e > worst {
                worst = e;
                worst_point = i;
            }
        }
        let factor = if worst == 0.0 {
            5.0
        } else {
            (0.9 * worst.powf(-0.2)).clamp(0.2, 5.0)
        };
        if worst <= 1.0 {
            t += h;
            if t1 - t < 1e-14 * span {
                t = t1;
            }
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            steps += 1;
        } else {
            rejected += 1;
        }
        h *= factor;
        if h < 1e-12 * span && t < t1 {
            return Err(MsgmError::numerical(format!(
                "likelihood step size underflow at t = {t} for point {}",
                first_index + worst_point
            )));
        }
    }
    let nll = (0..n)
        .map(|i| {
            let row = &y[i * w..(i + 1) * w];
            -(sde.prior_logpdf(&row[..d]) + row[d])
        })
        .collect();
    Ok(ChunkOutcome { nll, steps, rejected })
}

/// Negative log-likelihood of every row of `x` in nats.
pub fn nll_batch(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    x: &Tensor,
    settings: &IntegratorSettings,
) -> Result<NllResult> {
    settings.validate()?;
    let d = model.dim();
    if x.cols() != d {
        return Err(MsgmError::invalid(format!(
            "points of dimension {} given to a model of dimension {d}",
            x.cols()
        )));
    }
    if x.is_empty() {
        return Err(MsgmError::invalid("no points to evaluate"));
    }
    if let Some(i) = x.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(MsgmError::invalid(format!("point {i} is not finite")));
    }
    let mut probe_rng = RngState::new(settings.probe_seed);
    let (mut nll, mut steps, mut rejected) = (Vec::with_capacity(x.rows()), 0, 0);
    let data = x.data();
    let mut start = 0;
    while start < x.rows() {
        let n = settings.chunk.min(x.rows() - start);
        let probes = match settings.divergence {
            DivergenceMode::Exact => Vec::new(),
            DivergenceMode::Hutchinson { probes } => (0..probes)
                .map(|_| {
                    let mut v = Tensor::zeros(&[n, d]);
                    v.data_mut().iter_mut().for_each(|u| *u = probe_rng.rademacher());
                    v
                })
                .collect(),
        };
        let flow = Flow {
            model,
            sde,
            n,
            d,
            probes,
        };
        let out = integrate_chunk(&flow, &data[start * d..(start + n) * d], settings, start)?;
        nll.extend(out.nll);
        steps += out.steps;
        rejected += out.rejected;
        start += n;
    }
    Ok(NllResult::from_values(nll, steps, rejected, settings.divergence))
}

/// Negative log-likelihood of a single point.
pub fn nll_point(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    x: &[f64],
    settings: &IntegratorSettings,
) -> Result<f64> {
    let t = Tensor::matrix(1, x.len(), x.to_vec());
    Ok(nll_batch(model, sde, &t, settings)?.nll[0])
}

/// NLL on held-out retained and forget points.
pub fn nll_report(
    model: &(impl ScoreModel + ?Sized),
    sde: &SdeSpec,
    data: &SplitDataset,
    settings: &IntegratorSettings,
) -> Result<NllReport> {
    if data.d_f.is_empty() {
        return Err(MsgmError::invalid("nll_report needs a non-empty D_f"));
    }
    Ok(NllReport {
        d_g: nll_batch(model, sde, &data.d_g, settings)?,
        d_f: nll_batch(model, sde, &data.d_f, settings)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::{AnalyticScore, Component, MixtureSpec, Split};
    use crate::scorenet::LinearScore;

    #[test]
    fn standard_normal_origin() {
        let nll = nll_point(
            &LinearScore::negative_identity(2),
            &SdeSpec::vp(),
            &[0.0, 0.0],
            &Default::default(),
        )
        .unwrap();
        assert!((nll - (2.0 * std::f64::consts::PI).ln()).abs() < 0.02, "{nll}");
    }

    #[test]
    fn standard_normal_closed_form_per_point() {
        let x = RngState::new(3).gaussian_sample(&[20, 2]);
        let r = nll_batch(
            &LinearScore::negative_identity(2),
            &SdeSpec::vp(),
            &x,
            &Default::default(),
        )
        .unwrap();
        for (row, v) in x.row_iter().zip(&r.nll) {
            let want = (2.0 * std::f64::consts::PI).ln() + 0.5 * (row[0] * row[0] + row[1] * row[1]);
            assert!((v - want).abs() < 0.02, "{v} vs {want}");
        }
    }

    #[test]
    fn mixture_per_point_matches_logpdf() {
        let mix = MixtureSpec::toy();
        let sde = SdeSpec::ve();
        let model = AnalyticScore::new(mix.clone(), sde);
        let x = mix.sample(30, &mut RngState::new(1), Split::All).unwrap();
        let r = nll_batch(&model, &sde, &x, &Default::default()).unwrap();
        // The residual is dominated by the gap between the VE prior and the
        // true marginal at T, which grows for points mapped far into the tail.
        for (row, v) in x.row_iter().zip(&r.nll) {
            assert!((v + mix.logpdf(row)).abs() < 0.02, "{v} vs {}", -mix.logpdf(row));
        }
    }

    #[test]
    fn translation_equivariance() {
        let shift = [0.5, -0.3];
        let base = MixtureSpec::toy();
        let moved = MixtureSpec::new(
            base.components()
                .iter()
                .map(|c| Component {
                    mean: vec![c.mean[0] + shift[0], c.mean[1] + shift[1]],
                    ..c.clone()
                })
                .collect(),
        )
        .unwrap();
        // Under VP the shift shrinks by m(T) ≈ 0.0065 before reaching the
        // prior, so invariance holds up to that residual.
        let sde = SdeSpec::vp();
        let settings = IntegratorSettings::default();
        for p in [[0.0, 0.0], [1.5, -2.0], [-2.5, -1.0]] {
            let a = nll_point(&AnalyticScore::new(base.clone(), sde), &sde, &p, &settings).unwrap();
            let q = [p[0] + shift[0], p[1] + shift[1]];
            let b = nll_point(&AnalyticScore::new(moved.clone(), sde), &sde, &q, &settings).unwrap();
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn tolerance_halving_is_stable() {
        let mix = MixtureSpec::toy();
        let sde = SdeSpec::ve();
        let model = AnalyticScore::new(mix.clone(), sde);
        let x = mix.sample(40, &mut RngState::new(2), Split::All).unwrap();
        let coarse = nll_batch(&model, &sde, &x, &Default::default()).unwrap();
        let fine = IntegratorSettings {
            rtol: 5e-6,
            atol: 5e-6,
            ..Default::default()
        };
        let fine = nll_batch(&model, &sde, &x, &fine).unwrap();
        for (a, b) in coarse.nll.iter().zip(&fine.nll) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn hutchinson_agrees_with_exact() {
        let mix = MixtureSpec::toy();
        let sde = SdeSpec::ve();
        let model = AnalyticScore::new(mix.clone(), sde);
        let x = mix.sample(200, &mut RngState::new(4), Split::All).unwrap();
        let exact = nll_batch(&model, &sde, &x, &Default::default()).unwrap();
        let hutch = IntegratorSettings {
            divergence: DivergenceMode::Hutchinson { probes: 1 },
            probe_seed: 9,
            ..Default::default()
        };
        let hutch = nll_batch(&model, &sde, &x, &hutch).unwrap();
        let diffs: Vec<f64> = hutch.nll.iter().zip(&exact.nll).map(|(h, e)| h - e).collect();
        let n = diffs.len() as f64;
        let m = diffs.iter().sum::<f64>() / n;
        let se = (diffs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!(m.abs() < 3.0 * se.max(1e-9), "{m} vs se {se}");
    }

    #[test]
    fn csv_roundtrip_and_summary() {
        let r = NllReport {
            d_g: NllResult::from_values(vec![1.0, 2.0], 3, 0, DivergenceMode::Exact),
            d_f: NllResult::from_values(vec![4.5], 3, 1, DivergenceMode::Exact),
        };
        assert_eq!(r.gap(), 3.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let rows = NllReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[2], ("D_f".to_string(), Some(0), 4.5));
        assert_eq!(rows[3], ("D_g".to_string(), None, 1.5));
    }

    #[test]
    fn rejects_bad_input() {
        let m = LinearScore::negative_identity(2);
        let sde = SdeSpec::vp();
        assert!(nll_point(&m, &sde, &[f64::NAN, 0.0], &Default::default()).is_err());
        assert!(nll_point(&m, &sde, &[0.0, 0.0, 0.0], &Default::default()).is_err());
        let bad = IntegratorSettings {
            rtol: 0.0,
            ..Default::default()
        };
        assert!(nll_point(&m, &sde, &[0.0, 0.0], &bad).is_err());
    }
}
