//! Time-conditioned score model `s_θ(x, t)`.
//!
//! A multilayer perceptron with SiLU activations reads the input scaled by
//! `1/√(m(t)² + σ(t)²)` together with a sinusoidal embedding of `t`, and its
//! raw output is divided by the kernel standard deviation `σ(t)`.

mod checkpoint;
mod divergence;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use divergence::{directional_curvature, divergence_exact, divergence_hutchinson, DivergenceMode, LinearScore};

use crate::error::{MsgmError, Result};
use crate::numcore::{gemm, silu, MatRef, ParamTape, RngState, Tensor, Var};
use crate::sde::SdeSpec;

/// Anything that can evaluate a time-dependent score on a batch of points.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    /// Score of every row of `x` (shape `n × d`) at the shared time `t`.
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Highest embedding frequency, in cycles per unit of `t/T`.
const MAX_FREQUENCY: f64 = 100.0;

/// Network shape: input dimension, hidden widths and time-embedding size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub d: usize,
    pub widths: Vec<usize>,
    pub embed_freqs: usize,
}

impl Architecture {
    pub fn new(d: usize, widths: Vec<usize>, embed_freqs: usize) -> Result<Self> {
        if d == 0 {
            return Err(MsgmError::invalid("input dimension must be positive"));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(MsgmError::invalid("hidden widths must be non-empty and positive"));
        }
        Ok(Architecture { d, widths, embed_freqs })
    }

    /// Width `E` of the sin/cos time features.
    pub fn embed_dim(&self) -> usize {
        2 * self.embed_freqs
    }

    pub fn input_dim(&self) -> usize {
        self.d + self.embed_dim()
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.widths.len() + 1);
        let mut prev = self.input_dim();
        for &w in &self.widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.d));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    fn frequencies(&self) -> Vec<f64> {
        let k = self.embed_freqs;
        (0..k)
            .map(|i| {
                let frac = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
                std::f64::consts::TAU * MAX_FREQUENCY.powf(frac)
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// The score network together with the SDE whose kernel it is scaled by.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    arch: Architecture,
    sde: SdeSpec,
    tape: ParamTape,
    freqs: Vec<f64>,
}

impl ScoreNet {
    /// Variance-scaled normal initialization (`Var[w] = 1/fan_in`), zero
    /// biases. The output layer is shrunk tenfold so the initial noise
    /// prediction is close to zero.
    pub fn init(seed: u64, arch: Architecture, sde: SdeSpec) -> Self {
        let mut rng = RngState::stream(seed, 0x5c0e);
        let mut params = Vec::with_capacity(arch.param_count());
        let layers = arch.layers();
        let last = layers.len() - 1;
        for (li, (fan_in, fan_out)) in layers.into_iter().enumerate() {
            let gain = if li == last { 0.1 } else { 1.0 };
            let scale = gain / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.normal() * scale));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::from_params(arch, sde, params).expect("parameter count matches architecture")
    }

    pub fn from_params(arch: Architecture, sde: SdeSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(MsgmError::invalid(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        let freqs = arch.frequencies();
        Ok(ScoreNet {
            arch,
            sde,
            tape: ParamTape::new(params),
            freqs,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn sde(&self) -> &SdeSpec {
        &self.sde
    }

    pub fn params(&self) -> &[f64] {
        self.tape.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.tape.params_mut()
    }

    pub fn tape(&self) -> &ParamTape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut ParamTape {
        &mut self.tape
    }

    fn offsets(&self) -> Vec<LayerOffsets> {
        let mut off = 0;
        self.arch
            .layers()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = LayerOffsets {
                    weight: off,
                    bias: off + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                off += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let s = &self.sde;
        if t.is_finite() && t >= s.t_eps - 1e-12 && t <= s.t_max + 1e-12 {
            Ok(())
        } else {
            Err(MsgmError::invalid(format!(
                "score network evaluated at t = {t}, outside [{}, {}]",
                s.t_eps, s.t_max
            )))
        }
    }

    fn input_scale(&self, t: f64) -> f64 {
        let (m, std) = self.sde.marginal(t);
        1.0 / (m * m + std * std).sqrt()
    }

    fn embed(&self, t: f64, out: &mut [f64]) {
        let tau = t / self.sde.t_max;
        let k = self.freqs.len();
        for (i, w) in self.freqs.iter().enumerate() {
            out[i] = (w * tau).sin();
            out[k + i] = (w * tau).cos();
        }
    }

    fn as_batch<'a>(&self, x: &'a Tensor) -> Result<(usize, &'a [f64])> {
        let d = self.arch.d;
        if x.cols() != d || x.shape().len() > 2 {
            return Err(MsgmError::invalid(format!(
                "expected points of dimension {d}, got shape {:?}",
                x.shape()
            )));
        }
        Ok((x.rows(), x.data()))
    }

    /// Network input rows `[x·c_in(t), sin(ωt), cos(ωt)]` for per-row times.
    fn input_rows(&self, x: &[f64], ts: &[f64]) -> Tensor {
        let d = self.arch.d;
        let w = self.arch.input_dim();
        let mut input = vec![0.0; ts.len() * w];
        for (i, &t) in ts.iter().enumerate() {
            let row = &mut input[i * w..(i + 1) * w];
            let c = self.input_scale(t);
            for j in 0..d {
                row[j] = x[i * d + j] * c;
            }
            self.embed(t, &mut row[d..]);
        }
        Tensor::matrix(ts.len(), w, input)
    }

    /// `s_θ(x, t)` for a single shared time. Accepts a point of shape `[d]`
    /// or a batch `[n, d]` and returns the same shape.
    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check_time(t)?;
        let (n, xs) = self.as_batch(x)?;
        let out = self.forward_shared(xs, n, t);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(MsgmError::numerical(format!(
                "score network produced a non-finite output at t = {t}"
            )));
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Batched forward pass with the time features folded into the first
    /// layer's bias, since they are shared by every row.
    fn forward_shared(&self, xs: &[f64], n: usize, t: f64) -> Vec<f64> {
        let d = self.arch.d;
        let p = self.tape.params();
        let offs = self.offsets();
        let first = offs[0];

        let mut emb = vec![0.0; self.arch.embed_dim()];
        self.embed(t, &mut emb);
        let mut bias = p[first.bias..first.bias + first.fan_out].to_vec();
        if !emb.is_empty() {
            let w_t = &p[first.weight + d * first.fan_out..first.bias];
            gemm(
                MatRef::row_major(&emb, 1, emb.len()),
                MatRef::row_major(w_t, emb.len(), first.fan_out),
                &mut bias,
                1.0,
            );
        }
        let c = self.input_scale(t);
        let scaled: Vec<f64> = xs.iter().map(|v| v * c).collect();
        let mut h = vec![0.0; n * first.fan_out];
        gemm(
            MatRef::row_major(&scaled, n, d),
            MatRef::row_major(&p[first.weight..first.weight + d * first.fan_out], d, first.fan_out),
            &mut h,
            0.0,
        );
        for row in h.chunks_exact_mut(first.fan_out) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v = silu(*v + b));
        }

        let last = offs.len() - 1;
        for (li, l) in offs.iter().enumerate().skip(1) {
            let mut next = vec![0.0; n * l.fan_out];
            gemm(
                MatRef::row_major(&h, n, l.fan_in),
                MatRef::row_major(&p[l.weight..l.bias], l.fan_in, l.fan_out),
                &mut next,
                0.0,
            );
            let b = &p[l.bias..l.bias + l.fan_out];
            for row in next.chunks_exact_mut(l.fan_out) {
                if li == last {
                    row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
                } else {
                    row.iter_mut().zip(b).for_each(|(v, bb)| *v = silu(*v + bb));
                }
            }
            h = next;
        }
        let inv_std = 1.0 / self.sde.std(t);
        h.iter_mut().for_each(|v| *v *= inv_std);
        h
    }

    /// Records `s_θ(x_i, t_i)` for per-row times on the internal tape and
    /// returns the output node (shape `n × d`). The caller owns clearing the
    /// tape.
    pub fn record(&mut self, x: &Tensor, ts: &[f64]) -> Result<Var> {
        let (n, xs) = self.as_batch(x)?;
        if ts.len() != n {
            return Err(MsgmError::invalid("one time per row required"));
        }
        for &t in ts {
            self.check_time(t)?;
        }
        let input = self.input_rows(xs, ts);
        let inv_std: Vec<f64> = ts.iter().map(|&t| 1.0 / self.sde.std(t)).collect();
        let offs = self.offsets();
        let tape = &mut self.tape;
        let mut h = tape.constant(input);
        let last = offs.len() - 1;
        for (li, l) in offs.iter().enumerate() {
            let w = tape.param(l.weight, &[l.fan_in, l.fan_out]);
            let b = tape.param(l.bias, &[l.fan_out]);
            let z = tape.matmul(h, w);
            let z = tape.add_bias(z, b);
            h = if li == last { z } else { tape.silu(z) };
        }
        Ok(tape.scale_rows(h, inv_std))
    }

    /// `∇_x · s_θ(x, t)` for every row of `x`.
    pub fn divergence(&self, x: &Tensor, t: f64, mode: DivergenceMode, rng: &mut RngState) -> Result<Vec<f64>> {
        match mode {
            DivergenceMode::Exact => divergence_exact(self, x, t),
            DivergenceMode::Hutchinson { probes } => {
                divergence_hutchinson(self, x, t, probes, rng).map(|(mean, _)| mean)
            }
        }
    }
}

impl ScoreModel for ScoreNet {
    fn dim(&self) -> usize {
        self.arch.d
    }

    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::SdeSpec;

    fn small_net(seed: u64) -> ScoreNet {
        ScoreNet::init(seed, Architecture::new(2, vec![16, 16], 4).unwrap(), SdeSpec::vp())
    }

    #[test]
    fn init_is_reproducible() {
        assert_eq!(small_net(3).params(), small_net(3).params());
        assert_ne!(small_net(3).params(), small_net(4).params());
    }

    #[test]
    fn parameter_count_formula() {
        let arch = Architecture::new(2, vec![128, 128], 64).unwrap();
        let e = arch.embed_dim();
        assert_eq!(e, 128);
        assert_eq!(arch.param_count(), (2 + e) * 128 + 128 + 128 * 128 + 128 + 128 * 2 + 2);
    }

    #[test]
    fn empty_widths_rejected() {
        assert!(Architecture::new(2, vec![], 4).is_err());
    }

    #[test]
    fn batch_shape_and_determinism() {
        let net = small_net(1);
        let mut rng = RngState::new(0);
        let x = rng.gaussian_sample(&[7, 2]);
        let a = net.forward(&x, 0.3).unwrap();
        assert_eq!(a.shape(), &[7, 2]);
        assert_eq!(a, net.forward(&x, 0.3).unwrap());
        let single = net.forward(&Tensor::vector(x.row(2).to_vec()), 0.3).unwrap();
        assert_eq!(single.shape(), &[2]);
        assert!(net.forward(&x, 0.0).is_err());
    }

    #[test]
    fn taped_forward_matches_inference_path() {
        let mut net = small_net(2);
        let mut rng = RngState::new(1);
        let x = rng.gaussian_sample(&[5, 2]);
        let ts = vec![0.2; 5];
        let out = net.record(&x, &ts).unwrap();
        let taped = net.tape().value(out).clone();
        let direct = net.forward(&x, 0.2).unwrap();
        for (a, b) in taped.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn init_output_is_order_one() {
        let net = ScoreNet::init(0, Architecture::new(2, vec![128, 128], 64).unwrap(), SdeSpec::vp());
        let mut rng = RngState::new(8);
        let mut total = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let t = rng.uniform_in(0.3, 1.0);
            let x = rng.gaussian_sample(&[1, 2]);
            let s = net.forward(&x, t).unwrap();
            total += s.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        assert!(total / (trials as f64) < 10.0);
    }
}
