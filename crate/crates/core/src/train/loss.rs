//! Score-matching losses evaluated on the network's tape.
//!
//! Every loss draws `t ~ U(t_eps, T)` and `z ~ N(0, I)` per row, forms
//! `x_t = m(t)·x_0 + σ(t)·z` and compares the model score with the kernel
//! score `−z/σ(t)`.

use super::plan::LambdaKind;
use crate::error::{MsgmError, Result};
use crate::numcore::{ParamTape, RngState, Tensor, Var};
use crate::scorenet::ScoreNet;

/// Scalar loss value with its parameter gradient.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-row noise draws for a batch.
#[derive(Clone, Debug)]
pub struct PerturbedBatch {
    pub x_t: Tensor,
    pub ts: Vec<f64>,
    /// Kernel score `∇ log p_{0t}(x_t | x_0)`.
    pub target: Tensor,
    pub lambda: Vec<f64>,
}

impl PerturbedBatch {
    pub fn draw(net: &ScoreNet, x0: &Tensor, lambda: LambdaKind, rng: &mut RngState) -> Result<Self> {
        if x0.is_empty() {
            return Err(MsgmError::invalid("loss batch is empty"));
        }
        let sde = *net.sde();
        let (n, d) = (x0.rows(), x0.cols());
        let mut x_t = Tensor::zeros(&[n, d]);
        let mut target = Tensor::zeros(&[n, d]);
        let mut ts = Vec::with_capacity(n);
        let mut lam = Vec::with_capacity(n);
        for i in 0..n {
            let t = rng.uniform_in(sde.t_eps, sde.t_max);
            let (m, std) = sde.marginal(t);
            for j in 0..d {
                let z = rng.normal();
                x_t.data_mut()[i * d + j] = m * x0.row(i)[j] + std * z;
                target.data_mut()[i * d + j] = -z / std;
            }
            ts.push(t);
            lam.push(lambda.weight(std));
        }
        Ok(PerturbedBatch {
            x_t,
            ts,
            target,
            lambda: lam,
        })
    }
}

/// `mean λ·‖s − target‖²`.
pub fn weighted_residual(tape: &mut ParamTape, s: Var, target: &Tensor, lambda: &[f64]) -> Var {
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(s, tgt);
    let sq = tape.row_dot(diff, diff);
    let lam = tape.constant(Tensor::vector(lambda.to_vec()));
    let w = tape.mul(sq, lam);
    tape.mean(w)
}

/// `mean λ·⟨s, target⟩²`.
pub fn weighted_squared_dot(tape: &mut ParamTape, s: Var, target: &Tensor, lambda: &[f64]) -> Var {
    let tgt = tape.constant(target.clone());
    let c = tape.row_dot(s, tgt);
    let c2 = tape.mul(c, c);
    let lam = tape.constant(Tensor::vector(lambda.to_vec()));
    let w = tape.mul(c2, lam);
    tape.mean(w)
}

/// `mean λ·⟨s, target⟩`, or `mean λ·max(0, ⟨s, target⟩)` with `hinge`.
pub fn weighted_dot(tape: &mut ParamTape, s: Var, target: &Tensor, lambda: &[f64], hinge: bool) -> Var {
    let tgt = tape.constant(target.clone());
    let mut c = tape.row_dot(s, tgt);
    if hinge {
        c = tape.relu(c);
    }
    let lam = tape.constant(Tensor::vector(lambda.to_vec()));
    let w = tape.mul(c, lam);
    tape.mean(w)
}

fn evaluate(
    net: &mut ScoreNet,
    batch: &PerturbedBatch,
    build: impl FnOnce(&mut ParamTape, Var) -> Var,
) -> Result<LossEval> {
    net.tape_mut().clear();
    let s = net.record(&batch.x_t, &batch.ts)?;
    let tape = net.tape_mut();
    let loss = build(tape, s);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        tape.clear();
        return Err(MsgmError::numerical(format!("non-finite loss {value}")));
    }
    let grad = tape.backward(loss)?.to_vec();
    tape.clear();
    Ok(LossEval { value, grad })
}

/// Denoising score matching on a fixed perturbed batch.
pub fn dsm_on(net: &mut ScoreNet, batch: &PerturbedBatch) -> Result<LossEval> {
    evaluate(net, batch, |tape, s| {
        weighted_residual(tape, s, &batch.target, &batch.lambda)
    })
}

/// Orthogonal forget loss on a fixed perturbed batch.
pub fn ortho_on(net: &mut ScoreNet, batch: &PerturbedBatch) -> Result<LossEval> {
    evaluate(net, batch, |tape, s| {
        weighted_squared_dot(tape, s, &batch.target, &batch.lambda)
    })
}

/// Obtuse forget loss on a fixed perturbed batch.
pub fn obtuse_on(net: &mut ScoreNet, batch: &PerturbedBatch, hinge: bool) -> Result<LossEval> {
    evaluate(net, batch, |tape, s| {
        weighted_dot(tape, s, &batch.target, &batch.lambda, hinge)
    })
}

/// Denoising score-matching loss on clean points `batch`.
pub fn dsm_loss(net: &mut ScoreNet, batch: &Tensor, lambda: LambdaKind, rng: &mut RngState) -> Result<LossEval> {
    let pb = PerturbedBatch::draw(net, batch, lambda, rng)?;
    dsm_on(net, &pb)
}

/// Squared dot product between the model score and the kernel score of
/// points drawn from the forget split.
pub fn ortho_loss(net: &mut ScoreNet, batch_f: &Tensor, lambda: LambdaKind, rng: &mut RngState) -> Result<LossEval> {
    let pb = PerturbedBatch::draw(net, batch_f, lambda, rng)?;
    ortho_on(net, &pb)
}

/// Raw dot product between the model score and the kernel score of points
/// drawn from the forget split.
pub fn obtuse_loss(
    net: &mut ScoreNet,
    batch_f: &Tensor,
    lambda: LambdaKind,
    hinge: bool,
    rng: &mut RngState,
) -> Result<LossEval> {
    let pb = PerturbedBatch::draw(net, batch_f, lambda, rng)?;
    obtuse_on(net, &pb, hinge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorenet::Architecture;
    use crate::sde::SdeSpec;

    fn loss_of(build: impl FnOnce(&mut ParamTape, Var) -> Var, s: &Tensor) -> f64 {
        let mut tape = ParamTape::new(vec![]);
        let sv = tape.constant(s.clone());
        let l = build(&mut tape, sv);
        tape.value(l).data()[0]
    }

    #[test]
    fn perfect_score_has_zero_dsm() {
        let target = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let lam = [0.1, 0.2, 0.3];
        assert_eq!(loss_of(|t, s| weighted_residual(t, s, &target, &lam), &target), 0.0);
    }

    #[test]
    fn zero_net_dsm_equals_noise_norm() {
        // With s = 0 and λ = σ², λ‖target‖² = ‖z‖².
        let sde = SdeSpec::ve();
        let std = sde.std(0.4);
        let z = [0.3, -1.1];
        let target = Tensor::matrix(1, 2, vec![-z[0] / std, -z[1] / std]);
        let zero = Tensor::zeros(&[1, 2]);
        let l = loss_of(|t, s| weighted_residual(t, s, &target, &[std * std]), &zero);
        assert!((l - (z[0] * z[0] + z[1] * z[1])).abs() < 1e-12);
    }

    #[test]
    fn ortho_cases() {
        let target = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let lam = [0.5, 2.0];
        let perp = Tensor::matrix(2, 2, vec![-2.0, 1.0, 0.5, 1.0]);
        assert_eq!(loss_of(|t, s| weighted_squared_dot(t, s, &target, &lam), &perp), 0.0);
        let same = loss_of(|t, s| weighted_squared_dot(t, s, &target, &lam), &target);
        let want = (0.5 * 25.0 + 2.0 * 1.25f64.powi(2)) / 2.0;
        assert!((same - want).abs() < 1e-12);
        let neg = target.scale(-1.0);
        assert_eq!(loss_of(|t, s| weighted_squared_dot(t, s, &target, &lam), &neg), same);
    }

    #[test]
    fn obtuse_cases() {
        let target = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let lam = [0.5, 2.0];
        let perp = Tensor::matrix(2, 2, vec![-2.0, 1.0, 0.5, 1.0]);
        assert_eq!(loss_of(|t, s| weighted_dot(t, s, &target, &lam, false), &perp), 0.0);
        let anti = loss_of(|t, s| weighted_dot(t, s, &target, &lam, false), &target.scale(-1.0));
        let want = -(0.5 * 5.0 + 2.0 * 1.25) / 2.0;
        assert!((anti - want).abs() < 1e-12);
        let pos = loss_of(|t, s| weighted_dot(t, s, &target, &lam, false), &target);
        assert_eq!(pos, -anti);
        let hinged = loss_of(|t, s| weighted_dot(t, s, &target, &lam, true), &target.scale(-1.0));
        assert_eq!(hinged, 0.0);
    }

    #[test]
    fn fresh_net_dsm_is_about_dimension() {
        let sde = SdeSpec::ve();
        let mut net = ScoreNet::init(0, Architecture::new(2, vec![128, 128], 64).unwrap(), sde);
        let mut rng = RngState::new(1);
        let mut total = 0.0;
        let evals = 1000;
        for _ in 0..evals {
            let x0 = rng.gaussian_sample(&[16, 2]);
            total += dsm_loss(&mut net, &x0, LambdaKind::Variance, &mut rng).unwrap().value;
        }
        let mean = total / evals as f64;
        assert!((mean - 2.0).abs() < 0.4, "{mean}");
    }

    #[test]
    fn empty_batch_rejected() {
        let mut net = ScoreNet::init(0, Architecture::new(2, vec![4], 2).unwrap(), SdeSpec::vp());
        let empty = Tensor::zeros(&[0, 2]);
        assert!(dsm_loss(&mut net, &empty, LambdaKind::Variance, &mut RngState::new(0)).is_err());
    }
}
