//! Training objectives and the optimizer loop.
//!
//! `Standard` and `Unseen` minimize denoising score matching on all data or
//! on the retained split. The moderated modes add a forget loss on the NSFG
//! split every `update_interval` steps and apply the gradient of
//! `α·L_g + (1 − α)·L_f` on those steps, the retain gradient alone
//! otherwise.

mod adam;
mod loss;
mod plan;

use std::io::{Read, Write};

pub use adam::Adam;
pub use loss::{
    dsm_loss, dsm_on, obtuse_loss, obtuse_on, ortho_loss, ortho_on, weighted_dot, weighted_residual,
    weighted_squared_dot, LossEval, PerturbedBatch,
};
pub use plan::{ForgetLoss, LambdaKind, TrainMode, TrainPlan};

use crate::error::{MsgmError, Result};
use crate::evalbench::{MixtureSpec, Split};
use crate::numcore::{RngState, Tensor};
use crate::scorenet::ScoreNet;

/// Losses beyond this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Retained (`d_g`) and forget (`d_f`) training points.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub d_g: Tensor,
    pub d_f: Tensor,
}

impl SplitDataset {
    pub fn new(d_g: Tensor, d_f: Tensor) -> Result<Self> {
        if d_g.is_empty() {
            return Err(MsgmError::invalid("retained split D_g is empty"));
        }
        if !d_f.is_empty() && d_f.cols() != d_g.cols() {
            return Err(MsgmError::invalid("D_g and D_f have different dimensions"));
        }
        Ok(SplitDataset { d_g, d_f })
    }

    /// Draws `n` points from the mixture and partitions them by the NSFG
    /// flag of their component, so the splits are disjoint by construction.
    pub fn from_mixture(mix: &MixtureSpec, n: usize, rng: &mut RngState) -> Result<Self> {
        let (x, labels) = mix.sample_labeled(n, rng, Split::All)?;
        let d = mix.dim();
        let (mut g, mut f) = (Vec::new(), Vec::new());
        for (row, l) in x.row_iter().zip(labels) {
            if mix.is_nsfg(l) {
                f.extend_from_slice(row);
            } else {
                g.extend_from_slice(row);
            }
        }
        let (ng, nf) = (g.len() / d, f.len() / d);
        SplitDataset::new(Tensor::matrix(ng, d, g), Tensor::matrix(nf, d, f))
    }

    pub fn dim(&self) -> usize {
        self.d_g.cols()
    }

    /// `D_g ∪ D_f`.
    pub fn all(&self) -> Tensor {
        let d = self.dim();
        let mut data = self.d_g.data().to_vec();
        data.extend_from_slice(self.d_f.data());
        Tensor::matrix(self.d_g.rows() + self.d_f.rows(), d, data)
    }
}

/// Uniform draw of `n` rows with replacement.
pub fn draw_batch(data: &Tensor, n: usize, rng: &mut RngState) -> Result<Tensor> {
    if data.is_empty() {
        return Err(MsgmError::invalid("cannot draw a batch from an empty split"));
    }
    let d = data.cols();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        out.extend_from_slice(data.row(rng.index(data.rows())));
    }
    Ok(Tensor::matrix(n, d, out))
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_g: f64,
    /// Present on steps that evaluated the forget loss.
    pub l_f: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean retain loss over the final `window` records.
    pub fn tail_mean_l_g(&self, window: usize) -> f64 {
        let w = window.min(self.records.len()).max(1);
        let tail = &self.records[self.records.len().saturating_sub(w)..];
        tail.iter().map(|r| r.l_g).sum::<f64>() / tail.len() as f64
    }

    /// CSV with columns `step,L_g,L_f,total`; `L_f` is empty when it was not
    /// computed.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "L_g", "L_f", "total"])?;
        for r in &self.records {
            wr.write_record([
                r.step.to_string(),
                r.l_g.to_string(),
                r.l_f.map(|v| v.to_string()).unwrap_or_default(),
                r.total.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| MsgmError::io("loss curve", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| MsgmError::invalid(format!("bad number '{s}' in loss curve")))
            };
            records.push(LossRecord {
                step: field(0)
                    .parse()
                    .map_err(|_| MsgmError::invalid("bad step in loss curve"))?,
                l_g: num(field(1))?,
                l_f: if field(2).is_empty() {
                    None
                } else {
                    Some(num(field(2))?)
                },
                total: num(field(3))?,
            });
        }
        Ok(LossCurve { records })
    }
}

/// Independent random streams for the retain and forget batches, so that
/// drawing forget batches never perturbs the retain stream.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub retain: RngState,
    pub forget: RngState,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        StepRngs {
            retain: RngState::stream(seed, 1),
            forget: RngState::stream(seed, 2),
        }
    }
}

/// `α·g + (1 − α)·f`, elementwise.
pub fn combine_gradients(alpha: f64, g: &[f64], f: &[f64]) -> Vec<f64> {
    g.iter().zip(f).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect()
}

fn guard(step: usize, total: f64) -> Result<()> {
    if !total.is_finite() || total.abs() > DIVERGENCE_LIMIT {
        return Err(MsgmError::numerical(format!(
            "training diverged at step {step}: total loss {total} exceeds {DIVERGENCE_LIMIT:e}"
        )));
    }
    Ok(())
}

/// Gradient and loss record of one moderated step, before the optimizer is
/// applied.
pub struct StepGradient {
    pub record: LossRecord,
    pub grad: Vec<f64>,
}

/// Computes the update direction of a moderated step.
pub fn msgm_gradient(
    net: &mut ScoreNet,
    plan: &TrainPlan,
    data: &SplitDataset,
    step_index: usize,
    rngs: &mut StepRngs,
) -> Result<StepGradient> {
    let forget = plan
        .mode
        .forget_loss()
        .ok_or_else(|| MsgmError::invalid(format!("{} is not a moderated training mode", plan.mode)))?;
    if data.d_f.is_empty() {
        return Err(MsgmError::invalid("moderated training needs a non-empty D_f"));
    }
    let batch_g = draw_batch(&data.d_g, plan.batch_size, &mut rngs.retain)?;
    let lg = dsm_loss(net, &batch_g, plan.lambda, &mut rngs.retain)?;
    if !step_index.is_multiple_of(plan.update_interval) {
        guard(step_index, lg.value)?;
        return Ok(StepGradient {
            record: LossRecord {
                step: step_index,
                l_g: lg.value,
                l_f: None,
                total: lg.value,
            },
            grad: lg.grad,
        });
    }
    let batch_f = draw_batch(&data.d_f, plan.batch_size, &mut rngs.forget)?;
    let lf = match forget {
        ForgetLoss::Orthogonal => ortho_loss(net, &batch_f, plan.lambda, &mut rngs.forget)?,
        ForgetLoss::Obtuse => obtuse_loss(net, &batch_f, plan.lambda, plan.obtuse_hinge, &mut rngs.forget)?,
    };
    let total = plan.alpha * lg.value + (1.0 - plan.alpha) * lf.value;
    guard(step_index, total)?;
    Ok(StepGradient {
        record: LossRecord {
            step: step_index,
            l_g: lg.value,
            l_f: Some(lf.value),
            total,
        },
        grad: combine_gradients(plan.alpha, &lg.grad, &lf.grad),
    })
}

/// One moderated optimizer step.
pub fn msgm_step(
    net: &mut ScoreNet,
    plan: &TrainPlan,
    data: &SplitDataset,
    step_index: usize,
    rngs: &mut StepRngs,
    opt: &mut Adam,
) -> Result<LossRecord> {
    let sg = msgm_gradient(net, plan, data, step_index, rngs)?;
    opt.step(net.params_mut(), &sg.grad);
    Ok(sg.record)
}

fn plain_step(
    net: &mut ScoreNet,
    plan: &TrainPlan,
    source: &Tensor,
    step_index: usize,
    rngs: &mut StepRngs,
    opt: &mut Adam,
) -> Result<LossRecord> {
    let batch = draw_batch(source, plan.batch_size, &mut rngs.retain)?;
    let lg = dsm_loss(net, &batch, plan.lambda, &mut rngs.retain)?;
    guard(step_index, lg.value)?;
    opt.step(net.params_mut(), &lg.grad);
    Ok(LossRecord {
        step: step_index,
        l_g: lg.value,
        l_f: None,
        total: lg.value,
    })
}

/// Runs `plan.steps` optimizer steps starting from `net`, which is either a
/// fresh initialization or a loaded checkpoint for the fine-tune modes.
pub fn train(plan: &TrainPlan, data: &SplitDataset, mut net: ScoreNet) -> Result<(ScoreNet, LossCurve)> {
    train_with_progress(plan, data, &mut net, |_| {}).map(|curve| (net, curve))
}

/// [`train`] with a callback invoked after every step.
pub fn train_with_progress(
    plan: &TrainPlan,
    data: &SplitDataset,
    net: &mut ScoreNet,
    mut progress: impl FnMut(&LossRecord),
) -> Result<LossCurve> {
    plan.validate()?;
    if data.dim() != net.architecture().d {
        return Err(MsgmError::invalid("dataset dimension does not match the network"));
    }
    let mut opt = Adam::new(
        net.params().len(),
        plan.learning_rate,
        plan.beta1,
        plan.beta2,
        plan.adam_eps,
    );
    let mut rngs = StepRngs::new(plan.seed);
    let everything = match plan.mode {
        TrainMode::Standard => Some(data.all()),
        _ => None,
    };
    let mut curve = LossCurve {
        records: Vec::with_capacity(plan.steps),
    };
    for step in 0..plan.steps {
        let rec = match plan.mode {
            TrainMode::Standard => plain_step(net, plan, everything.as_ref().unwrap(), step, &mut rngs, &mut opt),
            TrainMode::Unseen => plain_step(net, plan, &data.d_g, step, &mut rngs, &mut opt),
            _ => msgm_step(net, plan, data, step, &mut rngs, &mut opt),
        }?;
        progress(&rec);
        curve.records.push(rec);
    }
    Ok(curve)
}
