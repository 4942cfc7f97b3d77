use serde::{Deserialize, Serialize};

use crate::error::{MsgmError, Result};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Denoising score matching on all data.
    Standard,
    /// Denoising score matching on the retained split only.
    Unseen,
    /// Retain loss plus the squared-dot-product forget loss.
    Ort,
    /// Retain loss plus the raw-dot-product forget loss.
    Obt,
    /// `Ort` starting from a pre-trained checkpoint.
    FinetuneOrt,
    /// `Obt` starting from a pre-trained checkpoint.
    FinetuneObt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Standard,
        TrainMode::Unseen,
        TrainMode::Ort,
        TrainMode::Obt,
        TrainMode::FinetuneOrt,
        TrainMode::FinetuneObt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Standard => "Standard",
            TrainMode::Unseen => "Unseen",
            TrainMode::Ort => "Ort",
            TrainMode::Obt => "Obt",
            TrainMode::FinetuneOrt => "FinetuneOrt",
            TrainMode::FinetuneObt => "FinetuneObt",
        }
    }

    /// Case-insensitive parse of [`TrainMode::name`].
    pub fn parse(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| MsgmError::invalid(format!("unknown training mode '{s}'")))
    }

    /// Modes that combine a retain and a forget loss.
    pub fn is_msgm(self) -> bool {
        !matches!(self, TrainMode::Standard | TrainMode::Unseen)
    }

    pub fn is_finetune(self) -> bool {
        matches!(self, TrainMode::FinetuneOrt | TrainMode::FinetuneObt)
    }

    pub fn forget_loss(self) -> Option<ForgetLoss> {
        match self {
            TrainMode::Ort | TrainMode::FinetuneOrt => Some(ForgetLoss::Orthogonal),
            TrainMode::Obt | TrainMode::FinetuneObt => Some(ForgetLoss::Obtuse),
            _ => None,
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForgetLoss {
    Orthogonal,
    Obtuse,
}

/// Time weighting `λ(t)` of every loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaKind {
    /// `λ(t) = σ(t)²`.
    #[default]
    Variance,
    /// `λ(t) = 1`.
    Unit,
}

impl LambdaKind {
    pub fn weight(self, std: f64) -> f64 {
        match self {
            LambdaKind::Variance => std * std,
            LambdaKind::Unit => 1.0,
        }
    }
}

/// Everything that determines a training run apart from data and the
/// initial network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub alpha: f64,
    /// The forget loss joins the update on steps where
    /// `step % update_interval == 0`.
    pub update_interval: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: LambdaKind,
    /// Clamp the obtuse forget loss at zero from below.
    pub obtuse_hinge: bool,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            mode: TrainMode::Standard,
            alpha: 0.99,
            update_interval: 4,
            steps: 50_000,
            batch_size: 512,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: LambdaKind::Variance,
            obtuse_hinge: false,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn with_mode(mode: TrainMode) -> Self {
        let mut plan = TrainPlan {
            mode,
            ..TrainPlan::default()
        };
        if mode.is_finetune() {
            plan.steps = 10_000;
        }
        plan
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push(format!("train.alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.update_interval == 0 {
            errs.push("train.update_interval must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            errs.push(format!("train.beta1 must lie in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            errs.push(format!("train.beta2 must lie in [0, 1), got {}", self.beta2));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            errs.push("train.adam_eps must be positive".to_string());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(MsgmError::Config(errs))
        }
    }
}
