//! Forward diffusions: variance exploding (VE) and variance preserving (VP).
//!
//! Both are linear in `x`: the drift is `c(t)·x` and the perturbation kernel
//! `p_{0t}(x_t | x_0)` is Gaussian with mean `m(t)·x_0` and isotropic
//! standard deviation `σ(t)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{MsgmError, Result};
use crate::numcore::{RngState, Tensor};

// Floating grids may overshoot the horizon by an ulp or two.
const TIME_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SdeKind {
    Ve,
    Vp,
}

impl std::fmt::Display for SdeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SdeKind::Ve => "VE",
            SdeKind::Vp => "VP",
        })
    }
}

/// Schedule parameters of a forward SDE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub kind: SdeKind,
    /// Horizon `T`.
    pub t_max: f64,
    /// Smallest time used for training, sampling and likelihoods.
    pub t_eps: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Moments of the Gaussian perturbation kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMoments {
    pub mean: Tensor,
    pub std: f64,
}

impl SdeSpec {
    pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
    pub const DEFAULT_SIGMA_MAX: f64 = 50.0;
    pub const DEFAULT_BETA_MIN: f64 = 0.1;
    pub const DEFAULT_BETA_MAX: f64 = 20.0;
    pub const DEFAULT_T_EPS: f64 = 1e-3;

    pub fn ve() -> Self {
        SdeSpec {
            kind: SdeKind::Ve,
            t_max: 1.0,
            t_eps: Self::DEFAULT_T_EPS,
            sigma_min: Self::DEFAULT_SIGMA_MIN,
            sigma_max: Self::DEFAULT_SIGMA_MAX,
            beta_min: Self::DEFAULT_BETA_MIN,
            beta_max: Self::DEFAULT_BETA_MAX,
        }
    }

    pub fn vp() -> Self {
        SdeSpec {
            kind: SdeKind::Vp,
            ..Self::ve()
        }
    }

    /// Lists every violated invariant.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            errs.push(format!("sde.t_max must be positive, got {}", self.t_max));
        }
        if !(self.t_eps > 0.0 && self.t_eps < self.t_max) {
            errs.push(format!("sde.t_eps must lie in (0, t_max), got {}", self.t_eps));
        }
        match self.kind {
            SdeKind::Ve => {
                if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
                    errs.push(format!(
                        "sde.sigma_min/sigma_max must satisfy 0 < sigma_min < sigma_max, got {} and {}",
                        self.sigma_min, self.sigma_max
                    ));
                }
            }
            SdeKind::Vp => {
                if !(self.beta_min >= 0.0 && self.beta_min < self.beta_max) {
                    errs.push(format!(
                        "sde.beta_min/beta_max must satisfy 0 <= beta_min < beta_max, got {} and {}",
                        self.beta_min, self.beta_max
                    ));
                }
            }
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

    fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && t >= -TIME_SLACK && t <= self.t_max + TIME_SLACK {
            Ok(())
        } else {
            Err(MsgmError::invalid(format!("time {t} outside [0, {}]", self.t_max)))
        }
    }

    fn check_kernel_time(&self, t: f64) -> Result<()> {
        self.check_time(t)?;
        if t < self.t_eps - TIME_SLACK {
            return Err(MsgmError::invalid(format!(
                "time {t} below t_eps = {}: perturbation kernel is degenerate",
                self.t_eps
            )));
        }
        Ok(())
    }

    /// Linear VP schedule `β(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max
    }

    /// Coefficient `c(t)` of the linear drift `f(x, t) = c(t)·x`.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Ve => 0.0,
            SdeKind::Vp => -0.5 * self.beta(t),
        }
    }

    pub fn drift(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check_time(t)?;
        let c = self.drift_coeff(t);
        Ok(x.map(|v| c * v))
    }

    /// `g(t)`, unchecked.
    pub fn g(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Ve => {
                let ratio = self.sigma_max / self.sigma_min;
                self.sigma_min * ratio.powf(t / self.t_max) * (2.0 * ratio.ln() / self.t_max).sqrt()
            }
            SdeKind::Vp => self.beta(t).sqrt(),
        }
    }

    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.g(t))
    }

    /// Kernel mean scale `m(t)` and standard deviation `σ(t)`, unchecked.
    pub fn marginal(&self, t: f64) -> (f64, f64) {
        match self.kind {
            SdeKind::Ve => {
                let ratio = self.sigma_max / self.sigma_min;
                (1.0, self.sigma_min * ratio.powf(t / self.t_max))
            }
            SdeKind::Vp => {
                let log_mean = -0.25 * t * t * (self.beta_max - self.beta_min) / self.t_max - 0.5 * t * self.beta_min;
                (log_mean.exp(), (-(2.0 * log_mean).exp_m1()).sqrt())
            }
        }
    }

    /// Standard deviation `σ(t)` of the perturbation kernel, unchecked.
    pub fn std(&self, t: f64) -> f64 {
        self.marginal(t).1
    }

    pub fn perturb_kernel(&self, x0: &Tensor, t: f64) -> Result<KernelMoments> {
        self.check_kernel_time(t)?;
        let (m, std) = self.marginal(t);
        Ok(KernelMoments {
            mean: x0.map(|v| m * v),
            std,
        })
    }

    /// `∇_{x_t} log p_{0t}(x_t | x_0) = (mean − x_t) / σ²`.
    pub fn kernel_score(&self, x_t: &Tensor, x0: &Tensor, t: f64) -> Result<Tensor> {
        if x_t.shape() != x0.shape() {
            return Err(MsgmError::invalid("kernel_score shape mismatch"));
        }
        let k = self.perturb_kernel(x0, t)?;
        let inv_var = 1.0 / (k.std * k.std);
        Ok(k.mean.zip_map(x_t, |m, x| (m - x) * inv_var))
    }

    /// Draws `x_t = m(t)·x_0 + σ(t)·z` row by row.
    pub fn sample_forward(&self, x0: &Tensor, t: f64, rng: &mut RngState) -> Result<Tensor> {
        let k = self.perturb_kernel(x0, t)?;
        let mut out = k.mean;
        for v in out.data_mut() {
            *v += k.std * rng.normal();
        }
        Ok(out)
    }

    /// Standard deviation of the isotropic Gaussian prior at `t = T`.
    pub fn prior_std(&self) -> f64 {
        match self.kind {
            SdeKind::Ve => self.sigma_max,
            SdeKind::Vp => 1.0,
        }
    }

    pub fn prior_logpdf(&self, x: &[f64]) -> f64 {
        let s = self.prior_std();
        let d = x.len() as f64;
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * d * (2.0 * PI).ln() - d * s.ln() - 0.5 * sq / (s * s)
    }

    pub fn prior_sample(&self, n: usize, d: usize, rng: &mut RngState) -> Tensor {
        let mut x = rng.gaussian_sample(&[n, d]);
        let s = self.prior_std();
        x.data_mut().iter_mut().for_each(|v| *v *= s);
        x
    }
}
