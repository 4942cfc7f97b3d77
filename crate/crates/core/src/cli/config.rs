//! TOML experiment configuration.
//!
//! The file is parsed into an all-optional raw form first so that
//! validation can report every offending field at once.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{MsgmError, Result};
use crate::evalbench::{Component, MixtureSpec, Rect};
use crate::likelihood::IntegratorSettings;
use crate::scorenet::{Architecture, DivergenceMode};
use crate::sde::{SdeKind, SdeSpec};
use crate::train::{LambdaKind, TrainMode, TrainPlan};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    seed: Option<u64>,
    out_dir: Option<String>,
    mixture: Option<RawMixture>,
    data: Option<RawData>,
    sde: Option<RawSde>,
    net: Option<RawNet>,
    train: Option<RawTrain>,
    sampler: Option<RawSampler>,
    likelihood: Option<RawLikelihood>,
    field: Option<RawField>,
    inpaint: Option<RawInpaint>,
    ablate: Option<RawAblate>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    preset: Option<String>,
    components: Option<Vec<Component>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    n_train: Option<usize>,
    n_eval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSde {
    kind: Option<String>,
    t_max: Option<f64>,
    t_eps: Option<f64>,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
    beta_min: Option<f64>,
    beta_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    widths: Option<Vec<usize>>,
    embed_freqs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    mode: Option<String>,
    alpha: Option<f64>,
    update_interval: Option<usize>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    lambda: Option<LambdaKind>,
    obtuse_hinge: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampler {
    n_samples: Option<usize>,
    n_steps: Option<usize>,
    snr: Option<f64>,
    corrector_steps: Option<usize>,
    t_star: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLikelihood {
    rtol: Option<f64>,
    atol: Option<f64>,
    divergence: Option<String>,
    probes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    t: Option<f64>,
    resolution: Option<usize>,
    half_width: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInpaint {
    observed: Option<Vec<f64>>,
    mask: Option<Vec<bool>>,
    n: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAblate {
    alphas: Option<Vec<f64>>,
    intervals: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataSettings {
    /// Training points drawn from the mixture.
    pub n_train: usize,
    /// Held-out points used for likelihood and reconstruction.
    pub n_eval: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerSettings {
    pub n_samples: usize,
    pub n_steps: usize,
    pub snr: f64,
    pub corrector_steps: usize,
    pub t_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSettings {
    pub t: f64,
    pub resolution: usize,
    pub rect: Rect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintSettings {
    pub observed: Vec<f64>,
    /// `true` marks an observed coordinate.
    pub mask: Vec<bool>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    Alpha(Vec<f64>),
    Interval(Vec<usize>),
}

/// Fully resolved and validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Row label in result tables; defaults to the training mode.
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mixture: MixtureSpec,
    pub data: DataSettings,
    pub sde: SdeSpec,
    pub arch: Architecture,
    pub plan: TrainPlan,
    pub sampler: SamplerSettings,
    pub likelihood: IntegratorSettings,
    pub field: FieldSettings,
    pub inpaint: InpaintSettings,
    pub sweep: Option<Sweep>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MsgmError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| MsgmError::Config(vec![e.message().to_string()]))?;
        resolve(raw, overrides)
    }

    /// Training and held-out data never share a stream.
    pub fn data_stream(&self, purpose: DataPurpose) -> crate::numcore::RngState {
        crate::numcore::RngState::stream(self.seed, purpose as u64)
    }
}

/// Random streams derived from the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataPurpose {
    TrainData = 10,
    HeldOut = 11,
    Sampling = 12,
    Inpaint = 13,
    Reconstruct = 14,
}

fn resolve(raw: RawConfig, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut errs = Vec::new();

    let mixture = match raw.mixture {
        None => Some(MixtureSpec::toy()),
        Some(RawMixture { preset, components }) => match (preset.as_deref(), components) {
            (Some(_), Some(_)) => {
                errs.push("mixture: give either preset or components, not both".to_string());
                None
            }
            (Some("toy") | None, None) => Some(MixtureSpec::toy()),
            (Some(p), None) => {
                errs.push(format!("mixture.preset: unknown preset '{p}'"));
                None
            }
            (None, Some(c)) => match MixtureSpec::new(c) {
                Ok(m) => Some(m),
                Err(e) => {
                    errs.push(format!("mixture.components: {e}"));
                    None
                }
            },
        },
    };

    let data = raw.data.unwrap_or_default();
    let data = DataSettings {
        n_train: data.n_train.unwrap_or(10_000),
        n_eval: data.n_eval.unwrap_or(2_000),
    };
    if data.n_train == 0 {
        errs.push("data.n_train must be positive".to_string());
    }
    if data.n_eval == 0 {
        errs.push("data.n_eval must be positive".to_string());
    }

    let sde = resolve_sde(raw.sde, &mut errs);

    let net = raw.net.unwrap_or_default();
    let widths = net.widths.unwrap_or_else(|| vec![128, 128]);
    let embed_freqs = net.embed_freqs.unwrap_or(64);
    let d = mixture.as_ref().map_or(2, |m| m.dim());
    let arch = match Architecture::new(d, widths, embed_freqs) {
        Ok(a) => Some(a),
        Err(e) => {
            errs.push(format!("net: {e}"));
            None
        }
    };

    let seed = ov.seed.or(raw.seed).unwrap_or(0);
    let plan = resolve_train(raw.train.unwrap_or_default(), ov.mode.as_deref(), seed, &mut errs);

    let s = raw.sampler.unwrap_or_default();
    let sampler = SamplerSettings {
        n_samples: s.n_samples.unwrap_or(10_000),
        n_steps: s.n_steps.unwrap_or(crate::sampler::DEFAULT_STEPS),
        snr: s.snr.unwrap_or(0.16),
        corrector_steps: s.corrector_steps.unwrap_or(0),
        t_star: s.t_star.unwrap_or(crate::sampler::DEFAULT_T_STAR),
    };
    if sampler.n_samples == 0 {
        errs.push("sampler.n_samples must be positive".to_string());
    }
    if sampler.n_steps < crate::sampler::MIN_STEPS {
        errs.push(format!(
            "sampler.n_steps must be at least {}",
            crate::sampler::MIN_STEPS
        ));
    }
    if !(sampler.snr >= 0.0 && sampler.snr.is_finite()) {
        errs.push("sampler.snr must be finite and non-negative".to_string());
    }
    if let Some(sde) = &sde {
        if !(sampler.t_star >= sde.t_eps && sampler.t_star <= sde.t_max) {
            errs.push(format!("sampler.t_star must lie in [{}, {}]", sde.t_eps, sde.t_max));
        }
    }

    let l = raw.likelihood.unwrap_or_default();
    let mut likelihood = IntegratorSettings::default();
    likelihood.rtol = l.rtol.unwrap_or(likelihood.rtol);
    likelihood.atol = l.atol.unwrap_or(likelihood.atol);
    likelihood.probe_seed = seed;
    match l.divergence.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("exact") => {}
        Some("hutchinson") => {
            likelihood.divergence = DivergenceMode::Hutchinson {
                probes: l.probes.unwrap_or(1),
            }
        }
        Some(other) => errs.push(format!(
            "likelihood.divergence: expected 'exact' or 'hutchinson', got '{other}'"
        )),
    }
    if likelihood.rtol.is_nan() || likelihood.rtol <= 0.0 {
        errs.push("likelihood.rtol must be positive".to_string());
    }
    if likelihood.atol.is_nan() || likelihood.atol <= 0.0 {
        errs.push("likelihood.atol must be positive".to_string());
    }

    let f = raw.field.unwrap_or_default();
    let half = f.half_width.unwrap_or(5.0);
    let field = FieldSettings {
        t: f.t.unwrap_or(0.08),
        resolution: f.resolution.unwrap_or(25),
        rect: Rect::square(half),
    };
    if field.resolution < 2 {
        errs.push("field.resolution must be at least 2".to_string());
    }
    if half.is_nan() || half <= 0.0 {
        errs.push("field.half_width must be positive".to_string());
    }
    if let Some(sde) = &sde {
        if !(field.t >= sde.t_eps && field.t <= sde.t_max) {
            errs.push(format!("field.t must lie in [{}, {}]", sde.t_eps, sde.t_max));
        }
    }

    let ip = raw.inpaint.unwrap_or_default();
    let inpaint = InpaintSettings {
        observed: ip.observed.unwrap_or_else(|| vec![0.0; d]),
        mask: ip.mask.unwrap_or_else(|| (0..d).map(|j| j == 0).collect()),
        n: ip.n.unwrap_or(2_000),
    };
    if inpaint.observed.len() != d {
        errs.push(format!("inpaint.observed must have {d} entries"));
    }
    if inpaint.mask.len() != d {
        errs.push(format!("inpaint.mask must have {d} entries"));
    } else if inpaint.mask.iter().all(|&m| m) || inpaint.mask.iter().all(|&m| !m) {
        errs.push("inpaint.mask needs at least one observed and one free coordinate".to_string());
    }

    let sweep = match raw.ablate {
        None => None,
        Some(RawAblate { alphas, intervals }) => match (alphas, intervals) {
            (Some(_), Some(_)) => {
                errs.push("ablate: sweep either alphas or intervals, not both".to_string());
                None
            }
            (Some(a), None) => {
                if a.is_empty() {
                    errs.push("ablate.alphas is empty".to_string());
                }
                if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    errs.push("ablate.alphas must lie in [0, 1]".to_string());
                }
                Some(Sweep::Alpha(a))
            }
            (None, Some(i)) => {
                if i.is_empty() {
                    errs.push("ablate.intervals is empty".to_string());
                }
                if i.contains(&0) {
                    errs.push("ablate.intervals must be at least 1".to_string());
                }
                Some(Sweep::Interval(i))
            }
            (None, None) => {
                errs.push("ablate: give alphas or intervals".to_string());
                None
            }
        },
    };

    let out_dir = ov
        .out_dir
        .clone()
        .or(raw.out_dir.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    match (errs.is_empty(), mixture, sde, arch, plan) {
        (true, Some(mixture), Some(sde), Some(arch), Some(plan)) => Ok(ExperimentConfig {
            name: raw.name.unwrap_or_else(|| plan.mode.name().to_string()),
            seed,
            out_dir,
            mixture,
            data,
            sde,
            arch,
            plan,
            sampler,
            likelihood,
            field,
            inpaint,
            sweep,
        }),
        _ => Err(MsgmError::Config(errs)),
    }
}

fn resolve_sde(raw: Option<RawSde>, errs: &mut Vec<String>) -> Option<SdeSpec> {
    let Some(raw) = raw else {
        errs.push("sde: section is required".to_string());
        return None;
    };
    let kind = match raw.kind.as_deref().map(str::to_ascii_uppercase).as_deref() {
        Some("VE") => SdeKind::Ve,
        Some("VP") => SdeKind::Vp,
        Some(other) => {
            errs.push(format!("sde.kind: expected 'VE' or 'VP', got '{other}'"));
            return None;
        }
        None => {
            errs.push("sde.kind is required".to_string());
            return None;
        }
    };
    let before = errs.len();
    let mut need = |name: &str, v: Option<f64>| -> f64 {
        v.unwrap_or_else(|| {
            errs.push(format!("sde.{name} is required for a {kind} SDE"));
            f64::NAN
        })
    };
    let mut spec = match kind {
        SdeKind::Ve => SdeSpec::ve(),
        SdeKind::Vp => SdeSpec::vp(),
    };
    match kind {
        SdeKind::Ve => {
            spec.sigma_min = need("sigma_min", raw.sigma_min);
            spec.sigma_max = need("sigma_max", raw.sigma_max);
        }
        SdeKind::Vp => {
            spec.beta_min = need("beta_min", raw.beta_min);
            spec.beta_max = need("beta_max", raw.beta_max);
        }
    }
    spec.t_max = raw.t_max.unwrap_or(spec.t_max);
    spec.t_eps = raw.t_eps.unwrap_or(spec.t_eps);
    if errs.len() > before {
        return None;
    }
    let v = spec.validation_errors();
    if v.is_empty() {
        Some(spec)
    } else {
        errs.extend(v.into_iter().map(|e| format!("sde: {e}")));
        None
    }
}

fn resolve_train(raw: RawTrain, mode_override: Option<&str>, seed: u64, errs: &mut Vec<String>) -> Option<TrainPlan> {
    let mode_name = mode_override.map(str::to_string).or(raw.mode);
    let mode = match mode_name.as_deref().map(TrainMode::parse) {
        None => TrainMode::Standard,
        Some(Ok(m)) => m,
        Some(Err(_)) => {
            errs.push(format!("train.mode: unknown mode '{}'", mode_name.unwrap_or_default()));
            return None;
        }
    };
    let d = TrainPlan::with_mode(mode);
    let plan = TrainPlan {
        mode,
        alpha: raw.alpha.unwrap_or(d.alpha),
        update_interval: raw.update_interval.unwrap_or(d.update_interval),
        steps: raw.steps.unwrap_or(d.steps),
        batch_size: raw.batch_size.unwrap_or(d.batch_size),
        learning_rate: raw.learning_rate.unwrap_or(d.learning_rate),
        beta1: raw.beta1.unwrap_or(d.beta1),
        beta2: raw.beta2.unwrap_or(d.beta2),
        adam_eps: raw.adam_eps.unwrap_or(d.adam_eps),
        lambda: raw.lambda.unwrap_or(d.lambda),
        obtuse_hinge: raw.obtuse_hinge.unwrap_or(d.obtuse_hinge),
        seed,
    };
    let v = plan.validation_errors();
    if v.is_empty() {
        Some(plan)
    } else {
        errs.extend(v);
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[sde]\nkind = \"VE\"\nsigma_min = 0.01\nsigma_max = 50.0\n";

    fn messages(text: &str) -> Vec<String> {
        match ExperimentConfig::from_toml_str(text, &Overrides::default()) {
            Err(MsgmError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, &Overrides::default()).unwrap();
        assert_eq!(c.plan, TrainPlan::default());
        assert_eq!(c.arch.widths, vec![128, 128]);
        assert_eq!(c.sampler.n_steps, 1000);
        assert_eq!(c.field.resolution, 25);
        assert_eq!(c.mixture.weights(), MixtureSpec::toy().weights());
    }

    #[test]
    fn missing_sigma_max_named() {
        let m = messages("[sde]\nkind = \"VE\"\nsigma_min = 0.01\n");
        assert!(m.iter().any(|e| e.contains("sigma_max")), "{m:?}");
    }

    #[test]
    fn every_bad_field_reported() {
        let m = messages(
            "[sde]\nkind = \"VP\"\nbeta_min = 0.1\n[train]\nalpha = 2.0\nbatch_size = 0\n[sampler]\nn_steps = 3\n",
        );
        for key in ["beta_max", "alpha", "batch_size", "n_steps"] {
            assert!(m.iter().any(|e| e.contains(key)), "{key} missing from {m:?}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let m = messages(&format!("{MINIMAL}[train]\nlearning_rat = 1.0\n"));
        assert!(m[0].contains("learning_rat"), "{m:?}");
    }

    #[test]
    fn overrides_win() {
        let text = format!("seed = 3\n{MINIMAL}[train]\nmode = \"Ort\"\n");
        let ov = Overrides {
            seed: Some(9),
            mode: Some("finetuneobt".into()),
            out_dir: Some("x".into()),
        };
        let c = ExperimentConfig::from_toml_str(&text, &ov).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.plan.seed, 9);
        assert_eq!(c.plan.mode, TrainMode::FinetuneObt);
        assert_eq!(c.plan.steps, 10_000);
        assert_eq!(c.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn ablation_sweeps() {
        let c = ExperimentConfig::from_toml_str(
            &format!("{MINIMAL}[ablate]\nalphas = [0.7, 1.0]\n"),
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(c.sweep, Some(Sweep::Alpha(vec![0.7, 1.0])));
        let m = messages(&format!("{MINIMAL}[ablate]\nalphas = []\n"));
        assert!(m.iter().any(|e| e.contains("empty")));
    }
}
