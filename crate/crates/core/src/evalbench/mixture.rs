use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{MsgmError, Result};
use crate::numcore::{backward_substitute, cholesky, forward_substitute, RngState, Tensor};
use crate::scorenet::ScoreModel;
use crate::sde::SdeSpec;

/// One Gaussian component. `cov` is row-major `d × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    /// Marks the component as data to be unlearned.
    #[serde(default)]
    pub nsfg: bool,
}

/// Which components a draw may come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Sfg,
    Nsfg,
}

impl Split {
    fn admits(self, c: &Component) -> bool {
        match self {
            Split::All => true,
            Split::Sfg => !c.nsfg,
            Split::Nsfg => c.nsfg,
        }
    }
}

/// Validated Gaussian mixture with normalized weights.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    d: usize,
    components: Vec<Component>,
    chol: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
}

impl MixtureSpec {
    /// Weights are normalized to sum to one; covariances must be symmetric
    /// positive definite.
    pub fn new(mut components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| MsgmError::invalid("mixture needs at least one component"))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(MsgmError::invalid("mixture dimension must be positive"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let mut chol = Vec::with_capacity(components.len());
        let mut log_norm = Vec::with_capacity(components.len());
        for (i, c) in components.iter_mut().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(MsgmError::invalid(format!("component {i}: weight must be positive")));
            }
            if c.mean.len() != d || c.cov.len() != d * d {
                return Err(MsgmError::invalid(format!("component {i}: dimension mismatch")));
            }
            for r in 0..d {
                for s in 0..r {
                    if (c.cov[r * d + s] - c.cov[s * d + r]).abs() > 1e-12 {
                        return Err(MsgmError::invalid(format!(
                            "component {i}: covariance is not symmetric"
                        )));
                    }
                }
            }
            let l = cholesky(&c.cov, d)
                .map_err(|_| MsgmError::invalid(format!("component {i}: covariance is not positive definite")))?;
            let log_det: f64 = (0..d).map(|r| 2.0 * l[r * d + r].ln()).sum();
            log_norm.push(-0.5 * (d as f64 * (2.0 * PI).ln() + log_det));
            chol.push(l);
            c.weight /= total;
        }
        Ok(MixtureSpec {
            d,
            components,
            chol,
            log_norm,
        })
    }

    /// The 2D toy mixture: `4/5·N((−2,−2), I) + 2/5·N((0,0), I) +
    /// 4/5·N((2,2), I)` normalized to weights `(0.4, 0.2, 0.4)`, with the
    /// centre component flagged NSFG.
    pub fn toy() -> Self {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let comp = |w: f64, m: [f64; 2], nsfg| Component {
            weight: w,
            mean: m.to_vec(),
            cov: eye.clone(),
            nsfg,
        };
        MixtureSpec::new(vec![
            comp(0.8, [-2.0, -2.0], false),
            comp(0.4, [0.0, 0.0], true),
            comp(0.8, [2.0, 2.0], false),
        ])
        .expect("toy mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn nsfg_weight(&self) -> f64 {
        self.components.iter().filter(|c| c.nsfg).map(|c| c.weight).sum()
    }

    /// Ancestral draws from the requested split, with component labels.
    pub fn sample_labeled(&self, n: usize, rng: &mut RngState, split: Split) -> Result<(Tensor, Vec<usize>)> {
        let admitted: Vec<usize> = (0..self.components.len())
            .filter(|&i| split.admits(&self.components[i]))
            .collect();
        let total: f64 = admitted.iter().map(|&i| self.components[i].weight).sum();
        if admitted.is_empty() || total <= 0.0 {
            return Err(MsgmError::invalid(format!("split {split:?} has no components")));
        }
        let d = self.d;
        let mut data = vec![0.0; n * d];
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        for row in data.chunks_exact_mut(d) {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = *admitted.last().unwrap();
            for &i in &admitted {
                acc += self.components[i].weight;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            rng.fill_normal(&mut z);
            let (c, l) = (&self.components[pick], &self.chol[pick]);
            for r in 0..d {
                let lz: f64 = (0..=r).map(|k| l[r * d + k] * z[k]).sum();
                row[r] = c.mean[r] + lz;
            }
            labels.push(pick);
        }
        Ok((Tensor::matrix(n, d, data), labels))
    }

    pub fn sample(&self, n: usize, rng: &mut RngState, split: Split) -> Result<Tensor> {
        self.sample_labeled(n, rng, split).map(|(x, _)| x)
    }

    /// `log wᵢ + log N(x; μᵢ, Σᵢ)` for every component.
    pub fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut diff = vec![0.0; d];
        let mut y = vec![0.0; d];
        self.components
            .iter()
            .zip(&self.chol)
            .zip(&self.log_norm)
            .map(|((c, l), ln)| {
                diff.iter_mut()
                    .zip(x.iter().zip(&c.mean))
                    .for_each(|(o, (a, m))| *o = a - m);
                forward_substitute(l, d, &diff, &mut y);
                let maha: f64 = y.iter().map(|v| v * v).sum();
                c.weight.ln() + ln - 0.5 * maha
            })
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Posterior component probabilities.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_log_densities(x);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Most probable component (ties go to the lowest index) and the full
    /// posterior.
    pub fn bayes_component(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let post = self.posterior(x);
        let mut best = 0;
        for (i, p) in post.iter().enumerate() {
            if *p > post[best] {
                best = i;
            }
        }
        (best, post)
    }

    /// Posterior mass on NSFG components.
    pub fn nsfg_mass(&self, x: &[f64]) -> f64 {
        self.posterior(x)
            .iter()
            .zip(&self.components)
            .filter(|(_, c)| c.nsfg)
            .map(|(p, _)| p)
            .sum()
    }

    pub fn is_nsfg(&self, component: usize) -> bool {
        self.components[component].nsfg
    }

    /// `∇_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let post = self.posterior(x);
        let mut out = vec![0.0; d];
        let mut diff = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut prec = vec![0.0; d];
        for ((c, l), p) in self.components.iter().zip(&self.chol).zip(&post) {
            diff.iter_mut()
                .zip(x.iter().zip(&c.mean))
                .for_each(|(o, (a, m))| *o = a - m);
            forward_substitute(l, d, &diff, &mut y);
            backward_substitute(l, d, &y, &mut prec);
            out.iter_mut().zip(&prec).for_each(|(o, v)| *o -= p * v);
        }
        out
    }

    /// Marginal at time `t` of the forward SDE started from this mixture:
    /// means scale by `m(t)`, covariances become `m²Σ + σ²I`.
    pub fn perturbed(&self, sde: &SdeSpec, t: f64) -> Result<MixtureSpec> {
        let (m, std) = sde.marginal(t);
        let d = self.d;
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut cov: Vec<f64> = c.cov.iter().map(|v| v * m * m).collect();
                (0..d).for_each(|i| cov[i * d + i] += std * std);
                Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|v| v * m).collect(),
                    cov,
                    nsfg: c.nsfg,
                }
            })
            .collect();
        MixtureSpec::new(comps)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact score of the perturbed mixture, usable wherever a trained network
/// is.
#[derive(Clone, Debug)]
pub struct AnalyticScore {
    mixture: MixtureSpec,
    sde: SdeSpec,
}

impl AnalyticScore {
    pub fn new(mixture: MixtureSpec, sde: SdeSpec) -> Self {
        AnalyticScore { mixture, sde }
    }

    pub fn mixture(&self) -> &MixtureSpec {
        &self.mixture
    }
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let d = self.mixture.dim();
        if x.cols() != d {
            return Err(MsgmError::invalid("analytic score: dimension mismatch"));
        }
        let pt = self.mixture.perturbed(&self.sde, t)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let s = pt.score(x.row(i));
            out.row_mut(i).copy_from_slice(&s);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_weights_normalized() {
        let w = MixtureSpec::toy().weights();
        assert!((w[0] - 0.4).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15 && (w[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn nsfg_split_draws_only_centre() {
        let mix = MixtureSpec::toy();
        let mut rng = RngState::new(1);
        let (_, labels) = mix.sample_labeled(1000, &mut rng, Split::Nsfg).unwrap();
        assert!(labels.iter().all(|&l| l == 1));
        let (_, labels) = mix.sample_labeled(1000, &mut rng, Split::Sfg).unwrap();
        assert!(labels.iter().all(|&l| l != 1));
    }

    #[test]
    fn component_frequencies() {
        let mix = MixtureSpec::toy();
        let mut rng = RngState::new(2);
        let (_, labels) = mix.sample_labeled(100_000, &mut rng, Split::All).unwrap();
        let mut counts = [0usize; 3];
        labels.iter().for_each(|&l| counts[l] += 1);
        for (c, w) in counts.iter().zip([0.4, 0.2, 0.4]) {
            assert!((*c as f64 / 1e5 - w).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let mix = MixtureSpec::toy();
        let a = mix.sample(50, &mut RngState::new(9), Split::All).unwrap();
        let b = mix.sample(50, &mut RngState::new(9), Split::All).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_split_rejected() {
        let mix = MixtureSpec::new(vec![Component {
            weight: 1.0,
            mean: vec![0.0],
            cov: vec![1.0],
            nsfg: false,
        }])
        .unwrap();
        assert!(mix.sample(3, &mut RngState::new(0), Split::Nsfg).is_err());
    }

    #[test]
    fn invalid_components_rejected() {
        let bad_cov = Component {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 2.0, 2.0, 1.0],
            nsfg: false,
        };
        assert!(MixtureSpec::new(vec![bad_cov]).is_err());
        let bad_weight = Component {
            weight: -1.0,
            mean: vec![0.0],
            cov: vec![1.0],
            nsfg: false,
        };
        assert!(MixtureSpec::new(vec![bad_weight]).is_err());
        assert!(MixtureSpec::new(vec![]).is_err());
    }

    #[test]
    fn single_standard_normal_logpdf() {
        let mix = MixtureSpec::new(vec![Component {
            weight: 3.0,
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            nsfg: false,
        }])
        .unwrap();
        assert!((mix.logpdf(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn toy_logpdf_is_symmetric() {
        let mix = MixtureSpec::toy();
        let mut rng = RngState::new(3);
        for _ in 0..100 {
            let x = [rng.normal() * 3.0, rng.normal() * 3.0];
            assert!((mix.logpdf(&x) - mix.logpdf(&[-x[0], -x[1]])).abs() < 1e-12);
        }
    }

    #[test]
    fn logpdf_integrates_to_one() {
        let mix = MixtureSpec::toy();
        let (half, n) = (10.0, 500);
        let h = 2.0 * half / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h];
                total += mix.logpdf(&x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn bayes_assignments() {
        let mix = MixtureSpec::toy();
        let (c, post) = mix.bayes_component(&[-2.0, -2.0]);
        assert_eq!(c, 0);
        assert!(post[0] > 0.95);
        assert_eq!(mix.bayes_component(&[0.0, 0.0]).0, 1);

        // Posterior ratio at the midpoint equals weight ratio times the
        // density ratio of the two unit Gaussians.
        let x = [-1.0, -1.0];
        let post = mix.posterior(&x);
        let dens = |m: [f64; 2]| (-0.5 * ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2))).exp();
        let want = (0.4 * dens([-2.0, -2.0])) / (0.2 * dens([0.0, 0.0]));
        assert!((post[0] / post[1] - want).abs() < 1e-12 * want);
    }

    #[test]
    fn posterior_sums_to_one() {
        let mix = MixtureSpec::toy();
        let mut rng = RngState::new(4);
        for _ in 0..200 {
            let x = [rng.normal() * 4.0, rng.normal() * 4.0];
            let s: f64 = mix.posterior(&x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_score_matches_log_density_gradient() {
        let mix = MixtureSpec::new(vec![
            Component {
                weight: 0.3,
                mean: vec![1.0, -1.0],
                cov: vec![2.0, 0.5, 0.5, 1.0],
                nsfg: false,
            },
            Component {
                weight: 0.7,
                mean: vec![-1.0, 0.5],
                cov: vec![0.7, -0.2, -0.2, 1.3],
                nsfg: true,
            },
        ])
        .unwrap();
        let mut rng = RngState::new(5);
        for _ in 0..100 {
            let x = [rng.normal() * 2.0, rng.normal() * 2.0];
            let s = mix.score(&x);
            for j in 0..2 {
                let h = 1e-5;
                let mut p = x;
                let mut m = x;
                p[j] += h;
                m[j] -= h;
                let fd = (mix.logpdf(&p) - mix.logpdf(&m)) / (2.0 * h);
                assert!((fd - s[j]).abs() <= 1e-5 * s[j].abs().max(1.0), "{fd} vs {}", s[j]);
            }
        }
    }
}
