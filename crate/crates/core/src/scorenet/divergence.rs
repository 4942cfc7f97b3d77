use super::ScoreModel;
use crate::error::{MsgmError, Result};
use crate::numcore::{RngState, Tensor};

/// How `∇_x · s(x, t)` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceMode {
    /// One central-difference probe per coordinate.
    Exact,
    /// Hutchinson trace estimate with `probes` Rademacher vectors.
    Hutchinson { probes: usize },
}

fn probe_steps(x: &Tensor) -> Vec<f64> {
    x.row_iter()
        .map(|row| 1e-4 * (1.0 + row.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .collect()
}

/// Shifts row `i` of `x` by `sign · h_i · dir_i`.
fn shifted(x: &Tensor, dirs: &Tensor, h: &[f64], sign: f64) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    for (i, hi) in h.iter().enumerate() {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        row.iter_mut().zip(dirs.row(i)).for_each(|(v, u)| *v += sign * hi * u);
    }
    out
}

fn directional<M: ScoreModel + ?Sized>(model: &M, x: &Tensor, dirs: &Tensor, h: &[f64], t: f64) -> Result<Vec<f64>> {
    let plus = model.score(&shifted(x, dirs, h, 1.0), t)?;
    let minus = model.score(&shifted(x, dirs, h, -1.0), t)?;
    Ok((0..x.rows())
        .map(|i| {
            let dot: f64 = plus
                .row(i)
                .iter()
                .zip(minus.row(i))
                .zip(dirs.row(i))
                .map(|((p, m), u)| (p - m) * u)
                .sum();
            dot / (2.0 * h[i])
        })
        .collect())
}

fn as_rows(x: &Tensor, d: usize) -> Result<Tensor> {
    if x.cols() != d {
        return Err(MsgmError::invalid(format!(
            "expected points of dimension {d}, got shape {:?}",
            x.shape()
        )));
    }
    Tensor::new(vec![x.rows(), d], x.data().to_vec())
}

/// `uᵢᵀ J(xᵢ) uᵢ` per row for caller-chosen directions `dirs` (same shape
/// as `x`), by central differences.
pub fn directional_curvature(
    model: &(impl ScoreModel + ?Sized),
    x: &Tensor,
    dirs: &Tensor,
    t: f64,
) -> Result<Vec<f64>> {
    let x = as_rows(x, model.dim())?;
    if dirs.shape() != x.shape() {
        return Err(MsgmError::invalid("probe directions must match the points' shape"));
    }
    directional(model, &x, dirs, &probe_steps(&x), t)
}

/// Divergence of every row by `d` central-difference probes with step
/// `h = 1e-4·(1 + |x|_∞)`.
pub fn divergence_exact(model: &(impl ScoreModel + ?Sized), x: &Tensor, t: f64) -> Result<Vec<f64>> {
    let d = model.dim();
    let x = as_rows(x, d)?;
    let h = probe_steps(&x);
    let n = x.rows();
    let mut div = vec![0.0; n];
    for j in 0..d {
        let mut e = Tensor::zeros(&[n, d]);
        for i in 0..n {
            e.data_mut()[i * d + j] = 1.0;
        }
        let part = directional(model, &x, &e, &h, t)?;
        div.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    Ok(div)
}

/// Hutchinson estimate `E[vᵀ J v]` with Rademacher `v`. Returns the
/// per-row mean and its standard error over the probes.
pub fn divergence_hutchinson(
    model: &(impl ScoreModel + ?Sized),
    x: &Tensor,
    t: f64,
    probes: usize,
    rng: &mut RngState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if probes == 0 {
        return Err(MsgmError::invalid("Hutchinson estimator needs at least one probe"));
    }
    let d = model.dim();
    let x = as_rows(x, d)?;
    let h = probe_steps(&x);
    let n = x.rows();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..probes {
        let mut v = Tensor::zeros(&[n, d]);
        v.data_mut().iter_mut().for_each(|u| *u = rng.rademacher());
        let est = directional(model, &x, &v, &h, t)?;
        for i in 0..n {
            sum[i] += est[i];
            sum_sq[i] += est[i] * est[i];
        }
    }
    let k = probes as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            if probes < 2 {
                f64::INFINITY
            } else {
                ((sq / k - m * m).max(0.0) * k / (k - 1.0) / k).sqrt()
            }
        })
        .collect();
    Ok((mean, se))
}

/// Time-independent linear score `s(x) = A·x`.
#[derive(Clone, Debug)]
pub struct LinearScore {
    d: usize,
    a: Vec<f64>,
}

impl LinearScore {
    /// `a` is row-major `d × d`.
    pub fn new(d: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != d * d {
            return Err(MsgmError::invalid("linear score needs a d × d matrix"));
        }
        Ok(LinearScore { d, a })
    }

    /// `s(x) = −x`.
    pub fn negative_identity(d: usize) -> Self {
        let mut a = vec![0.0; d * d];
        (0..d).for_each(|i| a[i * d + i] = -1.0);
        LinearScore { d, a }
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.a[i * self.d + i]).sum()
    }
}

impl ScoreModel for LinearScore {
    fn dim(&self) -> usize {
        self.d
    }

    fn score(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        let x = as_rows(x, self.d)?;
        let at = Tensor::matrix(self.d, self.d, self.a.clone()).transpose();
        Ok(x.matmul(&at))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorenet::{Architecture, ScoreNet};
    use crate::sde::SdeSpec;

    #[test]
    fn negative_identity_divergence() {
        let mut rng = RngState::new(1);
        let x = rng.gaussian_sample(&[10, 2]);
        let div = divergence_exact(&LinearScore::negative_identity(2), &x, 0.5).unwrap();
        for v in div {
            assert!((v + 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_map_divergence_is_trace() {
        let mut rng = RngState::new(2);
        let a: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let lin = LinearScore::new(3, a).unwrap();
        let x = rng.gaussian_sample(&[6, 3]);
        for v in divergence_exact(&lin, &x, 0.1).unwrap() {
            assert!((v - lin.trace()).abs() < 1e-8);
        }
    }

    #[test]
    fn hutchinson_agrees_with_exact_on_random_nets() {
        let mut rng = RngState::new(3);
        for seed in 0..4 {
            let net = ScoreNet::init(seed, Architecture::new(2, vec![32, 32], 8).unwrap(), SdeSpec::vp());
            let x = rng.gaussian_sample(&[20, 2]);
            let exact = divergence_exact(&net, &x, 0.4).unwrap();
            let (est, se) = divergence_hutchinson(&net, &x, 0.4, 64, &mut rng).unwrap();
            for i in 0..20 {
                assert!(
                    (est[i] - exact[i]).abs() <= 3.0 * se[i] + 1e-9,
                    "{} vs {} (se {})",
                    est[i],
                    exact[i],
                    se[i]
                );
            }
        }
    }

    #[test]
    fn exact_mode_stable_under_halving_step() {
        let net = ScoreNet::init(9, Architecture::new(2, vec![32, 32], 8).unwrap(), SdeSpec::vp());
        let mut rng = RngState::new(4);
        let x = rng.gaussian_sample(&[20, 2]);
        let t = 0.5;
        let coarse = divergence_exact(&net, &x, t).unwrap();
        // Same probes at half the step, computed directly.
        let fine: Vec<f64> = (0..20)
            .map(|i| {
                let row = x.row(i);
                let h = 0.5e-4 * (1.0 + row.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                (0..2)
                    .map(|j| {
                        let mut p = row.to_vec();
                        let mut m = row.to_vec();
                        p[j] += h;
                        m[j] -= h;
                        let sp = net.forward(&Tensor::vector(p), t).unwrap();
                        let sm = net.forward(&Tensor::vector(m), t).unwrap();
                        (sp.data()[j] - sm.data()[j]) / (2.0 * h)
                    })
                    .sum()
            })
            .collect();
        for (c, f) in coarse.iter().zip(&fine) {
            assert!((c - f).abs() <= 1e-3 * f.abs().max(1.0), "{c} vs {f}");
        }
    }
}
