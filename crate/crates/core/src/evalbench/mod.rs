//! Ground-truth oracles and metrics: the analytic mixture, Bayes component
//! assignment, the unlearning ratio and score-field comparison.

mod field;
mod mixture;

pub use field::{field_alignment, score_field, Alignment, Rect, Region, ScoreField};
pub use mixture::{log_sum_exp, AnalyticScore, Component, MixtureSpec, Split};

use crate::error::{MsgmError, Result};
use crate::numcore::Tensor;

/// Default posterior mass above which a sample counts as NSFG content.
pub const DEFAULT_UR_THRESHOLD: f64 = 0.5;

/// Fraction of samples whose posterior mass on NSFG components exceeds
/// `threshold`.
pub fn unlearning_ratio(mix: &MixtureSpec, samples: &Tensor, threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(MsgmError::invalid("unlearning ratio needs at least one sample"));
    }
    if samples.cols() != mix.dim() {
        return Err(MsgmError::invalid("sample dimension does not match the mixture"));
    }
    let hits = samples.row_iter().filter(|x| mix.nsfg_mass(x) > threshold).count();
    Ok(hits as f64 / samples.rows() as f64)
}

/// Fraction of rows whose Bayes component is flagged NSFG.
pub fn nsfg_assignment_rate(mix: &MixtureSpec, points: &Tensor) -> f64 {
    let hits = points
        .row_iter()
        .filter(|x| mix.is_nsfg(mix.bayes_component(x).0))
        .count();
    hits as f64 / points.rows().max(1) as f64
}

/// Monte-Carlo-free entropy `−∫ p log p` of a 2D mixture by midpoint
/// quadrature on `[-half, half]²`.
pub fn entropy_by_quadrature(mix: &MixtureSpec, half: f64, n: usize) -> f64 {
    let h = 2.0 * half / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h];
            let lp = mix.logpdf(&x);
            total -= lp.exp() * lp * h * h;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::Split;
    use crate::numcore::RngState;

    #[test]
    fn ur_of_true_mixture_matches_nsfg_weight() {
        let mix = MixtureSpec::toy();
        let x = mix.sample(10_000, &mut RngState::new(21), Split::All).unwrap();
        let ur = unlearning_ratio(&mix, &x, DEFAULT_UR_THRESHOLD).unwrap();
        // Posterior-threshold assignment of the true mixture: the NSFG mass
        // leaking into SFG regions roughly balances the reverse leak.
        assert!((ur - 0.2).abs() < 0.02, "{ur}");
    }

    #[test]
    fn ur_extremes() {
        let mix = MixtureSpec::toy();
        let centre = Tensor::matrix(5, 2, vec![0.0; 10]);
        assert_eq!(unlearning_ratio(&mix, &centre, 0.5).unwrap(), 1.0);
        let corner = Tensor::matrix(5, 2, vec![2.0; 10]);
        assert_eq!(unlearning_ratio(&mix, &corner, 0.5).unwrap(), 0.0);
        assert!(unlearning_ratio(&mix, &Tensor::zeros(&[0, 2]), 0.5).is_err());
    }

    #[test]
    fn ur_invariant_under_permutation() {
        let mix = MixtureSpec::toy();
        let x = mix.sample(500, &mut RngState::new(3), Split::All).unwrap();
        let mut rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.rotate_left(123);
        let y = Tensor::from_rows(&rows).unwrap();
        assert_eq!(
            unlearning_ratio(&mix, &x, 0.5).unwrap(),
            unlearning_ratio(&mix, &y, 0.5).unwrap()
        );
    }

    #[test]
    fn quadrature_entropy_of_standard_normal() {
        let mix = MixtureSpec::new(vec![Component {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            nsfg: false,
        }])
        .unwrap();
        let h = entropy_by_quadrature(&mix, 8.0, 400);
        assert!((h - (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-6);
    }
}
