use crate::error::{MsgmError, Result};
use crate::numcore::Tensor;
use crate::scorenet::ScoreModel;

/// Axis-aligned evaluation rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn square(half: f64) -> Self {
        Rect {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }
}

impl Default for Rect {
    fn default() -> Self {
        Rect::square(5.0)
    }
}

/// Score vectors on a regular 2D lattice. Node `(ix, iy)` is stored at
/// index `iy·nx + ix`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub t: f64,
    pub vectors: Tensor,
}

impl ScoreField {
    pub fn node(&self, i: usize) -> (f64, f64) {
        let nx = self.xs.len();
        (self.xs[i % nx], self.ys[i / nx])
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluates `model` at time `t` on a `resolution × resolution` lattice.
pub fn score_field(model: &(impl ScoreModel + ?Sized), t: f64, rect: Rect, resolution: usize) -> Result<ScoreField> {
    if resolution < 2 {
        return Err(MsgmError::invalid("score field resolution must be at least 2"));
    }
    if model.dim() != 2 {
        return Err(MsgmError::invalid("score fields are defined for 2D models only"));
    }
    if !(rect.x_min < rect.x_max && rect.y_min < rect.y_max) {
        return Err(MsgmError::invalid("score field rectangle is empty"));
    }
    let xs = linspace(rect.x_min, rect.x_max, resolution);
    let ys = linspace(rect.y_min, rect.y_max, resolution);
    let mut pts = Vec::with_capacity(2 * resolution * resolution);
    for &y in &ys {
        for &x in &xs {
            pts.push(x);
            pts.push(y);
        }
    }
    let vectors = model.score(&Tensor::matrix(resolution * resolution, 2, pts), t)?;
    if !vectors.is_finite() {
        return Err(MsgmError::numerical("score field contains non-finite vectors"));
    }
    Ok(ScoreField { xs, ys, t, vectors })
}

/// Region of the plane over which fields are compared.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    All,
    Disk { center: [f64; 2], radius: f64 },
    Union(Vec<Region>),
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::All => true,
            Region::Disk { center, radius } => (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius,
            Region::Union(parts) => parts.iter().any(|r| r.contains(x, y)),
        }
    }
}

/// Cosine agreement between two fields over a region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub mean_cosine: f64,
    pub fraction_negative: f64,
    /// Nodes that entered the statistics.
    pub nodes: usize,
    /// Nodes inside the region skipped because either vector was zero.
    pub zero_excluded: usize,
}

pub fn field_alignment(a: &ScoreField, b: &ScoreField, region: &Region) -> Result<Alignment> {
    if a.xs != b.xs || a.ys != b.ys || a.t != b.t {
        return Err(MsgmError::invalid("score fields use different lattices or times"));
    }
    let (mut sum, mut neg, mut nodes, mut zero) = (0.0, 0usize, 0usize, 0usize);
    for i in 0..a.len() {
        let (x, y) = a.node(i);
        if !region.contains(x, y) {
            continue;
        }
        let (u, v) = (a.vectors.row(i), b.vectors.row(i));
        let nu = u.iter().map(|c| c * c).sum::<f64>().sqrt();
        let nv = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            zero += 1;
            continue;
        }
        let cos = u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() / (nu * nv);
        sum += cos;
        nodes += 1;
        if cos < 0.0 {
            neg += 1;
        }
    }
    if nodes == 0 {
        return Err(MsgmError::invalid("region contains no comparable lattice nodes"));
    }
    Ok(Alignment {
        mean_cosine: sum / nodes as f64,
        fraction_negative: neg as f64 / nodes as f64,
        nodes,
        zero_excluded: zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::{AnalyticScore, Component, MixtureSpec};
    use crate::numcore::RngState;
    use crate::sde::SdeSpec;

    fn single_gaussian() -> AnalyticScore {
        let mix = MixtureSpec::new(vec![Component {
            weight: 1.0,
            mean: vec![1.0, -0.5],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            nsfg: false,
        }])
        .unwrap();
        AnalyticScore::new(mix, SdeSpec::ve())
    }

    #[test]
    fn single_gaussian_field_points_to_mean() {
        let f = score_field(&single_gaussian(), 0.08, Rect::default(), 25).unwrap();
        for i in 0..f.len() {
            let (x, y) = f.node(i);
            let v = f.vectors.row(i);
            let to_mean = [1.0 - x, -0.5 - y];
            let cross = v[0] * to_mean[1] - v[1] * to_mean[0];
            let dot = v[0] * to_mean[0] + v[1] * to_mean[1];
            assert!(cross.abs() < 1e-9 && dot >= 0.0);
        }
    }

    #[test]
    fn resolution_below_two_rejected() {
        assert!(score_field(&single_gaussian(), 0.1, Rect::default(), 1).is_err());
    }

    fn field_with(vectors: Vec<f64>) -> ScoreField {
        ScoreField {
            xs: vec![0.0, 1.0, 2.0],
            ys: vec![0.0, 1.0],
            t: 0.1,
            vectors: Tensor::matrix(6, 2, vectors),
        }
    }

    #[test]
    fn identical_and_opposite_fields() {
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        let a = field_with(v.clone());
        let same = field_alignment(&a, &a, &Region::All).unwrap();
        assert!((same.mean_cosine - 1.0).abs() < 1e-12);
        assert_eq!(same.fraction_negative, 0.0);
        let b = field_with(v.iter().map(|x| -x).collect());
        let opp = field_alignment(&a, &b, &Region::All).unwrap();
        assert!((opp.mean_cosine + 1.0).abs() < 1e-12);
        assert_eq!(opp.fraction_negative, 1.0);
    }

    #[test]
    fn zero_vectors_are_excluded_and_counted() {
        let mut v = vec![1.0; 12];
        v[0] = 0.0;
        v[1] = 0.0;
        let a = field_with(v);
        let r = field_alignment(&a, &a, &Region::All).unwrap();
        assert_eq!(r.zero_excluded, 1);
        assert_eq!(r.nodes, 5);
    }

    #[test]
    fn lattice_mismatch_rejected() {
        let a = field_with(vec![1.0; 12]);
        let mut b = a.clone();
        b.t = 0.2;
        assert!(field_alignment(&a, &b, &Region::All).is_err());
    }

    #[test]
    fn independent_random_fields_are_uncorrelated() {
        let mut rng = RngState::new(12);
        let n = 40 * 40;
        let mk = |rng: &mut RngState| ScoreField {
            xs: linspace(0.0, 1.0, 40),
            ys: linspace(0.0, 1.0, 40),
            t: 0.1,
            vectors: rng.gaussian_sample(&[n, 2]),
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let r = field_alignment(&a, &b, &Region::All).unwrap();
        // Cosine of isotropic 2D directions has variance 1/2.
        let se = (0.5 / r.nodes as f64).sqrt();
        assert!(r.mean_cosine.abs() < 3.0 * se, "{}", r.mean_cosine);
    }

    #[test]
    fn region_membership() {
        let r = Region::Union(vec![
            Region::Disk {
                center: [2.0, 2.0],
                radius: 1.0,
            },
            Region::Disk {
                center: [-2.0, -2.0],
                radius: 1.0,
            },
        ]);
        assert!(r.contains(2.5, 2.5));
        assert!(r.contains(-2.0, -1.0));
        assert!(!r.contains(0.0, 0.0));
    }
}
