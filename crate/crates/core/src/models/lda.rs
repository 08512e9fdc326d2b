//! Linear discriminant analysis with diagonal shrinkage of the pooled
//! within-class covariance.
//!
//! `score_c(x) = xᵀΣ⁻¹μ_c − ½ μ_cᵀΣ⁻¹μ_c + ln π_c`, with
//! `Σ = (1 − λ)·S + λ·diag(S)` and `S` the pooled within-class covariance.

use nalgebra::{DMatrix, DVector};

use super::{Example, ModelError};
use crate::dataset::ClassLabel;

pub const DEFAULT_SHRINKAGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub dim: usize,
    pub shrinkage: f64,
    /// Classes present in training, ascending.
    pub classes: Vec<ClassLabel>,
    pub means: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
    /// `Σ⁻¹μ_c` per class.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

pub fn lda_fit(examples: &[Example], shrinkage: f64) -> Result<LdaModel, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let dim = examples[0].x.len();
    if examples.iter().any(|e| e.x.len() != dim) {
        return Err(ModelError::ShapeMismatch("ragged examples".into()));
    }
    let mut groups: [Vec<&Example>; 4] = Default::default();
    for e in examples {
        groups[e.label.index()].push(e);
    }
    let present: Vec<usize> = (0..4).filter(|&c| !groups[c].is_empty()).collect();
    if present.len() < 2 || present.iter().any(|&c| groups[c].len() < 2) {
        return Err(ModelError::TooFewClasses);
    }
    let n = examples.len();

    let means: Vec<DVector<f64>> = present
        .iter()
        .map(|&c| {
            let mut m = DVector::zeros(dim);
            for e in &groups[c] {
                m += DVector::from_column_slice(&e.x);
            }
            m / groups[c].len() as f64
        })
        .collect();

    // Centred data matrix, one row per example.
    let mut centred = DMatrix::<f64>::zeros(n, dim);
    let mut row = 0;
    for (ci, &c) in present.iter().enumerate() {
        for e in &groups[c] {
            for j in 0..dim {
                centred[(row, j)] = e.x[j] - means[ci][j];
            }
            row += 1;
        }
    }
    let dof = (n - present.len()) as f64;
    let pooled = centred.tr_mul(&centred) / dof;
    let mut sigma = pooled.clone() * (1.0 - shrinkage);
    for j in 0..dim {
        sigma[(j, j)] += shrinkage * pooled[(j, j)];
    }
    let chol = sigma.cholesky().ok_or(ModelError::SingularCovariance)?;

    let mut weights = Vec::with_capacity(present.len());
    let mut biases = Vec::with_capacity(present.len());
    let mut priors = Vec::with_capacity(present.len());
    for (ci, &c) in present.iter().enumerate() {
        let w = chol.solve(&means[ci]);
        let prior = groups[c].len() as f64 / n as f64;
        biases.push(-0.5 * means[ci].dot(&w) + prior.ln());
        priors.push(prior);
        weights.push(w.as_slice().to_vec());
    }
    if weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ModelError::SingularCovariance);
    }
    Ok(LdaModel {
        dim,
        shrinkage,
        classes: present
            .iter()
            .map(|&c| ClassLabel::from_index(c).unwrap())
            .collect(),
        means: means.iter().map(|m| m.as_slice().to_vec()).collect(),
        priors,
        weights,
        biases,
    })
}

impl LdaModel {
    /// Discriminant score per trained class, in `classes` order.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }

    /// Arg-max class; ties to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> ClassLabel {
        let s = self.scores(x);
        let mut best = 0;
        for i in 1..s.len() {
            if s[i] > s[best] {
                best = i;
            }
        }
        self.classes[best]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(rng: &mut impl Rng) -> f64 {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn errors() {
        let one_class: Vec<Example> = (0..5)
            .map(|i| Example {
                x: vec![i as f64],
                label: ClassLabel::Left,
                t: 0.0,
            })
            .collect();
        assert!(matches!(lda_fit(&one_class, 1e-3), Err(ModelError::TooFewClasses)));
        assert!(matches!(lda_fit(&[], 1e-3), Err(ModelError::EmptyDataset)));
        // Constant feature: zero variance even after shrinkage.
        let flat: Vec<Example> = (0..8)
            .map(|i| Example {
                x: vec![1.0, i as f64],
                label: if i % 2 == 0 { ClassLabel::None } else { ClassLabel::Right },
                t: 0.0,
            })
            .collect();
        assert!(matches!(lda_fit(&flat, 1e-3), Err(ModelError::SingularCovariance)));
    }

    #[test]
    fn equal_means_follow_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for (label, n) in [(ClassLabel::Left, 30), (ClassLabel::Right, 10)] {
            for _ in 0..n {
                data.push(Example {
                    x: vec![gauss(&mut rng), gauss(&mut rng)],
                    label,
                    t: 0.0,
                });
            }
        }
        // Force identical class means.
        for label in [ClassLabel::Left, ClassLabel::Right] {
            let idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == label).collect();
            for d in 0..2 {
                let m = idx.iter().map(|&i| data[i].x[d]).sum::<f64>() / idx.len() as f64;
                for &i in &idx {
                    data[i].x[d] -= m;
                }
            }
        }
        let model = lda_fit(&data, 1e-3).unwrap();
        let s = model.scores(&[0.3, -0.7]);
        let diff = s[0] - s[1];
        assert!((diff - (0.75f64 / 0.25).ln()).abs() < 1e-9);
        assert_eq!(model.predict(&[5.0, 5.0]), ClassLabel::Left);
    }
}
