//! Brute-force k-nearest-neighbour classifier over squared Euclidean
//! distance.

use super::{Example, ModelError};
use crate::dataset::ClassLabel;
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `n × dim`.
    pub points: Vec<f64>,
    pub labels: Vec<ClassLabel>,
}

pub fn knn_train(examples: &[Example], k: usize) -> Result<KnnModel, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if k == 0 || k > examples.len() {
        return Err(ModelError::KTooLarge {
            k,
            stored: examples.len(),
        });
    }
    let dim = examples[0].x.len();
    let mut points = Vec::with_capacity(dim * examples.len());
    for e in examples {
        if e.x.len() != dim {
            return Err(ModelError::ShapeMismatch(format!(
                "example of length {}, expected {dim}",
                e.x.len()
            )));
        }
        points.extend_from_slice(&e.x);
    }
    Ok(KnnModel {
        k,
        dim,
        points,
        labels: examples.iter().map(|e| e.label).collect(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KnnModel {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Majority vote of the `k` nearest stored points. Neighbours are
    /// ordered by `(distance, stored index)`; vote ties go to the smaller
    /// summed distance, then the lower class index.
    pub fn predict(&self, x: &[f64]) -> ClassLabel {
        let mut cand: Vec<(f64, usize)> = self
            .points
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, p)| (sq_dist(p, x), i))
            .collect();
        let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < cand.len() {
            cand.select_nth_unstable_by(self.k - 1, key);
            cand.truncate(self.k);
        }
        let mut votes = [0usize; 4];
        let mut sums = [0.0f64; 4];
        for &(d, i) in &cand {
            let c = self.labels[i].index();
            votes[c] += 1;
            sums[c] += d;
        }
        let best = (0..4)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(sums[a].total_cmp(&sums[b]))
                    .then(a.cmp(&b))
            })
            .unwrap_or(0);
        ClassLabel::from_index(best).unwrap_or_default()
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<ClassLabel> {
        par::map(xs, |x| self.predict(x))
    }
}
