//! Accuracy, partition quality, the augmentation-consistency estimator, and
//! 2-D embedding export.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::contrastive::{augment, AugmentSpec, Strength};
use crate::error::{Error, Result};
use crate::models::ModelTriple;
use crate::report::{svg_scatter, ScatterPoint};
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor};

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = scores.expect_matrix("accuracy")?;
    if n != labels.len() {
        return Err(Error::dim("accuracy", format!("{n} predictions, {} labels", labels.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let hits = (0..n).filter(|&i| argmax(scores.row(i)) == labels[i]).count();
    Ok(hits as f64 / n as f64)
}

/// Accuracy of `predictor` (any map from inputs to per-class scores).
pub fn test_accuracy<F>(predictor: F, test_x: &Tensor, test_labels: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    accuracy(&predictor(test_x)?, test_labels)
}

/// Area under the ROC curve of `scores` for the `positive` class, computed
/// with the Mann-Whitney rank statistic (ties get average rank). Returns
/// 0.5 when either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mean rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionQuality {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Scores clean probabilities against the noise mask. "Positive" means
/// clean; precision and recall refer to the thresholded clean set.
pub fn partition_quality(clean_prob: &[f64], noisy_mask: &[bool], threshold: f64) -> PartitionQuality {
    let is_clean: Vec<bool> = noisy_mask.iter().map(|&f| !f).collect();
    let selected: Vec<bool> = clean_prob.iter().map(|&p| p >= threshold).collect();
    let tp = selected.iter().zip(&is_clean).filter(|(&s, &c)| s && c).count() as f64;
    let n_sel = selected.iter().filter(|&&s| s).count() as f64;
    let n_clean = is_clean.iter().filter(|&&c| c).count() as f64;
    PartitionQuality {
        auc: auc(clean_prob, &is_clean),
        precision: if n_sel > 0.0 { tp / n_sel } else { 0.0 },
        recall: if n_clean > 0.0 { tp / n_clean } else { 1.0 },
    }
}

/// Sampled estimate of `E_x max_{x'} 1[G(F(x')) ≠ G(F(x))]` where the
/// neighbours `x'` are `n_neighbors` weak augmentations of `x`.
pub fn consistency_metric(m: &ModelTriple, x: &Tensor, spec: &AugmentSpec, n_neighbors: usize, rng: &mut Rng) -> Result<f64> {
    if n_neighbors == 0 {
        return Err(Error::Parameter("consistency_metric needs at least one neighbour".into()));
    }
    let (n, _) = x.expect_matrix("consistency_metric")?;
    if n == 0 {
        return Ok(0.0);
    }
    let base = m.forward_logits(x)?.argmax_rows();
    let mut changed = vec![false; n];
    for _ in 0..n_neighbors {
        let xa = augment(x, spec, Strength::Weak, rng)?;
        let pred = m.forward_logits(&xa)?.argmax_rows();
        for i in 0..n {
            changed[i] |= pred[i] != base[i];
        }
    }
    Ok(changed.iter().filter(|&&c| c).count() as f64 / n as f64)
}

/// Top-2 principal components.
#[derive(Clone, Debug)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit-norm directions.
    pub components: [Vec<f64>; 2],
    pub projected: Vec<[f64; 2]>,
}

impl Pca2 {
    /// Back-projection of the 2-D coordinates into the original space.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.projected
            .iter()
            .map(|p| {
                self.mean
                    .iter()
                    .enumerate()
                    .map(|(j, m)| m + p[0] * self.components[0][j] + p[1] * self.components[1][j])
                    .collect()
            })
            .collect()
    }
}

/// PCA via the eigendecomposition of the sample covariance. Component signs
/// are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(data: &Tensor) -> Result<Pca2> {
    let (n, d) = data.expect_matrix("pca_2d")?;
    if n < 3 {
        return Err(Error::Degenerate(format!("PCA needs at least 3 samples, got {n}")));
    }
    if d < 2 {
        return Err(Error::dim("pca_2d", format!("need at least 2 columns, got {d}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| data.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let component = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [component(0), component(1)];
    let projected = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Ok(Pca2 {
        mean,
        components,
        projected,
    })
}

/// Scatter plot of the top-2 principal components of `F(x)`, one colour per
/// class. Returns the number of points drawn.
pub fn export_embeddings_2d(m: &ModelTriple, x: &Tensor, labels: &[usize], out_path: &Path) -> Result<usize> {
    if x.rows() < 3 {
        return Err(Error::Degenerate("embedding export needs at least 3 samples".into()));
    }
    if labels.len() != x.rows() {
        return Err(Error::dim("export_embeddings_2d", "labels and rows differ"));
    }
    let features = m.forward_features(x)?;
    let pca = pca_2d(&features)?;
    let points: Vec<ScatterPoint> = pca
        .projected
        .iter()
        .zip(labels)
        .map(|(p, &l)| ScatterPoint { x: p[0], y: p[1], class: l })
        .collect();
    let svg = svg_scatter("Representation PCA", &points);
    std::fs::write(out_path, svg)?;
    Ok(points.len())
}
