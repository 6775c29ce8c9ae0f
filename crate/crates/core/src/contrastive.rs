//! SelfCon and SupCon losses plus vector-data augmentations.
//!
//! Both losses take a [`ViewBatch`] of `2K` unit vectors in which every source
//! sample contributes exactly two views. For anchor `i` the denominator runs
//! over every other view `c ≠ i`; SelfCon treats only the sibling view
//! `j(i)` as positive, SupCon treats every other view with the same label as
//! positive. Losses are averaged over anchors rather than summed so their
//! scale does not depend on the batch size.

use crate::error::{Error, Result};
use crate::models::BoundModel;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

use rand::Rng as _;

/// Parameters of the weak and strong augmentation families.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            weak_sigma: 0.1,
            strong_sigma: 0.3,
            mask_prob: 0.1,
            scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentSpec {
    /// No-op augmentation: zero jitter, no masking, unit scale.
    pub fn neutral() -> Self {
        Self {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let ok = self.weak_sigma >= 0.0
            && self.strong_sigma >= self.weak_sigma
            && (0.0..=1.0).contains(&self.mask_prob)
            && lo > 0.0
            && lo <= 1.0
            && hi >= 1.0;
        if !ok {
            return Err(Error::Parameter(format!("invalid augmentation spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    /// Gaussian jitter only. Used for label queries.
    Weak,
    /// Jitter, coordinate masking, and a per-row scale. Used for the
    /// gradient-bearing passes.
    Strong,
}

/// Returns a stochastic view of every row of `x`.
pub fn augment(x: &Tensor, spec: &AugmentSpec, strength: Strength, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let (n, d) = x.expect_matrix("augment")?;
    let mut out = x.clone();
    let sigma = match strength {
        Strength::Weak => spec.weak_sigma,
        Strength::Strong => spec.strong_sigma,
    };
    for i in 0..n {
        let row = out.row_mut(i);
        if sigma > 0.0 {
            for v in row.iter_mut() {
                *v += sigma * rng::normal(rng);
            }
        }
        if strength == Strength::Strong {
            if spec.mask_prob > 0.0 {
                let mut dropped: Vec<bool> = (0..d).map(|_| rng.random::<f64>() < spec.mask_prob).collect();
                // an all-zero row would have no direction to normalise
                if dropped.iter().all(|&m| m) {
                    dropped[rng.random_range(0..d)] = false;
                }
                for (v, m) in row.iter_mut().zip(dropped) {
                    if m {
                        *v = 0.0;
                    }
                }
            }
            let (lo, hi) = spec.scale_range;
            if lo != hi {
                let s = rng::uniform(rng, lo, hi);
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    debug_assert_eq!(out.shape(), [n, d]);
    Ok(out)
}

/// `2K` projected views with their source pairing and optional labels.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub z: Var,
    pub source_index: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    partner: Vec<usize>,
}

impl ViewBatch {
    /// Validates that each source id occurs exactly twice and that labels
    /// agree between the two views of one source.
    pub fn new(g: &Graph, z: Var, source_index: Vec<usize>, labels: Option<Vec<usize>>) -> Result<Self> {
        let (rows, _) = g.value(z).expect_matrix("ViewBatch")?;
        if source_index.len() != rows {
            return Err(Error::dim(
                "ViewBatch",
                format!("{rows} views but {} source ids", source_index.len()),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::dim("ViewBatch", format!("{rows} views but {} labels", l.len())));
            }
        }
        let mut first: std::collections::HashMap<usize, usize> = Default::default();
        let mut partner = vec![usize::MAX; rows];
        for (i, &s) in source_index.iter().enumerate() {
            match first.get(&s) {
                None => {
                    first.insert(s, i);
                }
                Some(&j) => {
                    if partner[j] != usize::MAX {
                        return Err(Error::Contract(format!("source {s} has more than two views")));
                    }
                    partner[j] = i;
                    partner[i] = j;
                    if let Some(l) = &labels {
                        if l[i] != l[j] {
                            return Err(Error::Contract(format!("views of source {s} disagree on label")));
                        }
                    }
                }
            }
        }
        if let Some(i) = partner.iter().position(|&p| p == usize::MAX) {
            return Err(Error::Contract(format!("view {i} has no sibling view")));
        }
        Ok(Self {
            z,
            source_index,
            labels,
            partner,
        })
    }

    /// Number of source samples `K`.
    pub fn num_sources(&self) -> usize {
        self.partner.len() / 2
    }

    /// Index of the other view of the same source, `j(i)`.
    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `z zᵀ / τ`.
fn similarity(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    let zt = g.transpose(z)?;
    let s = g.matmul(z, zt)?;
    Ok(g.scale(s, 1.0 / tau))
}

/// Self-supervised contrastive loss, averaged over the `2K` anchors.
pub fn self_con_loss(g: &mut Graph, v: &ViewBatch, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if v.num_sources() < 2 {
        return Err(Error::Degenerate(format!(
            "SelfCon needs at least two sources, got {}",
            v.num_sources()
        )));
    }
    let positives: Vec<Vec<usize>> = (0..v.partner.len()).map(|i| vec![v.partner(i)]).collect();
    let sim = similarity(g, v.z, tau)?;
    g.contrastive_nll(sim, &positives)
}

/// Positive sets `S(i) = {s ≠ i : l_s = l_i}`.
pub fn supervised_positives(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| (0..labels.len()).filter(|&s| s != i && labels[s] == labels[i]).collect())
        .collect()
}

/// Supervised contrastive loss. Anchors whose positive set is empty are
/// skipped and the mean is taken over the remaining anchors.
pub fn sup_con_loss(g: &mut Graph, v: &ViewBatch, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let labels = v
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("SupCon needs labels".into()))?;
    let positives = supervised_positives(labels);
    let sim = similarity(g, v.z, tau)?;
    g.contrastive_nll(sim, &positives)
}

/// Two independent augmentations of every row of `x`, interleaved as
/// `[a₀, b₀, a₁, b₁, …]` and pushed through the projection head.
pub fn make_view_batch(
    g: &mut Graph,
    model: &BoundModel,
    x: &Tensor,
    labels: Option<&[usize]>,
    spec: &AugmentSpec,
    strength: Strength,
    rng: &mut Rng,
) -> Result<ViewBatch> {
    let (n, _) = x.expect_matrix("make_view_batch")?;
    if n == 0 {
        return Err(Error::Degenerate("cannot build views of an empty batch".into()));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::dim("make_view_batch", format!("{n} rows but {} labels", l.len())));
        }
    }
    let a = augment(x, spec, strength, rng)?;
    let b = augment(x, spec, strength, rng)?;
    let mut order = Vec::with_capacity(2 * n);
    for i in 0..n {
        order.push(i);
        order.push(n + i);
    }
    let stacked = Tensor::concat_rows(&[&a, &b])?.select_rows(&order);
    let xv = g.constant(stacked);
    let r = model.features(g, xv)?;
    let z = model.projection(g, r)?;
    let source_index: Vec<usize> = (0..n).flat_map(|i| [i, i]).collect();
    let view_labels = labels.map(|l| l.iter().flat_map(|&c| [c, c]).collect());
    ViewBatch::new(g, z, source_index, view_labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ModelTriple, Trainable};

    fn batch(g: &mut Graph, rows: &[Vec<f64>], labels: Option<Vec<usize>>) -> ViewBatch {
        let z = g.constant(Tensor::from_rows(rows));
        let src = (0..rows.len() / 2).flat_map(|i| [i, i]).collect();
        ViewBatch::new(g, z, src, labels).unwrap()
    }

    fn orthonormal4() -> Vec<Vec<f64>> {
        (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn orthonormal_views_give_log3() {
        for tau in [0.07, 0.5, 1.0] {
            let mut g = Graph::new();
            let v = batch(&mut g, &orthonormal4(), Some(vec![0, 0, 0, 0]));
            let l = self_con_loss(&mut g, &v, tau).unwrap();
            assert!((g.scalar_value(l) - 3f64.ln()).abs() < 1e-12);
            let s = sup_con_loss(&mut g, &v, tau).unwrap();
            assert!((g.scalar_value(s) - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_positive_orthogonal_negatives() {
        // e1, e1, e2, e2 at τ = 0.5: each anchor sees e² against e² + 2.
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let mut g = Graph::new();
        let v = batch(&mut g, &rows, None);
        let l = self_con_loss(&mut g, &v, 0.5).unwrap();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 2.0)).ln();
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);
        assert!((expected - 0.2395).abs() < 1e-3);
    }

    #[test]
    fn degenerate_inputs() {
        let mut g = Graph::new();
        let v = batch(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]], None);
        assert!(matches!(self_con_loss(&mut g, &v, 0.5), Err(Error::Degenerate(_))));
        let v = batch(&mut g, &orthonormal4(), None);
        assert!(matches!(self_con_loss(&mut g, &v, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(sup_con_loss(&mut g, &v, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn view_batch_rejects_bad_pairing() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&orthonormal4()));
        assert!(ViewBatch::new(&g, z, vec![0, 0, 0, 1], None).is_err());
        assert!(ViewBatch::new(&g, z, vec![0, 1, 2, 3], None).is_err());
        assert!(ViewBatch::new(&g, z, vec![0, 0, 1, 1], Some(vec![0, 1, 2, 2])).is_err());
        assert!(ViewBatch::new(&g, z, vec![0, 1, 0, 1], None).is_ok());
    }

    #[test]
    fn neutral_augmentation_is_identity() {
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 4.0]]);
        let mut r = rng::seeded(1);
        for s in [Strength::Weak, Strength::Strong] {
            assert_eq!(augment(&x, &AugmentSpec::neutral(), s, &mut r).unwrap(), x);
        }
    }

    #[test]
    fn augmentation_is_seeded_and_stochastic() {
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 4.0]]);
        let spec = AugmentSpec::default();
        let a = augment(&x, &spec, Strength::Strong, &mut rng::seeded(5)).unwrap();
        let b = augment(&x, &spec, Strength::Strong, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        let mut r = rng::seeded(5);
        let c = augment(&x, &spec, Strength::Strong, &mut r).unwrap();
        let d = augment(&x, &spec, Strength::Strong, &mut r).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = AugmentSpec::default();
        s.strong_sigma = 0.01;
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::default();
        s.scale_range = (1.1, 1.2);
        assert!(s.validate().is_err());
    }

    #[test]
    fn view_batch_from_model() {
        let m = ModelTriple::new(Architecture::default_for(3, 2), 2).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0], vec![0.2, 0.2, 0.9]]);
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::NONE);
        let v = make_view_batch(&mut g, &b, &x, Some(&[0, 1, 0]), &AugmentSpec::neutral(), Strength::Strong, &mut rng::seeded(0))
            .unwrap();
        let z = g.value(v.z);
        assert_eq!(z.rows(), 6);
        for k in 0..3 {
            assert_eq!(v.source_index[2 * k], v.source_index[2 * k + 1]);
            assert_eq!(z.row(2 * k), z.row(2 * k + 1));
        }
        assert_eq!(v.labels.as_deref(), Some(&[0, 0, 1, 1, 0, 0][..]));
    }
}
