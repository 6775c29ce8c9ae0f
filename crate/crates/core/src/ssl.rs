//! MixMatch-style semi-supervised module with DivideMix co-guessing and
//! co-refinement.
//!
//! Pipeline for one step: refine labels of the labeled batch
//! ([`co_refine`]), guess labels for the unlabeled batch ([`guess_labels`]),
//! mix both sets with a shared Beta-drawn weight ([`SemiBatch::mix`]), then
//! score the mixed batch with [`semi_loss`]:
//!
//! `L = L_x + λ_u(t)·L_u + λ_r·L_reg`

use rand_distr::{Beta, Distribution};

use crate::contrastive::{augment, AugmentSpec, Strength};
use crate::error::{Error, Result};
use crate::models::{BoundModel, ModelTriple};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

/// Loss applied between predictions and guessed targets on unlabeled rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnlabeledLoss {
    /// Mean squared error between softmax output and target.
    L2,
    /// Soft-target cross-entropy.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslHyper {
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub sharpen_t: f64,
    pub mixup_alpha: f64,
    pub num_augs: usize,
    /// Epochs over which `λ_u` ramps linearly from zero. Zero disables the ramp.
    pub ramp_epochs: usize,
    pub unlabeled_loss: UnlabeledLoss,
}

impl Default for SslHyper {
    fn default() -> Self {
        Self {
            lambda_u: 25.0,
            lambda_r: 1.0,
            sharpen_t: 0.5,
            mixup_alpha: 4.0,
            num_augs: 2,
            ramp_epochs: 16,
            unlabeled_loss: UnlabeledLoss::L2,
        }
    }
}

impl SslHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_u >= 0.0
            && self.lambda_r >= 0.0
            && self.sharpen_t > 0.0
            && self.sharpen_t <= 1.0
            && self.mixup_alpha > 0.0
            && self.num_augs >= 1;
        if !ok {
            return Err(Error::Parameter(format!("invalid SSL hyperparameters {self:?}")));
        }
        Ok(())
    }

    /// `λ_u` after the linear ramp, at fractional epoch `epoch_frac`.
    pub fn ramped_lambda_u(&self, epoch_frac: f64) -> f64 {
        if self.ramp_epochs == 0 {
            return self.lambda_u;
        }
        self.lambda_u * (epoch_frac / self.ramp_epochs as f64).clamp(0.0, 1.0)
    }
}

/// Raises each row to the power `1/T` and renormalises.
pub fn sharpen(p: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("sharpening temperature must be positive, got {t}")));
    }
    let (n, _) = p.expect_matrix("sharpen")?;
    let inv = 1.0 / t;
    let mut out = p.map(|v| v.powf(inv));
    for i in 0..n {
        let row = out.row_mut(i);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Degenerate(format!("row {i} has no probability mass")));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Mean softmax output of `net` over `m` weak augmentations of `x`.
pub fn average_prediction(net: &ModelTriple, x: &Tensor, spec: &AugmentSpec, m: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut acc = Tensor::zeros(&[x.rows(), net.arch().num_classes]);
    for _ in 0..m {
        let xa = augment(x, spec, Strength::Weak, rng)?;
        let p = net.predict_proba(&xa)?;
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
    }
    Ok(acc.map(|v| v / m as f64))
}

/// Co-guessing: averages every network's softmax over `M` weak augmentations
/// (shared across networks), then sharpens.
///
/// Each augmentation is scored by all networks before moving on, so with two
/// networks the result does not depend on their order.
pub fn guess_labels(nets: &[&ModelTriple], u: &Tensor, spec: &AugmentSpec, hyper: &SslHyper, rng: &mut Rng) -> Result<Tensor> {
    let (b, _) = u.expect_matrix("guess_labels")?;
    if b == 0 {
        return Err(Error::Degenerate("guess_labels on an empty batch".into()));
    }
    let Some(first) = nets.first() else {
        return Err(Error::Parameter("guess_labels needs at least one network".into()));
    };
    let c = first.arch().num_classes;
    let mut acc = Tensor::zeros(&[b, c]);
    for _ in 0..hyper.num_augs {
        let ua = augment(u, spec, Strength::Weak, rng)?;
        let preds = nets.iter().map(|n| n.predict_proba(&ua)).collect::<Result<Vec<_>>>()?;
        for j in 0..b * c {
            let s: f64 = preds.iter().map(|p| p.data()[j]).sum();
            acc.data_mut()[j] += s;
        }
    }
    let denom = (hyper.num_augs * nets.len()) as f64;
    sharpen(&acc.map(|v| v / denom), hyper.sharpen_t)
}

/// Co-refinement: `sharpen(w·y + (1−w)·p)` with `w` the clean probability.
pub fn co_refine(clean_prob: &[f64], noisy_one_hot: &Tensor, own_pred: &Tensor, t: f64) -> Result<Tensor> {
    let (b, c) = noisy_one_hot.expect_matrix("co_refine")?;
    if own_pred.shape() != [b, c] || clean_prob.len() != b {
        return Err(Error::dim(
            "co_refine",
            format!("labels [{b}x{c}], preds {:?}, {} weights", own_pred.shape(), clean_prob.len()),
        ));
    }
    if let Some(w) = clean_prob.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Parameter(format!("clean probability {w} outside [0,1]")));
    }
    let mut out = noisy_one_hot.clone();
    for (i, &w) in clean_prob.iter().enumerate() {
        let p = own_pred.row(i);
        for (v, &q) in out.row_mut(i).iter_mut().zip(p) {
            *v = w * *v + (1.0 - w) * q;
        }
    }
    sharpen(&out, t)
}

/// Draws `λ ~ Beta(α, α)` and returns `max(λ, 1 − λ)`.
pub fn sample_mix_weight(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Parameter(format!("mixup alpha {alpha}: {e}")))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// Convex combination with a fixed weight on the first operand.
pub fn mixup_with(x1: &Tensor, p1: &Tensor, x2: &Tensor, p2: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    if x1.shape() != x2.shape() || p1.shape() != p2.shape() || x1.rows() != p1.rows() {
        return Err(Error::dim("mixup", "operand shapes disagree"));
    }
    let mix = |a: &Tensor, b: &Tensor| {
        let data = a.data().iter().zip(b.data()).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    Ok((mix(x1, x2)?, mix(p1, p2)?))
}

/// MixUp with `λ' = max(λ, 1 − λ)`, `λ ~ Beta(α, α)`.
pub fn mixup(x1: &Tensor, p1: &Tensor, x2: &Tensor, p2: &Tensor, alpha: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let l = sample_mix_weight(alpha, rng)?;
    mixup_with(x1, p1, x2, p2, l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    Unlabeled,
}

/// Mixed inputs and targets ready for [`semi_loss`].
#[derive(Clone, Debug)]
pub struct SemiBatch {
    pub mixed_x: Tensor,
    pub mixed_targets: Tensor,
    pub origin: Vec<Origin>,
}

impl SemiBatch {
    pub fn new(mixed_x: Tensor, mixed_targets: Tensor, origin: Vec<Origin>) -> Result<Self> {
        let (n, _) = mixed_x.expect_matrix("SemiBatch")?;
        let (m, _) = mixed_targets.expect_matrix("SemiBatch")?;
        if n != m || origin.len() != n {
            return Err(Error::dim("SemiBatch", format!("{n} inputs, {m} targets, {} origins", origin.len())));
        }
        for i in 0..m {
            let row = mixed_targets.row(i);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(format!("target row {i} is not a distribution")));
            }
        }
        Ok(Self {
            mixed_x,
            mixed_targets,
            origin,
        })
    }

    /// Concatenates labeled and unlabeled rows and mixes every row with a
    /// random partner from the whole pool, using one `λ'` for the batch.
    /// Labeled rows keep their position at the front.
    pub fn mix(
        labeled_x: &Tensor,
        labeled_p: &Tensor,
        unlabeled_x: Option<(&Tensor, &Tensor)>,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (all_x, all_p, n_l) = match unlabeled_x {
            Some((ux, up)) => (
                Tensor::concat_rows(&[labeled_x, ux])?,
                Tensor::concat_rows(&[labeled_p, up])?,
                labeled_x.rows(),
            ),
            None => (labeled_x.clone(), labeled_p.clone(), labeled_x.rows()),
        };
        let n = all_x.rows();
        let lambda = sample_mix_weight(alpha, rng)?;
        let perm = rng::permutation(rng, n);
        let (mx, mp) = mixup_with(&all_x, &all_p, &all_x.select_rows(&perm), &all_p.select_rows(&perm), lambda)?;
        let origin = (0..n)
            .map(|i| if i < n_l { Origin::Labeled } else { Origin::Unlabeled })
            .collect();
        Self::new(mx, mp, origin)
    }

    fn rows_of(&self, o: Origin) -> Vec<usize> {
        self.origin.iter().enumerate().filter(|(_, &x)| x == o).map(|(i, _)| i).collect()
    }
}

/// Graph nodes of the semi-supervised objective.
#[derive(Clone, Copy, Debug)]
pub struct SemiLoss {
    pub lx: Var,
    pub lu: Option<Var>,
    pub lreg: Var,
    pub total: Var,
    pub lambda_u: f64,
}

/// `L_x + λ_u(t)·L_u + λ_r·L_reg` on a mixed batch.
///
/// `L_reg = Σ_c π_c log(π_c / p̄_c)` with uniform prior `π` and `p̄` the mean
/// softmax over every row of the batch.
pub fn semi_loss(g: &mut Graph, model: &BoundModel, batch: &SemiBatch, hyper: &SslHyper, epoch_frac: f64) -> Result<SemiLoss> {
    let lab = batch.rows_of(Origin::Labeled);
    if lab.is_empty() {
        return Err(Error::Degenerate("semi_loss needs at least one labeled row".into()));
    }
    let unl = batch.rows_of(Origin::Unlabeled);
    let c = batch.mixed_targets.cols();

    let x = g.constant(batch.mixed_x.clone());
    let r = model.features(g, x)?;
    let logits = model.logits(g, r)?;

    let lx_logits = g.select_rows(logits, &lab)?;
    let lx = g.softmax_cross_entropy(lx_logits, &batch.mixed_targets.select_rows(&lab))?;

    let lu = if unl.is_empty() {
        None
    } else {
        let lu_logits = g.select_rows(logits, &unl)?;
        let targets = batch.mixed_targets.select_rows(&unl);
        Some(match hyper.unlabeled_loss {
            UnlabeledLoss::L2 => {
                let p = g.softmax(lu_logits)?;
                let t = g.constant(targets);
                let d = g.l2_distance(p, t)?;
                g.scale(d, 1.0 / c as f64)
            }
            UnlabeledLoss::CrossEntropy => g.softmax_cross_entropy(lu_logits, &targets)?,
        })
    };

    let probs = g.softmax(logits)?;
    let mean_pred = g.mean_rows(probs)?;
    let log_mean = g.log(mean_pred)?;
    let s = g.sum(log_mean);
    let neg = g.scale(s, -1.0 / c as f64);
    let prior_term = g.constant(Tensor::scalar(-(c as f64).ln()));
    let lreg = g.add(neg, prior_term)?;

    let lambda_u = hyper.ramped_lambda_u(epoch_frac);
    let mut total = lx;
    if let Some(lu) = lu {
        let w = g.scale(lu, lambda_u);
        total = g.add(total, w)?;
    }
    let wr = g.scale(lreg, hyper.lambda_r);
    total = g.add(total, wr)?;
    Ok(SemiLoss {
        lx,
        lu,
        lreg,
        total,
        lambda_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Trainable};

    #[test]
    fn sharpen_cases() {
        let p = Tensor::from_rows(&[vec![0.6, 0.4]]);
        let same = sharpen(&p, 1.0).unwrap();
        assert!((same.data()[0] - 0.6).abs() < 1e-15);
        let s = sharpen(&p, 0.5).unwrap();
        assert!((s.data()[0] - 0.36 / 0.52).abs() < 1e-15);
        assert!((s.data()[0] - 0.6923).abs() < 1e-4);
        assert!(matches!(sharpen(&p, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sharpen_preserves_argmax() {
        let mut r = rng::seeded(4);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| rand::Rng::random::<f64>(&mut r) + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p = Tensor::matrix(1, 5, raw.iter().map(|v| v / s).collect()).unwrap();
            for t in [0.9, 0.5, 0.1] {
                assert_eq!(sharpen(&p, t).unwrap().argmax_rows(), p.argmax_rows());
            }
        }
    }

    #[test]
    fn co_refine_cases() {
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let p = Tensor::from_rows(&[vec![0.2, 0.8]]);
        assert_eq!(co_refine(&[1.0], &y, &p, 0.5).unwrap(), y);
        let own = co_refine(&[0.0], &y, &p, 0.5).unwrap();
        let expect = sharpen(&p, 0.5).unwrap();
        assert!(own.data().iter().zip(expect.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        let half = co_refine(&[0.5], &y, &p, 1.0).unwrap();
        assert!((half.data()[0] - 0.6).abs() < 1e-15 && (half.data()[1] - 0.4).abs() < 1e-15);
        assert!(co_refine(&[1.5], &y, &p, 1.0).is_err());
    }

    #[test]
    fn mixup_identity_and_convexity() {
        let x1 = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let x2 = Tensor::from_rows(&[vec![-3.0, 5.0]]);
        let p1 = Tensor::from_rows(&[vec![0.7, 0.3]]);
        let p2 = Tensor::from_rows(&[vec![0.1, 0.9]]);
        let (x, p) = mixup_with(&x1, &p1, &x2, &p2, 1.0).unwrap();
        assert_eq!((x, p), (x1.clone(), p1.clone()));
        let mut r = rng::seeded(3);
        for _ in 0..20 {
            let (_, p) = mixup(&x1, &p1, &x2, &p2, 4.0, &mut r).unwrap();
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_weight_is_at_least_half() {
        let mut r = rng::seeded(0);
        for _ in 0..1000 {
            let l = sample_mix_weight(0.75, &mut r).unwrap();
            assert!((0.5..=1.0).contains(&l));
        }
        assert!(sample_mix_weight(0.0, &mut r).is_err());
    }

    #[test]
    fn ramp_schedule() {
        let h = SslHyper {
            ramp_epochs: 4,
            lambda_u: 10.0,
            ..SslHyper::default()
        };
        assert_eq!(h.ramped_lambda_u(0.0), 0.0);
        assert_eq!(h.ramped_lambda_u(2.0), 5.0);
        assert_eq!(h.ramped_lambda_u(9.0), 10.0);
        let flat = SslHyper { ramp_epochs: 0, ..h };
        assert_eq!(flat.ramped_lambda_u(0.0), 10.0);
    }

    #[test]
    fn zero_classifier_guesses_uniform() {
        let mut a = ModelTriple::new(Architecture::default_for(2, 4), 1).unwrap();
        let mut b = ModelTriple::new(Architecture::default_for(2, 4), 2).unwrap();
        a.zero_classifier();
        b.zero_classifier();
        let u = Tensor::from_rows(&[vec![1.0, 2.0], vec![-4.0, 0.5]]);
        let q = guess_labels(&[&a, &b], &u, &AugmentSpec::default(), &SslHyper::default(), &mut rng::seeded(1)).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn uniform_predictions_zero_regularizer() {
        let mut m = ModelTriple::new(Architecture::default_for(2, 3), 1).unwrap();
        m.zero_classifier();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        let t = Tensor::one_hot(&[0, 2], 3).unwrap();
        let batch = SemiBatch::new(x, t, vec![Origin::Labeled, Origin::Unlabeled]).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::ALL);
        let l = semi_loss(&mut g, &b, &batch, &SslHyper::default(), 0.0).unwrap();
        assert!(g.scalar_value(l.lreg).abs() < 1e-15);
    }

    #[test]
    fn semi_batch_requires_labeled_rows() {
        let m = ModelTriple::new(Architecture::default_for(2, 3), 1).unwrap();
        let batch = SemiBatch::new(
            Tensor::zeros(&[1, 2]),
            Tensor::one_hot(&[1], 3).unwrap(),
            vec![Origin::Unlabeled],
        )
        .unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::ALL);
        assert!(matches!(
            semi_loss(&mut g, &b, &batch, &SslHyper::default(), 0.0),
            Err(Error::Degenerate(_))
        ));
    }
}
