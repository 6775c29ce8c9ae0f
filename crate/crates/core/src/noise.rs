//! Synthetic label noise and small-loss clean/noisy partitioning.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::models::ModelTriple;
use crate::rng;
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseKind {
    /// Selected labels are redrawn uniformly. With `strict = false` the draw
    /// covers all classes (so a label may keep its value); with `strict =
    /// true` it covers only the other classes.
    Symmetric { strict: bool },
    /// Selected labels are sent through `class_map`.
    Asymmetric { class_map: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
}

/// `0↔1, 2↔3, …`; with an odd class count the last class maps to itself.
pub fn adjacent_pair_map(num_classes: usize) -> Vec<usize> {
    (0..num_classes)
        .map(|c| {
            let partner = c ^ 1;
            if partner < num_classes {
                partner
            } else {
                c
            }
        })
        .collect()
}

/// Corrupts exactly `round(ratio · N)` labels, chosen uniformly without
/// replacement. Returns the new labels and the mask of selected indices.
pub fn inject_noise(labels: &[usize], num_classes: usize, spec: &NoiseSpec) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::Parameter(format!("noise ratio {} outside [0,1]", spec.ratio)));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Parameter(format!("label {l} out of range for {num_classes} classes")));
    }
    if let NoiseKind::Asymmetric { class_map } = &spec.kind {
        if class_map.len() != num_classes || class_map.iter().any(|&c| c >= num_classes) {
            return Err(Error::Parameter("class map must send every class to a valid class".into()));
        }
    }
    if matches!(spec.kind, NoiseKind::Symmetric { strict: true }) && num_classes < 2 {
        return Err(Error::Parameter("strict symmetric noise needs at least two classes".into()));
    }
    let n = labels.len();
    let k = (spec.ratio * n as f64).round() as usize;
    let mut r = rng::seeded(spec.seed);
    let order = rng::permutation(&mut r, n);
    let mut noisy = labels.to_vec();
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
        noisy[i] = match &spec.kind {
            NoiseKind::Symmetric { strict: false } => r.random_range(0..num_classes),
            NoiseKind::Symmetric { strict: true } => {
                let d = r.random_range(0..num_classes - 1);
                if d >= labels[i] {
                    d + 1
                } else {
                    d
                }
            }
            NoiseKind::Asymmetric { class_map } => class_map[labels[i]],
        };
    }
    Ok((noisy, mask))
}

/// Per-sample cross-entropy of `labels` under `m`, without augmentation.
pub fn raw_sample_losses(m: &ModelTriple, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if x.rows() != labels.len() {
        return Err(Error::dim("per_sample_losses", format!("{} rows, {} labels", x.rows(), labels.len())));
    }
    let logits = m.forward_logits(x)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = logits.row(i);
            log_sum_exp(row.iter().copied()) - row[l]
        })
        .collect())
}

/// Rescales to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Min-max normalised per-sample losses, the input to [`fit_gmm_1d`].
pub fn per_sample_losses(m: &ModelTriple, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    Ok(min_max_normalize(&raw_sample_losses(m, x, labels)?))
}

pub const GMM_MAX_ITER: usize = 100;
pub const GMM_TOL: f64 = 1e-6;
pub const GMM_VAR_FLOOR: f64 = 1e-6;
pub const GMM_MIN_SAMPLES: usize = 10;

/// Two-component 1-D Gaussian mixture. Component 0 has the lower mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood before each M-step, then at the final parameters.
    pub trace: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

impl GmmParams {
    fn component_logs(&self, x: f64) -> [f64; 2] {
        [
            self.weights[0].ln() + log_normal(x, self.means[0], self.variances[0]),
            self.weights[1].ln() + log_normal(x, self.means[1], self.variances[1]),
        ]
    }

    /// Posterior probability of the low-mean component.
    pub fn clean_posterior(&self, x: f64) -> f64 {
        let [a, b] = self.component_logs(x);
        1.0 / (1.0 + (b - a).exp())
    }

    /// Total log-likelihood of `values`.
    pub fn log_likelihood_of(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| {
                let [a, b] = self.component_logs(x);
                log_sum_exp([a, b].into_iter())
            })
            .sum()
    }
}

/// Expectation-maximisation for a 2-component mixture.
///
/// Initialised by splitting the sorted data at the median; stops when the
/// log-likelihood changes by less than [`GMM_TOL`] or after
/// [`GMM_MAX_ITER`] iterations. Variances are floored at [`GMM_VAR_FLOOR`].
pub fn fit_gmm_1d(values: &[f64]) -> Result<GmmParams> {
    let n = values.len();
    if n < GMM_MIN_SAMPLES {
        return Err(Error::Degenerate(format!("GMM needs at least {GMM_MIN_SAMPLES} values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("GMM input contains non-finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-6 {
        return Err(Error::Degenerate("GMM input has no spread".into()));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = n / 2;
    let stats = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        let v = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / s.len() as f64;
        (m, v.max(GMM_VAR_FLOOR))
    };
    let (m0, v0) = stats(&sorted[..half]);
    let (m1, v1) = stats(&sorted[half..]);
    let mut p = GmmParams {
        weights: [0.5, 0.5],
        means: [m0, m1],
        variances: [v0, v1],
        iterations: 0,
        log_likelihood: f64::NEG_INFINITY,
        trace: Vec::new(),
    };

    let mut resp = vec![0.0; n];
    let mut prev = f64::NEG_INFINITY;
    for it in 0..GMM_MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(values) {
            let [a, b] = p.component_logs(x);
            let lse = log_sum_exp([a, b].into_iter());
            ll += lse;
            *r = (a - lse).exp();
        }
        p.trace.push(ll);
        p.iterations = it + 1;
        if (ll - prev).abs() < GMM_TOL {
            break;
        }
        prev = ll;

        // M-step
        let n0: f64 = resp.iter().sum();
        let n1 = n as f64 - n0;
        if n0 <= 0.0 || n1 <= 0.0 {
            return Err(Error::Degenerate("a GMM component lost all responsibility".into()));
        }
        let mean0 = resp.iter().zip(values).map(|(r, x)| r * x).sum::<f64>() / n0;
        let mean1 = resp.iter().zip(values).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1;
        let var0 = resp.iter().zip(values).map(|(r, x)| r * (x - mean0).powi(2)).sum::<f64>() / n0;
        let var1 = resp.iter().zip(values).map(|(r, x)| (1.0 - r) * (x - mean1).powi(2)).sum::<f64>() / n1;
        p.weights = [n0 / n as f64, n1 / n as f64];
        p.means = [mean0, mean1];
        p.variances = [var0.max(GMM_VAR_FLOOR), var1.max(GMM_VAR_FLOOR)];
    }
    p.log_likelihood = p.log_likelihood_of(values);
    p.trace.push(p.log_likelihood);

    if p.means[0] > p.means[1] {
        p.weights.swap(0, 1);
        p.means.swap(0, 1);
        p.variances.swap(0, 1);
    }
    Ok(p)
}

/// Clean/noisy split of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub clean_prob: Vec<f64>,
    pub clean_idx: Vec<usize>,
    pub noisy_idx: Vec<usize>,
    pub threshold: f64,
}

impl Partition {
    pub fn from_probs(clean_prob: Vec<f64>, threshold: f64) -> Self {
        let (clean_idx, noisy_idx) = (0..clean_prob.len()).partition(|&i| clean_prob[i] >= threshold);
        Self {
            clean_prob,
            clean_idx,
            noisy_idx,
            threshold,
        }
    }

    /// Everything is treated as clean, used when the loss signal is flat.
    pub fn all_clean(n: usize) -> Self {
        Self::from_probs(vec![1.0; n], 0.5)
    }

    pub fn is_clean(&self, i: usize) -> bool {
        self.clean_prob[i] >= self.threshold
    }

    /// Writes `index,clean_prob,is_clean[,true_flip]`.
    pub fn write_csv<W: Write>(&self, w: W, true_flip: Option<&[bool]>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["index", "clean_prob", "is_clean"];
        if true_flip.is_some() {
            header.push("true_flip");
        }
        out.write_record(&header)?;
        for (i, p) in self.clean_prob.iter().enumerate() {
            let mut rec = vec![i.to_string(), format!("{p}"), (self.is_clean(i) as u8).to_string()];
            if let Some(f) = true_flip {
                rec.push((f[i] as u8).to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Posterior clean probability of each value, thresholded.
pub fn make_partition(g: &GmmParams, values: &[f64], threshold: f64) -> Partition {
    Partition::from_probs(values.iter().map(|&v| g.clean_posterior(v)).collect(), threshold)
}
