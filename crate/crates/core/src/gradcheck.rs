//! Central finite-difference gradient checking.
//!
//! The check only ever evaluates the forward pass, so it is independent of
//! the backward rules it is used to validate.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub struct GradReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, per input.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares backward gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph plus one parameter leaf per input and must
/// return a scalar node.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut num = vec![0.0; inputs[k].len()];
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            num[j] = (plus - minus) / (2.0 * h);
        }
        let a = analytic[k].data();
        let diff = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff / denom });
    }
    Ok(GradReport { rel_errors })
}
