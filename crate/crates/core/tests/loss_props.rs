use codim_core::contrastive::{self_con_loss, sup_con_loss, ViewBatch};
use codim_core::rng::{self, Rng};
use codim_core::ssl::{co_refine, sharpen};
use codim_core::{Graph, Tensor};
use proptest::prelude::*;

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::new(vec![n, d], (0..n * d).map(|_| rng::normal(rng)).collect()).unwrap();
    for i in 0..n {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.cols();
    let data = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::new(vec![perm.len(), d], data).unwrap()
}

fn loss(z: &Tensor, src: &[usize], labels: Option<Vec<usize>>, tau: f64) -> f64 {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let sup = labels.is_some();
    let vb = ViewBatch::new(&g, zv, src.to_vec(), labels).unwrap();
    let l = if sup {
        sup_con_loss(&mut g, &vb, tau).unwrap()
    } else {
        self_con_loss(&mut g, &vb, tau).unwrap()
    };
    g.scalar_value(l)
}

proptest! {
    #[test]
    fn contrastive_losses_ignore_row_order(seed in any::<u64>(), k in 2usize..8, d in 2usize..10, tau in 0.05f64..1.0) {
        let mut rng = rng::seeded(seed);
        let z = unit_rows(&mut rng, 2 * k, d);
        let src: Vec<usize> = (0..k).flat_map(|i| [i, i]).collect();
        let cls: Vec<usize> = (0..k).map(|i| i % 3).collect();
        let labels: Vec<usize> = src.iter().map(|&s| cls[s]).collect();
        let perm = rng::permutation(&mut rng, 2 * k);
        let zp = permute_rows(&z, &perm);
        let srcp: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let labelsp: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        prop_assert!((loss(&z, &src, None, tau) - loss(&zp, &srcp, None, tau)).abs() < 1e-12);
        prop_assert!((loss(&z, &src, Some(labels), tau) - loss(&zp, &srcp, Some(labelsp), tau)).abs() < 1e-12);
    }

    #[test]
    fn sharpen_and_refine_give_distributions(seed in any::<u64>(), n in 1usize..20, c in 2usize..8, t in 0.1f64..1.0) {
        let mut rng = rng::seeded(seed);
        let mut p = Tensor::new(vec![n, c], (0..n * c).map(|_| rng::uniform(&mut rng, 0.0, 1.0)).collect()).unwrap();
        for i in 0..n {
            let s: f64 = p.row(i).iter().sum();
            p.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let mut one_hot = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let k = (rng::uniform(&mut rng, 0.0, c as f64) as usize).min(c - 1);
            one_hot.row_mut(i)[k] = 1.0;
        }
        let w: Vec<f64> = (0..n).map(|_| rng::uniform(&mut rng, 0.0, 1.0)).collect();
        for out in [sharpen(&p, t).unwrap(), co_refine(&w, &one_hot, &p, t).unwrap()] {
            for i in 0..n {
                prop_assert!(out.row(i).iter().all(|&v| v >= 0.0));
                prop_assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
