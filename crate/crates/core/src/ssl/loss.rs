//! Temperature softmax and the multi-clusterer negative log-likelihood.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::kmeans::PseudoLabelSet;
use super::mask::MaskPlan;

pub const DEFAULT_TAU: f64 = 0.1;

/// `exp(f_s/τ) / Σ exp(f_k/τ)`, max-subtracted.
pub fn temperature_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::arg(format!("temperature τ = {tau} must be positive")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&f| ((f - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `−Σ_clusterers Σ_slices log p(label)`; `probs[j][i]` is the distribution
/// of clusterer `i` on slice `j` and `labels[j][i]` its target.
pub fn pretrain_loss(probs: &[Vec<Vec<f64>>], labels: &[Vec<u32>]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::arg(format!("{} slices of probabilities, {} of labels", probs.len(), labels.len())));
    }
    let mut loss = 0.0;
    for (pj, lj) in probs.iter().zip(labels) {
        if pj.len() != lj.len() {
            return Err(Error::arg("clusterer count differs between probabilities and labels"));
        }
        for (p, &l) in pj.iter().zip(lj) {
            let pl = *p
                .get(l as usize)
                .ok_or_else(|| Error::arg(format!("label {l} out of range for {} classes", p.len())))?;
            loss -= pl.max(crate::losses::CE_LOG_CLAMP).ln();
        }
    }
    Ok(loss)
}

/// Targets of one masked slice of one batch item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceTarget {
    pub batch: usize,
    pub slice: usize,
    pub labels: Vec<u32>,
}

/// Masked slices of every batch item paired with their pseudo-labels.
/// `labels[b]` holds the rows of volume `b` only.
pub fn masked_targets(plans: &[MaskPlan], labels: &[PseudoLabelSet]) -> Result<Vec<SliceTarget>> {
    if plans.len() != labels.len() {
        return Err(Error::arg(format!("{} mask plans for {} label sets", plans.len(), labels.len())));
    }
    let mut out = Vec::new();
    for (b, (plan, lab)) in plans.iter().zip(labels).enumerate() {
        if lab.rows() != plan.shape[0] {
            return Err(Error::arg(format!(
                "volume {b}: {} labelled slices for depth {}",
                lab.rows(),
                plan.shape[0]
            )));
        }
        for z in plan.masked_slices() {
            let n = lab.clusterers();
            out.push(SliceTarget {
                batch: b,
                slice: z,
                labels: (0..n).map(|i| lab.label(z, i)).collect(),
            });
        }
    }
    Ok(out)
}

/// Tape form of the loss on head logits `(b, S, N, class_size, 1)`. Clusterer
/// `i` reads only its first `ks[i]` logits.
pub fn pretrain_loss_var<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[SliceTarget],
    ks: &[usize],
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::arg(format!("temperature τ = {tau} must be positive")));
    }
    let [b, s, n, kmax, one] = tape.shape(logits);
    if n != ks.len() || one != 1 || ks.iter().any(|&k| k == 0 || k > kmax) {
        return Err(Error::shape(format!(
            "head logits {:?} do not fit cluster counts {ks:?}",
            tape.shape(logits)
        )));
    }
    for t in targets {
        if t.batch >= b || t.slice >= s || t.labels.len() != n {
            return Err(Error::arg(format!("target at (batch {}, slice {}) outside logits", t.batch, t.slice)));
        }
        if let Some((i, &l)) = t.labels.iter().enumerate().find(|(i, &l)| l as usize >= ks[*i]) {
            return Err(Error::arg(format!("label {l} out of range for clusterer {i} with K = {}", ks[i])));
        }
    }
    let f = tape.value(logits).cast::<f64>();
    let at = |bi: usize, z: usize, i: usize| ((bi * s + z) * n + i) * kmax;
    let mut loss = 0.0;
    // d loss / d f_k = (p_k − 1[k = label]) / τ
    let mut grad = vec![0.0; f.numel()];
    for t in targets {
        for (i, &l) in t.labels.iter().enumerate() {
            let o = at(t.batch, t.slice, i);
            let p = temperature_softmax(&f.data()[o..o + ks[i]], tau)?;
            loss -= p[l as usize].max(crate::losses::CE_LOG_CLAMP).ln();
            for (k, &pk) in p.iter().enumerate() {
                grad[o + k] += (pk - f64::from(k == l as usize)) / tau;
            }
        }
    }
    let grad: Tensor<T> = Tensor::from_vec(f.shape(), grad)?.cast();
    Ok(tape.push(
        Tensor::scalar(T::lit(loss)),
        &[logits],
        Box::new(move |_, _, g| {
            let s = g.item();
            vec![Some(grad.map(|v| v * s))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharp_temperature_closed_form() {
        let p = temperature_softmax(&[1.0, 0.0], 0.1).unwrap();
        let want = 1.0 / (1.0 + (-10f64).exp());
        assert!((p[0] - want).abs() < 1e-15);
        assert!((p[0] - 0.9999546).abs() < 1e-7);
        assert!((p[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        assert!(matches!(temperature_softmax(&[1.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(temperature_softmax(&[1.0], -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn half_probabilities_give_four_ln2() {
        let probs = vec![vec![vec![0.5, 0.5]; 2]; 2];
        let labels = vec![vec![0, 1]; 2];
        let l = pretrain_loss(&probs, &labels).unwrap();
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(matches!(
            pretrain_loss(&[vec![vec![1.0]]], &[vec![1]]),
            Err(Error::Argument(_))
        ));
    }
}
