//! Fine-tuning objective: soft Dice + cross-entropy on per-voxel softmax.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Real, Tensor};

pub const CE_LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceCeConfig {
    pub w_dice: f64,
    pub w_ce: f64,
    pub eps: f64,
    pub num_classes: usize,
    pub exclude_background: bool,
}

impl DiceCeConfig {
    pub fn new(num_classes: usize) -> Self {
        DiceCeConfig {
            w_dice: 1.0,
            w_ce: 1.0,
            eps: 1e-5,
            num_classes,
            exclude_background: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_dice < 0.0 || self.w_ce < 0.0 || self.w_dice + self.w_ce <= 0.0 {
            return Err(Error::config("loss weights", "need w_dl, w_cl ≥ 0 with a positive sum"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("dice_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Softmax over the class axis at every voxel (max-subtracted).
pub fn softmax_channels<T: Real>(tape: &mut Tape<T>, logits: Var) -> Var {
    let x = tape.value(logits);
    let [b, c, ..] = x.shape();
    let v = x.voxels();
    let mut out = x.clone();
    {
        let d = out.data_mut();
        for bi in 0..b {
            for i in 0..v {
                let at = |k: usize| (bi * c + k) * v + i;
                let m = (0..c).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..c {
                    let e = (d[at(k)] - m).exp();
                    d[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    d[at(k)] /= z;
                }
            }
        }
    }
    tape.push(
        out,
        &[logits],
        Box::new(move |_, p, g| {
            // dx_k = p_k (g_k − Σ_j g_j p_j)
            let (pd, gd) = (p.data(), g.data());
            let mut dx = vec![T::zero(); pd.len()];
            for bi in 0..b {
                for i in 0..v {
                    let at = |k: usize| (bi * c + k) * v + i;
                    let dot = (0..c).fold(T::zero(), |a, k| a + gd[at(k)] * pd[at(k)]);
                    for k in 0..c {
                        dx[at(k)] = pd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(p.shape(), dx).expect("softmax grad"))]
        }),
    )
}

/// One-hot `(b, classes, S, H, W)` targets from a label volume.
pub fn one_hot<T: Real>(labels: &LabelVolume, num_classes: usize) -> Result<Tensor<T>> {
    let [b, s, h, w] = labels.shape;
    let v = s * h * w;
    let mut t = Tensor::zeros([b, num_classes, s, h, w]);
    for bi in 0..b {
        for i in 0..v {
            let k = labels.data[bi * v + i] as usize;
            if k >= num_classes {
                return Err(Error::arg(format!("label {k} out of range for {num_classes} classes")));
            }
            t.data_mut()[(bi * num_classes + k) * v + i] = T::one();
        }
    }
    Ok(t)
}

/// Per-(batch, class) soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)`, row-major
/// over (batch, class).
pub fn dice_terms<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>, eps: T) -> Result<Vec<T>> {
    probs.expect_same_shape(targets)?;
    let [b, c, ..] = probs.shape();
    let v = probs.voxels();
    let (p, t) = (probs.data(), targets.data());
    let mut out = Vec::with_capacity(b * c);
    for r in 0..b * c {
        let (mut i, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
        for j in r * v..(r + 1) * v {
            i += p[j] * t[j];
            sp += p[j];
            st += t[j];
        }
        out.push(T::one() - (T::lit(2.0) * i + eps) / (sp + st + eps));
    }
    Ok(out)
}

/// Mean soft Dice loss over classes and batch items.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, targets: &Tensor<T>, eps: T, exclude_background: bool) -> Result<Var> {
    let p = tape.value(probs);
    let terms = dice_terms(p, targets, eps)?;
    let [b, c, ..] = p.shape();
    let first = usize::from(exclude_background && c > 1);
    let used = (b * (c - first)) as f64;
    let value = (0..b)
        .flat_map(|bi| (first..c).map(move |k| bi * c + k))
        .fold(T::zero(), |a, r| a + terms[r])
        / T::lit(used);
    let t = targets.clone();
    Ok(tape.push(
        Tensor::scalar(value),
        &[probs],
        Box::new(move |inp, _, g| {
            let p = inp[0];
            let v = p.voxels();
            let (pd, td) = (p.data(), t.data());
            let scale = g.item() / T::lit(used);
            let mut dp = vec![T::zero(); pd.len()];
            for bi in 0..b {
                for k in first..c {
                    let r = bi * c + k;
                    let (mut i, mut den) = (T::zero(), eps);
                    for j in r * v..(r + 1) * v {
                        i += pd[j] * td[j];
                        den += pd[j] + td[j];
                    }
                    let num = T::lit(2.0) * i + eps;
                    // d/dp [−num/den] = −(2t·den − num)/den²
                    for j in r * v..(r + 1) * v {
                        dp[j] = -scale * (T::lit(2.0) * td[j] * den - num) / (den * den);
                    }
                }
            }
            vec![Some(Tensor::from_vec(p.shape(), dp).expect("dice grad"))]
        }),
    ))
}

/// Voxel-mean negative log-likelihood of the true class, `log` clamped at 1e-12.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    let p = tape.value(probs);
    p.expect_same_shape(targets)?;
    let [b, _, ..] = p.shape();
    let n = T::from_usize_lossy(b * p.voxels());
    let clamp = T::lit(CE_LOG_CLAMP);
    let value = p
        .data()
        .iter()
        .zip(targets.data())
        .fold(T::zero(), |a, (&pv, &tv)| if tv != T::zero() { a - tv * pv.max(clamp).ln() } else { a })
        / n;
    let t = targets.clone();
    Ok(tape.push(
        Tensor::scalar(value),
        &[probs],
        Box::new(move |inp, _, g| {
            let s = g.item() / n;
            let dp = inp[0]
                .zip_map(&t, |pv, tv| if pv > clamp { -s * tv / pv } else { T::zero() })
                .expect("same shape");
            vec![Some(dp)]
        }),
    ))
}

/// `w_dl · Dice + w_cl · CE` on softmax of `logits`.
pub fn dice_ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &LabelVolume, cfg: &DiceCeConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(logits);
    if shape[1] != cfg.num_classes || [shape[0], shape[2], shape[3], shape[4]] != labels.shape {
        return Err(Error::shape(format!(
            "logits {shape:?} do not match labels {:?} with {} classes",
            labels.shape, cfg.num_classes
        )));
    }
    let targets = one_hot::<T>(labels, cfg.num_classes)?;
    let probs = softmax_channels(tape, logits);
    let d = dice_loss(tape, probs, &targets, T::lit(cfg.eps), cfg.exclude_background)?;
    let c = ce_loss(tape, probs, &targets)?;
    let d = tape.scale(d, T::lit(cfg.w_dice));
    let c = tape.scale(c, T::lit(cfg.w_ce));
    tape.add(d, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_var(tape: &mut Tape<f64>, shape: crate::tensor::Shape, v: Vec<f64>) -> Var {
        tape.constant(Tensor::from_vec(shape, v).unwrap())
    }

    #[test]
    fn perfect_overlap_has_zero_dice_loss() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_vec([1, 2, 1, 1, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = tape.constant(t.clone());
        let l = dice_loss(&mut tape, p, &t, 1e-5, false).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn single_class_dice_arithmetic() {
        let p = Tensor::<f64>::from_vec([1, 2, 1, 1, 1], vec![0.5, 0.5]).unwrap();
        let t = Tensor::from_vec([1, 2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let terms: Vec<f64> = dice_terms(&p, &t, 1e-5).unwrap();
        let want = 1.0 - (1.0 + 1e-5) / (1.5 + 1e-5);
        assert!((terms[0] - want).abs() < 1e-15);
        assert!((terms[0] - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn ce_of_perfect_and_uniform_predictions() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec([1, 4, 1, 1, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let p = tape.constant(t.clone());
        let l = ce_loss(&mut tape, p, &t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let u = probs_var(&mut tape, [1, 4, 1, 1, 2], vec![0.25; 8]);
        let l = ce_loss(&mut tape, u, &t).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_argument_error() {
        let labels = LabelVolume::new([1, 1, 1, 2], vec![0, 3]).unwrap();
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros([1, 3, 1, 1, 2]));
        let err = dice_ce_loss(&mut tape, logits, &labels, &DiceCeConfig::new(3)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 1, 2, 2], |i| (i as f64 * 1.7).sin() * 30.0));
        let p = softmax_channels(&mut tape, x);
        let pv = tape.value(p);
        for b in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| pv.data()[(b * 3 + k) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
