use crate::autograd::{Ctx, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics (biased variance) over (b, S, H, W).
fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [b, c, ..] = x.shape();
    let v = x.voxels();
    let n = T::from_usize_lossy(b * v);
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += d[(bi * c + ch) * v..(bi * c + ch + 1) * v].iter().fold(T::zero(), |a, &x| a + x);
        }
        let m = s / n;
        let mut q = T::zero();
        for bi in 0..b {
            q += d[(bi * c + ch) * v..(bi * c + ch + 1) * v]
                .iter()
                .fold(T::zero(), |a, &x| a + (x - m) * (x - m));
        }
        mean[ch] = m;
        var[ch] = q / n;
    }
    (mean, var)
}

/// Normalize with batch statistics and apply the affine map. Returns the
/// output and the batch (mean, biased variance) used.
pub fn batch_norm_train<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
    let xv = tape.value(x);
    let [b, c, ..] = xv.shape();
    check_affine(tape, gamma, beta, c)?;
    let (mean, var) = channel_stats(xv);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let vox = xv.voxels();
    let (gd, bd) = (tape.value(gamma).data().to_vec(), tape.value(beta).data().to_vec());
    let mut out = xv.clone();
    for bi in 0..b {
        for ch in 0..c {
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for o in &mut out.data_mut()[(bi * c + ch) * vox..(bi * c + ch + 1) * vox] {
                *o = (*o - m) * is * ga + be;
            }
        }
    }
    tape.record_cost("batchnorm", 0, out.numel() as u64);
    let (m_saved, is_saved) = (mean.clone(), inv_std);
    let v = tape.push(
        out,
        &[x, gamma, beta],
        Box::new(move |inp, _, g| {
            let (x, gamma) = (inp[0], inp[1].data());
            let [b, c, ..] = x.shape();
            let vox = x.voxels();
            let n = T::from_usize_lossy(b * vox);
            let (xd, gdat) = (x.data(), g.data());
            let mut dx = vec![T::zero(); x.numel()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (m, is) = (m_saved[ch], is_saved[ch]);
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for bi in 0..b {
                    let r = (bi * c + ch) * vox..(bi * c + ch + 1) * vox;
                    for (&gv, &xv) in gdat[r.clone()].iter().zip(&xd[r]) {
                        sg += gv;
                        sgx += gv * (xv - m) * is;
                    }
                }
                dbeta[ch] = sg;
                dgamma[ch] = sgx;
                // dx = γ·istd/N · (N·g − Σg − x̂·Σ(g·x̂))
                let k = gamma[ch] * is / n;
                for bi in 0..b {
                    let r = (bi * c + ch) * vox..(bi * c + ch + 1) * vox;
                    for ((d, &gv), &xv) in dx[r.clone()].iter_mut().zip(&gdat[r.clone()]).zip(&xd[r]) {
                        let xh = (xv - m) * is;
                        *d = k * (n * gv - sg - xh * sgx);
                    }
                }
            }
            let vec_shape = inp[1].shape();
            vec![
                Some(Tensor::from_vec(x.shape(), dx).expect("dx")),
                Some(Tensor::from_vec(vec_shape, dgamma).expect("dgamma")),
                Some(Tensor::from_vec(vec_shape, dbeta).expect("dbeta")),
            ]
        }),
    );
    Ok((v, mean, var))
}

/// Affine map with frozen statistics: `(x − μ)/√(σ² + eps)·γ + β`.
pub fn batch_norm_eval<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Var> {
    let xv = tape.value(x);
    let [b, c, ..] = xv.shape();
    check_affine(tape, gamma, beta, c)?;
    let vox = xv.voxels();
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let (gd, bd) = (tape.value(gamma).data().to_vec(), tape.value(beta).data().to_vec());
    let mut out = xv.clone();
    for bi in 0..b {
        for ch in 0..c {
            for o in &mut out.data_mut()[(bi * c + ch) * vox..(bi * c + ch + 1) * vox] {
                *o = (*o - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch];
            }
        }
    }
    tape.record_cost("batchnorm", 0, out.numel() as u64);
    Ok(tape.push(
        out,
        &[x, gamma, beta],
        Box::new(move |inp, _, g| {
            let (x, gamma) = (inp[0], inp[1].data());
            let [b, c, ..] = x.shape();
            let vox = x.voxels();
            let mut dx = g.clone();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let r = (bi * c + ch) * vox..(bi * c + ch + 1) * vox;
                    for (&gv, &xv) in g.data()[r.clone()].iter().zip(&x.data()[r.clone()]) {
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                    }
                    let k = gamma[ch] * inv_std[ch];
                    dx.data_mut()[r].iter_mut().for_each(|d| *d *= k);
                }
            }
            let vs = inp[1].shape();
            vec![
                Some(dx),
                Some(Tensor::from_vec(vs, dgamma).expect("dgamma")),
                Some(Tensor::from_vec(vs, dbeta).expect("dbeta")),
            ]
        }),
    ))
}

fn check_affine<T: Real>(tape: &Tape<T>, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels given γ/β of {} / {} elements",
            tape.value(gamma).numel(),
            tape.value(beta).numel()
        )));
    }
    Ok(())
}

/// Batch normalization over channels with running statistics stored as
/// buffers next to γ and β.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        let shape = [channels, 1, 1, 1, 1];
        Ok(BatchNorm3d {
            channels,
            gamma: store.add(format!("{prefix}.weight"), Tensor::ones(shape), ParamKind::Trainable)?,
            beta: store.add(format!("{prefix}.bias"), Tensor::zeros(shape), ParamKind::Trainable)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer)?,
            running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(shape), ParamKind::Buffer)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// statistics; eval mode applies the stored affine map.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::lit(self.eps);
        if ctx.is_train() {
            let n = {
                let s = ctx.tape.shape(x);
                s[0] * s[2] * s[3] * s[4]
            };
            let (y, mean, var) = batch_norm_train(&mut ctx.tape, x, gamma, beta, eps)?;
            let mom = T::lit(self.momentum);
            // running variance tracks the unbiased estimate
            let unbias = if n > 1 {
                T::from_usize_lossy(n) / T::from_usize_lossy(n - 1)
            } else {
                T::one()
            };
            let store = ctx.store_mut();
            for (r, m) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - mom) * *r + mom * *m;
            }
            for (r, v) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = (T::one() - mom) * *r + mom * *v * unbias;
            }
            Ok(y)
        } else {
            let rm = ctx.store().value(self.running_mean).data().to_vec();
            let rv = ctx.store().value(self.running_var).data().to_vec();
            batch_norm_eval(&mut ctx.tape, x, gamma, beta, &rm, &rv, eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm3d::new(&mut store, "bn", 2).unwrap();
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::full([2, 2, 2, 2, 2], 3.5));
        let y = bn.forward(&mut ctx, x).unwrap();
        assert!(ctx.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn train_mode_output_has_zero_mean_unit_variance() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm3d::new(&mut store, "bn", 3).unwrap();
        let mut r = rng::seeded(1);
        let x = rng::normal_tensor([2, 3, 3, 2, 2], 4.0, 2.5, &mut r);
        let mut ctx = Ctx::new(&mut store, true);
        let xv = ctx.input(x);
        let y = bn.forward(&mut ctx, xv).unwrap();
        let (mean, var) = channel_stats(ctx.value(y));
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-12);
            // eps shifts the variance slightly below one
            assert!((var[c] - 1.0).abs() < 1e-4, "{}", var[c]);
        }
    }

    #[test]
    fn eval_mode_leaves_running_stats_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm3d::new(&mut store, "bn", 2).unwrap();
        let mut r = rng::seeded(2);
        {
            let mut ctx = Ctx::new(&mut store, true);
            let x = ctx.input(rng::normal_tensor([1, 2, 2, 2, 2], 1.0, 1.0, &mut r));
            bn.forward(&mut ctx, x).unwrap();
        }
        let before = store.clone();
        let mut ctx = Ctx::new(&mut store, false);
        let x = ctx.input(rng::normal_tensor([1, 2, 2, 2, 2], 1.0, 1.0, &mut r));
        bn.forward(&mut ctx, x).unwrap();
        drop(ctx);
        assert_eq!(store.value(bn.running_mean), before.value(bn.running_mean));
        assert_eq!(store.value(bn.running_var), before.value(bn.running_var));
        assert!(store.value(bn.running_var).data().iter().all(|&v| v >= 0.0));
    }
}
