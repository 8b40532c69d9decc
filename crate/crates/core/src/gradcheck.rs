//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates the forward closure, so it is
//! independent of every backward rule it checks.

use crate::autograd::{Ctx, ParamKind, ParamStore, Var};
use crate::error::Result;
use crate::rng::Rng;
use rand::seq::index;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
    /// Largest analytic gradient magnitude among the checked elements.
    pub analytic_scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements probed per parameter tensor; smaller tensors are probed fully.
    pub max_elements: usize,
    /// Trainable tensors probed; a random subset when the store holds more.
    pub max_tensors: usize,
    /// Floor for the normwise denominator.
    pub abs_floor: f64,
    /// Floor relative to the largest analytic gradient in the whole check.
    /// Tensors whose true gradient is zero (a bias feeding batch norm) then
    /// measure finite-difference round-off against the model's gradient
    /// scale instead of against `abs_floor`.
    pub rel_floor: f64,
    pub train: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_elements: 6,
            max_tensors: usize::MAX,
            abs_floor: 1e-6,
            rel_floor: 1e-3,
            train: true,
        }
    }
}

/// Compare tape gradients with central differences for every trainable
/// entry in `store`.
///
/// The relative error of one tensor is `max|a − n| / max(max|a|, max|n|, floor)`
/// over the probed elements, `a` analytic and `n` numeric, with
/// `floor = max(abs_floor, rel_floor · max|a| over every probed tensor)`.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, opts: GradCheckOptions, rng: &mut Rng, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>) -> Result<Var>,
{
    store.zero_grad();
    let snapshot = store.clone();
    {
        let mut ctx = Ctx::new(store, opts.train);
        let loss = loss_fn(&mut ctx)?;
        ctx.backward(loss)?;
    }
    let analytic = store.clone();
    *store = restore_values(store, &snapshot);

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(store, opts.train);
        let loss = loss_fn(&mut ctx)?;
        Ok(ctx.value(loss).item())
    };

    let mut ids: Vec<_> = snapshot.ids().filter(|&id| snapshot.entry(id).kind == ParamKind::Trainable).collect();
    if ids.len() > opts.max_tensors {
        let mut keep = index::sample(rng, ids.len(), opts.max_tensors).into_vec();
        keep.sort_unstable();
        ids = keep.into_iter().map(|i| ids[i]).collect();
    }
    let mut params = Vec::new();
    let mut scales = Vec::new();
    for id in ids {
        let entry = snapshot.entry(id);
        let n = entry.value.numel();
        let picks: Vec<usize> = if n <= opts.max_elements {
            (0..n).collect()
        } else {
            let mut v = index::sample(rng, n, opts.max_elements).into_vec();
            v.sort_unstable();
            v
        };
        let (mut max_err, mut a_max, mut n_max) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &picks {
            let orig = entry.value.data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let lp = eval(store)?;
            *store = restore_values(store, &snapshot);
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let lm = eval(store)?;
            *store = restore_values(store, &snapshot);
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic.grad(id).data()[i];
            max_err = max_err.max((a - numeric).abs());
            a_max = a_max.max(a.abs());
            n_max = n_max.max(numeric.abs());
        }
        params.push(ParamCheck {
            name: entry.name.clone(),
            checked: picks.len(),
            max_abs_err: max_err,
            rel_err: 0.0,
            analytic_scale: a_max,
        });
        scales.push(a_max.max(n_max));
    }
    let global = params.iter().map(|p| p.analytic_scale).fold(0.0, f64::max);
    let floor = (opts.rel_floor * global).max(opts.abs_floor);
    for (p, scale) in params.iter_mut().zip(scales) {
        p.rel_err = p.max_abs_err / scale.max(floor);
    }
    *store = analytic;
    Ok(GradCheckReport { params })
}

/// Restore values (including running-statistic buffers mutated by train-mode
/// forwards) without discarding the accumulated gradients.
fn restore_values(current: &ParamStore<f64>, snapshot: &ParamStore<f64>) -> ParamStore<f64> {
    let mut s = snapshot.clone();
    for id in s.ids().collect::<Vec<_>>() {
        s.entry_mut(id).grad = current.grad(id).clone();
    }
    s
}
