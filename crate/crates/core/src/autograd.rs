//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] is an append-only list of nodes. Each node owns its forward
//! value and, if it was produced by a differentiable op, a closure mapping
//! the upstream gradient to gradients for its inputs. [`Tape::backward`]
//! walks the list once in reverse, so gradients are accumulated in a fixed
//! order and repeated runs are bitwise identical.
//!
//! Named model parameters live outside the tape in a [`ParamStore`]; a
//! [`Ctx`] binds a tape to a store for one forward/backward pass and pushes
//! leaf gradients back into the store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{check_permutation, inverse_permutation, numel, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// One instrumented multiply-accumulate record, captured when cost
/// tracing is enabled on a tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TracedCost {
    pub kind: &'static str,
    pub macs: u64,
    pub elementwise: u64,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Tensor<T>>,
    trace: Option<Vec<TracedCost>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            trace: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TracedCost]> {
        self.trace.as_deref()
    }

    pub(crate) fn record_cost(&mut self, kind: &'static str, macs: u64, elementwise: u64) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TracedCost {
                kind,
                macs,
                elementwise,
            });
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record the result of a differentiable op.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by a forward op");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulated gradient of a leaf after one or more backward passes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    /// Propagate d(loss)/d(node) to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls; the returned map holds this
    /// call's contribution only.
    pub fn backward(&mut self, loss: Var) -> Result<HashMap<Var, Tensor<T>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut fresh = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(bw) = node.backward.as_ref() else {
                fresh.insert(Var(id), g);
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let in_grads = bw(&inputs, &node.value, &g);
            debug_assert_eq!(in_grads.len(), node.inputs.len());
            for (&src, ig) in node.inputs.iter().zip(in_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[src].requires_grad {
                    continue;
                }
                match grads[src].as_mut() {
                    Some(acc) => acc.add_assign(&ig),
                    None => grads[src] = Some(ig),
                }
            }
        }

        for (v, g) in &fresh {
            match self.leaf_grads.get_mut(&v.0) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.leaf_grads.insert(v.0, g.clone());
                }
            }
        }
        Ok(fresh)
    }

    // ---- elementwise and layout ops -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|inp, _, g| {
                let ga = g.zip_map(inp[1], |gv, bv| gv * bv).expect("shapes checked");
                let gb = g.zip_map(inp[0], |gv, av| gv * av).expect("shapes checked");
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], Box::new(move |_, _, g| vec![Some(g.scale(s))]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape();
        let out = Tensor::scalar(x.sum());
        self.push(
            out,
            &[a],
            Box::new(move |_, _, g| vec![Some(Tensor::full(shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).numel());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of element-wise products, a convenience for linear test losses.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let from = self.shape(a);
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |_, _, g| vec![Some(g.reshape(from).expect("same element count"))]),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: [usize; 5]) -> Result<Var> {
        check_permutation(&axes)?;
        let out = self.value(a).permute_unchecked(axes);
        let inv = inverse_permutation(&axes);
        Ok(self.push(
            out,
            &[a],
            Box::new(move |_, _, g| vec![Some(g.permute_unchecked(inv))]),
        ))
    }

    pub fn flatten_spatial(&mut self, a: Var) -> Var {
        let [b, c, s, h, w] = self.shape(a);
        self.reshape(a, [b, c, s * h * w, 1, 1])
            .expect("flatten preserves element count")
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?);
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(format!(
                    "cannot concatenate {s:?} with {first:?} on the channel axis"
                )));
            }
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let vox = first[2] * first[3] * first[4];
        let mut out_shape = first;
        out_shape[1] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for b in 0..first[0] {
            for (&p, &c) in parts.iter().zip(&chans) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * vox..(b + 1) * c * vox]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let batch = first[0];
        Ok(self.push(
            out,
            parts,
            Box::new(move |inp, _, g| {
                let gd = g.data();
                let mut outs: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(batch * c * vox)).collect();
                let mut off = 0;
                for _ in 0..batch {
                    for (o, &c) in outs.iter_mut().zip(&chans) {
                        o.extend_from_slice(&gd[off..off + c * vox]);
                        off += c * vox;
                    }
                }
                outs.into_iter()
                    .zip(inp)
                    .map(|(d, x)| Some(Tensor::from_vec(x.shape(), d).expect("split sizes")))
                    .collect()
            }),
        ))
    }
}

// ---- parameters -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store's insertion order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Saved with the model but not differentiated (e.g. running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameter container. Insertion order is the canonical order used
/// for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.clone(),
            grad: Tensor::zeros(value.shape()),
            value,
            kind,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Element count over trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every value whose name also exists in `src`; returns names
    /// present here but missing from `src`.
    pub fn load_from(&mut self, src: &ParamStore<T>) -> Vec<String> {
        let mut missing = Vec::new();
        for e in &mut self.entries {
            match src.find(&e.name) {
                Some(id) if src.value(id).shape() == e.value.shape() => {
                    e.value = src.value(id).clone();
                }
                _ => missing.push(e.name.clone()),
            }
        }
        missing
    }
}

/// Forward/backward pass context: a fresh tape bound to a parameter store.
pub struct Ctx<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    train: bool,
    loaded: HashMap<ParamId, Var>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, train: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            train,
            loaded: HashMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Tape variable for a parameter, loaded at most once per context.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.loaded.get(&id) {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf(e.value.clone(), e.kind == ParamKind::Trainable);
        self.loaded.insert(id, v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    /// Backpropagate and accumulate parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for (&id, v) in &self.loaded {
            if let Some(g) = grads.get(v) {
                self.store.entries[id.0].grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn mul_by_zeros_annihilates_and_add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 2, 2, 1, 1], |i| i as f64 + 0.5));
        let z = tape.constant(Tensor::zeros([1, 2, 2, 1, 1]));
        let p = tape.mul(x, z).unwrap();
        let s = tape.add(x, z).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(s), tape.value(x));
    }

    #[test]
    fn shape_mismatch_is_a_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 2, 1, 1]));
        let b = tape.constant(Tensor::zeros([1, 1, 3, 1, 1]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_loss_gradient_is_the_input() {
        let mut tape = Tape::new();
        let xv = t([1, 1, 2, 2, 1], |i| (i as f64) * 1.5 - 2.0);
        let x = tape.constant(xv.clone());
        let w = tape.leaf(Tensor::ones([1, 1, 2, 2, 1]), true);
        let loss = tape.dot(w, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &xv);
    }

    #[test]
    fn two_backward_calls_double_the_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 3, 1, 1], |i| i as f64 + 1.0));
        let w = tape.leaf(t([1, 1, 3, 1, 1], |_| 0.25), true);
        let loss = tape.dot(w, x).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(w).unwrap().clone();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &once.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::ones([1, 1, 2, 1, 1]), true);
        assert!(matches!(tape.backward(w), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_of_flattened_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 2, 2, 2], |i| i as f64), true);
        let f = tape.flatten_spatial(x);
        assert_eq!(tape.shape(f), [1, 1, 8, 1, 1]);
        let s = tape.sum(f);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones([1, 1, 2, 2, 2]));
    }

    #[test]
    fn param_names_are_unique() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.weight", Tensor::zeros([1; 5]), ParamKind::Trainable).unwrap();
        assert!(store.add("a.weight", Tensor::zeros([1; 5]), ParamKind::Trainable).is_err());
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t([2, 1, 1, 1, 2], |i| i as f64), true);
        let b = tape.leaf(t([2, 2, 1, 1, 2], |i| 10.0 + i as f64), true);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), [2, 3, 1, 1, 2]);
        assert_eq!(tape.value(c).at([1, 0, 0, 0, 1]), 3.0);
        assert_eq!(tape.value(c).at([1, 2, 0, 0, 0]), 16.0);
        let w = tape.constant(t([2, 3, 1, 1, 2], |i| i as f64));
        let l = tape.dot(c, w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
