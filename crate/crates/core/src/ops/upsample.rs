use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpsampleMode {
    /// Separable linear interpolation, align-corners-false.
    #[default]
    Trilinear,
    Nearest,
}

/// Source taps for output index `o` when doubling an axis of length `n`
/// (align-corners-false): `(i0, i1, weight of i1)`.
fn linear_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// View `shape` as (outer, n, inner) around `axis`.
fn split(shape: Shape, axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn double_axis_linear<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split(x.shape(), axis);
    let mut shape = x.shape();
    shape[axis] *= 2;
    let mut out = vec![T::zero(); x.numel() * 2];
    let xd = x.data();
    for a in 0..outer {
        for o in 0..2 * n {
            let (i0, i1, l) = linear_taps(o, n);
            let (w0, w1) = (T::lit(1.0 - l), T::lit(l));
            let dst = &mut out[(a * 2 * n + o) * inner..(a * 2 * n + o + 1) * inner];
            let s0 = &xd[(a * n + i0) * inner..(a * n + i0 + 1) * inner];
            let s1 = &xd[(a * n + i1) * inner..(a * n + i1 + 1) * inner];
            for ((d, &u), &v) in dst.iter_mut().zip(s0).zip(s1) {
                *d = w0 * u + w1 * v;
            }
        }
    }
    Tensor::from_vec(shape, out).expect("doubled shape")
}

/// Adjoint of [`double_axis_linear`].
fn double_axis_linear_adjoint<T: Real>(g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n2, inner) = split(g.shape(), axis);
    let n = n2 / 2;
    let mut shape = g.shape();
    shape[axis] = n;
    let mut out = vec![T::zero(); g.numel() / 2];
    let gd = g.data();
    for a in 0..outer {
        for o in 0..n2 {
            let (i0, i1, l) = linear_taps(o, n);
            let (w0, w1) = (T::lit(1.0 - l), T::lit(l));
            let src = &gd[(a * n2 + o) * inner..(a * n2 + o + 1) * inner];
            for (k, &gv) in src.iter().enumerate() {
                out[(a * n + i0) * inner + k] += w0 * gv;
                out[(a * n + i1) * inner + k] += w1 * gv;
            }
        }
    }
    Tensor::from_vec(shape, out).expect("halved shape")
}

fn double_axis_nearest<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split(x.shape(), axis);
    let mut shape = x.shape();
    shape[axis] *= 2;
    let mut out = Vec::with_capacity(x.numel() * 2);
    for a in 0..outer {
        for o in 0..2 * n {
            let i = o / 2;
            out.extend_from_slice(&x.data()[(a * n + i) * inner..(a * n + i + 1) * inner]);
        }
    }
    Tensor::from_vec(shape, out).expect("doubled shape")
}

fn double_axis_nearest_adjoint<T: Real>(g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n2, inner) = split(g.shape(), axis);
    let n = n2 / 2;
    let mut shape = g.shape();
    shape[axis] = n;
    let mut out = vec![T::zero(); g.numel() / 2];
    for a in 0..outer {
        for o in 0..n2 {
            let dst = (a * n + o / 2) * inner;
            for (k, &gv) in g.data()[(a * n2 + o) * inner..(a * n2 + o + 1) * inner].iter().enumerate() {
                out[dst + k] += gv;
            }
        }
    }
    Tensor::from_vec(shape, out).expect("halved shape")
}

pub fn upsample2x_forward<T: Real>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let step = match mode {
        UpsampleMode::Trilinear => double_axis_linear::<T>,
        UpsampleMode::Nearest => double_axis_nearest::<T>,
    };
    step(&step(&step(x, 2), 3), 4)
}

fn upsample2x_adjoint<T: Real>(g: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let step = match mode {
        UpsampleMode::Trilinear => double_axis_linear_adjoint::<T>,
        UpsampleMode::Nearest => double_axis_nearest_adjoint::<T>,
    };
    step(&step(&step(g, 4), 3), 2)
}

/// Double every spatial extent.
pub fn upsample2x<T: Real>(tape: &mut Tape<T>, x: Var, mode: UpsampleMode) -> Var {
    let out = upsample2x_forward(tape.value(x), mode);
    tape.record_cost("upsample", 0, out.numel() as u64);
    tape.push(out, &[x], Box::new(move |_, _, g| vec![Some(upsample2x_adjoint(g, mode))]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_replicates_a_single_voxel() {
        let x = Tensor::from_vec([1; 5], vec![7.0f64]).unwrap();
        let y = upsample2x_forward(&x, UpsampleMode::Nearest);
        assert_eq!(y.shape(), [1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::full([1, 2, 3, 2, 1], 1.25f64);
        for mode in [UpsampleMode::Trilinear, UpsampleMode::Nearest] {
            let y = upsample2x_forward(&x, mode);
            assert_eq!(y.shape(), [1, 2, 6, 4, 2]);
            assert!(y.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
        }
    }

    #[test]
    fn linear_taps_match_align_corners_false() {
        // n = 4: outputs 0..8 sample at max(0, o/2 - 0.25)
        assert_eq!(linear_taps(0, 4), (0, 1, 0.0));
        assert_eq!(linear_taps(1, 4), (0, 1, 0.25));
        assert_eq!(linear_taps(2, 4), (0, 1, 0.75));
        assert_eq!(linear_taps(7, 4), (3, 3, 0.25));
    }
}
