//! Dense rank-5 tensors laid out row-major as (batch, channel, depth, height, width).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub type Shape = [usize; 5];

/// Scalar element type. `f64` is used for verification, `f32` for training.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` for row-major-strided matrices
    /// `a: m×k`, `b: k×n`, `c: m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count fits in scalar type")
    }
}

fn check_gemm_bounds<T>(rows: usize, cols: usize, s: (isize, isize), buf: &[T]) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * s.0 + (cols as isize - 1) * s.1;
    assert!(
        s.0 >= 0 && s.1 >= 0 && (last as usize) < buf.len(),
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path, $erf:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_bounds(m, k, a_strides, a);
                check_gemm_bounds(k, n, b_strides, b);
                check_gemm_bounds(m, n, c_strides, c);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand was bounds-checked above against its
                // extents and non-negative strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm, libm::erff);
impl_real!(f64, "f64", matrixmultiply::dgemm, libm::erf);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &Shape) -> Shape {
    let mut s = [1; 5];
    for i in (0..4).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn check_permutation(axes: &[usize; 5]) -> Result<()> {
    let mut seen = [false; 5];
    for &a in axes {
        if a >= 5 || seen[a] {
            return Err(Error::arg(format!("{axes:?} is not a permutation of 0..5")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub fn inverse_permutation(axes: &[usize; 5]) -> [usize; 5] {
    let mut inv = [0; 5];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: (0..numel(&shape)).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1; 5],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, idx: [usize; 5]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: [usize; 5]) -> usize {
        let st = strides(&self.shape);
        idx.iter()
            .zip(&self.shape)
            .zip(&st)
            .map(|((&i, &n), &s)| {
                assert!(i < n, "index {idx:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulating mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Left-to-right sum over the flat buffer.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// `out.shape[i] = self.shape[axes[i]]`, as `torch.permute`.
    pub fn permute(&self, axes: [usize; 5]) -> Result<Self> {
        check_permutation(&axes)?;
        Ok(self.permute_unchecked(axes))
    }

    pub(crate) fn permute_unchecked(&self, axes: [usize; 5]) -> Self {
        if axes == [0, 1, 2, 3, 4] {
            return self.clone();
        }
        let in_st = strides(&self.shape);
        let out_shape: Shape = std::array::from_fn(|i| self.shape[axes[i]]);
        let src_st: [usize; 5] = std::array::from_fn(|i| in_st[axes[i]]);
        let mut data = Vec::with_capacity(self.numel());
        for i0 in 0..out_shape[0] {
            for i1 in 0..out_shape[1] {
                for i2 in 0..out_shape[2] {
                    for i3 in 0..out_shape[3] {
                        let base = i0 * src_st[0] + i1 * src_st[1] + i2 * src_st[2] + i3 * src_st[3];
                        for i4 in 0..out_shape[4] {
                            data.push(self.data[base + i4 * src_st[4]]);
                        }
                    }
                }
            }
        }
        Tensor {
            shape: out_shape,
            data,
        }
    }

    /// (b, C, S, H, W) → (b, C, S·H·W) stored with two trailing unit axes.
    pub fn flatten_spatial(&self) -> Self {
        let [b, c, s, h, w] = self.shape;
        Tensor {
            shape: [b, c, s * h * w, 1, 1],
            data: self.data.clone(),
        }
    }

    /// Slice one batch element, keeping a unit batch axis.
    pub fn batch_item(&self, i: usize) -> Self {
        let per = numel(&self.shape) / self.shape[0];
        let mut shape = self.shape;
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("cannot stack an empty list"))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        shape[0] = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// Integer class map `(b, S, H, W)`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: [usize; 4],
    pub data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 4], data: Vec<u32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "label shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        LabelVolume {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn batch_item(&self, b: usize) -> LabelVolume {
        let v = self.voxels();
        LabelVolume {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[b * v..(b + 1) * v].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[LabelVolume]) -> Result<LabelVolume> {
        let first = items.first().ok_or_else(|| Error::Argument("cannot stack zero label volumes".into()))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for l in items {
            if l.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("label shapes {:?} and {:?} differ", l.shape, first.shape)));
            }
            shape[0] += l.shape[0];
            data.extend_from_slice(&l.data);
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(matches!(
            Tensor::<f64>::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn permute_shape_bookkeeping() {
        let x = ramp([1, 2, 3, 4, 5]);
        let y = x.permute([0, 2, 1, 3, 4]).unwrap();
        assert_eq!(y.shape(), [1, 3, 2, 4, 5]);
        assert_eq!(y.at([0, 2, 1, 3, 4]), x.at([0, 1, 2, 3, 4]));
        assert_eq!(x.permute([0, 1, 2, 3, 4]).unwrap(), x);
    }

    #[test]
    fn permute_rejects_non_permutation() {
        let x = ramp([1, 1, 1, 1, 1]);
        assert!(matches!(x.permute([0, 0, 1, 2, 3]), Err(Error::Argument(_))));
        assert!(matches!(x.permute([0, 1, 2, 3, 5]), Err(Error::Argument(_))));
    }

    #[test]
    fn flatten_spatial_shape() {
        let x = ramp([1, 1, 2, 2, 2]);
        let f = x.flatten_spatial();
        assert_eq!(f.shape(), [1, 1, 8, 1, 1]);
        assert_eq!(f.reshape(x.shape()).unwrap(), x);
    }

    fn any_perm() -> impl Strategy<Value = [usize; 5]> {
        Just(vec![0usize, 1, 2, 3, 4])
            .prop_shuffle()
            .prop_map(|v| [v[0], v[1], v[2], v[3], v[4]])
    }

    proptest! {
        #[test]
        fn permute_round_trip_is_bitwise(
            dims in prop::array::uniform5(1usize..4),
            axes in any_perm(),
            seed in any::<u64>(),
        ) {
            let x = Tensor::<f64>::from_fn(dims, |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 * 0.37 - 11.0);
            let inv = inverse_permutation(&axes);
            let back = x.permute(axes).unwrap().permute(inv).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
