//! 3D cross-correlation with zero padding, stride, dilation and groups.
//!
//! Three kernels share one contract: pointwise (1×1×1, unit stride, no
//! padding) is a single matrix product per batch element, single-channel
//! groups (depthwise) accumulate tap by tap, and everything else goes
//! through im2col + GEMM. The kernel is never flipped.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv3dSpec {
    /// Cubic kernel `k`, unit stride and dilation, `padding = k / 2`, with bias.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Conv3dSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [1; 3],
            padding: [k / 2; 3],
            dilation: [1; 3],
            groups: 1,
            has_bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    /// Per-channel convolution that keeps the output extent for odd `k`.
    pub fn depthwise(channels: usize, k: usize, dilation: usize) -> Self {
        Conv3dSpec {
            groups: channels,
            dilation: [dilation; 3],
            padding: [dilation * (k - 1) / 2; 3],
            ..Self::new(channels, channels, k)
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = [s; 3];
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = [p; 3];
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = [d; 3];
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Shape {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn bias_shape(&self) -> Shape {
        [self.out_channels, 1, 1, 1, 1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel_volume()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.out_channels > 0
            && self.groups > 0
            && self.kernel.iter().chain(&self.stride).chain(&self.dilation).all(|&v| v > 0);
        if !positive {
            return Err(Error::arg(format!("non-positive conv parameter in {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::shape(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// `floor((n + 2p − d·(k−1) − 1) / s) + 1`, or an error if that is < 1.
    pub fn out_extent(&self, axis: usize, n: usize) -> Result<usize> {
        let span = self.dilation[axis] * (self.kernel[axis] - 1) + 1;
        let padded = n + 2 * self.padding[axis];
        if padded < span {
            return Err(Error::shape(format!(
                "axis {axis}: extent {n} with padding {} is smaller than the dilated kernel span {span}",
                self.padding[axis]
            )));
        }
        Ok((padded - span) / self.stride[axis] + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input[1] != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {} (input {input:?})",
                self.in_channels, input[1]
            )));
        }
        Ok([
            input[0],
            self.out_channels,
            self.out_extent(0, input[2])?,
            self.out_extent(1, input[3])?,
            self.out_extent(2, input[4])?,
        ])
    }

    /// Multiply-accumulates for one forward pass producing `out`.
    pub fn macs(&self, out: Shape) -> u64 {
        (numel(&out) * self.fan_in()) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3] && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.out_per_group() == 1
    }
}

/// Valid output range along one axis for kernel tap `t`: output positions
/// `o` in `[lo, hi)` read input `o·s − p + t·d`.
fn tap_range(n_in: usize, n_out: usize, s: usize, p: usize, d: usize, t: usize) -> (usize, usize) {
    let off = (t * d) as isize - p as isize;
    // need 0 <= o*s + off < n_in
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let hi_excl = if (n_in as isize) - off <= 0 {
        0
    } else {
        ((n_in as isize - off - 1) as usize) / s + 1
    };
    let hi = hi_excl.min(n_out);
    (lo.min(hi), hi)
}

/// Calls `f(out_offset, in_offset, len, in_step)` for every contiguous row of
/// output positions touched by one kernel tap.
fn for_each_tap_row(
    spec: &Conv3dSpec,
    sp_in: [usize; 3],
    sp_out: [usize; 3],
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let r: [(usize, usize); 3] = std::array::from_fn(|a| {
        tap_range(sp_in[a], sp_out[a], spec.stride[a], spec.padding[a], spec.dilation[a], tap[a])
    });
    if r.iter().any(|(lo, hi)| lo >= hi) {
        return;
    }
    let in_idx = |a: usize, o: usize| o * spec.stride[a] + tap[a] * spec.dilation[a] - spec.padding[a];
    let len = r[2].1 - r[2].0;
    let iw0 = in_idx(2, r[2].0);
    for od in r[0].0..r[0].1 {
        let id = in_idx(0, od);
        for oh in r[1].0..r[1].1 {
            let ih = in_idx(1, oh);
            let o_off = (od * sp_out[1] + oh) * sp_out[2] + r[2].0;
            let i_off = (id * sp_in[1] + ih) * sp_in[2] + iw0;
            f(o_off, i_off, len, spec.stride[2]);
        }
    }
}

fn taps(spec: &Conv3dSpec) -> impl Iterator<Item = [usize; 3]> + '_ {
    let [kd, kh, kw] = spec.kernel;
    (0..kd).flat_map(move |a| (0..kh).flat_map(move |b| (0..kw).map(move |c| [a, b, c])))
}

/// Column matrix `[cin_g·kvol, v_out]` for one (batch, group) input slab.
fn im2col<T: Real>(spec: &Conv3dSpec, x: &[T], sp_in: [usize; 3], sp_out: [usize; 3]) -> Vec<T> {
    let v_in = sp_in.iter().product::<usize>();
    let v_out = sp_out.iter().product::<usize>();
    let kvol = spec.kernel_volume();
    let cin = spec.in_per_group();
    let mut cols = vec![T::zero(); cin * kvol * v_out];
    for ci in 0..cin {
        let xc = &x[ci * v_in..(ci + 1) * v_in];
        for (ti, tap) in taps(spec).enumerate() {
            let row = &mut cols[(ci * kvol + ti) * v_out..(ci * kvol + ti + 1) * v_out];
            for_each_tap_row(spec, sp_in, sp_out, tap, |o, i, len, step| {
                for j in 0..len {
                    row[o + j] = xc[i + j * step];
                }
            });
        }
    }
    cols
}

fn col2im_add<T: Real>(spec: &Conv3dSpec, cols: &[T], dx: &mut [T], sp_in: [usize; 3], sp_out: [usize; 3]) {
    let v_in = sp_in.iter().product::<usize>();
    let v_out = sp_out.iter().product::<usize>();
    let kvol = spec.kernel_volume();
    for ci in 0..spec.in_per_group() {
        let dxc = &mut dx[ci * v_in..(ci + 1) * v_in];
        for (ti, tap) in taps(spec).enumerate() {
            let row = &cols[(ci * kvol + ti) * v_out..(ci * kvol + ti + 1) * v_out];
            for_each_tap_row(spec, sp_in, sp_out, tap, |o, i, len, step| {
                for j in 0..len {
                    dxc[i + j * step] += row[o + j];
                }
            });
        }
    }
}

fn check_operands<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &Conv3dSpec) -> Result<Shape> {
    let out = spec.output_shape(x.shape())?;
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "conv weight has shape {:?}, expected {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.numel() == spec.out_channels => {}
        (None, false) => {}
        (b, _) => {
            return Err(Error::shape(format!(
                "conv bias {:?} inconsistent with has_bias={} and {} outputs",
                b.map(|t| t.shape()),
                spec.has_bias,
                spec.out_channels
            )))
        }
    }
    Ok(out)
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>> {
    let out_shape = check_operands(x, w, bias, spec)?;
    let [batch, _, s, h, wd] = x.shape();
    let sp_in = [s, h, wd];
    let sp_out = [out_shape[2], out_shape[3], out_shape[4]];
    let v_in = s * h * wd;
    let v_out = sp_out.iter().product::<usize>();
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let mut out = vec![T::zero(); numel(&out_shape)];

    if let Some(b) = bias {
        for bi in 0..batch {
            for co in 0..cout {
                let bv = b.data()[co];
                out[(bi * cout + co) * v_out..(bi * cout + co + 1) * v_out]
                    .iter_mut()
                    .for_each(|o| *o = bv);
            }
        }
    }

    let xd = x.data();
    let wdata = w.data();
    if spec.is_pointwise() {
        for bi in 0..batch {
            T::gemm(
                cout,
                cin,
                v_out,
                T::one(),
                wdata,
                (cin as isize, 1),
                &xd[bi * cin * v_in..(bi + 1) * cin * v_in],
                (v_out as isize, 1),
                T::one(),
                &mut out[bi * cout * v_out..(bi + 1) * cout * v_out],
                (v_out as isize, 1),
            );
        }
    } else if spec.is_depthwise() {
        let kvol = spec.kernel_volume();
        for bi in 0..batch {
            for c in 0..cout {
                let xc = &xd[(bi * cin + c) * v_in..(bi * cin + c + 1) * v_in];
                let oc = &mut out[(bi * cout + c) * v_out..(bi * cout + c + 1) * v_out];
                for (ti, tap) in taps(spec).enumerate() {
                    let wv = wdata[c * kvol + ti];
                    for_each_tap_row(spec, sp_in, sp_out, tap, |o, i, len, step| {
                        for j in 0..len {
                            oc[o + j] += wv * xc[i + j * step];
                        }
                    });
                }
            }
        }
    } else {
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        let krow = cin_g * spec.kernel_volume();
        for bi in 0..batch {
            for g in 0..spec.groups {
                let xs = &xd[(bi * cin + g * cin_g) * v_in..(bi * cin + (g + 1) * cin_g) * v_in];
                let cols = im2col(spec, xs, sp_in, sp_out);
                let o0 = (bi * cout + g * cout_g) * v_out;
                T::gemm(
                    cout_g,
                    krow,
                    v_out,
                    T::one(),
                    &wdata[g * cout_g * krow..(g + 1) * cout_g * krow],
                    (krow as isize, 1),
                    &cols,
                    (v_out as isize, 1),
                    T::one(),
                    &mut out[o0..o0 + cout_g * v_out],
                    (v_out as isize, 1),
                );
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv3dSpec,
) -> ConvGrads<T> {
    let [batch, _, s, h, wd] = x.shape();
    let gs = grad_out.shape();
    let sp_in = [s, h, wd];
    let sp_out = [gs[2], gs[3], gs[4]];
    let v_in = s * h * wd;
    let v_out = sp_out.iter().product::<usize>();
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let xd = x.data();
    let wdata = w.data();
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];

    let db = spec.has_bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for bi in 0..batch {
            for (co, d) in db.iter_mut().enumerate() {
                *d += gd[(bi * cout + co) * v_out..(bi * cout + co + 1) * v_out]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
        }
        Tensor::from_vec(spec.bias_shape(), db).expect("bias shape")
    });

    if spec.is_pointwise() {
        for bi in 0..batch {
            let xs = &xd[bi * cin * v_in..(bi + 1) * cin * v_in];
            let gsl = &gd[bi * cout * v_out..(bi + 1) * cout * v_out];
            // dW += G · Xᵀ
            T::gemm(cout, v_out, cin, T::one(), gsl, (v_out as isize, 1), xs, (1, v_in as isize), T::one(), &mut dw, (cin as isize, 1));
            // dX = Wᵀ · G
            T::gemm(
                cin,
                cout,
                v_out,
                T::one(),
                wdata,
                (1, cin as isize),
                gsl,
                (v_out as isize, 1),
                T::zero(),
                &mut dx[bi * cin * v_in..(bi + 1) * cin * v_in],
                (v_in as isize, 1),
            );
        }
    } else if spec.is_depthwise() {
        let kvol = spec.kernel_volume();
        for bi in 0..batch {
            for c in 0..cout {
                let xc = &xd[(bi * cin + c) * v_in..(bi * cin + c + 1) * v_in];
                let gc = &gd[(bi * cout + c) * v_out..(bi * cout + c + 1) * v_out];
                let dxc = &mut dx[(bi * cin + c) * v_in..(bi * cin + c + 1) * v_in];
                for (ti, tap) in taps(spec).enumerate() {
                    let wv = wdata[c * kvol + ti];
                    let mut acc = T::zero();
                    for_each_tap_row(spec, sp_in, sp_out, tap, |o, i, len, step| {
                        for j in 0..len {
                            acc += gc[o + j] * xc[i + j * step];
                            dxc[i + j * step] += wv * gc[o + j];
                        }
                    });
                    dw[c * kvol + ti] += acc;
                }
            }
        }
    } else {
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        let krow = cin_g * spec.kernel_volume();
        let mut dcols = vec![T::zero(); krow * v_out];
        for bi in 0..batch {
            for g in 0..spec.groups {
                let x0 = (bi * cin + g * cin_g) * v_in;
                let cols = im2col(spec, &xd[x0..x0 + cin_g * v_in], sp_in, sp_out);
                let g0 = (bi * cout + g * cout_g) * v_out;
                let gsl = &gd[g0..g0 + cout_g * v_out];
                let wg = g * cout_g * krow..(g + 1) * cout_g * krow;
                T::gemm(
                    cout_g,
                    v_out,
                    krow,
                    T::one(),
                    gsl,
                    (v_out as isize, 1),
                    &cols,
                    (1, v_out as isize),
                    T::one(),
                    &mut dw[wg.clone()],
                    (krow as isize, 1),
                );
                T::gemm(
                    krow,
                    cout_g,
                    v_out,
                    T::one(),
                    &wdata[wg],
                    (1, krow as isize),
                    gsl,
                    (v_out as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (v_out as isize, 1),
                );
                col2im_add(spec, &dcols, &mut dx[x0..x0 + cin_g * v_in], sp_in, sp_out);
            }
        }
    }

    ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx).expect("dx shape"),
        dw: Tensor::from_vec(w.shape(), dw).expect("dw shape"),
        db,
    }
}

/// Differentiable convolution recorded on the tape.
pub fn conv3d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: &Conv3dSpec) -> Result<Var> {
    let out = conv3d_forward(tape.value(x), tape.value(w), bias.map(|b| tape.value(b)), spec)?;
    tape.record_cost("conv3d", spec.macs(out.shape()), 0);
    let spec = *spec;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(tape.push(
        out,
        &inputs,
        Box::new(move |inp, _, g| {
            let grads = conv3d_backward(inp[0], inp[1], g, &spec);
            let mut v = vec![Some(grads.dx), Some(grads.dw)];
            if spec.has_bias {
                v.push(grads.db);
            }
            v
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_product() {
        let spec = Conv3dSpec::pointwise(1, 1).with_bias(false);
        let x = Tensor::from_vec([1; 5], vec![2.0]).unwrap();
        let w = Tensor::from_vec([1; 5], vec![3.0]).unwrap();
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn centered_dirac_kernel_is_identity() {
        let spec = Conv3dSpec::new(2, 2, 3).with_bias(false);
        let x = Tensor::<f64>::from_fn([1, 2, 4, 3, 5], |i| (i as f64 * 0.7).sin());
        let mut w = Tensor::zeros(spec.weight_shape());
        w.set([0, 0, 1, 1, 1], 1.0);
        w.set([1, 1, 1, 1, 1], 1.0);
        assert_eq!(conv3d_forward(&x, &w, None, &spec).unwrap(), x);
        let dw = Conv3dSpec::depthwise(2, 3, 1).with_bias(false);
        let mut k = Tensor::zeros(dw.weight_shape());
        k.set([0, 0, 1, 1, 1], 1.0);
        k.set([1, 0, 1, 1, 1], 1.0);
        assert_eq!(conv3d_forward(&x, &k, None, &dw).unwrap(), x);
    }

    #[test]
    fn group_mismatch_is_shape_error() {
        let spec = Conv3dSpec::new(3, 4, 3).with_groups(2);
        assert!(matches!(spec.validate(), Err(Error::Shape(_))));
        let ok = Conv3dSpec::new(2, 2, 1);
        assert!(matches!(ok.output_shape([1, 3, 2, 2, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn too_small_input_is_shape_error() {
        let spec = Conv3dSpec::new(1, 1, 7).with_padding(0);
        assert!(matches!(spec.output_shape([1, 1, 4, 9, 9]), Err(Error::Shape(_))));
    }

    #[test]
    fn output_extent_matches_enumeration() {
        for n in 1..9 {
            for k in 1..5 {
                for s in 1..4 {
                    for p in 0..3 {
                        for d in 1..4 {
                            let spec = Conv3dSpec::new(1, 1, k).with_stride(s).with_padding(p).with_dilation(d);
                            // count window origins whose dilated span fits in the padded axis
                            let padded = (n + 2 * p) as isize;
                            let span = (d * (k - 1) + 1) as isize;
                            let count = (0..padded).step_by(s).filter(|&o| o + span <= padded).count();
                            match spec.out_extent(0, n) {
                                Ok(e) => assert_eq!(e, count, "n={n} k={k} s={s} p={p} d={d}"),
                                Err(_) => assert_eq!(count, 0),
                            }
                        }
                    }
                }
            }
        }
    }
}
