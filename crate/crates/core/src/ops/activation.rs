use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// Exact Gaussian-CDF form `x·Φ(x)`.
    Gelu,
    LeakyRelu(f64),
    Relu,
}

pub const LEAKY_SLOPE: f64 = 0.01;

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu(x),
            Activation::LeakyRelu(a) => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::lit(a)
                }
            }
            Activation::Relu => x.max(T::zero()),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::LeakyRelu(a) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::lit(a)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn activation<T: Real>(tape: &mut Tape<T>, kind: Activation, x: Var) -> Var {
    let out = tape.value(x).map(|v| kind.apply(v));
    tape.record_cost("activation", 0, out.numel() as u64);
    tape.push(
        out,
        &[x],
        Box::new(move |inp, _, g| {
            vec![Some(g.zip_map(inp[0], |gv, xv| gv * kind.derivative(xv)).expect("same shape"))]
        }),
    )
}

pub fn gelu_var<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    activation(tape, Activation::Gelu, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert!((Activation::LeakyRelu(0.01).apply(-2.0f64) + 0.02).abs() < 1e-15);
        // Φ(1) = 0.8413447460685429
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }
}
