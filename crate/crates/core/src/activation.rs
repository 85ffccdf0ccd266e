//! Scalar activations and their derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::element::Element;

/// Logistic function, kept inside the open unit interval where the exact
/// value would round to 0 or 1.
#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    let s = if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    };
    s.max(T::TINY).min(T::BELOW_ONE)
}

/// `tanh`, kept inside `(−1, 1)`.
#[inline]
pub fn tanh<T: Element>(x: T) -> T {
    x.tanh().max(-T::BELOW_ONE).min(T::BELOW_ONE)
}

#[inline]
pub fn sigmoid_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE - s)
}

#[inline]
pub fn tanh_grad<T: Element>(x: T) -> T {
    let t = tanh(x);
    T::ONE - t * t
}

/// Exact GeLU, `x·Φ(x)` with the Gaussian CDF.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let v = x.to_f64();
    T::from_f64(0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let v = x.to_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * v * v) / (2.0 * PI).sqrt();
    T::from_f64(cdf + v * pdf)
}

#[inline]
pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

/// `ln(1 + e^x)`, evaluated without overflow.
#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    let v = x.to_f64();
    T::from_f64(v.max(0.0) + libm::log1p(libm::exp(-v.abs())))
}

#[inline]
pub fn softplus_grad<T: Element>(x: T) -> T {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_outputs_stay_open() {
        for x in [20.0f32, 100.0, 1e30] {
            assert!(sigmoid(x) < 1.0 && sigmoid(-x) > 0.0);
            assert!(tanh(x) < 1.0 && tanh(-x) > -1.0);
        }
        for x in [40.0f64, 800.0] {
            assert!(sigmoid(x) < 1.0 && sigmoid(-x) > 0.0);
            assert!(tanh(x) < 1.0 && tanh(-x) > -1.0);
        }
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    /// Φ(x) by composite Simpson quadrature of the normal density from 0.
    fn phi_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(i as f64 * h);
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn gelu_matches_quadrature() {
        for &x in &[-3.0f64, -1.0, 0.0, 1.0, 3.0] {
            let oracle = x * phi_quadrature(x);
            assert!((gelu(x) - oracle).abs() < 1e-12, "x={x}: {} vs {oracle}", gelu(x));
        }
    }

    #[test]
    fn fixed_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert_eq!(sigmoid_grad(0.0f64), 0.25);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        for &x in &[-1e4f32, -80.0, 80.0, 1e4] {
            assert!(sigmoid(x).is_finite());
            assert!(softplus(x).is_finite());
            assert!(silu(x).is_finite());
            assert!(gelu(x).is_finite());
        }
        assert!(sigmoid(-1e4f32) >= 0.0 && sigmoid(1e4f32) <= 1.0);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        let cases: [(fn(f64) -> f64, fn(f64) -> f64); 5] = [
            (sigmoid, sigmoid_grad),
            (|x| x.tanh(), tanh_grad),
            (gelu, gelu_grad),
            (silu, silu_grad),
            (softplus, softplus_grad),
        ];
        for (f, df) in cases {
            for &x in &[-2.5, -0.3, 0.0, 0.7, 4.0] {
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                assert!((fd - df(x)).abs() < 1e-8, "x={x}: {fd} vs {}", df(x));
            }
        }
    }
}
