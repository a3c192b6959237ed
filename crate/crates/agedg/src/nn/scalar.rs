//! Scalar abstraction that lets the network and loss code run either on
//! plain `f64` or on forward-mode dual numbers.
//!
//! Every forward and backward pass in this crate is written once, generic
//! over [`Scalar`]. Instantiated at `f64` it is ordinary training math;
//! instantiated at [`Dual`] the same backward pass yields exact
//! Hessian-vector products (forward-over-reverse), which is what the
//! second-order MLDG mode uses. No comparison operators are part of the
//! trait: branching code must compare `.value()`s, so both instantiations
//! take identical control-flow paths.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Zero
    + One
{
    fn from_f64(v: f64) -> Self;
    /// The underlying primal value (drops any derivative payload).
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// First-order dual number: `re + du·ε` with `ε² = 0`.
///
/// Seeding the parameters of a computation with `du = v_i` and reading
/// `du` off the result propagates the directional derivative along `v`
/// exactly (to machine precision, not by finite differencing).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }

    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.re * rhs.du + self.du * rhs.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        Dual::new(
            self.re / rhs.re,
            (self.du * rhs.re - self.re * rhs.du) / (rhs.re * rhs.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, rhs: Dual) {
        *self = *self + rhs;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, rhs: Dual) {
        *self = *self - rhs;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, rhs: Dual) {
        *self = *self * rhs;
    }
}

impl Zero for Dual {
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.du == 0.0
    }
}

impl One for Dual {
    fn one() -> Self {
        Dual::new(1.0, 0.0)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn deriv_matches(f: impl Fn(Dual) -> Dual, g: impl Fn(f64) -> f64, x: f64) {
        let d = f(Dual::new(x, 1.0));
        let h = 1e-6;
        let fd = (g(x + h) - g(x - h)) / (2.0 * h);
        assert_relative_eq!(d.du, fd, max_relative = 1e-6, epsilon = 1e-9);
        assert_relative_eq!(d.re, g(x), max_relative = 1e-12);
    }

    #[test]
    fn dual_elementary_derivatives() {
        deriv_matches(|x| x.exp(), f64::exp, 0.7);
        deriv_matches(|x| x.ln(), f64::ln, 2.3);
        deriv_matches(|x| x.tanh(), f64::tanh, -0.4);
        deriv_matches(|x| x.sqrt(), f64::sqrt, 1.9);
    }

    #[test]
    fn dual_product_and_quotient_rules() {
        // d/dx [x^2 / (x + 2)] at x = 3: (x^2 + 4x) / (x+2)^2 = 21/25.
        let x = Dual::new(3.0, 1.0);
        let y = x * x / (x + Dual::constant(2.0));
        assert_relative_eq!(y.re, 9.0 / 5.0, max_relative = 1e-15);
        assert_relative_eq!(y.du, 21.0 / 25.0, max_relative = 1e-15);
    }

    #[test]
    fn dual_chain_through_composition() {
        // f(x) = tanh(exp(x) * x), checked against finite differences.
        let g = |x: f64| (x.exp() * x).tanh();
        deriv_matches(|x| (x.exp() * x).tanh(), g, 0.3);
    }
}
