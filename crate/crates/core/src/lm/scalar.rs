//! Scalar abstraction for the inference path: plain `f64`, or a dual number
//! carrying one directional derivative alongside the value.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn cst(x: f64) -> Self;
    /// Real part.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Forward-mode dual number `v + d·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, e * self.d)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.v * c, self.d * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Scalar>(x: S) -> S {
        (x * x + S::cst(1.0)).ln() / x.exp().sqrt() + x.tanh()
    }

    #[test]
    fn dual_matches_central_difference() {
        for &x in &[-1.3, 0.2, 0.9, 2.5] {
            let h = 1e-6;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            let d = f(Dual::new(x, 1.0));
            assert!((d.v - f(x)).abs() < 1e-15);
            assert!((d.d - fd).abs() < 1e-8, "x={x}: {} vs {fd}", d.d);
        }
    }
}
