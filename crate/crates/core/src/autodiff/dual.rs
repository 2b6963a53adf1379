use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::geometry::Real;

/// Forward-mode dual number carrying six partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual6 {
    pub v: f64,
    pub d: [f64; 6],
}

impl Dual6 {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 6] }
    }

    pub fn variable(v: f64, index: usize) -> Self {
        let mut d = [0.0; 6];
        d[index] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, slope: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * slope),
        }
    }
}

impl Add for Dual6 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Self { v: self.v + o.v, d }
    }
}

impl Sub for Dual6 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a -= b);
        Self { v: self.v - o.v, d }
    }
}

impl Mul for Dual6 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual6 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = (self.d[i] * o.v - self.v * o.d[i]) * inv * inv;
        }
        Self { v: self.v * inv, d }
    }
}

impl Neg for Dual6 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Real for Dual6 {
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
}
