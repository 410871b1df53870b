//! Double-double (~106-bit) forward pass and loss, used only by the
//! finite-difference oracle. In plain `f64`, the roundoff of a central difference at
//! eps = 1e-6 is about 1e-10 absolute. That noise swamps gradient entries near 1e-6.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{Activation, LossKind, MlpModel, LOG_EPSILON};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub(crate) struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_f64(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn mul_f64(self, b: f64) -> Dd {
        let p = self.hi * b;
        let e = self.hi.mul_add(b, -p);
        let (s, e) = quick_two_sum(p, e + self.lo * b);
        Dd { hi: s, lo: e }
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        // x = k·ln2 + r, then exp(r) = (exp(r/1024))^1024 with a Taylor series.
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2.mul_f64(k);
        let r = r.mul_f64(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=14 {
            term = term * r / Dd::from_f64(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    /// Natural log by Newton iteration on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn max(self, other: Dd) -> Dd {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (s, e) = quick_two_sum(s, e + f);
        Dd { hi: s, lo: e }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        let (s, e) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Dd { hi: s, lo: e }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (s, e) = quick_two_sum(q1, q2);
        Dd { hi: s, lo: e } + Dd::from_f64(q3)
    }
}

fn activate(act: Activation, row: &mut [Dd]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for v in row.iter_mut() {
                if !(v.hi > 0.0) {
                    *v = Dd::ZERO;
                }
            }
        }
        Activation::Sigmoid => {
            for v in row.iter_mut() {
                *v = Dd::ONE / (Dd::ONE + (-*v).exp());
            }
        }
        Activation::Tanh => {
            for v in row.iter_mut() {
                let sign = if v.hi < 0.0 { -1.0 } else { 1.0 };
                let e = (Dd::from_f64(-2.0 * sign) * *v).exp();
                *v = Dd::from_f64(sign) * (Dd::ONE - e) / (Dd::ONE + e);
            }
        }
        Activation::Elu => {
            for v in row.iter_mut() {
                if !(v.hi > 0.0) {
                    *v = v.exp() - Dd::ONE;
                }
            }
        }
        Activation::Softmax => {
            let max = row.iter().copied().fold(row[0], Dd::max);
            let mut sum = Dd::ZERO;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
    }
}

/// Parameters of one layer in double-double, allowing one entry to carry an exact
/// `±eps` offset that `f64` could not represent.
pub(crate) struct PreciseLayer {
    pub weights: Vec<Dd>,
    pub biases: Vec<Dd>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

pub(crate) fn precise_layers(model: &MlpModel) -> Vec<PreciseLayer> {
    model
        .layers()
        .iter()
        .map(|l| PreciseLayer {
            weights: l.weights.data().iter().map(|&v| Dd::from_f64(v)).collect(),
            biases: l.biases.iter().map(|&v| Dd::from_f64(v)).collect(),
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            activation: l.activation,
        })
        .collect()
}

pub(crate) fn nudge(v: &mut Dd, delta: f64) {
    *v = *v + Dd::from_f64(delta);
}

/// Batch-mean loss of `layers[start..]` applied to `input` rows (row-major, `width` wide).
pub(crate) fn precise_loss(
    layers: &[PreciseLayer],
    start: usize,
    input: &[Dd],
    width: usize,
    labels: &Matrix,
    kind: LossKind,
) -> Dd {
    let rows = labels.rows();
    let mut x: Vec<Dd> = input.to_vec();
    let mut w = width;
    for layer in &layers[start..] {
        let mut out = vec![Dd::ZERO; rows * layer.out_dim];
        for r in 0..rows {
            for o in 0..layer.out_dim {
                let mut acc = layer.biases[o];
                for i in 0..layer.in_dim {
                    acc = acc + x[r * w + i] * layer.weights[o * layer.in_dim + i];
                }
                out[r * layer.out_dim + o] = acc;
            }
            activate(layer.activation, &mut out[r * layer.out_dim..(r + 1) * layer.out_dim]);
        }
        x = out;
        w = layer.out_dim;
    }
    let mut total = Dd::ZERO;
    for (p, &y) in x.iter().zip(labels.data()) {
        match kind {
            LossKind::CrossEntropy => {
                if y != 0.0 {
                    let p = p.max(Dd::from_f64(LOG_EPSILON));
                    total = total - Dd::from_f64(y) * p.ln();
                }
            }
            LossKind::Mse => {
                let d = *p - Dd::from_f64(y);
                total = total + d * d;
            }
        }
    }
    let denom = match kind {
        LossKind::CrossEntropy => rows as f64,
        LossKind::Mse => (rows * w) as f64,
    };
    total / Dd::from_f64(denom)
}

pub(crate) fn to_precise(m: &Matrix) -> Vec<Dd> {
    m.data().iter().map(|&v| Dd::from_f64(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcendental_accuracy() {
        for &x in &[-3.7, -0.5, 0.0, 1e-9, 0.3, 1.0, 2.5, 20.0] {
            let e = Dd::from_f64(x).exp();
            assert!((e.to_f64() - x.exp()).abs() <= 2e-16 * x.exp().max(1.0), "exp({x})");
            let l = e.ln();
            assert!((l - Dd::from_f64(x)).to_f64().abs() < 1e-28 + 1e-30 * x.abs(), "ln(exp({x}))");
        }
        let third = Dd::ONE / Dd::from_f64(3.0);
        assert!((third * Dd::from_f64(3.0) - Dd::ONE).to_f64().abs() < 1e-31);
    }
}
