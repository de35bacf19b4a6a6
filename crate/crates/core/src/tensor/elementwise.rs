//! Elementwise arithmetic and activations.
//!
//! Binary operations broadcast the right operand: either a single-element
//! scalar against any shape, or an equal-rank shape whose dimensions are each
//! equal to the left operand's or 1 (the per-channel `N x C x 1 x 1` case the
//! normalization path needs). The left operand is never broadcast.

use super::{BinaryKind, Op, Tape, TensorId, UnaryKind};
use crate::error::{Error, Result};

const SAFE_DIV_EPS: f64 = 1e-12;

/// How the right operand maps onto the left operand's index space.
enum Broadcast {
    Same,
    Scalar,
    /// Per-dimension strides into b, zero where b's dim is 1.
    Strided(Vec<usize>, Vec<usize>), // (a_shape, b_strides)
}

fn broadcast_plan(a_shape: &[usize], b_shape: &[usize]) -> Result<Broadcast> {
    if a_shape == b_shape {
        return Ok(Broadcast::Same);
    }
    if b_shape.iter().product::<usize>() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a_shape.len() != b_shape.len() {
        return Err(Error::shape(format!(
            "incompatible shapes {a_shape:?} vs {b_shape:?}"
        )));
    }
    let mut strides = vec![0usize; b_shape.len()];
    let mut acc = 1usize;
    for d in (0..b_shape.len()).rev() {
        if b_shape[d] != 1 && b_shape[d] != a_shape[d] {
            return Err(Error::shape(format!(
                "incompatible shapes {a_shape:?} vs {b_shape:?}"
            )));
        }
        strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    Ok(Broadcast::Strided(a_shape.to_vec(), strides))
}

/// Map flat index in a's space to flat index in b's space.
fn b_index(plan: &Broadcast, flat: usize) -> usize {
    match plan {
        Broadcast::Same => flat,
        Broadcast::Scalar => 0,
        Broadcast::Strided(a_shape, b_strides) => {
            let mut rem = flat;
            let mut bi = 0;
            for d in (0..a_shape.len()).rev() {
                let coord = rem % a_shape[d];
                rem /= a_shape[d];
                bi += coord * b_strides[d];
            }
            bi
        }
    }
}

fn guard(b: f64) -> f64 {
    if b >= 0.0 {
        b + SAFE_DIV_EPS
    } else {
        b - SAFE_DIV_EPS
    }
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let plan = broadcast_plan(self.shape(a), self.shape(b))?;
        let ad = self.data(a);
        let bd = self.data(b);
        let out: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &av)| {
                let bv = bd[b_index(&plan, i)];
                match kind {
                    BinaryKind::Add => av + bv,
                    BinaryKind::Sub => av - bv,
                    BinaryKind::Mul => av * bv,
                    BinaryKind::Div => av / bv,
                    BinaryKind::SafeDiv => av / guard(bv),
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, Op::Binary { kind, a, b }, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Division with the denominator's magnitude floored at 1e-12.
    pub fn safe_div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::SafeDiv, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Abs => v.abs(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        Ok(self.push(shape, out, Op::Unary { kind, x }, req))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        Ok(self.push(shape, out, Op::AddScalar { x }, req))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        Ok(self.push(shape, out, Op::Scale { x, c }, req))
    }
}

pub(super) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(super) fn binary_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    kind: BinaryKind,
    a: TensorId,
    b: TensorId,
) {
    let plan = broadcast_plan(tape.shape(a), tape.shape(b)).unwrap();
    let ad = tape.data(a);
    let bd = tape.data(b);
    let _ = out;

    if tape.requires(a) {
        let ga = tape.flow_buf(flow, a);
        for (i, gi) in g.iter().enumerate() {
            let bv = bd[b_index(&plan, i)];
            ga[i] += match kind {
                BinaryKind::Add | BinaryKind::Sub => *gi,
                BinaryKind::Mul => gi * bv,
                BinaryKind::Div => gi / bv,
                BinaryKind::SafeDiv => gi / guard(bv),
            };
        }
    }
    if tape.requires(b) {
        let gb = tape.flow_buf(flow, b);
        for (i, gi) in g.iter().enumerate() {
            let bi = b_index(&plan, i);
            let bv = bd[bi];
            gb[bi] += match kind {
                BinaryKind::Add => *gi,
                BinaryKind::Sub => -gi,
                BinaryKind::Mul => gi * ad[i],
                BinaryKind::Div => -gi * ad[i] / (bv * bv),
                BinaryKind::SafeDiv => {
                    let gv = guard(bv);
                    -gi * ad[i] / (gv * gv)
                }
            };
        }
    }
}

pub(super) fn unary_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    kind: UnaryKind,
    x: TensorId,
) {
    if !tape.requires(x) {
        return;
    }
    let xd = tape.data(x);
    let od = &tape.datas[out];
    let gx = tape.flow_buf(flow, x);
    for (i, gi) in g.iter().enumerate() {
        gx[i] += match kind {
            UnaryKind::Relu => {
                if xd[i] > 0.0 {
                    *gi
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => {
                let s = od[i];
                gi * s * (1.0 - s)
            }
            UnaryKind::Sqrt => gi * 0.5 / od[i],
            UnaryKind::Abs => {
                if xd[i] > 0.0 {
                    *gi
                } else if xd[i] < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }
        };
    }
}

pub(super) fn pass_through_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId) {
    if !tape.requires(x) {
        return;
    }
    let gx = tape.flow_buf(flow, x);
    for (gx_i, gi) in gx.iter_mut().zip(g) {
        *gx_i += *gi;
    }
}

pub(super) fn scale_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId, c: f64) {
    if !tape.requires(x) {
        return;
    }
    let gx = tape.flow_buf(flow, x);
    for (gx_i, gi) in gx.iter_mut().zip(g) {
        *gx_i += gi * c;
    }
}
