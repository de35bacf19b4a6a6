//! Reductions, reshapes, and small dense linear algebra.

use super::{Op, Tape, TensorId};
use crate::error::{Error, Result};

impl Tape {
    /// Sum of all elements, as a shape-[1] scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let req = self.requires(x);
        Ok(self.push(vec![1], vec![s], Op::Sum { x }, req))
    }

    /// Mean of all elements, as a shape-[1] scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.numel(x);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-(sample, channel) mean over the spatial dimensions:
    /// [N, C, H, W] -> [N, C, 1, 1].
    pub fn spatial_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.shape4(x)?;
        if h * w == 0 {
            return Err(Error::shape("spatial_mean on empty spatial extent".to_string()));
        }
        let xd = self.data(x);
        let inv = 1.0 / (h * w) as f64;
        let out: Vec<f64> = (0..n * c)
            .map(|p| xd[p * h * w..(p + 1) * h * w].iter().sum::<f64>() * inv)
            .collect();
        let req = self.requires(x);
        Ok(self.push(vec![n, c, 1, 1], out, Op::SpatialMean { x }, req))
    }

    /// [M, K] x [K, N] -> [M, N].
    pub fn matmul2d(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul2d shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, Op::MatMul2d { a, b }, req))
    }

    /// [M, N] -> [N, M].
    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose2d on shape {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![n, m], out, Op::Transpose2d { x }, req))
    }

    /// Column sums of a 2-d tensor: [R, C] -> [1, C].
    pub fn sum_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("sum_axis0 on shape {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; c];
        for row in 0..r {
            for col in 0..c {
                out[col] += xd[row * c + col];
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![1, c], out, Op::SumAxis0 { x }, req))
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let req = self.requires(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, req))
    }

    /// Concatenate 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels of zero tensors".to_string()));
        }
        let [n, _, h, w] = self.shape4(xs[0])?;
        let mut c_total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.shape4(x)?;
            if xn != n || xh != h || xw != w {
                return Err(Error::shape(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    self.shape(xs[0]),
                    self.shape(x)
                )));
            }
            c_total += xc;
        }
        let mut out = vec![0.0; n * c_total * h * w];
        for ni in 0..n {
            let mut c_off = 0;
            for &x in xs {
                let c = self.shape(x)[1];
                let src = &self.data(x)[ni * c * h * w..(ni + 1) * c * h * w];
                let dst_start = (ni * c_total + c_off) * h * w;
                out[dst_start..dst_start + c * h * w].copy_from_slice(src);
                c_off += c;
            }
        }
        let req = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(vec![n, c_total, h, w], out, Op::ConcatChannels { xs: xs.to_vec() }, req))
    }

    /// Copy a spatial window: [N, C, H, W] -> [N, C, ph, pw] from (r0, c0).
    pub fn extract_patch(&mut self, x: TensorId, r0: usize, c0: usize, ph: usize, pw: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.shape4(x)?;
        if r0 + ph > h || c0 + pw > w || ph == 0 || pw == 0 {
            return Err(Error::invalid(format!(
                "patch {ph}x{pw} at ({r0},{c0}) outside {h}x{w}"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * ph * pw];
        for plane in 0..n * c {
            let base = plane * h * w;
            for py in 0..ph {
                let src = base + (r0 + py) * w + c0;
                let dst = plane * ph * pw + py * pw;
                out[dst..dst + pw].copy_from_slice(&xd[src..src + pw]);
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![n, c, ph, pw], out, Op::ExtractPatch { x, r0, c0 }, req))
    }
}

pub(super) fn sum_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId) {
    if !tape.requires(x) {
        return;
    }
    let gv = g[0];
    let gx = tape.flow_buf(flow, x);
    for v in gx.iter_mut() {
        *v += gv;
    }
}

pub(super) fn spatial_mean_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId) {
    if !tape.requires(x) {
        return;
    }
    let [n, c, h, w] = tape.shape4(x).unwrap();
    let inv = 1.0 / (h * w) as f64;
    let gx = tape.flow_buf(flow, x);
    for p in 0..n * c {
        let gv = g[p] * inv;
        for v in &mut gx[p * h * w..(p + 1) * h * w] {
            *v += gv;
        }
    }
}

pub(super) fn matmul_backward(
    tape: &Tape,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    a: TensorId,
    b: TensorId,
) {
    let (m, k) = {
        let s = tape.shape(a);
        (s[0], s[1])
    };
    let n = tape.shape(b)[1];
    let ad = tape.data(a);
    let bd = tape.data(b);

    if tape.requires(a) {
        // dA = G B^T
        let ga = tape.flow_buf(flow, a);
        for i in 0..m {
            for p in 0..k {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += g[i * n + j] * bd[p * n + j];
                }
                ga[i * k + p] += acc;
            }
        }
    }
    if tape.requires(b) {
        // dB = A^T G
        let gb = tape.flow_buf(flow, b);
        for p in 0..k {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += ad[i * k + p] * g[i * n + j];
                }
                gb[p * n + j] += acc;
            }
        }
    }
}

pub(super) fn transpose_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId) {
    if !tape.requires(x) {
        return;
    }
    let s = tape.shape(x);
    let (m, n) = (s[0], s[1]);
    let gx = tape.flow_buf(flow, x);
    for i in 0..m {
        for j in 0..n {
            gx[i * n + j] += g[j * m + i];
        }
    }
}

pub(super) fn sum_axis0_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId) {
    if !tape.requires(x) {
        return;
    }
    let s = tape.shape(x);
    let (r, c) = (s[0], s[1]);
    let gx = tape.flow_buf(flow, x);
    for row in 0..r {
        for col in 0..c {
            gx[row * c + col] += g[col];
        }
    }
}

pub(super) fn concat_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], xs: &[TensorId]) {
    let [n, _, h, w] = tape.shape4(xs[0]).unwrap();
    let c_total: usize = xs.iter().map(|&x| tape.shape(x)[1]).sum();
    for ni in 0..n {
        let mut c_off = 0;
        for &x in xs {
            let c = tape.shape(x)[1];
            if tape.requires(x) {
                let gx = tape.flow_buf(flow, x);
                let src = (ni * c_total + c_off) * h * w;
                let dst = ni * c * h * w;
                for i in 0..c * h * w {
                    gx[dst + i] += g[src + i];
                }
            }
            c_off += c;
        }
    }
}

pub(super) fn extract_patch_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
    r0: usize,
    c0: usize,
) {
    if !tape.requires(x) {
        return;
    }
    let [n, c, h, w] = tape.shape4(x).unwrap();
    let os = &tape.nodes[out].shape;
    let (ph, pw) = (os[2], os[3]);
    let gx = tape.flow_buf(flow, x);
    for plane in 0..n * c {
        let base = plane * h * w;
        for py in 0..ph {
            let dst = base + (r0 + py) * w + c0;
            let src = plane * ph * pw + py * pw;
            for px in 0..pw {
                gx[dst + px] += g[src + px];
            }
        }
    }
}
