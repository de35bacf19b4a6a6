//! Spatial operations: convolution, pooling, bilinear upsampling.
//!
//! Convolution is the hot loop, so its forward and backward passes fan out
//! over disjoint output planes. Every output element is a self-contained
//! accumulation in a fixed order, which keeps the parallel path bit-identical
//! to the sequential one.

use super::{Op, PoolMode, Tape, TensorId};
use crate::error::{Error, Result};
use crate::exec;

impl Tape {
    /// 2-d convolution, NCHW layout, square kernel k in {1, 3}.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let [n, c, h, wd] = self.shape4(x)?;
        let [o, wc, kh, kw] = self.shape4(w)?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::invalid(format!("conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels but weight expects {wc}"
            )));
        }
        if self.shape(b) != [o] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} does not match {o} output channels",
                self.shape(b)
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive".to_string()));
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} exceeds padded input {h}x{wd} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let xd = self.data(x);
        let wdt = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; n * o * oh * ow];
        exec::for_each_chunk(&mut out, oh * ow, |plane, chunk| {
            let ni = plane / o;
            let oi = plane % o;
            let xbase = ni * c * h * wd;
            let wbase = oi * c * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oi];
                    for ci in 0..c {
                        let xc = xbase + ci * h * wd;
                        let wc0 = wbase + ci * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xc + iy as usize * wd;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[xrow + ix as usize] * wdt[wc0 + ky * k + kx];
                            }
                        }
                    }
                    chunk[oy * ow + ox] = acc;
                }
            }
        });

        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, o, oh, ow], out, Op::Conv2d { x, w, b, stride, pad }, req))
    }

    /// Pooling with square kernel; output dims follow (H - k)/stride + 1.
    pub fn pool2d(&mut self, x: TensorId, mode: PoolMode, kernel: usize, stride: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.shape4(x)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("pool2d kernel and stride must be positive".to_string()));
        }
        if kernel > h || kernel > w {
            return Err(Error::invalid(format!(
                "pool2d kernel {kernel} exceeds spatial extent {h}x{w}"
            )));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xd = self.data(x);
        let req = self.requires(x);

        match mode {
            PoolMode::Avg => {
                let inv = 1.0 / (kernel * kernel) as f64;
                let mut out = vec![0.0; n * c * oh * ow];
                exec::for_each_chunk(&mut out, oh * ow, |plane, chunk| {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..kernel {
                                let row = base + (oy * stride + ky) * w + ox * stride;
                                for kx in 0..kernel {
                                    acc += xd[row + kx];
                                }
                            }
                            chunk[oy * ow + ox] = acc * inv;
                        }
                    }
                });
                Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool2d { x, kernel, stride }, req))
            }
            PoolMode::Max => {
                // ties resolve to the lowest flat input index
                let mut out = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0usize; n * c * oh * ow];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for ky in 0..kernel {
                                let row = base + (oy * stride + ky) * w + ox * stride;
                                for kx in 0..kernel {
                                    if xd[row + kx] > best {
                                        best = xd[row + kx];
                                        best_idx = row + kx;
                                    }
                                }
                            }
                            let oidx = plane * oh * ow + oy * ow + ox;
                            out[oidx] = best;
                            argmax[oidx] = best_idx;
                        }
                    }
                }
                Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2d { x, argmax }, req))
            }
        }
    }

    /// Average pooling over adaptive non-overlapping windows down to oh x ow.
    /// Window i covers rows [floor(i*H/oh), floor((i+1)*H/oh)).
    pub fn adaptive_avg_pool2d(&mut self, x: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.shape4(x)?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::invalid(format!(
                "adaptive pool target {oh}x{ow} invalid for input {h}x{w}"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1) = (oy * h / oh, (oy + 1) * h / oh);
                for ox in 0..ow {
                    let (x0, x1) = (ox * w / ow, (ox + 1) * w / ow);
                    let mut acc = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += xd[base + iy * w + ix];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![n, c, oh, ow], out, Op::AdaptiveAvgPool2d { x }, req))
    }

    /// Bilinear upsampling, align-corners-false convention.
    pub fn upsample_bilinear(&mut self, x: TensorId, th: usize, tw: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.shape4(x)?;
        if th == 0 || tw == 0 {
            return Err(Error::invalid("upsample target size must be positive".to_string()));
        }
        if th < h || tw < w {
            return Err(Error::invalid(format!(
                "upsample target {th}x{tw} smaller than source {h}x{w}"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * th * tw];
        exec::for_each_chunk(&mut out, th * tw, |plane, chunk| {
            let base = plane * h * w;
            for oy in 0..th {
                let (y0, y1, fy) = sample_coord(oy, h, th);
                for ox in 0..tw {
                    let (x0, x1, fx) = sample_coord(ox, w, tw);
                    let v00 = xd[base + y0 * w + x0];
                    let v01 = xd[base + y0 * w + x1];
                    let v10 = xd[base + y1 * w + x0];
                    let v11 = xd[base + y1 * w + x1];
                    chunk[oy * tw + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        });
        let req = self.requires(x);
        Ok(self.push(vec![n, c, th, tw], out, Op::UpsampleBilinear { x }, req))
    }
}

/// Source interpolation coordinates for output index `o` (align-corners-false).
fn sample_coord(o: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

pub(super) fn conv2d_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
    w: TensorId,
    b: TensorId,
    stride: usize,
    pad: usize,
) {
    let [n, c, h, wd] = tape.shape4(x).unwrap();
    let [o, _, k, _] = tape.shape4(w).unwrap();
    let os = &tape.nodes[out].shape;
    let (oh, ow) = (os[2], os[3]);
    let xd = tape.data(x);
    let wdt = tape.data(w);

    if tape.requires(x) {
        // gather formulation: each input pixel sums contributions in a fixed
        // order, so this parallel loop is deterministic
        let gx = tape.flow_buf(flow, x);
        exec::for_each_chunk(gx, h * wd, |plane, chunk| {
            let ni = plane / c;
            let ci = plane % c;
            for iy in 0..h {
                for ix in 0..wd {
                    let mut acc = 0.0;
                    for oi in 0..o {
                        let wbase = oi * c * k * k + ci * k * k;
                        let gbase = (ni * o + oi) * oh * ow;
                        for ky in 0..k {
                            let oy_num = iy + pad;
                            if oy_num < ky || (oy_num - ky) % stride != 0 {
                                continue;
                            }
                            let oy = (oy_num - ky) / stride;
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let ox_num = ix + pad;
                                if ox_num < kx || (ox_num - kx) % stride != 0 {
                                    continue;
                                }
                                let ox = (ox_num - kx) / stride;
                                if ox >= ow {
                                    continue;
                                }
                                acc += wdt[wbase + ky * k + kx] * g[gbase + oy * ow + ox];
                            }
                        }
                    }
                    chunk[iy * wd + ix] += acc;
                }
            }
        });
    }

    if tape.requires(w) {
        let gw = tape.flow_buf(flow, w);
        exec::for_each_chunk(gw, k * k, |oc, chunk| {
            let oi = oc / c;
            let ci = oc % c;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let gbase = (ni * o + oi) * oh * ow;
                        let xbase = (ni * c + ci) * h * wd;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += g[gbase + oy * ow + ox] * xd[xrow + ix as usize];
                            }
                        }
                    }
                    chunk[ky * k + kx] += acc;
                }
            }
        });
    }

    if tape.requires(b) {
        let gb = tape.flow_buf(flow, b);
        for oi in 0..o {
            let mut acc = 0.0;
            for ni in 0..n {
                let gbase = (ni * o + oi) * oh * ow;
                for idx in 0..oh * ow {
                    acc += g[gbase + idx];
                }
            }
            gb[oi] += acc;
        }
    }
}

pub(super) fn avg_pool_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
    kernel: usize,
    stride: usize,
) {
    if !tape.requires(x) {
        return;
    }
    let [n, c, h, w] = tape.shape4(x).unwrap();
    let os = &tape.nodes[out].shape;
    let (oh, ow) = (os[2], os[3]);
    let inv = 1.0 / (kernel * kernel) as f64;
    let gx = tape.flow_buf(flow, x);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[plane * oh * ow + oy * ow + ox] * inv;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel {
                        gx[row + kx] += gv;
                    }
                }
            }
        }
    }
}

pub(super) fn max_pool_backward(
    tape: &Tape,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
    argmax: &[usize],
) {
    if !tape.requires(x) {
        return;
    }
    let gx = tape.flow_buf(flow, x);
    for (gi, &src) in g.iter().zip(argmax) {
        gx[src] += *gi;
    }
}

pub(super) fn adaptive_avg_pool_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
) {
    if !tape.requires(x) {
        return;
    }
    let [n, c, h, w] = tape.shape4(x).unwrap();
    let os = &tape.nodes[out].shape;
    let (oh, ow) = (os[2], os[3]);
    let gx = tape.flow_buf(flow, x);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = (oy * h / oh, (oy + 1) * h / oh);
            for ox in 0..ow {
                let (x0, x1) = (ox * w / ow, (ox + 1) * w / ow);
                let gv = g[plane * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gx[base + iy * w + ix] += gv;
                    }
                }
            }
        }
    }
}

pub(super) fn upsample_backward(
    tape: &Tape,
    out: usize,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
) {
    if !tape.requires(x) {
        return;
    }
    let [n, c, h, w] = tape.shape4(x).unwrap();
    let os = &tape.nodes[out].shape;
    let (th, tw) = (os[2], os[3]);
    let gx = tape.flow_buf(flow, x);
    for plane in 0..n * c {
        let base = plane * h * w;
        let gbase = plane * th * tw;
        for oy in 0..th {
            let (y0, y1, fy) = sample_coord(oy, h, th);
            for ox in 0..tw {
                let (x0, x1, fx) = sample_coord(ox, w, tw);
                let gv = g[gbase + oy * tw + ox];
                gx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                gx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                gx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                gx[base + y1 * w + x1] += gv * fy * fx;
            }
        }
    }
}
