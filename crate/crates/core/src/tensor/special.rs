//! Domain-specific kernels: per-pixel covariance descriptors, channel
//! statistics, and the numerically stable binary cross entropy.

use super::elementwise::sigmoid;
use super::{Op, Tape, TensorId};
use crate::error::{Error, Result};
use crate::exec;

/// Descriptor length for the upper triangle of a c x c outer product.
pub fn upper_triangle_len(c: usize) -> usize {
    c * (c + 1) / 2
}

/// Flat descriptor index of entry (i, j), i <= j, in row-major
/// upper-triangle order: (0,0), (0,1), ..., (0,c-1), (1,1), ...
pub fn upper_triangle_index(i: usize, j: usize, c: usize) -> usize {
    debug_assert!(i <= j && j < c);
    i * (2 * c - i + 1) / 2 + (j - i)
}

impl Tape {
    /// Per-pixel outer-product descriptors, upper triangle only:
    /// [N, C, H, W] -> [N, D, H, W] with D = C(C+1)/2. At each pixel the
    /// channel vector f yields (f_i * f_j) for all i <= j in row-major
    /// upper-triangle order.
    pub fn pixel_covariance_upper(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.shape4(x)?;
        let d = upper_triangle_len(c);
        let hw = h * w;
        let xd = self.data(x);
        let mut out = vec![0.0; n * d * hw];
        exec::for_each_chunk(&mut out, d * hw, |ni, chunk| {
            let base = ni * c * hw;
            let mut di = 0;
            for i in 0..c {
                for j in i..c {
                    let xi = &xd[base + i * hw..base + (i + 1) * hw];
                    let xj = &xd[base + j * hw..base + (j + 1) * hw];
                    let orow = &mut chunk[di * hw..(di + 1) * hw];
                    for ((o, a), b) in orow.iter_mut().zip(xi).zip(xj) {
                        *o = a * b;
                    }
                    di += 1;
                }
            }
        });
        let req = self.requires(x);
        Ok(self.push(vec![n, d, h, w], out, Op::PixelCovUpper { x }, req))
    }

    /// Per-(sample, channel) mean and standard deviation over spatial
    /// positions; std = sqrt(var + eps). Both outputs are differentiable.
    pub fn channel_stats(&mut self, x: TensorId, eps: f64) -> Result<(TensorId, TensorId)> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("channel_stats eps must be positive, got {eps}")));
        }
        let mean = self.spatial_mean(x)?;
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let var = self.spatial_mean(sq)?;
        let var_eps = self.add_scalar(var, eps)?;
        let std = self.sqrt(var_eps)?;
        Ok((mean, std))
    }

    /// Mean binary cross entropy on logits against fixed {0,1} targets,
    /// in the log-sum-exp form: max(x,0) - x*y + ln(1 + exp(-|x|)).
    pub fn bce_with_logits_mean(&mut self, x: TensorId, targets: &[f64]) -> Result<TensorId> {
        if targets.len() != self.numel(x) {
            return Err(Error::shape(format!(
                "bce targets length {} vs logits {}",
                targets.len(),
                self.numel(x)
            )));
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::invalid("bce targets must be binary 0/1".to_string()));
        }
        let xd = self.data(x);
        let n = xd.len() as f64;
        let mut acc = 0.0;
        for (&v, &y) in xd.iter().zip(targets) {
            acc += v.max(0.0) - v * y + (-v.abs()).exp().ln_1p();
        }
        let req = self.requires(x);
        Ok(self.push(
            vec![1],
            vec![acc / n],
            Op::BceWithLogitsMean { x, targets: targets.to_vec() },
            req,
        ))
    }
}

pub(super) fn pixel_cov_backward(tape: &Tape, g: &[f64], flow: &mut [Option<Vec<f64>>], x: TensorId) {
    if !tape.requires(x) {
        return;
    }
    let [n, c, h, w] = tape.shape4(x).unwrap();
    let hw = h * w;
    let xd = tape.data(x);
    let gx = tape.flow_buf(flow, x);
    for ni in 0..n {
        let xbase = ni * c * hw;
        let gbase = ni * upper_triangle_len(c) * hw;
        let mut di = 0;
        for i in 0..c {
            for j in i..c {
                let grow = &g[gbase + di * hw..gbase + (di + 1) * hw];
                // d(f_i f_j)/df_i = f_j and /df_j = f_i; adding both sides
                // yields the 2*f_i diagonal derivative when i == j
                for p in 0..hw {
                    let gv = grow[p];
                    gx[xbase + i * hw + p] += gv * xd[xbase + j * hw + p];
                    gx[xbase + j * hw + p] += gv * xd[xbase + i * hw + p];
                }
                di += 1;
            }
        }
    }
}

pub(super) fn bce_backward(
    tape: &Tape,
    g: &[f64],
    flow: &mut [Option<Vec<f64>>],
    x: TensorId,
    targets: &[f64],
) {
    if !tape.requires(x) {
        return;
    }
    let xd = tape.data(x);
    let scale = g[0] / xd.len() as f64;
    let gx = tape.flow_buf(flow, x);
    for (i, (&v, &y)) in xd.iter().zip(targets).enumerate() {
        gx[i] += scale * (sigmoid(v) - y);
    }
}
