//! Plain image and mask value types shared across the pipeline.

use crate::error::{Error, Result};

/// Binary mask, row-major, entries in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("mask data {} != {h}x{w}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::data("mask entries must be 0 or 1".to_string()));
        }
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[r * self.w + c] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / (self.h * self.w) as f64
    }

    /// Targets as f64 0/1 in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Nearest-neighbor resize with center-aligned sampling.
    pub fn resize_nearest(&self, th: usize, tw: usize) -> Mask {
        let mut out = vec![0u8; th * tw];
        for r in 0..th {
            let sr = nearest_index(r, self.h, th);
            for c in 0..tw {
                let sc = nearest_index(c, self.w, tw);
                out[r * tw + c] = self.data[sr * self.w + sc];
            }
        }
        Mask { h: th, w: tw, data: out }
    }

    /// Reduce to gh x gw by majority vote over adaptive non-overlapping
    /// windows; ties go to foreground.
    pub fn majority_pool(&self, gh: usize, gw: usize) -> Mask {
        let mut out = vec![0u8; gh * gw];
        for gy in 0..gh {
            let (y0, y1) = (gy * self.h / gh, (gy + 1) * self.h / gh);
            for gx in 0..gw {
                let (x0, x1) = (gx * self.w / gw, (gx + 1) * self.w / gw);
                let mut fg = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        fg += self.data[y * self.w + x] as usize;
                    }
                }
                let total = (y1 - y0) * (x1 - x0);
                out[gy * gw + gx] = u8::from(2 * fg >= total);
            }
        }
        Mask { h: gh, w: gw, data: out }
    }
}

/// Nearest source index for destination index `d` (center-aligned).
pub fn nearest_index(d: usize, src: usize, dst: usize) -> usize {
    (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

/// Grayscale float map in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("graymap data {} != {h}x{w}", data.len())));
        }
        Ok(GrayMap { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        GrayMap { h, w, data: vec![0.0; h * w] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resize (align-corners-false); works up or down.
    pub fn resize_bilinear(&self, th: usize, tw: usize) -> GrayMap {
        let mut out = vec![0.0; th * tw];
        for r in 0..th {
            let sy = ((r as f64 + 0.5) * self.h as f64 / th as f64 - 0.5).max(0.0);
            let y0 = (sy.floor() as usize).min(self.h - 1);
            let y1 = (y0 + 1).min(self.h - 1);
            let fy = sy - y0 as f64;
            for c in 0..tw {
                let sx = ((c as f64 + 0.5) * self.w as f64 / tw as f64 - 0.5).max(0.0);
                let x0 = (sx.floor() as usize).min(self.w - 1);
                let x1 = (x0 + 1).min(self.w - 1);
                let fx = sx - x0 as f64;
                let v00 = self.get(y0, x0);
                let v01 = self.get(y0, x1);
                let v10 = self.get(y1, x0);
                let v11 = self.get(y1, x1);
                out[r * tw + c] =
                    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
        GrayMap { h: th, w: tw, data: out }
    }
}

/// RGB image, channel-major (3 x H x W), values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ColorImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::shape(format!("image data {} != 3x{h}x{w}", data.len())));
        }
        Ok(ColorImage { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ColorImage { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// Luma-style grayscale (plain channel mean).
    pub fn to_gray(&self) -> GrayMap {
        let hw = self.h * self.w;
        let mut out = vec![0.0; hw];
        for c in 0..3 {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v / 3.0;
            }
        }
        GrayMap { h: self.h, w: self.w, data: out }
    }

    /// Horizontal mirror (left-right flip).
    pub fn flip_horizontal(&self) -> ColorImage {
        let mut out = self.clone();
        for c in 0..3 {
            let ch = out.channel_mut(c);
            for r in 0..self.h {
                ch[r * self.w..(r + 1) * self.w].reverse();
            }
        }
        out
    }
}

impl Mask {
    pub fn flip_horizontal(&self) -> Mask {
        let mut out = self.clone();
        for r in 0..self.h {
            out.data[r * self.w..(r + 1) * self.w].reverse();
        }
        out
    }
}

/// One benchmark sample: RGB image plus binary ground-truth mask.
#[derive(Clone, Debug)]
pub struct CamoSample {
    pub image: ColorImage,
    pub mask: Mask,
    pub sample_seed: u64,
    pub difficulty: f64,
}
