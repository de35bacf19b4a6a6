//! Benchmark sanity oracles.
//!
//! Two reference classifiers bound the benchmark from both sides: the best
//! single intensity threshold must fail (the task carries no first-order
//! signal) while a quadrature Gabor filter pair at the generating
//! orientations must succeed (the second-order signal is recoverable).

use std::f64::consts::PI;

use crate::data::{GrayMap, Mask};
use crate::synth::{sample_spec, CamoSample};

pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best foreground IoU achievable by thresholding grayscale intensity,
/// trying both polarities over 255 levels.
pub fn best_threshold_iou(sample: &CamoSample) -> f64 {
    let gray = sample.image.to_gray();
    let mut best: f64 = 0.0;
    for k in 0..=255 {
        let t = k as f64 / 255.0;
        let mut above = Mask::zeros(gray.h, gray.w);
        let mut below = Mask::zeros(gray.h, gray.w);
        for r in 0..gray.h {
            for c in 0..gray.w {
                if gray.get(r, c) > t {
                    above.set(r, c, 1);
                } else {
                    below.set(r, c, 1);
                }
            }
        }
        best = best
            .max(iou(&above, &sample.mask))
            .max(iou(&below, &sample.mask));
    }
    best
}

struct GaborPair {
    radius: isize,
    even: Vec<f64>,
    odd: Vec<f64>,
}

/// Quadrature Gabor pair at (orientation, wavelength), zero-mean even part,
/// both parts L2-normalized so energies are comparable across wavelengths.
fn gabor_pair(orientation: f64, wavelength: f64) -> GaborPair {
    let sigma = 0.56 * wavelength;
    let radius = (2.5 * sigma).ceil() as isize;
    let side = (2 * radius + 1) as usize;
    let (cos_t, sin_t) = (orientation.cos(), orientation.sin());
    let mut even = vec![0.0; side * side];
    let mut odd = vec![0.0; side * side];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let xp = dx as f64 * cos_t + dy as f64 * sin_t;
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let phase = 2.0 * PI * xp / wavelength;
            let idx = ((dy + radius) as usize) * side + (dx + radius) as usize;
            even[idx] = g * phase.cos();
            odd[idx] = g * phase.sin();
        }
    }
    let e_mean = even.iter().sum::<f64>() / even.len() as f64;
    for v in &mut even {
        *v -= e_mean;
    }
    for k in [&mut even, &mut odd] {
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in k.iter_mut() {
                *v /= norm;
            }
        }
    }
    GaborPair { radius, even, odd }
}

fn convolve(map: &GrayMap, kernel: &[f64], radius: isize) -> Vec<f64> {
    let (h, w) = (map.h as isize, map.w as isize);
    let side = (2 * radius + 1) as usize;
    let mut out = vec![0.0; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -radius..=radius {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -radius..=radius {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let kidx = ((dy + radius) as usize) * side + (dx + radius) as usize;
                    acc += map.data[(yy * w + xx) as usize] * kernel[kidx];
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Local orientation energy: squared quadrature responses, box-smoothed.
fn gabor_energy(gray: &GrayMap, orientation: f64, wavelength: f64) -> Vec<f64> {
    let pair = gabor_pair(orientation, wavelength);
    let e = convolve(gray, &pair.even, pair.radius);
    let o = convolve(gray, &pair.odd, pair.radius);
    let mut energy = GrayMap::new(
        gray.h,
        gray.w,
        e.iter().zip(&o).map(|(a, b)| a * a + b * b).collect(),
    )
    .unwrap();
    super::box_blur(&mut energy, (wavelength * 0.75).round() as usize);
    energy.data
}

/// Classify each pixel by the stronger of the two generating-texture
/// energies and score against the ground truth.
pub fn gabor_oracle_iou(sample: &CamoSample) -> f64 {
    let spec = sample_spec(sample.sample_seed, sample.difficulty);
    let gray = sample.image.to_gray();
    let fg_energy = gabor_energy(&gray, spec.fg.orientation, spec.fg.wavelength);
    let bg_energy = gabor_energy(&gray, spec.bg.orientation, spec.bg.wavelength);
    let mut pred = Mask::zeros(gray.h, gray.w);
    for (i, (f, b)) in fg_energy.iter().zip(&bg_energy).enumerate() {
        if f > b {
            pred.set(i / gray.w, i % gray.w, 1);
        }
    }
    iou(&pred, &sample.mask)
}
