//! Segmentation quality metrics: MAE, weighted F-measure, S-measure,
//! E-measure, and dataset-level aggregation.
//!
//! Every constant is fixed here so independent implementations can be
//! compared: the weighted F-measure uses a 7x7 Gaussian with sigma 5
//! (normalized to unit sum, zero padding), dependency decay ln(0.5)/5,
//! beta^2 = 1 and 1e-12 division guards; the S-measure splits regions at
//! the rounded ground-truth centroid (1-indexed), weighs quadrants by area
//! share and uses population standard deviations in the object term; the
//! E-measure binarizes at min(2 * mean, 1) with a strict comparison.

use std::path::Path;

use crate::data::{GrayMap, Mask};
use crate::edt::{self, NO_SITE};
use crate::error::{Error, Result};
use crate::exec;

pub const EPS: f64 = 1e-12;

/// A prediction in [0,1] with its binary ground truth. Predictions are
/// clamped on ingestion.
#[derive(Clone, Debug)]
pub struct PredictionPair {
    pub pred: GrayMap,
    pub gt: Mask,
}

impl PredictionPair {
    pub fn new(mut pred: GrayMap, gt: Mask) -> Result<Self> {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        if pred.h == 0 || pred.w == 0 {
            return Err(Error::data("empty prediction".to_string()));
        }
        pred.clamp_unit();
        Ok(PredictionPair { pred, gt })
    }
}

/// Mean absolute error.
pub fn mae(pair: &PredictionPair) -> f64 {
    let n = pair.pred.data.len() as f64;
    pair.pred
        .data
        .iter()
        .zip(pair.gt.data())
        .map(|(&p, &g)| (p - g as f64).abs())
        .sum::<f64>()
        / n
}

/// 7x7 Gaussian window, sigma 5, normalized to sum 1.
fn gaussian_7x7_sigma5() -> [f64; 49] {
    let sigma = 5.0;
    let mut k = [0.0; 49];
    let mut sum = 0.0;
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            k[((dy + 3) * 7 + dx + 3) as usize] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Weighted F-measure. Returns 0 with the degenerate flag when the ground
/// truth has no foreground.
pub fn weighted_fbeta_flagged(pair: &PredictionPair) -> (f64, bool) {
    let (h, w) = (pair.gt.h, pair.gt.w);
    let gt_count = pair.gt.foreground_count();
    if gt_count == 0 {
        return (0.0, true);
    }
    let field = edt::exact_edt(&pair.gt);

    // E and its foreground-propagated variant
    let e: Vec<f64> = pair
        .pred
        .data
        .iter()
        .zip(pair.gt.data())
        .map(|(&p, &g)| (p - g as f64).abs())
        .collect();
    let et: Vec<f64> = (0..h * w)
        .map(|i| {
            if pair.gt.data()[i] == 1 || field.nearest[i] == NO_SITE {
                e[i]
            } else {
                e[field.nearest[i]]
            }
        })
        .collect();

    // EA = gaussian-smoothed Et, clamp-to-edge padding (keeps a uniformly
    // wrong prediction at recall exactly zero)
    let kernel = gaussian_7x7_sigma5();
    let ea: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let mut acc = 0.0;
            for dy in -3isize..=3 {
                let rr = (r as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -3isize..=3 {
                    let cc = (c as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += et[rr * w + cc] * kernel[((dy + 3) * 7 + dx + 3) as usize];
                }
            }
            acc
        })
        .collect();

    let theta = 0.5f64.ln() / 5.0;
    let mut sum_fg_ew = 0.0;
    let mut sum_bg_ew = 0.0;
    for i in 0..h * w {
        if pair.gt.data()[i] == 1 {
            // pixel dependency: a smoothed error may excuse a sharp one
            let min_e_ea = if ea[i] < e[i] { ea[i] } else { e[i] };
            sum_fg_ew += min_e_ea; // B = 1 on foreground
        } else {
            let b = 2.0 - (theta * field.dist[i]).exp();
            sum_bg_ew += e[i] * b;
        }
    }

    let tp_w = gt_count as f64 - sum_fg_ew;
    let fp_w = sum_bg_ew;
    let recall = 1.0 - sum_fg_ew / gt_count as f64;
    let precision = tp_w / (EPS + tp_w + fp_w);
    let f = 2.0 * precision * recall / (precision + recall + EPS);
    (f.clamp(0.0, 1.0), false)
}

pub fn weighted_fbeta(pair: &PredictionPair) -> f64 {
    weighted_fbeta_flagged(pair).0
}

fn region_mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn object_score(region_values: &[f64]) -> f64 {
    let (x, sigma) = region_mean_std(region_values);
    2.0 * x / (x * x + 1.0 + 2.0 * sigma + EPS)
}

/// SSIM-form score of one quadrant with the degenerate-case ladder.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    debug_assert_eq!(n, gt.len());
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.iter().sum::<f64>() / nf;
    let y = gt.iter().sum::<f64>() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        let denom = nf - 1.0;
        for (&p, &g) in pred.iter().zip(gt) {
            sx += (p - x) * (p - x) / denom;
            sy += (g - y) * (g - y) / denom;
            sxy += (p - x) * (g - y) / denom;
        }
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Rounded 1-indexed centroid of the ground truth.
fn centroid(gt: &Mask) -> (usize, usize) {
    let total = gt.foreground_count() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in 0..gt.h {
        for c in 0..gt.w {
            if gt.get(r, c) == 1 {
                sx += (c + 1) as f64;
                sy += (r + 1) as f64;
            }
        }
    }
    (
        ((sy / total).round() as usize).clamp(1, gt.h),
        ((sx / total).round() as usize).clamp(1, gt.w),
    )
}

fn gather<T: Copy>(data: &[T], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols.clone() {
            out.push(data[r * w + c]);
        }
    }
    out
}

/// Structure measure: object term and region term, equally weighted.
pub fn s_measure(pair: &PredictionPair) -> f64 {
    let (h, w) = (pair.gt.h, pair.gt.w);
    let n = (h * w) as f64;
    let gt_mean = pair.gt.foreground_count() as f64 / n;
    let pred_mean = pair.pred.data.iter().sum::<f64>() / n;
    if gt_mean == 0.0 {
        return 1.0 - pred_mean;
    }
    if gt_mean == 1.0 {
        return pred_mean;
    }

    // object similarity: foreground on pred, background on 1 - pred
    let fg: Vec<f64> = pair
        .pred
        .data
        .iter()
        .zip(pair.gt.data())
        .filter(|(_, &g)| g == 1)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pair
        .pred
        .data
        .iter()
        .zip(pair.gt.data())
        .filter(|(_, &g)| g == 0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let s_object = gt_mean * object_score(&fg) + (1.0 - gt_mean) * object_score(&bg);

    // region similarity: quadrants at the gt centroid, weighted by area
    let (cy, cx) = centroid(&pair.gt);
    let gt_f: Vec<f64> = pair.gt.data().iter().map(|&v| v as f64).collect();
    let mut s_region = 0.0;
    for (rows, cols) in [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ] {
        let weight = (rows.len() * cols.len()) as f64 / n;
        if weight == 0.0 {
            continue;
        }
        let p = gather(&pair.pred.data, w, rows.clone(), cols.clone());
        let g = gather(&gt_f, w, rows, cols);
        s_region += weight * region_ssim(&p, &g);
    }

    (0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0)
}

/// Enhanced alignment measure with the adaptive threshold min(2*mean, 1)
/// and a strict comparison.
pub fn e_measure(pair: &PredictionPair) -> f64 {
    let n = pair.pred.data.len() as f64;
    let t = (2.0 * pair.pred.data.iter().sum::<f64>() / n).min(1.0);
    let bin: Vec<f64> = pair.pred.data.iter().map(|&p| f64::from(p > t)).collect();
    e_measure_binary(&bin, &pair.gt)
}

/// Alignment term of the E-measure on an already-binarized map.
pub fn e_measure_binary(bin: &[f64], gt: &Mask) -> f64 {
    let n = bin.len() as f64;
    let bin_mean = bin.iter().sum::<f64>() / n;
    let gt_mean = gt.foreground_count() as f64 / n;
    if gt_mean == 0.0 {
        return 1.0 - bin_mean;
    }
    if gt_mean == 1.0 {
        return bin_mean;
    }
    let mut acc = 0.0;
    for (&b, &g) in bin.iter().zip(gt.data()) {
        let phi_g = g as f64 - gt_mean;
        let phi_p = b - bin_mean;
        let xi = 2.0 * phi_g * phi_p / (phi_g * phi_g + phi_p * phi_p + EPS);
        acc += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    acc / n
}

/// All four metrics of one prediction.
#[derive(Clone, Debug)]
pub struct ImageScores {
    pub name: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
    pub per_image: Vec<ImageScores>,
    pub n_images: usize,
}

impl MetricReport {
    pub fn from_per_image(mut per_image: Vec<ImageScores>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::data("no images to score".to_string()));
        }
        per_image.sort_by(|a, b| a.name.cmp(&b.name));
        let n = per_image.len() as f64;
        Ok(MetricReport {
            s_alpha: per_image.iter().map(|s| s.s_alpha).sum::<f64>() / n,
            e_phi: per_image.iter().map(|s| s.e_phi).sum::<f64>() / n,
            f_beta_w: per_image.iter().map(|s| s.f_beta_w).sum::<f64>() / n,
            mae: per_image.iter().map(|s| s.mae).sum::<f64>() / n,
            n_images: per_image.len(),
            per_image,
        })
    }

    /// One row in benchmark-table order: S up, E up, F_w up, MAE down.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label:<12} S_a={:.4}  E_phi={:.4}  F_w={:.4}  MAE={:.4}  (n={})",
            self.s_alpha, self.e_phi, self.f_beta_w, self.mae, self.n_images
        )
    }

    /// Machine-readable CSV: per-image rows plus a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,s_alpha,e_phi,f_beta_w,mae\n");
        for s in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.name, s.s_alpha, s.e_phi, s.f_beta_w, s.mae
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            self.s_alpha, self.e_phi, self.f_beta_w, self.mae
        ));
        out
    }
}

pub fn score_pair(name: &str, pair: &PredictionPair) -> ImageScores {
    ImageScores {
        name: name.to_string(),
        s_alpha: s_measure(pair),
        e_phi: e_measure(pair),
        f_beta_w: weighted_fbeta(pair),
        mae: mae(pair),
    }
}

/// Score same-named prediction/ground-truth files from two directories.
/// Predictions are bilinearly resized to the ground-truth size first.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        names.sort();
        Ok(names)
    };
    let preds = list(pred_dir)?;
    let gts = list(gt_dir)?;
    let names: Vec<String> = preds.iter().filter(|n| gts.contains(n)).cloned().collect();
    if names.is_empty() {
        return Err(Error::data(format!(
            "no matching filenames between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    for n in &preds {
        if !gts.contains(n) {
            return Err(Error::data(format!("prediction {n} has no ground-truth counterpart")));
        }
    }

    let scores = exec::map_range(names.len(), |i| -> Result<ImageScores> {
        let name = &names[i];
        let pred_path = find_existing(pred_dir, name)?;
        let gt_path = find_existing(gt_dir, name)?;
        let gt = crate::io::read_mask(&gt_path)?;
        let mut pred = crate::io::read_gray(&pred_path)?;
        if pred.h != gt.h || pred.w != gt.w {
            pred = pred.resize_bilinear(gt.h, gt.w);
        }
        let pair = PredictionPair::new(pred, gt)?;
        Ok(score_pair(name, &pair))
    });
    MetricReport::from_per_image(scores.into_iter().collect::<Result<Vec<_>>>()?)
}

fn find_existing(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for ext in ["pgm", "png", "ppm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::data(format!("no file for {stem} under {}", dir.display())))
}
