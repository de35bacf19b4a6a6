//! Exact Euclidean distance transform to the nearest foreground pixel.
//!
//! Distances are exact (no chamfer approximation) and every pixel also
//! reports *which* foreground pixel is nearest, with ties resolved to the
//! smallest row-major index. The direct scan over foreground sites is
//! O(pixels x sites) — entirely adequate at benchmark resolutions and
//! trivially exact; pixels fan out in parallel.

use crate::data::Mask;
use crate::exec;

pub const NO_SITE: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct DistanceField {
    /// Euclidean distance to the nearest foreground pixel; 0 on foreground.
    pub dist: Vec<f64>,
    /// Flat index of that pixel; `NO_SITE` when the mask has no foreground.
    pub nearest: Vec<usize>,
}

pub fn exact_edt(mask: &Mask) -> DistanceField {
    let (h, w) = (mask.h, mask.w);
    let sites: Vec<(usize, usize)> = (0..h * w)
        .filter(|&p| mask.data()[p] == 1)
        .map(|p| (p / w, p % w))
        .collect();
    if sites.is_empty() {
        return DistanceField {
            dist: vec![f64::INFINITY; h * w],
            nearest: vec![NO_SITE; h * w],
        };
    }
    let rows = exec::map_range(h, |r| {
        let mut dist_row = vec![0.0f64; w];
        let mut near_row = vec![0usize; w];
        for c in 0..w {
            if mask.get(r, c) == 1 {
                near_row[c] = r * w + c;
                continue;
            }
            let mut best = u64::MAX;
            let mut best_idx = NO_SITE;
            for &(sr, sc) in &sites {
                let dr = r.abs_diff(sr) as u64;
                let dc = c.abs_diff(sc) as u64;
                let d2 = dr * dr + dc * dc;
                if d2 < best {
                    best = d2;
                    best_idx = sr * w + sc;
                }
            }
            dist_row[c] = (best as f64).sqrt();
            near_row[c] = best_idx;
        }
        (dist_row, near_row)
    });
    let mut dist = Vec::with_capacity(h * w);
    let mut nearest = Vec::with_capacity(h * w);
    for (d, n) in rows {
        dist.extend(d);
        nearest.extend(n);
    }
    DistanceField { dist, nearest }
}
