// temporary probe: wfb drift under 2x nearest upsampling
use camotex::data::{GrayMap, Mask};
use camotex::metrics::*;
use camotex::rng::Rng;
use camotex::synth::gen_blob_mask;

fn upsample2(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 4 * h * w];
    for r in 0..2 * h {
        for c in 0..2 * w {
            out[r * 2 * w + c] = v[(r / 2) * w + c / 2];
        }
    }
    out
}

fn main() {
    let mut rng = Rng::new(31);
    let mut worst_rand: f64 = 0.0;
    for _ in 0..50 {
        let gt: Vec<u8> = (0..64).map(|_| u8::from(rng.uniform() < 0.4)).collect();
        if gt.iter().all(|&v| v == 0) { continue; }
        let pred = rng.uniform_vec(64);
        let small = PredictionPair::new(GrayMap::new(8, 8, pred.clone()).unwrap(), Mask::new(8, 8, gt.clone()).unwrap()).unwrap();
        let gtf: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        let gt_up: Vec<u8> = upsample2(&gtf, 8, 8).iter().map(|&v| v as u8).collect();
        let big = PredictionPair::new(GrayMap::new(16, 16, upsample2(&pred, 8, 8)).unwrap(), Mask::new(16, 16, gt_up).unwrap()).unwrap();
        worst_rand = worst_rand.max((weighted_fbeta(&small) - weighted_fbeta(&big)).abs());
    }
    println!("random masks 8->16: worst wfb drift {worst_rand:.4}");

    let mut worst_blob: f64 = 0.0;
    let mut worst_triplet = (0.0, 0.0, 0.0);
    for seed in 0..50u64 {
        let n = 32usize;
        let gt = gen_blob_mask(seed, n, n);
        let noise = Rng::substream(seed, "p").uniform_vec(n * n);
        let mut predmap = GrayMap::new(n, n, gt.data().iter().map(|&v| v as f64).collect()).unwrap();
        // crude blur: average with 4-neighborhood, two passes
        for _ in 0..2 {
            let prev = predmap.clone();
            for r in 0..n {
                for c in 0..n {
                    let mut acc = prev.get(r, c) * 4.0;
                    let mut cnt = 4.0;
                    if r > 0 { acc += prev.get(r - 1, c); cnt += 1.0; }
                    if r + 1 < n { acc += prev.get(r + 1, c); cnt += 1.0; }
                    if c > 0 { acc += prev.get(r, c - 1); cnt += 1.0; }
                    if c + 1 < n { acc += prev.get(r, c + 1); cnt += 1.0; }
                    predmap.data[r * n + c] = acc / cnt;
                }
            }
        }
        let pred: Vec<f64> = predmap.data.iter().zip(&noise).map(|(&p, &u)| (p + 0.25 * (u - 0.5)).clamp(0.0, 1.0)).collect();
        let small = PredictionPair::new(GrayMap::new(n, n, pred.clone()).unwrap(), gt.clone()).unwrap();
        let gtf: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
        let gt_up: Vec<u8> = upsample2(&gtf, n, n).iter().map(|&v| v as u8).collect();
        let big = PredictionPair::new(GrayMap::new(2 * n, 2 * n, upsample2(&pred, n, n)).unwrap(), Mask::new(2 * n, 2 * n, gt_up).unwrap()).unwrap();
        let d_f = (weighted_fbeta(&small) - weighted_fbeta(&big)).abs();
        let d_s = (s_measure(&small) - s_measure(&big)).abs();
        let d_e = (e_measure(&small) - e_measure(&big)).abs();
        if d_f > worst_blob { worst_blob = d_f; worst_triplet = (d_f, d_s, d_e); }
    }
    println!("blob masks 32->64: worst wfb drift {worst_blob:.4}, triplet {worst_triplet:?}");
}
