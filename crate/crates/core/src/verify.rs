//! End-to-end gradient verification: finite differences against the
//! analytic backward pass, from single components up to the full micro
//! network with every loss term active.

use crate::data::{CamoSample, ColorImage, Mask};
use crate::error::Result;
use crate::losses;
use crate::net::{self, NetworkConfig};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tarm::{self, TarmConfig};
use crate::tensor::gradcheck::{finite_diff_check, DEFAULT_EPS};
use crate::train::{sample_loss, LossSettings};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

/// A blob-shaped mask whose boundary crosses patch interiors at every
/// decoder resolution.
fn blob_mask(h: usize, w: usize) -> Mask {
    let (cy, cx) = (h as f64 * 0.45, w as f64 * 0.55);
    let r = h.min(w) as f64 * 0.32;
    let mut m = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if (dy * dy + dx * dx).sqrt() < r {
                m.set(y, x, 1);
            }
        }
    }
    m
}

fn random_image(h: usize, w: usize, seed: u64) -> ColorImage {
    let mut rng = Rng::new(seed);
    ColorImage::new(h, w, rng.uniform_vec(3 * h * w)).unwrap()
}

/// Gradient check of a full TARM: scalar projection of f_out against every
/// TARM weight.
pub fn check_modulation(seed: u64) -> Result<CheckResult> {
    let cfg = TarmConfig { c_in: 4, k_branches: 2, c1: 2, c_prime: 4, eps: 1e-5 };
    let mut params = ParamSet::new();
    tarm::init_tarm_params(&mut params, "t", &cfg, seed);
    // non-zero output conv so the texture path carries gradient
    let n = params.get("t.modulate.post.weight")?.data.len();
    params.get_mut("t.modulate.post.weight")?.data =
        Rng::substream(seed, "post-init").normal_vec(n, 0.0, 0.3);

    let mut rng = Rng::substream(seed, "modulation-input");
    let input = rng.normal_vec(4 * 8 * 8, 0.0, 1.0);
    let probe = rng.normal_vec(4 * 8 * 8, 0.0, 1.0);
    let report = finite_diff_check(&params, DEFAULT_EPS, move |tape, binding, ps| {
        let f_in = tape.constant(input.clone(), &[1, 4, 8, 8])?;
        let (f_out, _) = tarm::tarm_forward(tape, binding, ps, "t", &cfg, f_in)?;
        let w = tape.constant(probe.clone(), &[1, 4, 8, 8])?;
        let weighted = tape.mul(f_out, w)?;
        tape.sum(weighted)
    })?;
    Ok(CheckResult {
        name: "tarm_modulation".to_string(),
        max_rel_error: report.max_rel_error,
        entries: report.entries_checked,
    })
}

/// Gradient check of the affinity loss on a learned 4-channel 6x6 map.
pub fn check_affinity_loss(seed: u64) -> Result<CheckResult> {
    let mut params = ParamSet::new();
    let mut rng = Rng::substream(seed, "affinity-weights");
    params.insert("w", &[4, 3, 1, 1], rng.normal_vec(12, 0.0, 0.6));
    params.insert("b", &[4], rng.normal_vec(4, 0.0, 0.1));
    let input = rng.normal_vec(3 * 6 * 6, 0.0, 1.0);
    let mask = blob_mask(6, 6);

    let report = finite_diff_check(&params, DEFAULT_EPS, move |tape, binding, ps| {
        let x = tape.constant(input.clone(), &[1, 3, 6, 6])?;
        let w = binding.bind(tape, ps, "w")?;
        let b = binding.bind(tape, ps, "b")?;
        let map = tape.conv2d(x, w, b, 1, 0)?;
        let (loss, _) = losses::affinity_loss_for_map(tape, map, &mask, 6, losses::DEFAULT_AFFINITY_EPS)?;
        Ok(loss)
    })?;
    Ok(CheckResult {
        name: "affinity_loss".to_string(),
        max_rel_error: report.max_rel_error,
        entries: report.entries_checked,
    })
}

/// Gradient check of the boundary-consistency loss on a learned map.
pub fn check_boundary_loss(seed: u64) -> Result<CheckResult> {
    let mut params = ParamSet::new();
    let mut rng = Rng::substream(seed, "boundary-weights");
    params.insert("w", &[4, 3, 1, 1], rng.normal_vec(12, 0.0, 0.6));
    params.insert("b", &[4], rng.normal_vec(4, 0.0, 0.1));
    let input = rng.normal_vec(3 * 6 * 6, 0.0, 1.0);
    let mask = blob_mask(6, 6);
    assert!(!losses::select_boundary_patches(&mask, 3).is_empty());

    let report = finite_diff_check(&params, DEFAULT_EPS, move |tape, binding, ps| {
        let x = tape.constant(input.clone(), &[1, 3, 6, 6])?;
        let w = binding.bind(tape, ps, "w")?;
        let b = binding.bind(tape, ps, "b")?;
        let map = tape.conv2d(x, w, b, 1, 0)?;
        losses::boundary_consistency_loss(tape, map, &mask, 3, losses::DEFAULT_AFFINITY_EPS)
    })?;
    Ok(CheckResult {
        name: "boundary_loss".to_string(),
        max_rel_error: report.max_rel_error,
        entries: report.entries_checked,
    })
}

/// Gradient check of the full micro network (2 stages, 1 TARM, 3x32x32
/// input) with the complete training loss, over every parameter.
pub fn check_micro_network(seed: u64) -> Result<CheckResult> {
    let net_cfg = NetworkConfig::micro(seed);
    let mut params = net::init_network_params(&net_cfg)?;
    // break the zero initialization so the modulation path carries gradient
    let si = net_cfg.stage_channels.len() - 1;
    let post = format!("decoder.stage{si}.tarm.modulate.post.weight");
    let n = params.get(&post)?.data.len();
    params.get_mut(&post)?.data = Rng::substream(seed, "micro-post").normal_vec(n, 0.0, 0.2);

    let sample = CamoSample {
        image: random_image(32, 32, seed ^ 0x5eed),
        mask: blob_mask(32, 32),
        sample_seed: seed,
        difficulty: 0.5,
    };
    let settings = LossSettings::default();
    let report = finite_diff_check(&params, DEFAULT_EPS, move |tape, binding, ps| {
        let loss = sample_loss(tape, binding, ps, &net_cfg, &settings, &sample)?;
        Ok(loss.total)
    })?;
    Ok(CheckResult {
        name: "micro_tanet_total".to_string(),
        max_rel_error: report.max_rel_error,
        entries: report.entries_checked,
    })
}

/// The full gradient suite, in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_modulation(seed)?,
        check_affinity_loss(seed)?,
        check_boundary_loss(seed)?,
        check_micro_network(seed)?,
    ])
}
