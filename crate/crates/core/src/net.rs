//! Toy multi-scale segmentation network.
//!
//! A small trainable encoder produces features at halving resolutions. The
//! decoder walks top-down: each refined level projects its stage feature
//! (plain 1x1 lateral, or a residual refine block), fuses in the upsampled
//! deeper output by addition, optionally applies a TARM, and predicts a
//! one-channel logit map. The first encoder stage is never refined. The
//! ablation switches construct the four study variants over one shared
//! parameter set, so variants differ only in the component under study.

use crate::data::{ColorImage, GrayMap};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamSet};
use crate::rng::Rng;
use crate::tarm::{self, ParamMaps, TarmConfig};
use crate::tensor::{PoolMode, Tape, TensorId};

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    /// Output channels per encoder stage.
    pub stage_channels: Vec<usize>,
    /// Square input side; must be divisible by 2^stages.
    pub input_size: usize,
    /// Number of refined decoder levels, counted from the deepest stage.
    pub num_tarm_levels: usize,
    /// Common channel width of all decoder levels.
    pub decoder_channels: usize,
    pub tarm_branches: usize,
    pub tarm_c1: usize,
    pub tarm_eps: f64,
    /// Residual refine blocks on (otherwise plain 1x1 laterals).
    pub use_rrb: bool,
    /// TARMs on refined levels.
    pub use_tarm: bool,
    /// Boundary-consistency loss term on (training only).
    pub use_bcl: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stage_channels: vec![16, 32, 64, 64],
            input_size: 64,
            num_tarm_levels: 3,
            decoder_channels: 32,
            tarm_branches: 4,
            tarm_c1: 8,
            tarm_eps: 1e-5,
            use_rrb: true,
            use_tarm: true,
            use_bcl: true,
            seed: 0,
        }
    }
}

/// The four study variants.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Encoder + top-down add fusion + per-level heads.
    Basic,
    /// Basic with residual refine blocks.
    BasicRrb,
    /// RRB + TARM, trained without the boundary-consistency term.
    TarmNoBcl,
    /// Everything on.
    Full,
}

impl Variant {
    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (rrb, tarm, bcl) = match self {
            Variant::Basic => (false, false, false),
            Variant::BasicRrb => (true, false, false),
            Variant::TarmNoBcl => (true, true, false),
            Variant::Full => (true, true, true),
        };
        cfg.use_rrb = rrb;
        cfg.use_tarm = tarm;
        cfg.use_bcl = bcl;
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n < 2 {
            return Err(Error::invalid("need at least two encoder stages".to_string()));
        }
        if self.num_tarm_levels == 0 || self.num_tarm_levels > n - 1 {
            return Err(Error::invalid(format!(
                "num_tarm_levels {} must be in 1..={} (first stage is never refined)",
                self.num_tarm_levels,
                n - 1
            )));
        }
        if self.input_size % (1 << n) != 0 {
            return Err(Error::invalid(format!(
                "input size {} not divisible by 2^{n}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn tarm_config(&self) -> TarmConfig {
        TarmConfig {
            c_in: self.decoder_channels,
            k_branches: self.tarm_branches,
            c1: self.tarm_c1,
            c_prime: self.decoder_channels,
            eps: self.tarm_eps,
        }
    }

    /// Index of the shallowest refined stage.
    pub fn first_refined_stage(&self) -> usize {
        self.stage_channels.len() - self.num_tarm_levels
    }

    /// Spatial side of refined stage `si` for this input size.
    pub fn stage_side(&self, si: usize) -> usize {
        self.input_size >> (si + 1)
    }

    /// Tiny two-stage network for gradient verification.
    pub fn micro(seed: u64) -> Self {
        NetworkConfig {
            stage_channels: vec![4, 6],
            input_size: 32,
            num_tarm_levels: 1,
            decoder_channels: 6,
            tarm_branches: 2,
            tarm_c1: 2,
            tarm_eps: 1e-5,
            use_rrb: true,
            use_tarm: true,
            use_bcl: true,
            seed,
        }
    }
}

fn kaiming(seed: u64, name: &str, fan_in: usize, n: usize) -> Vec<f64> {
    Rng::substream(seed, name).normal_vec(n, 0.0, (2.0 / fan_in as f64).sqrt())
}

fn add_conv(params: &mut ParamSet, seed: u64, name: &str, o: usize, i: usize, k: usize) {
    let wname = format!("{name}.weight");
    let w = kaiming(seed, &wname, i * k * k, o * i * k * k);
    params.insert(wname, &[o, i, k, k], w);
    params.insert(format!("{name}.bias"), &[o], vec![0.0; o]);
}

/// All parameters of the network. Every variant shares this layout; the
/// ablation switches only change which parts the forward pass reads.
/// Initialization is seeded per parameter name, so shared components are
/// identical across variants built from the same seed.
pub fn init_network_params(cfg: &NetworkConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut c_prev = 3;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        add_conv(&mut params, cfg.seed, &format!("encoder.stage{i}.conv0"), c, c_prev, 3);
        add_conv(&mut params, cfg.seed, &format!("encoder.stage{i}.conv1"), c, c, 3);
        c_prev = c;
    }
    let dec = cfg.decoder_channels;
    for si in cfg.first_refined_stage()..cfg.stage_channels.len() {
        let stage_c = cfg.stage_channels[si];
        let p = format!("decoder.stage{si}");
        add_conv(&mut params, cfg.seed, &format!("{p}.lateral"), dec, stage_c, 1);
        add_conv(&mut params, cfg.seed, &format!("{p}.rrb.proj"), dec, stage_c, 1);
        add_conv(&mut params, cfg.seed, &format!("{p}.rrb.res0"), dec, dec, 3);
        add_conv(&mut params, cfg.seed, &format!("{p}.rrb.res1"), dec, dec, 3);
        tarm::init_tarm_params(&mut params, &format!("{p}.tarm"), &cfg.tarm_config(), cfg.seed);
        add_conv(&mut params, cfg.seed, &format!("{p}.head"), 1, dec, 1);
    }
    Ok(params)
}

fn bound_conv(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    name: &str,
    x: TensorId,
    pad: usize,
) -> Result<TensorId> {
    let w = binding.bind(tape, params, &format!("{name}.weight"))?;
    let b = binding.bind(tape, params, &format!("{name}.bias"))?;
    tape.conv2d(x, w, b, 1, pad)
}

/// Residual refine block: 1x1 projection, then a 3x3-relu-3x3 residual
/// branch added back, then relu.
pub fn rrb(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    prefix: &str,
    f: TensorId,
) -> Result<TensorId> {
    let t = bound_conv(tape, binding, params, &format!("{prefix}.proj"), f, 0)?;
    let r = bound_conv(tape, binding, params, &format!("{prefix}.res0"), t, 1)?;
    let r = tape.relu(r)?;
    let r = bound_conv(tape, binding, params, &format!("{prefix}.res1"), r, 1)?;
    let sum = tape.add(t, r)?;
    tape.relu(sum)
}

/// Encoder: per stage two 3x3 conv+relu then 2x2 average pooling, halving
/// the resolution each time.
pub fn encoder_forward(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    cfg: &NetworkConfig,
    image: TensorId,
) -> Result<Vec<TensorId>> {
    let s = tape.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("encoder expects [N,3,H,W], got {s:?}")));
    }
    let div = 1 << cfg.stage_channels.len();
    if s[2] % div != 0 || s[3] % div != 0 {
        return Err(Error::invalid(format!(
            "input {}x{} not divisible by {div}",
            s[2], s[3]
        )));
    }
    let mut stages = Vec::with_capacity(cfg.stage_channels.len());
    let mut x = image;
    for i in 0..cfg.stage_channels.len() {
        let p = format!("encoder.stage{i}");
        let h = bound_conv(tape, binding, params, &format!("{p}.conv0"), x, 1)?;
        let h = tape.relu(h)?;
        let h = bound_conv(tape, binding, params, &format!("{p}.conv1"), h, 1)?;
        let h = tape.relu(h)?;
        let pooled = tape.pool2d(h, PoolMode::Avg, 2, 2)?;
        stages.push(pooled);
        x = pooled;
    }
    Ok(stages)
}

/// One forward pass: per-level logits ordered fine to coarse, plus the
/// gamma/beta maps of each TARM (same order; empty when TARMs are off).
pub struct ForwardOutput {
    pub logits: Vec<TensorId>,
    pub param_maps: Vec<ParamMaps>,
}

pub fn tanet_forward(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    cfg: &NetworkConfig,
    image: TensorId,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let stages = encoder_forward(tape, binding, params, cfg, image)?;
    let first = cfg.first_refined_stage();
    let tarm_cfg = cfg.tarm_config();

    let mut logits_rev = Vec::new();
    let mut maps_rev = Vec::new();
    let mut deeper: Option<TensorId> = None;
    for si in (first..stages.len()).rev() {
        let p = format!("decoder.stage{si}");
        let lateral = if cfg.use_rrb {
            rrb(tape, binding, params, &format!("{p}.rrb"), stages[si])?
        } else {
            bound_conv(tape, binding, params, &format!("{p}.lateral"), stages[si], 0)?
        };
        let fused = match deeper {
            Some(d) => {
                let s = tape.shape(lateral).to_vec();
                let up = tape.upsample_bilinear(d, s[2], s[3])?;
                tape.add(lateral, up)?
            }
            None => lateral,
        };
        let refined = if cfg.use_tarm {
            let (out, maps) = tarm::tarm_forward(tape, binding, params, &format!("{p}.tarm"), &tarm_cfg, fused)?;
            maps_rev.push(maps);
            out
        } else {
            fused
        };
        logits_rev.push(bound_conv(tape, binding, params, &format!("{p}.head"), refined, 0)?);
        deeper = Some(refined);
    }
    logits_rev.reverse();
    maps_rev.reverse();
    Ok(ForwardOutput { logits: logits_rev, param_maps: maps_rev })
}

/// Image as a non-tracked [1, 3, H, W] tape leaf.
pub fn image_leaf(tape: &mut Tape, image: &ColorImage) -> Result<TensorId> {
    tape.constant(image.data.clone(), &[1, 3, image.h, image.w])
}

/// Inference: sigmoid of the finest logits, bilinearly upsampled to the
/// input resolution.
pub fn predict_mask(params: &ParamSet, cfg: &NetworkConfig, image: &ColorImage) -> Result<GrayMap> {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let x = image_leaf(&mut tape, image)?;
    let out = tanet_forward(&mut tape, &mut binding, params, cfg, x)?;
    let finest = out.logits[0];
    let prob = tape.sigmoid(finest)?;
    let s = tape.shape(prob).to_vec();
    let map = GrayMap::new(s[2], s[3], tape.data(prob).to_vec())?;
    Ok(map.resize_bilinear(image.h, image.w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> ColorImage {
        let mut rng = Rng::new(seed);
        ColorImage::new(h, w, rng.uniform_vec(3 * h * w)).unwrap()
    }

    #[test]
    fn encoder_shapes_default_config() {
        let cfg = NetworkConfig::default();
        let params = init_network_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let img = image(64, 64, 5);
        let x = image_leaf(&mut tape, &img).unwrap();
        let stages = encoder_forward(&mut tape, &mut binding, &params, &cfg, x).unwrap();
        let sides = [32, 16, 8, 4];
        for (i, (&s, side)) in stages.iter().zip(sides).enumerate() {
            assert_eq!(tape.shape(s), &[1, cfg.stage_channels[i], side, side]);
        }
    }

    #[test]
    fn encoder_rejects_indivisible_size() {
        let cfg = NetworkConfig::default();
        let params = init_network_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let img = image(40, 40, 6);
        let x = image_leaf(&mut tape, &img).unwrap();
        assert!(encoder_forward(&mut tape, &mut binding, &params, &cfg, x).is_err());
    }

    #[test]
    fn encoder_zero_image_zero_features() {
        let cfg = NetworkConfig::micro(3);
        let params = init_network_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let img = ColorImage::zeros(32, 32);
        let x = image_leaf(&mut tape, &img).unwrap();
        let stages = encoder_forward(&mut tape, &mut binding, &params, &cfg, x).unwrap();
        for s in stages {
            assert!(tape.data(s).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_level_counts_and_finest_resolution() {
        let cfg = NetworkConfig::default();
        let params = init_network_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let img = image(64, 64, 7);
        let x = image_leaf(&mut tape, &img).unwrap();
        let out = tanet_forward(&mut tape, &mut binding, &params, &cfg, x).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert_eq!(out.param_maps.len(), 3);
        // finest level sits at H/4 (decoder stops at the second stage)
        assert_eq!(tape.shape(out.logits[0]), &[1, 1, 16, 16]);
        assert_eq!(tape.shape(out.logits[2]), &[1, 1, 4, 4]);
    }

    #[test]
    fn rrb_preserves_spatial_size_and_reduces_to_projection() {
        let cfg = NetworkConfig::micro(8);
        let mut params = init_network_params(&cfg).unwrap();
        // zero residual branch: rrb == relu(1x1 proj)
        let si = cfg.stage_channels.len() - 1;
        for part in ["res0", "res1"] {
            params
                .get_mut(&format!("decoder.stage{si}.rrb.{part}.weight"))
                .unwrap()
                .data
                .fill(0.0);
        }
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut rng = Rng::new(4);
        let f = tape
            .constant(rng.normal_vec(cfg.stage_channels[si] * 64, 0.0, 1.0), &[1, cfg.stage_channels[si], 8, 8])
            .unwrap();
        let out = rrb(&mut tape, &mut binding, &params, &format!("decoder.stage{si}.rrb"), f).unwrap();
        assert_eq!(&tape.shape(out)[2..], &[8, 8]);

        let proj = bound_conv(&mut tape, &mut binding, &params, &format!("decoder.stage{si}.rrb.proj"), f, 0).unwrap();
        let relu = tape.relu(proj).unwrap();
        assert_eq!(tape.data(out), tape.data(relu));
    }

    #[test]
    fn tarm_free_variant_matches_zero_initialized_tarm_exactly() {
        let mut full = NetworkConfig::micro(12);
        Variant::Full.apply(&mut full);
        let mut m2 = full.clone();
        Variant::BasicRrb.apply(&mut m2);

        let params = init_network_params(&full).unwrap();
        let img = image(32, 32, 9);

        let mut tape_a = Tape::new();
        let mut binding_a = Binding::new();
        let xa = image_leaf(&mut tape_a, &img).unwrap();
        let oa = tanet_forward(&mut tape_a, &mut binding_a, &params, &full, xa).unwrap();

        let mut tape_b = Tape::new();
        let mut binding_b = Binding::new();
        let xb = image_leaf(&mut tape_b, &img).unwrap();
        let ob = tanet_forward(&mut tape_b, &mut binding_b, &params, &m2, xb).unwrap();

        for (&la, &lb) in oa.logits.iter().zip(&ob.logits) {
            let da: Vec<u64> = tape_a.data(la).iter().map(|v| v.to_bits()).collect();
            let db: Vec<u64> = tape_b.data(lb).iter().map(|v| v.to_bits()).collect();
            assert_eq!(da, db);
        }
    }

    #[test]
    fn deterministic_forward_given_seed() {
        let cfg = NetworkConfig::micro(21);
        let params = init_network_params(&cfg).unwrap();
        let img = image(32, 32, 10);
        let a = predict_mask(&params, &cfg, &img).unwrap();
        let b = predict_mask(&params, &cfg, &img).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.h, 32);
    }
}
