//! Texture-aware refinement module (TARM).
//!
//! The module projects an incoming feature map through several 1x1 branches,
//! turns each branch into per-pixel covariance descriptors (the upper
//! triangle of the channel outer product), fuses the descriptors into a
//! texture map, learns spatial modulation maps gamma/beta from it, and
//! applies them to the instance-normalized feature before a residual add:
//!
//!   f_out = conv(gamma * (f' - mu)/sigma + beta) + f_in,   f' = conv(f_in)
//!
//! The final convolution is zero-initialized, so a freshly built TARM is an
//! exact identity on its input.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{upper_triangle_len, Tape, TensorId};

#[derive(Clone, Debug)]
pub struct TarmConfig {
    /// Channels of the incoming feature map (C).
    pub c_in: usize,
    /// Number of 1x1 projection branches (K).
    pub k_branches: usize,
    /// Channels per branch (C1); must stay below c_in.
    pub c1: usize,
    /// Channels of gamma/beta and of the normalized feature (C').
    pub c_prime: usize,
    /// Normalization epsilon inside the sqrt.
    pub eps: f64,
}

impl TarmConfig {
    /// Defaults: K = 4 branches, C1 = 8 (capped below C), C' = C, eps 1e-5.
    pub fn for_channels(c_in: usize) -> Self {
        let c1 = if c_in > 8 { 8 } else { (c_in / 2).max(1) };
        TarmConfig { c_in, k_branches: 4, c1, c_prime: c_in, eps: 1e-5 }
    }

    /// Descriptor length D = C1 (C1 + 1) / 2.
    pub fn descriptor_len(&self) -> usize {
        upper_triangle_len(self.c1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.k_branches == 0 || self.c_in == 0 || self.c_prime == 0 {
            return Err(Error::invalid(format!("degenerate TARM config {self:?}")));
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("TARM eps must be positive".to_string()));
        }
        Ok(())
    }
}

/// The learned spatial modulation maps of one TARM.
#[derive(Copy, Clone, Debug)]
pub struct ParamMaps {
    pub gamma: TensorId,
    pub beta: TensorId,
}

fn kaiming(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    rng.normal_vec(n, 0.0, std)
}

fn init_conv(params: &mut ParamSet, seed: u64, name: &str, o: usize, i: usize, k: usize, zero: bool) {
    init_conv_weight(params, seed, name, o, i, k, zero);
    params.insert(format!("{name}.bias"), &[o], vec![0.0; o]);
}

fn init_conv_weight(params: &mut ParamSet, seed: u64, name: &str, o: usize, i: usize, k: usize, zero: bool) {
    let wname = format!("{name}.weight");
    let w = if zero {
        vec![0.0; o * i * k * k]
    } else {
        kaiming(&mut Rng::substream(seed, &wname), i * k * k, o * i * k * k)
    };
    params.insert(wname, &[o, i, k, k], w);
}

/// Create all parameters of one TARM under `prefix`.
pub fn init_tarm_params(params: &mut ParamSet, prefix: &str, cfg: &TarmConfig, seed: u64) {
    let d = cfg.descriptor_len();
    for k in 0..cfg.k_branches {
        init_conv(params, seed, &format!("{prefix}.branch{k}"), cfg.c1, cfg.c_in, 1, false);
    }
    init_conv(params, seed, &format!("{prefix}.fuse"), cfg.c_prime, cfg.k_branches * d, 3, false);
    for map in ["gamma", "beta"] {
        init_conv(params, seed, &format!("{prefix}.{map}.conv0"), cfg.c_prime, cfg.c_prime, 3, false);
        init_conv(params, seed, &format!("{prefix}.{map}.conv1"), cfg.c_prime, cfg.c_prime, 3, false);
    }
    // no bias on the projection: the instance normalization right after it
    // cancels any channel shift exactly
    init_conv_weight(params, seed, &format!("{prefix}.modulate.pre"), cfg.c_prime, cfg.c_in, 3, false);
    // zero so the module starts as an identity
    init_conv(params, seed, &format!("{prefix}.modulate.post"), cfg.c_in, cfg.c_prime, 3, true);
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

/// K independent 1x1 projections of the input feature map.
pub fn project_branches(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    prefix: &str,
    cfg: &TarmConfig,
    f_in: TensorId,
) -> Result<Vec<TensorId>> {
    (0..cfg.k_branches)
        .map(|k| bound_conv(tape, binding, params, &format!("{prefix}.branch{k}"), f_in, 0))
        .collect()
}

/// Per-pixel covariance descriptors of one branch.
pub fn pixel_covariance(tape: &mut Tape, branch: TensorId) -> Result<TensorId> {
    tape.pixel_covariance_upper(branch)
}

/// Concatenate all descriptor maps and fuse with one 3x3 convolution.
pub fn fuse_texture(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    prefix: &str,
    descriptors: &[TensorId],
) -> Result<TensorId> {
    let stacked = tape.concat_channels(descriptors)?;
    bound_conv(tape, binding, params, &format!("{prefix}.fuse"), stacked, 1)
}

/// Learn gamma and beta from the fused texture features, each through its
/// own two-convolution stack (3x3, relu between).
pub fn param_maps(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    prefix: &str,
    texture: TensorId,
) -> Result<ParamMaps> {
    let mut heads = [TensorId(0); 2];
    for (slot, map) in heads.iter_mut().zip(["gamma", "beta"]) {
        let h = bound_conv(tape, binding, params, &format!("{prefix}.{map}.conv0"), texture, 1)?;
        let h = tape.relu(h)?;
        *slot = bound_conv(tape, binding, params, &format!("{prefix}.{map}.conv1"), h, 1)?;
    }
    Ok(ParamMaps { gamma: heads[0], beta: heads[1] })
}

/// Normalize a 3x3 projection of f_in per channel, apply gamma/beta, run the
/// zero-initialized output convolution, and add the residual.
pub fn modulate(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    prefix: &str,
    cfg: &TarmConfig,
    f_in: TensorId,
    maps: &ParamMaps,
) -> Result<TensorId> {
    let f_prime = {
        let w = binding.bind(tape, params, &format!("{prefix}.modulate.pre.weight"))?;
        let zero_bias = tape.constant(vec![0.0; cfg.c_prime], &[cfg.c_prime])?;
        tape.conv2d(f_in, w, zero_bias, 1, 1)?
    };
    if tape.shape(maps.gamma) != tape.shape(f_prime) {
        return Err(Error::shape(format!(
            "gamma shape {:?} does not match projected feature {:?}",
            tape.shape(maps.gamma),
            tape.shape(f_prime)
        )));
    }
    let (mu, sigma) = tape.channel_stats(f_prime, cfg.eps)?;
    let centered = tape.sub(f_prime, mu)?;
    let normalized = tape.div(centered, sigma)?;
    let scaled = tape.mul(maps.gamma, normalized)?;
    let shifted = tape.add(scaled, maps.beta)?;
    let projected = bound_conv(tape, binding, params, &format!("{prefix}.modulate.post"), shifted, 1)?;
    tape.add(projected, f_in)
}

/// Full TARM: branches -> covariance descriptors -> fusion -> gamma/beta ->
/// modulation with residual. Returns the refined feature and the parameter
/// maps for the loss terms.
pub fn tarm_forward(
    tape: &mut Tape,
    binding: &mut Binding,
    params: &ParamSet,
    prefix: &str,
    cfg: &TarmConfig,
    f_in: TensorId,
) -> Result<(TensorId, ParamMaps)> {
    cfg.validate()?;
    let branches = project_branches(tape, binding, params, prefix, cfg, f_in)?;
    let descriptors = branches
        .into_iter()
        .map(|b| pixel_covariance(tape, b))
        .collect::<Result<Vec<_>>>()?;
    let texture = fuse_texture(tape, binding, params, prefix, &descriptors)?;
    let maps = param_maps(tape, binding, params, prefix, texture)?;
    let f_out = modulate(tape, binding, params, prefix, cfg, f_in, &maps)?;
    Ok((f_out, maps))
}
