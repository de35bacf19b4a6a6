//! Finite-difference verification of every differentiable operation,
//! 10 seeds each, plus determinism and linearity properties.

use camotex::params::ParamSet;
use camotex::rng::Rng;
use camotex::tensor::gradcheck::{finite_diff_check, DEFAULT_EPS};
use camotex::tensor::{PoolMode, Tape, TensorId};
use camotex::{Error, Result};

const TOL: f64 = 1e-4;
const SEEDS: std::ops::Range<u64> = 0..10;

/// Run a check over 10 seeds: `build(tape, x_id, seed)` must produce a
/// scalar loss from the bound parameter `x` of the given shape.
fn check_op<F>(name: &str, shape: &[usize], positive: bool, build: F)
where
    F: Fn(&mut Tape, TensorId, u64) -> Result<TensorId>,
{
    for seed in SEEDS {
        let mut rng = Rng::substream(seed, name);
        let n: usize = shape.iter().product();
        let data = if positive {
            rng.normal_vec(n, 2.0, 0.5)
        } else {
            rng.normal_vec(n, 0.0, 1.0)
        };
        let mut params = ParamSet::new();
        params.insert("x", shape, data);
        let report = finite_diff_check(&params, DEFAULT_EPS, |tape, binding, ps| {
            let x = binding.bind(tape, ps, "x")?;
            build(tape, x, seed)
        })
        .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(
            report.max_rel_error <= TOL,
            "{name} seed {seed}: max rel error {} at {}[{}]",
            report.max_rel_error,
            report.worst_param,
            report.worst_index
        );
    }
}

/// Scalar probe: sum(x * r) with a fixed random projection, so every output
/// entry carries distinct gradient signal.
fn probe(tape: &mut Tape, x: TensorId, seed: u64) -> Result<TensorId> {
    let n = tape.numel(x);
    let shape = tape.shape(x).to_vec();
    let r = Rng::substream(seed, "probe").normal_vec(n, 0.0, 1.0);
    let rt = tape.constant(r, &shape)?;
    let weighted = tape.mul(x, rt)?;
    tape.sum(weighted)
}

#[test]
fn conv2d_as_weight() {
    check_op("conv_w", &[3, 2, 3, 3], false, |tape, w, seed| {
        let x = tape.constant(Rng::substream(seed, "cx").normal_vec(2 * 6 * 6, 0.0, 1.0), &[1, 2, 6, 6])?;
        let b = tape.constant(Rng::substream(seed, "cb").normal_vec(3, 0.0, 0.2), &[3])?;
        let y = tape.conv2d(x, w, b, 1, 1)?;
        probe(tape, y, seed)
    });
}

#[test]
fn conv2d_as_input_stride2() {
    check_op("conv_x", &[1, 2, 7, 7], false, |tape, x, seed| {
        let w = tape.constant(Rng::substream(seed, "cw").normal_vec(3 * 2 * 9, 0.0, 0.4), &[3, 2, 3, 3])?;
        let b = tape.constant(vec![0.1, -0.2, 0.3], &[3])?;
        let y = tape.conv2d(x, w, b, 2, 1)?;
        probe(tape, y, seed)
    });
}

#[test]
fn conv2d_bias_and_1x1() {
    check_op("conv_b", &[4], false, |tape, b, seed| {
        let x = tape.constant(Rng::substream(seed, "c1x").normal_vec(3 * 4 * 4, 0.0, 1.0), &[1, 3, 4, 4])?;
        let w = tape.constant(Rng::substream(seed, "c1w").normal_vec(4 * 3, 0.0, 0.5), &[4, 3, 1, 1])?;
        let y = tape.conv2d(x, w, b, 1, 0)?;
        probe(tape, y, seed)
    });
}

#[test]
fn avg_pool() {
    check_op("avg_pool", &[1, 2, 6, 6], false, |tape, x, seed| {
        let y = tape.pool2d(x, PoolMode::Avg, 2, 2)?;
        probe(tape, y, seed)
    });
}

#[test]
fn max_pool() {
    check_op("max_pool", &[1, 2, 6, 6], false, |tape, x, seed| {
        let y = tape.pool2d(x, PoolMode::Max, 2, 2)?;
        probe(tape, y, seed)
    });
}

#[test]
fn overlapping_avg_pool() {
    check_op("avg_pool_overlap", &[1, 1, 5, 5], false, |tape, x, seed| {
        let y = tape.pool2d(x, PoolMode::Avg, 3, 1)?;
        probe(tape, y, seed)
    });
}

#[test]
fn adaptive_avg_pool() {
    check_op("adaptive_pool", &[1, 2, 7, 5], false, |tape, x, seed| {
        let y = tape.adaptive_avg_pool2d(x, 3, 2)?;
        probe(tape, y, seed)
    });
}

#[test]
fn upsample_bilinear() {
    check_op("upsample", &[1, 2, 3, 4], false, |tape, x, seed| {
        let y = tape.upsample_bilinear(x, 7, 9)?;
        probe(tape, y, seed)
    });
}

#[test]
fn binary_ops_same_shape() {
    for kind in ["add", "sub", "mul", "div"] {
        check_op(&format!("bin_{kind}"), &[2, 3, 2, 2], false, move |tape, a, seed| {
            // keep div denominators away from zero
            let raw = Rng::substream(seed, "rhs").normal_vec(24, 0.0, 1.0);
            let rhs: Vec<f64> = raw.iter().map(|v| v.signum() * (v.abs() + 0.5)).collect();
            let b = tape.constant(rhs, &[2, 3, 2, 2])?;
            let y = match kind {
                "add" => tape.add(a, b)?,
                "sub" => tape.sub(a, b)?,
                "mul" => tape.mul(a, b)?,
                _ => tape.div(a, b)?,
            };
            probe(tape, y, seed)
        });
    }
}

#[test]
fn binary_rhs_gradient_with_broadcast() {
    // gradient w.r.t. the broadcast per-channel operand
    for kind in ["add", "mul", "div"] {
        check_op(&format!("bcast_{kind}"), &[1, 3, 1, 1], true, move |tape, b, seed| {
            let a = tape.constant(Rng::substream(seed, "lhs").normal_vec(3 * 16, 0.0, 1.0), &[1, 3, 4, 4])?;
            let y = match kind {
                "add" => tape.add(a, b)?,
                "mul" => tape.mul(a, b)?,
                _ => tape.div(a, b)?,
            };
            probe(tape, y, seed)
        });
    }
}

#[test]
fn safe_div_both_sides() {
    check_op("safe_div_a", &[6], false, |tape, a, seed| {
        let b = tape.constant(Rng::substream(seed, "sd").normal_vec(6, 1.5, 0.3), &[6])?;
        let y = tape.safe_div(a, b)?;
        probe(tape, y, seed)
    });
    check_op("safe_div_b", &[6], true, |tape, b, seed| {
        let a = tape.constant(Rng::substream(seed, "sn").normal_vec(6, 0.0, 1.0), &[6])?;
        let y = tape.safe_div(a, b)?;
        probe(tape, y, seed)
    });
}

#[test]
fn unary_ops() {
    check_op("relu", &[24], false, |tape, x, seed| {
        let y = tape.relu(x)?;
        probe(tape, y, seed)
    });
    check_op("sigmoid", &[24], false, |tape, x, seed| {
        let y = tape.sigmoid(x)?;
        probe(tape, y, seed)
    });
    check_op("sqrt", &[24], true, |tape, x, seed| {
        let y = tape.sqrt(x)?;
        probe(tape, y, seed)
    });
    check_op("abs", &[24], false, |tape, x, seed| {
        let y = tape.abs(x)?;
        probe(tape, y, seed)
    });
}

#[test]
fn scalar_ops_and_reshape() {
    check_op("scale_addscalar_reshape", &[2, 6], false, |tape, x, seed| {
        let y = tape.scale(x, -1.7)?;
        let y = tape.add_scalar(y, 0.3)?;
        let y = tape.reshape(y, &[3, 4])?;
        probe(tape, y, seed)
    });
}

#[test]
fn reductions() {
    check_op("sum", &[3, 5], false, |tape, x, _| tape.sum(x));
    check_op("mean", &[3, 5], false, |tape, x, _| tape.mean(x));
    check_op("spatial_mean", &[2, 3, 4, 4], false, |tape, x, seed| {
        let y = tape.spatial_mean(x)?;
        probe(tape, y, seed)
    });
    check_op("sum_axis0", &[4, 5], false, |tape, x, seed| {
        let y = tape.sum_axis0(x)?;
        probe(tape, y, seed)
    });
}

#[test]
fn matmul_and_transpose() {
    check_op("matmul_a", &[3, 4], false, |tape, a, seed| {
        let b = tape.constant(Rng::substream(seed, "mb").normal_vec(4 * 2, 0.0, 1.0), &[4, 2])?;
        let y = tape.matmul2d(a, b)?;
        probe(tape, y, seed)
    });
    check_op("matmul_b", &[4, 2], false, |tape, b, seed| {
        let a = tape.constant(Rng::substream(seed, "ma").normal_vec(3 * 4, 0.0, 1.0), &[3, 4])?;
        let y = tape.matmul2d(a, b)?;
        probe(tape, y, seed)
    });
    check_op("transpose", &[3, 5], false, |tape, x, seed| {
        let y = tape.transpose2d(x)?;
        probe(tape, y, seed)
    });
}

#[test]
fn concat_and_patch() {
    check_op("concat", &[1, 2, 3, 3], false, |tape, x, seed| {
        let other = tape.constant(Rng::substream(seed, "cc").normal_vec(9, 0.0, 1.0), &[1, 1, 3, 3])?;
        let y = tape.concat_channels(&[x, other, x])?;
        probe(tape, y, seed)
    });
    check_op("extract_patch", &[1, 2, 5, 5], false, |tape, x, seed| {
        let y = tape.extract_patch(x, 1, 2, 3, 2)?;
        probe(tape, y, seed)
    });
}

#[test]
fn pixel_covariance() {
    check_op("pixel_cov", &[1, 3, 3, 3], false, |tape, x, seed| {
        let y = tape.pixel_covariance_upper(x)?;
        probe(tape, y, seed)
    });
}

#[test]
fn channel_stats_both_outputs() {
    check_op("channel_stats", &[1, 2, 3, 3], false, |tape, x, seed| {
        let (mu, sigma) = tape.channel_stats(x, 1e-5)?;
        let pm = probe(tape, mu, seed)?;
        let ps = probe(tape, sigma, seed.wrapping_add(1))?;
        tape.add(pm, ps)
    });
}

#[test]
fn bce_with_logits() {
    check_op("bce", &[12], false, |tape, x, seed| {
        let targets: Vec<f64> = (0..12).map(|i| f64::from((seed as usize + i) % 2 == 0)).collect();
        tape.bce_with_logits_mean(x, &targets)
    });
}

#[test]
fn division_chain_for_normalization() {
    // the (x - mu) / sigma pattern used by the modulation path
    check_op("normalize", &[1, 2, 4, 4], false, |tape, x, seed| {
        let (mu, sigma) = tape.channel_stats(x, 1e-5)?;
        let c = tape.sub(x, mu)?;
        let y = tape.div(c, sigma)?;
        probe(tape, y, seed)
    });
}

#[test]
fn determinism_same_seed_bitwise() {
    let run = |seed: u64| -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let mut tape = Tape::new();
        let x = tape
            .leaf(rng.normal_vec(2 * 3 * 4 * 4, 0.0, 1.0), &[2, 3, 4, 4], true)
            .unwrap();
        let w = tape
            .constant(rng.normal_vec(4 * 3 * 9, 0.0, 0.4), &[4, 3, 3, 3])
            .unwrap();
        let b = tape.constant(vec![0.0; 4], &[4]).unwrap();
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        (tape.data(y).to_vec(), tape.grad(x).unwrap().to_vec())
    };
    let (y1, g1) = run(42);
    let (y2, g2) = run(42);
    assert_eq!(
        y1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        y2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn conv2d_linearity_in_input() {
    // conv2d(a*x) == a*conv2d(x) when bias is zero, to 1e-12 relative
    let mut rng = Rng::new(7);
    let xdata = rng.normal_vec(2 * 6 * 6, 0.0, 1.0);
    let wdata = rng.normal_vec(3 * 2 * 9, 0.0, 0.5);
    for &a in &[2.0, -0.5, 1e3] {
        let mut tape = Tape::new();
        let x = tape.constant(xdata.clone(), &[1, 2, 6, 6]).unwrap();
        let w = tape.constant(wdata.clone(), &[3, 2, 3, 3]).unwrap();
        let b = tape.constant(vec![0.0; 3], &[3]).unwrap();
        let xs = tape.scale(x, a).unwrap();
        let y1 = tape.conv2d(xs, w, b, 1, 1).unwrap();
        let y0 = tape.conv2d(x, w, b, 1, 1).unwrap();
        let y0s = tape.scale(y0, a).unwrap();
        for (u, v) in tape.data(y1).iter().zip(tape.data(y0s)) {
            let rel = (u - v).abs() / u.abs().max(v.abs()).max(1e-300);
            assert!(rel <= 1e-12, "linearity violated: {u} vs {v}");
        }
    }
}

#[test]
fn gradcheck_reports_nonfinite() {
    let mut params = ParamSet::new();
    params.insert("x", &[1], vec![-2.0]);
    let r = finite_diff_check(&params, DEFAULT_EPS, |tape, binding, ps| {
        let x = binding.bind(tape, ps, "x")?;
        tape.sqrt(x) // NaN forward
    });
    assert!(matches!(r, Err(Error::NonFinite(_))));
}
