//! The gradient verification suite: every differentiable graph operation on
//! randomized small shapes, and the complete pair-training loss of a small
//! model in every co-attention variant.
//!
//! Each operation output is reduced to a scalar through a fixed random
//! projection `Σ rᵢ yᵢ`, so no coordinate of the gradient is structurally zero.
//! Inputs to `relu` and `abs` are kept at least 0.1 away from the kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coattention::{ChannelMode, Variant};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::net::{Model, ModelConfig};
use crate::params::Bound;
use crate::tensor::Tensor;
use crate::train;

pub const PRIMITIVE_EPS: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_EPS: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-5;
/// Half-width of the random biases of the whole-model check.
pub const BIAS_JITTER: f64 = 0.1;
/// Frame side used for the whole-model check (two feature positions per axis).
pub const MODEL_FRAME: usize = 16;

fn signed_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Uniform on `[-1, -0.1] ∪ [0.1, 1]`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("finite")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// `Σ rᵢ yᵢ` with `r` a fixed random constant of the same size as `y`.
fn project(graph: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let n = graph.value(y).numel();
    let col = graph.reshape(y, &[n, 1])?;
    let row = graph.constant(r.reshape(&[1, n])?)?;
    let s = graph.matmul(row, col)?;
    graph.reshape(s, &[1])
}

/// Checks `op` on `inputs`, with the output projected onto a random direction.
fn check_op<F>(name: &str, rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut probe = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| probe.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = op(&mut probe, &vars)?;
    let out_shape = probe.shape(y).to_vec();
    let r = signed_uniform(rng, &out_shape);
    grad_check(
        name,
        |g, v| {
            let y = op(g, v)?;
            project(g, y, &r)
        },
        &inputs,
        PRIMITIVE_EPS,
        PRIMITIVE_TOL,
    )
}

/// One report per differentiable operation, shapes drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let inputs = vec![signed_uniform(rng, &[m, k]), signed_uniform(rng, &[k, n])];
    out.push(check_op("matmul", rng, inputs, |g, v| g.matmul(v[0], v[1]))?);

    let inputs = vec![signed_uniform(rng, &[m, n])];
    out.push(check_op("transpose", rng, inputs, |g, v| g.transpose(v[0]))?);

    let inputs = vec![signed_uniform(rng, &[m + 1, n]).map(|x| 3.0 * x)];
    out.push(check_op("softmax_columns", rng, inputs, |g, v| g.softmax_columns(v[0]))?);

    for (stride, size) in [(1, 3), (2, 3), (1, 1)] {
        let (h, w, cin, cout) = (dim(rng) + 2, dim(rng) + 2, dim(rng), dim(rng));
        let pad = size / 2;
        let inputs = vec![signed_uniform(rng, &[h, w, cin]), signed_uniform(rng, &[size, size, cin, cout])];
        let name = format!("conv2d[k{size},s{stride}]");
        out.push(check_op(&name, rng, inputs, move |g, v| g.conv2d(v[0], v[1], stride, pad))?);
    }

    let (h, w, c) = (dim(rng), dim(rng), dim(rng));
    let inputs = vec![signed_uniform(rng, &[h, w, c]), signed_uniform(rng, &[c])];
    out.push(check_op("add_bias", rng, inputs, |g, v| g.add_bias(v[0], v[1]))?);
    let inputs = vec![signed_uniform(rng, &[h * w, c]), signed_uniform(rng, &[c])];
    out.push(check_op("scale_channels", rng, inputs, |g, v| g.scale_channels(v[0], v[1]))?);
    let inputs = vec![signed_uniform(rng, &[h * w, c]), signed_uniform(rng, &[h * w])];
    out.push(check_op("mul_positions", rng, inputs, |g, v| g.mul_positions(v[0], v[1]))?);

    let inputs = vec![signed_uniform(rng, &[h, w, c]), signed_uniform(rng, &[h, w, c])];
    out.push(check_op("add", rng, inputs.clone(), |g, v| g.add(v[0], v[1]))?);
    out.push(check_op("sub", rng, inputs, |g, v| g.sub(v[0], v[1]))?);
    let factor = rng.gen_range(-2.0..2.0);
    let inputs = vec![signed_uniform(rng, &[h, w, c])];
    out.push(check_op("scale", rng, inputs, move |g, v| g.scale(v[0], factor))?);

    let inputs = vec![away_from_zero(rng, &[h, w, c])];
    out.push(check_op("relu", rng, inputs.clone(), |g, v| g.relu(v[0]))?);
    out.push(check_op("abs", rng, inputs, |g, v| g.abs(v[0]))?);
    let inputs = vec![signed_uniform(rng, &[h, w, c]).map(|x| 4.0 * x)];
    out.push(check_op("sigmoid", rng, inputs, |g, v| g.sigmoid(v[0]))?);

    let c2 = dim(rng);
    let inputs = vec![signed_uniform(rng, &[h, w, c]), signed_uniform(rng, &[h, w, c2])];
    out.push(check_op("concat_channels", rng, inputs, |g, v| g.concat_channels(v[0], v[1]))?);

    let factor = rng.gen_range(1..=4);
    let inputs = vec![signed_uniform(rng, &[h, w, c])];
    let name = format!("bilinear_upsample[x{factor}]");
    out.push(check_op(&name, rng, inputs, move |g, v| g.bilinear_upsample(v[0], factor))?);

    let inputs = vec![signed_uniform(rng, &[h, w, c])];
    out.push(check_op("mean_positions", rng, inputs.clone(), |g, v| g.mean_positions(v[0]))?);
    out.push(check_op("sum", rng, inputs.clone(), |g, v| g.sum(v[0]))?);
    out.push(check_op("mean", rng, inputs.clone(), |g, v| g.mean(v[0]))?);
    out.push(check_op("reshape", rng, inputs, move |g, v| g.reshape(v[0], &[c, h * w]))?);

    let (h, w) = (dim(rng) + 1, dim(rng) + 1);
    let mut mask = Tensor::zeros(&[h, w]);
    for v in mask.data_mut() {
        *v = f64::from(u8::from(rng.gen::<bool>()));
    }
    let pred = Tensor::uniform(&[h, w], 0.4, rng).map(|x| 0.5 + x);
    out.push(check_op("weighted_bce", rng, vec![pred], move |g, v| {
        g.weighted_bce(v[0], &mask)
    })?);

    Ok(out)
}

/// Small model used for the whole-model check.
pub fn check_model_config(variant: Variant, channel_mode: ChannelMode) -> ModelConfig {
    ModelConfig {
        variant,
        channel_mode,
        channels: 4,
        embed_widths: [3, 4],
        head_width: 4,
        ..ModelConfig::default()
    }
}

/// Gradient of the training loss of one frame pair (both streams' weighted
/// BCE plus, for the symmetric variant, the orthogonality penalty) with
/// respect to every model parameter.
pub fn model_check(variant: Variant, channel_mode: ChannelMode, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::new(check_model_config(variant, channel_mode), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero biases put dead receptive fields exactly on the ReLU kink.
    let biases: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).ends_with(".bias")).collect();
    for id in biases {
        let shape = model.store.get(id).shape().to_vec();
        *model.store.get_mut(id) = Tensor::uniform(&shape, BIAS_JITTER, &mut rng);
    }
    let frame = |rng: &mut ChaCha8Rng| {
        Tensor::uniform(&[MODEL_FRAME, MODEL_FRAME, 3], 0.5, rng).map(|x| x + 0.5)
    };
    let (fa, fb) = (frame(&mut rng), frame(&mut rng));
    let mask = |rng: &mut ChaCha8Rng| {
        let data = (0..MODEL_FRAME * MODEL_FRAME)
            .map(|_| f64::from(u8::from(rng.gen_bool(0.3))))
            .collect();
        Tensor::new(&[MODEL_FRAME, MODEL_FRAME], data).expect("finite")
    };
    let (ma, mb) = (mask(&mut rng), mask(&mut rng));
    let name = match variant {
        Variant::ChannelWise => format!("model[{}-{}]", variant.name(), channel_mode.name()),
        _ => format!("model[{}]", variant.name()),
    };
    grad_check(
        &name,
        |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let out = model.forward_pair(g, &bound, &fa, &fb)?;
            let la = g.weighted_bce(out.ya, &ma)?;
            let lb = g.weighted_bce(out.yb, &mb)?;
            train::total_loss(g, &bound, &[la, lb], model.coatt())
        },
        model.store.tensors(),
        MODEL_EPS,
        MODEL_TOL,
    )
}

/// Every model configuration covered by [`model_check`].
pub const MODEL_CASES: [(Variant, ChannelMode); 4] = [
    (Variant::Vanilla, ChannelMode::Se),
    (Variant::Symmetric, ChannelMode::Se),
    (Variant::ChannelWise, ChannelMode::Static),
    (Variant::ChannelWise, ChannelMode::Se),
];

/// Primitive and model checks for each seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<(u64, GradCheckReport)>> {
    let mut out = Vec::new();
    for seed in seeds {
        for r in primitive_checks(seed)? {
            out.push((seed, r));
        }
        for (variant, mode) in MODEL_CASES {
            out.push((seed, model_check(variant, mode, seed)?));
        }
    }
    Ok(out)
}

/// Check family: the op name without its shape tag, or the full model name.
pub fn family(op_name: &str) -> &str {
    if op_name.starts_with("model") {
        op_name
    } else {
        op_name.split('[').next().unwrap_or(op_name)
    }
}

/// Worst report per check family, in first-seen order.
pub fn worst_by_family(reports: &[(u64, GradCheckReport)]) -> Vec<(u64, GradCheckReport)> {
    let mut worst: Vec<(u64, GradCheckReport)> = Vec::new();
    for (seed, r) in reports {
        match worst.iter_mut().find(|(_, w)| family(&w.op_name) == family(&r.op_name)) {
            Some(slot) if r.max_rel_error > slot.1.max_rel_error => *slot = (*seed, r.clone()),
            Some(_) => {}
            None => worst.push((*seed, r.clone())),
        }
    }
    worst
}
