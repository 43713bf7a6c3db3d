//! Co-attention between two frame embeddings.
//!
//! Given embeddings `Va`, `Vb` (flattened to `C × WH`), the affinity is the
//! bilinear form `S = Vbᵀ W Va`, one entry per pair of positions. Columns of
//! `S` and `Sᵀ` are softmax-normalised, each query position receives the
//! convex combination of reference features picked out by its column, and a
//! learned sigmoid gate scales every position's summary before it is
//! concatenated with the query's own features.
//!
//! Matrices here are stored positions-major: a feature map `[H, W, C]` is
//! read as `[WH, C]`, i.e. the transpose of the `C × WH` view above. Row `i`
//! is the feature vector at position `i` (row-major position order).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Symmetric,
    #[serde(rename = "channelwise")]
    ChannelWise,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::Symmetric, Variant::ChannelWise];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Symmetric => "symmetric",
            Variant::ChannelWise => "channelwise",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "symmetric" => Ok(Variant::Symmetric),
            "channelwise" => Ok(Variant::ChannelWise),
            other => Err(Error::usage(format!(
                "unknown variant {other:?} (expected vanilla|symmetric|channelwise)"
            ))),
        }
    }
}

/// How the channel-wise variant obtains its diagonal weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Learned vectors `d_a`, `d_b`.
    Static,
    /// Squeeze-and-excitation: weights computed from the other branch's pooled features.
    Se,
}

impl ChannelMode {
    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Static => "static",
            ChannelMode::Se => "se",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeBranch {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AffinityWeights {
    /// Full `C × C` matrix (vanilla and symmetric variants).
    Full { weight: ParamId },
    /// `S = (diag(d_a) Vb)ᵀ (diag(d_b) Va)`.
    Diagonal { d_a: ParamId, d_b: ParamId },
    /// `d_a` comes from branch a and scales `Vb`; `d_b` comes from branch b and scales `Va`.
    Se { a: SeBranch, b: SeBranch },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoattentionParams {
    pub variant: Variant,
    pub channels: usize,
    pub affinity: AffinityWeights,
    /// `1 × 1 × C × 1` kernel of the gate convolution, shared by both streams.
    pub gate_kernel: ParamId,
    pub gate_bias: ParamId,
    pub ortho_lambda: f64,
}

/// Noise half-width around the identity for the initial weight matrix.
pub const WEIGHT_INIT_NOISE: f64 = 0.01;

impl CoattentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        variant: Variant,
        channel_mode: ChannelMode,
        channels: usize,
        ortho_lambda: f64,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let affinity = match variant {
            Variant::Vanilla | Variant::Symmetric => {
                let mut w = Tensor::uniform(&[c, c], WEIGHT_INIT_NOISE, rng);
                for i in 0..c {
                    w.data_mut()[i * c + i] += 1.0;
                }
                AffinityWeights::Full {
                    weight: store.add("coatt.weight", w),
                }
            }
            Variant::ChannelWise => match channel_mode {
                ChannelMode::Static => AffinityWeights::Diagonal {
                    d_a: store.add("coatt.d_a", Tensor::ones(&[c])),
                    d_b: store.add("coatt.d_b", Tensor::ones(&[c])),
                },
                ChannelMode::Se => {
                    let bound = (3.0 / c as f64).sqrt();
                    let mut branch = |name: &str, rng: &mut R| SeBranch {
                        weight: store.add(
                            format!("coatt.se_{name}.weight"),
                            Tensor::uniform(&[c, c], bound, rng),
                        ),
                        bias: store.add(format!("coatt.se_{name}.bias"), Tensor::zeros(&[c])),
                    };
                    let a = branch("a", rng);
                    let b = branch("b", rng);
                    AffinityWeights::Se { a, b }
                }
            },
        };
        let gate_bound = (3.0 / c as f64).sqrt();
        let gate_kernel = store.add(
            "coatt.gate.kernel",
            Tensor::uniform(&[1, 1, c, 1], gate_bound, rng),
        );
        let gate_bias = store.add("coatt.gate.bias", Tensor::zeros(&[1]));
        Self {
            variant,
            channels,
            affinity,
            gate_kernel,
            gate_bias,
            ortho_lambda,
        }
    }

    pub fn channel_mode(&self) -> Option<ChannelMode> {
        match self.affinity {
            AffinityWeights::Full { .. } => None,
            AffinityWeights::Diagonal { .. } => Some(ChannelMode::Static),
            AffinityWeights::Se { .. } => Some(ChannelMode::Se),
        }
    }

    pub fn weight(&self) -> Option<ParamId> {
        match self.affinity {
            AffinityWeights::Full { weight } => Some(weight),
            _ => None,
        }
    }
}

/// An embedding `V` of one frame, `[H, W, C]`, living on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMap {
    pub fn new(graph: &Graph, var: Var) -> Result<Self> {
        match *graph.shape(var) {
            [height, width, channels] => Ok(Self {
                var,
                height,
                width,
                channels,
            }),
            ref s => Err(Error::dim(
                "feature_map",
                format!("expected [H, W, C], got {s:?}"),
            )),
        }
    }

    pub fn constant(graph: &mut Graph, value: Tensor) -> Result<Self> {
        let var = graph.constant(value)?;
        Self::new(graph, var)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// `[WH, C]` view; row `i` is the feature at row-major position `i`.
    pub fn flat(&self, graph: &mut Graph) -> Result<Var> {
        graph.reshape(self.var, &[self.positions(), self.channels])
    }

    fn same_geometry(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels)
        {
            return Err(Error::dim(
                op,
                format!(
                    "feature maps [{}, {}, {}] and [{}, {}, {}] differ",
                    self.height, self.width, self.channels, other.height, other.width,
                    other.channels
                ),
            ));
        }
        Ok(())
    }
}

/// The raw affinity and its two column-normalised forms.
#[derive(Debug, Clone, Copy)]
pub struct AffinityPair {
    /// `[WH_b, WH_a]`: entry `(j, i)` pairs position `j` of b with position `i` of a.
    pub s: Var,
    /// `softmax_columns(S)`: column `i` weights b's positions for query position `i` of a.
    pub s_c: Var,
    /// `softmax_columns(Sᵀ)`: column `j` weights a's positions for query position `j` of b.
    pub s_r: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionSummary {
    /// Gated summary `[WH, C]`.
    pub z: Var,
    /// `[WH]`, each in (0, 1).
    pub gate_values: Var,
}

/// Per-channel SE weights `σ(gap(V) · W_se + b_se)` from one branch.
fn se_weights(graph: &mut Graph, bound: &Bound, branch: SeBranch, v: &FeatureMap) -> Result<Var> {
    let pooled = graph.mean_positions(v.var)?;
    let row = graph.reshape(pooled, &[1, v.channels])?;
    let proj = graph.matmul(row, bound[branch.weight])?;
    let proj = graph.reshape(proj, &[v.channels])?;
    let logits = graph.add(proj, bound[branch.bias])?;
    graph.sigmoid(logits)
}

/// `S = Vbᵀ W Va` (or its diagonal forms), shape `[WH_b, WH_a]`.
pub fn compute_affinity(
    graph: &mut Graph,
    bound: &Bound,
    params: &CoattentionParams,
    va: &FeatureMap,
    vb: &FeatureMap,
) -> Result<Var> {
    va.same_geometry(vb, "compute_affinity")?;
    if va.channels != params.channels {
        return Err(Error::dim(
            "compute_affinity",
            format!(
                "features have {} channels, co-attention expects {}",
                va.channels, params.channels
            ),
        ));
    }
    let ma = va.flat(graph)?;
    let mb = vb.flat(graph)?;
    match params.affinity {
        AffinityWeights::Full { weight } => {
            let left = graph.matmul(mb, bound[weight])?;
            let right = graph.transpose(ma)?;
            graph.matmul(left, right)
        }
        AffinityWeights::Diagonal { d_a, d_b } => {
            let left = graph.scale_channels(mb, bound[d_a])?;
            let right = graph.scale_channels(ma, bound[d_b])?;
            let right = graph.transpose(right)?;
            graph.matmul(left, right)
        }
        AffinityWeights::Se { a, b } => {
            let d_a = se_weights(graph, bound, a, va)?;
            let d_b = se_weights(graph, bound, b, vb)?;
            let left = graph.scale_channels(mb, d_a)?;
            let right = graph.scale_channels(ma, d_b)?;
            let right = graph.transpose(right)?;
            graph.matmul(left, right)
        }
    }
}

pub fn normalize_affinity(graph: &mut Graph, s: Var) -> Result<AffinityPair> {
    let s_c = graph.softmax_columns(s)?;
    let st = graph.transpose(s)?;
    let s_r = graph.softmax_columns(st)?;
    Ok(AffinityPair { s, s_c, s_r })
}

/// `Z = Vref S_norm`: row `i` of the `[WH_q, C]` result is the mix of
/// reference features weighted by column `i` of `s_norm`.
pub fn attention_summary(graph: &mut Graph, reference: &FeatureMap, s_norm: Var) -> Result<Var> {
    let rows = graph.shape(s_norm)[0];
    if graph.shape(s_norm).len() != 2 || rows != reference.positions() {
        return Err(Error::dim(
            "attention_summary",
            format!(
                "normalised affinity {:?} does not have {} rows",
                graph.shape(s_norm),
                reference.positions()
            ),
        ));
    }
    let mref = reference.flat(graph)?;
    let weights = graph.transpose(s_norm)?;
    graph.matmul(weights, mref)
}

/// Per-position gate `σ(w_f · Z_i + b_f)`, computed as a 1×1 convolution.
pub fn gate(graph: &mut Graph, bound: &Bound, params: &CoattentionParams, z: Var) -> Result<Var> {
    let [positions, channels] = *graph.shape(z) else {
        return Err(Error::dim(
            "gate",
            format!("summary must be [WH, C], got {:?}", graph.shape(z)),
        ));
    };
    if channels != params.channels {
        return Err(Error::dim(
            "gate",
            format!("summary has {channels} channels, gate expects {}", params.channels),
        ));
    }
    let column = graph.reshape(z, &[positions, 1, channels])?;
    let logits = graph.conv2d(column, bound[params.gate_kernel], 1, 0)?;
    let logits = graph.add_bias(logits, bound[params.gate_bias])?;
    let logits = graph.reshape(logits, &[positions])?;
    graph.sigmoid(logits)
}

/// Scales every channel of position `i` of `z` by `gate_values[i]`.
pub fn apply_gate(graph: &mut Graph, z: Var, gate_values: Var) -> Result<AttentionSummary> {
    let gated = graph.mul_positions(z, gate_values)?;
    Ok(AttentionSummary {
        z: gated,
        gate_values,
    })
}

/// Summary of `reference` for the query columns of `s_norm`, gated.
pub fn gated_summary(
    graph: &mut Graph,
    bound: &Bound,
    params: &CoattentionParams,
    reference: &FeatureMap,
    s_norm: Var,
) -> Result<AttentionSummary> {
    let z = attention_summary(graph, reference, s_norm)?;
    let g = gate(graph, bound, params, z)?;
    apply_gate(graph, z, g)
}

/// Mean of gated summaries from several references.
pub fn fuse_summaries(graph: &mut Graph, summaries: &[AttentionSummary]) -> Result<AttentionSummary> {
    let (first, rest) = summaries
        .split_first()
        .ok_or_else(|| Error::usage("fuse_summaries needs at least one summary"))?;
    if rest.is_empty() {
        return Ok(*first);
    }
    let mut z = first.z;
    let mut gates = first.gate_values;
    for s in rest {
        z = graph.add(z, s.z)?;
        gates = graph.add(gates, s.gate_values)?;
    }
    let inv = 1.0 / summaries.len() as f64;
    Ok(AttentionSummary {
        z: graph.scale(z, inv)?,
        gate_values: graph.scale(gates, inv)?,
    })
}

/// `X = [Z, V]` along channels, `Z` first: `[H, W, 2C]`.
pub fn concat_features(graph: &mut Graph, z: Var, v: &FeatureMap) -> Result<Var> {
    if graph.shape(z) != [v.positions(), v.channels] {
        return Err(Error::dim(
            "concat_features",
            format!(
                "summary {:?} does not match feature map [{}, {}, {}]",
                graph.shape(z),
                v.height,
                v.width,
                v.channels
            ),
        ));
    }
    let z = graph.reshape(z, &[v.height, v.width, v.channels])?;
    graph.concat_channels(z, v.var)
}

/// `λ · Σ_ij |(W Wᵀ − I)_ij|` for the symmetric variant.
pub fn ortho_penalty(graph: &mut Graph, bound: &Bound, params: &CoattentionParams) -> Result<Var> {
    let raw = ortho_residual(graph, bound, params)?;
    graph.scale(raw, params.ortho_lambda)
}

/// `Σ_ij |(W Wᵀ − I)_ij|` without the λ factor.
pub fn ortho_residual(graph: &mut Graph, bound: &Bound, params: &CoattentionParams) -> Result<Var> {
    let (Variant::Symmetric, Some(weight)) = (params.variant, params.weight()) else {
        return Err(Error::usage(format!(
            "orthogonal penalty is defined for the symmetric variant only, not {}",
            params.variant.name()
        )));
    };
    let w = bound[weight];
    let wt = graph.transpose(w)?;
    let gram = graph.matmul(w, wt)?;
    let eye = graph.constant(Tensor::eye(params.channels))?;
    let diff = graph.sub(gram, eye)?;
    let abs = graph.abs(diff)?;
    graph.sum(abs)
}

/// Value of `Σ_ij |(W Wᵀ − I)_ij|` for stored parameters.
pub fn ortho_residual_value(store: &ParamStore, params: &CoattentionParams) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = store.bind_frozen(&mut graph)?;
    let r = ortho_residual(&mut graph, &bound, params)?;
    Ok(graph.value(r).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: Variant, mode: ChannelMode, c: usize) -> (ParamStore, CoattentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = CoattentionParams::init(&mut store, variant, mode, c, 1.0, &mut rng);
        (store, params)
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        *store.get_mut(id) = t;
    }

    #[test]
    fn affinity_all_ones() {
        let (mut store, params) = setup(Variant::Vanilla, ChannelMode::Se, 1);
        set(&mut store, params.weight().unwrap(), Tensor::ones(&[1, 1]));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g).unwrap();
        let v = FeatureMap::constant(&mut g, Tensor::ones(&[1, 2, 1])).unwrap();
        let s = compute_affinity(&mut g, &bound, &params, &v, &v).unwrap();
        assert_eq!(g.value(s), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn affinity_orthonormal_columns_gives_identity() {
        let (mut store, params) = setup(Variant::Vanilla, ChannelMode::Se, 2);
        set(&mut store, params.weight().unwrap(), Tensor::eye(2));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g).unwrap();
        // Two positions with features e0 and e1.
        let v = Tensor::new(&[1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let v = FeatureMap::constant(&mut g, v).unwrap();
        let s = compute_affinity(&mut g, &bound, &params, &v, &v).unwrap();
        assert_eq!(g.value(s), &Tensor::eye(2));
    }

    #[test]
    fn affinity_rejects_channel_mismatch() {
        let (store, params) = setup(Variant::Vanilla, ChannelMode::Se, 3);
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g).unwrap();
        let a = FeatureMap::constant(&mut g, Tensor::ones(&[2, 2, 3])).unwrap();
        let b = FeatureMap::constant(&mut g, Tensor::ones(&[2, 2, 2])).unwrap();
        assert!(matches!(
            compute_affinity(&mut g, &bound, &params, &a, &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[4, 4])).unwrap();
        let pair = normalize_affinity(&mut g, s).unwrap();
        assert!(g.value(pair.s_c).data().iter().all(|&v| v == 0.25));
        assert!(g.value(pair.s_r).data().iter().all(|&v| v == 0.25));

        let mut dominant = Tensor::zeros(&[4, 4]);
        dominant.data_mut()[2 * 4 + 1] = 20.0;
        let s = g.constant(dominant.clone()).unwrap();
        let pair = normalize_affinity(&mut g, s).unwrap();
        for i in 0..4 {
            let want = if i == 2 { 1.0 } else { 0.0 };
            assert!((g.value(pair.s_c).at(&[i, 1]) - want).abs() < 1e-8);
        }

        // S_r(S) is S_c(Sᵀ).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Tensor::uniform(&[3, 5], 4.0, &mut rng);
        let s = g.constant(raw).unwrap();
        let pair = normalize_affinity(&mut g, s).unwrap();
        let st = g.transpose(s).unwrap();
        let other = normalize_affinity(&mut g, st).unwrap();
        assert_eq!(g.value(pair.s_r), g.value(other.s_c));
    }

    #[test]
    fn summary_identity_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vref = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = FeatureMap::constant(&mut g, vref.clone()).unwrap();
        let eye = g.constant(Tensor::eye(4)).unwrap();
        let z = attention_summary(&mut g, &v, eye).unwrap();
        assert_eq!(g.value(z).data(), vref.data());

        let uniform = g.constant(Tensor::full(&[4, 4], 0.25)).unwrap();
        let z = attention_summary(&mut g, &v, uniform).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|p| vref.data()[p * 3 + c]).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((g.value(z).at(&[i, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn summary_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vref = Tensor::uniform(&[1, 2, 4], 1.0, &mut rng);
        let raw = Tensor::uniform(&[2, 2], 3.0, &mut rng);
        let mut g = Graph::new();
        let v = FeatureMap::constant(&mut g, vref.clone()).unwrap();
        let s = g.constant(raw).unwrap();
        let sn = g.softmax_columns(s).unwrap();
        let weights = g.value(sn).clone();
        let z = attention_summary(&mut g, &v, sn).unwrap();
        for i in 0..2 {
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..2 {
                    acc += vref.data()[j * 4 + c] * weights.at(&[j, i]);
                }
                assert!((g.value(z).at(&[i, c]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_examples() {
        let (mut store, params) = setup(Variant::Vanilla, ChannelMode::Se, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zt = Tensor::uniform(&[5, 3], 2.0, &mut rng);

        set(&mut store, params.gate_kernel, Tensor::zeros(&[1, 1, 3, 1]));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g).unwrap();
        let z = g.constant(zt.clone()).unwrap();
        let gv = gate(&mut g, &bound, &params, z).unwrap();
        assert!(g.value(gv).data().iter().all(|&v| v == 0.5));

        set(&mut store, params.gate_bias, Tensor::full(&[1], 20.0));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g).unwrap();
        let z = g.constant(zt.clone()).unwrap();
        let gv = gate(&mut g, &bound, &params, z).unwrap();
        assert!(g.value(gv).data().iter().all(|&v| (v - 1.0).abs() < 1e-8));

        let w = Tensor::uniform(&[1, 1, 3, 1], 1.0, &mut rng);
        set(&mut store, params.gate_kernel, w.clone());
        set(&mut store, params.gate_bias, Tensor::full(&[1], -0.3));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g).unwrap();
        let z = g.constant(zt.clone()).unwrap();
        let gv = gate(&mut g, &bound, &params, z).unwrap();
        for p in 0..5 {
            let mut logit = -0.3;
            for c in 0..3 {
                logit += w.data()[c] * zt.at(&[p, c]);
            }
            let want = 1.0 / (1.0 + (-logit).exp());
            assert!((g.value(gv).data()[p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zt = Tensor::uniform(&[4, 3], 2.0, &mut rng);
        let mut g = Graph::new();
        let z = g.constant(zt.clone()).unwrap();
        for (value, expect) in [(1.0, 1.0), (0.0, 0.0), (0.5, 0.5)] {
            let gates = g.constant(Tensor::full(&[4], value)).unwrap();
            let out = apply_gate(&mut g, z, gates).unwrap();
            let want = zt.map(|v| v * expect);
            assert_eq!(g.value(out.z), &want);
        }
    }

    #[test]
    fn fuse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        assert!(matches!(fuse_summaries(&mut g, &[]), Err(Error::Usage(_))));

        let zt = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let gates = g.constant(Tensor::full(&[4], 0.7)).unwrap();
        let z = g.constant(zt.clone()).unwrap();
        let neg = g.constant(zt.map(|v| -v)).unwrap();
        let one = apply_gate(&mut g, z, gates).unwrap();
        let fused = fuse_summaries(&mut g, &[one]).unwrap();
        assert_eq!(g.value(fused.z), g.value(one.z));

        let other = apply_gate(&mut g, neg, gates).unwrap();
        let fused = fuse_summaries(&mut g, &[one, other]).unwrap();
        assert!(g.value(fused.z).data().iter().all(|&v| v == 0.0));

        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4, 2], 1.0, &mut rng)).collect();
        let gs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4], 0.5, &mut rng).map(|v| v + 0.5)).collect();
        let summaries: Vec<_> = zs
            .iter()
            .zip(&gs)
            .map(|(z, gt)| {
                let z = g.constant(z.clone()).unwrap();
                let gt = g.constant(gt.clone()).unwrap();
                apply_gate(&mut g, z, gt).unwrap()
            })
            .collect();
        let fused = fuse_summaries(&mut g, &summaries).unwrap();
        for p in 0..4 {
            for c in 0..2 {
                let mut acc = 0.0;
                for n in 0..3 {
                    acc += zs[n].at(&[p, c]) * gs[n].data()[p];
                }
                assert!((g.value(fused.z).at(&[p, c]) - acc / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let v = FeatureMap::constant(&mut g, Tensor::zeros(&[12, 12, 64])).unwrap();
        let zt = Tensor::uniform(&[144, 64], 1.0, &mut rng);
        let z = g.constant(zt.clone()).unwrap();
        let x = concat_features(&mut g, z, &v).unwrap();
        assert_eq!(g.shape(x), &[12, 12, 128]);
        let xv = g.value(x);
        for p in [0usize, 17, 143] {
            let (r, c) = (p / 12, p % 12);
            for ch in 0..64 {
                assert_eq!(xv.at(&[r, c, ch]), zt.at(&[p, ch]));
                assert_eq!(xv.at(&[r, c, 64 + ch]), 0.0);
            }
        }
        let bad = g.constant(Tensor::zeros(&[143, 64])).unwrap();
        assert!(concat_features(&mut g, bad, &v).is_err());
    }

    #[test]
    fn ortho_penalty_examples() {
        let (mut store, mut params) = setup(Variant::Symmetric, ChannelMode::Se, 2);
        let w = params.weight().unwrap();
        set(&mut store, w, Tensor::eye(2));
        let eval = |store: &ParamStore, params: &CoattentionParams| {
            let mut g = Graph::new();
            let bound = store.bind_frozen(&mut g).unwrap();
            let p = ortho_penalty(&mut g, &bound, params).unwrap();
            g.value(p).data()[0]
        };
        assert_eq!(eval(&store, &params), 0.0);
        set(&mut store, w, Tensor::eye(2).map(|v| 2.0 * v));
        assert_eq!(eval(&store, &params), 6.0);
        let perm = Tensor::from_rows(&[&[0., 1.], &[1., 0.]]).unwrap();
        set(&mut store, w, perm);
        assert_eq!(eval(&store, &params), 0.0);
        params.ortho_lambda = 1e-4;
        set(&mut store, w, Tensor::eye(2).map(|v| 2.0 * v));
        assert!((eval(&store, &params) - 6e-4).abs() < 1e-18);
    }

    #[test]
    fn ortho_penalty_rejects_other_variants() {
        for variant in [Variant::Vanilla, Variant::ChannelWise] {
            let (store, params) = setup(variant, ChannelMode::Se, 2);
            let mut g = Graph::new();
            let bound = store.bind_frozen(&mut g).unwrap();
            assert!(matches!(
                ortho_penalty(&mut g, &bound, &params),
                Err(Error::Usage(_))
            ));
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("diagonal".parse::<Variant>().is_err());
    }
}
