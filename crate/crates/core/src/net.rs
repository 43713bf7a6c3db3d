//! The Siamese segmentation model: a shared three-layer convolutional
//! embedder, the co-attention block and a small convolutional head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coattention::{
    self, AttentionSummary, ChannelMode, CoattentionParams, FeatureMap, Variant,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Spatial reduction of the embedder (three stride-2 layers).
pub const FEATURE_STRIDE: usize = 8;
const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channel_mode: ChannelMode,
    /// Feature channels `C` of the embedding.
    pub channels: usize,
    /// Widths of the first two embedder layers.
    pub embed_widths: [usize; 2],
    pub head_width: usize,
    pub ortho_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Symmetric,
            channel_mode: ChannelMode::Se,
            channels: 64,
            embed_widths: [16, 32],
            head_width: 32,
            ortho_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            he_uniform(&[size, size, cin, cout], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            kernel,
            bias,
            stride,
            pad,
        }
    }

    fn apply(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let y = graph.conv2d(x, bound[self.kernel], self.stride, self.pad)?;
        graph.add_bias(y, bound[self.bias])
    }
}

/// Which parameter tensors belong to which part of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub embed: [ConvLayer; 3],
    pub coatt: CoattentionParams,
    pub head: [ConvLayer; 3],
    /// 1×1 side-output used only by static-image training.
    pub side: ConvLayer,
}

impl Layout {
    pub fn embedder_ids(&self) -> Vec<ParamId> {
        self.embed.iter().flat_map(|l| [l.kernel, l.bias]).collect()
    }

    pub fn side_ids(&self) -> Vec<ParamId> {
        vec![self.side.kernel, self.side.bias]
    }
}

/// Parameters plus their layout. Both Siamese streams read the one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

/// Probability map at input resolution, `[H0, W0]`, values in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction(pub Tensor);

impl Prediction {
    pub fn probabilities(&self) -> &Tensor {
        &self.0
    }

    pub fn binarize(&self, threshold: f64) -> Tensor {
        self.0.map(|p| if p > threshold { 1.0 } else { 0.0 })
    }
}

/// Graph handles produced by [`Model::forward_pair`].
#[derive(Debug, Clone, Copy)]
pub struct PairOutput {
    pub ya: Var,
    pub yb: Var,
    pub va: FeatureMap,
    pub vb: FeatureMap,
    pub affinity: coattention::AffinityPair,
    pub za: AttentionSummary,
    pub zb: AttentionSummary,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.head_width == 0 || config.embed_widths.contains(&0) {
            return Err(Error::usage("model widths must be positive"));
        }
        if config.ortho_lambda < 0.0 {
            return Err(Error::usage("ortho_lambda must be nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [w1, w2] = config.embed_widths;
        let c = config.channels;
        let embed = [
            ConvLayer::init(&mut store, "embed.0", 3, IMAGE_CHANNELS, w1, 2, 1, &mut rng),
            ConvLayer::init(&mut store, "embed.1", 3, w1, w2, 2, 1, &mut rng),
            ConvLayer::init(&mut store, "embed.2", 3, w2, c, 2, 1, &mut rng),
        ];
        let coatt = CoattentionParams::init(
            &mut store,
            config.variant,
            config.channel_mode,
            c,
            config.ortho_lambda,
            &mut rng,
        );
        let hw = config.head_width;
        let head = [
            ConvLayer::init(&mut store, "head.0", 3, 2 * c, hw, 1, 1, &mut rng),
            ConvLayer::init(&mut store, "head.1", 3, hw, hw, 1, 1, &mut rng),
            ConvLayer::init(&mut store, "head.2", 1, hw, 1, 1, 0, &mut rng),
        ];
        let side = ConvLayer::init(&mut store, "side", 1, c, 1, 1, 0, &mut rng);
        Ok(Self {
            config,
            store,
            layout: Layout {
                embed,
                coatt,
                head,
                side,
            },
        })
    }

    pub fn coatt(&self) -> &CoattentionParams {
        &self.layout.coatt
    }

    /// Embeds an `[H0, W0, 3]` image into an `[H0/8, W0/8, C]` feature map.
    pub fn embed(&self, graph: &mut Graph, bound: &Bound, frame: &Tensor) -> Result<FeatureMap> {
        check_frame(frame)?;
        let mut x = graph.constant(frame.clone())?;
        for layer in &self.layout.embed {
            x = layer.apply(graph, bound, x)?;
            x = graph.relu(x)?;
        }
        FeatureMap::new(graph, x)
    }

    /// Segmentation head on `X = [Z, V]`, upsampled to input resolution: `[H0, W0]`.
    pub fn decode(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let [h, w, _] = *graph.shape(x) else {
            return Err(Error::dim("decode", format!("expected [H, W, 2C], got {:?}", graph.shape(x))));
        };
        let [h0, h1, h2] = &self.layout.head;
        let mut y = h0.apply(graph, bound, x)?;
        y = graph.relu(y)?;
        y = h1.apply(graph, bound, y)?;
        y = graph.relu(y)?;
        y = h2.apply(graph, bound, y)?;
        y = graph.sigmoid(y)?;
        y = graph.bilinear_upsample(y, FEATURE_STRIDE)?;
        graph.reshape(y, &[h * FEATURE_STRIDE, w * FEATURE_STRIDE])
    }

    /// Both streams of a training pair.
    pub fn forward_pair(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        fa: &Tensor,
        fb: &Tensor,
    ) -> Result<PairOutput> {
        if fa.shape() != fb.shape() {
            return Err(Error::dim(
                "forward_pair",
                format!("frame shapes {:?} and {:?} differ", fa.shape(), fb.shape()),
            ));
        }
        let va = self.embed(graph, bound, fa)?;
        let vb = self.embed(graph, bound, fb)?;
        self.pair_from_features(graph, bound, &va, &vb)
    }

    pub fn pair_from_features(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        va: &FeatureMap,
        vb: &FeatureMap,
    ) -> Result<PairOutput> {
        let coatt = self.coatt();
        let s = coattention::compute_affinity(graph, bound, coatt, va, vb)?;
        let affinity = coattention::normalize_affinity(graph, s)?;
        let za = coattention::gated_summary(graph, bound, coatt, vb, affinity.s_c)?;
        let zb = coattention::gated_summary(graph, bound, coatt, va, affinity.s_r)?;
        let xa = coattention::concat_features(graph, za.z, va)?;
        let xb = coattention::concat_features(graph, zb.z, vb)?;
        let ya = self.decode(graph, bound, xa)?;
        let yb = self.decode(graph, bound, xb)?;
        Ok(PairOutput {
            ya,
            yb,
            va: *va,
            vb: *vb,
            affinity,
            za,
            zb,
        })
    }

    /// Gated summary of the query against one reference.
    pub fn query_summary(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        vq: &FeatureMap,
        vref: &FeatureMap,
    ) -> Result<AttentionSummary> {
        let coatt = self.coatt();
        let s = coattention::compute_affinity(graph, bound, coatt, vq, vref)?;
        let s_c = graph.softmax_columns(s)?;
        coattention::gated_summary(graph, bound, coatt, vref, s_c)
    }

    /// Query prediction from summaries fused over `refs` (at least one).
    pub fn query_from_features(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        vq: &FeatureMap,
        refs: &[FeatureMap],
    ) -> Result<Var> {
        if refs.is_empty() {
            return Err(Error::usage("query inference needs at least one reference"));
        }
        let summaries = refs
            .iter()
            .map(|r| self.query_summary(graph, bound, vq, r))
            .collect::<Result<Vec<_>>>()?;
        let fused = coattention::fuse_summaries(graph, &summaries)?;
        let x = coattention::concat_features(graph, fused.z, vq)?;
        self.decode(graph, bound, x)
    }

    /// Decodes the query with an all-zero summary (no co-attention).
    pub fn query_without_refs(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        vq: &FeatureMap,
    ) -> Result<Var> {
        let zero = graph.constant(Tensor::zeros(&[vq.positions(), vq.channels]))?;
        let x = coattention::concat_features(graph, zero, vq)?;
        self.decode(graph, bound, x)
    }

    pub fn forward_query(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        fq: &Tensor,
        refs: &[Tensor],
    ) -> Result<Var> {
        if refs.is_empty() {
            return Err(Error::usage("forward_query needs at least one reference frame"));
        }
        if let Some(bad) = refs.iter().find(|r| r.shape() != fq.shape()) {
            return Err(Error::dim(
                "forward_query",
                format!("reference {:?} vs query {:?}", bad.shape(), fq.shape()),
            ));
        }
        let vq = self.embed(graph, bound, fq)?;
        let vrefs = refs
            .iter()
            .map(|r| self.embed(graph, bound, r))
            .collect::<Result<Vec<_>>>()?;
        self.query_from_features(graph, bound, &vq, &vrefs)
    }

    /// Static-image path: embedder plus the 1×1 side-output, `[H0, W0]`.
    pub fn forward_static(&self, graph: &mut Graph, bound: &Bound, image: &Tensor) -> Result<Var> {
        let v = self.embed(graph, bound, image)?;
        let y = self.layout.side.apply(graph, bound, v.var)?;
        let y = graph.sigmoid(y)?;
        let y = graph.bilinear_upsample(y, FEATURE_STRIDE)?;
        graph.reshape(y, &[v.height * FEATURE_STRIDE, v.width * FEATURE_STRIDE])
    }

    /// Inference helper: runs a closure on a fresh graph with frozen parameters
    /// and returns the probability map it produces.
    pub fn predict<F>(&self, f: F) -> Result<Prediction>
    where
        F: FnOnce(&Self, &mut Graph, &Bound) -> Result<Var>,
    {
        let mut graph = Graph::new();
        let bound = self.store.bind_frozen(&mut graph)?;
        let y = f(self, &mut graph, &bound)?;
        Ok(Prediction(graph.value(y).clone()))
    }

    /// Embeds one frame on a throwaway graph and returns the feature values.
    pub fn embed_value(&self, frame: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.store.bind_frozen(&mut graph)?;
        let v = self.embed(&mut graph, &bound, frame)?;
        Ok(graph.value(v.var).clone())
    }
}

fn check_frame(frame: &Tensor) -> Result<()> {
    match *frame.shape() {
        [h, w, IMAGE_CHANNELS] if h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0 => Ok(()),
        ref s => Err(Error::dim(
            "embed",
            format!("frame must be [H, W, 3] with H and W divisible by {FEATURE_STRIDE}, got {s:?}"),
        )),
    }
}
