//! Video inference: reference selection and the two multi-reference fusion modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coattention::FeatureMap;
use crate::error::{Error, Result};
use crate::net::{Model, Prediction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    GlobalUniform,
    GlobalRandom,
    LocalConsecutive,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::GlobalUniform,
        Strategy::GlobalRandom,
        Strategy::LocalConsecutive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::GlobalUniform => "global_uniform",
            Strategy::GlobalRandom => "global_random",
            Strategy::LocalConsecutive => "local_consecutive",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "global_uniform" => Ok(Strategy::GlobalUniform),
            "random" | "global_random" => Ok(Strategy::GlobalRandom),
            "local" | "local_consecutive" => Ok(Strategy::LocalConsecutive),
            _ => Err(Error::usage(format!(
                "unknown strategy {s:?}, expected uniform, random or local"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Average gated summaries, then decode once.
    Summary,
    /// Decode once per reference, then average the probability maps.
    Prediction,
}

impl Fusion {
    pub const ALL: [Fusion; 2] = [Fusion::Summary, Fusion::Prediction];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Summary => "summary",
            Fusion::Prediction => "prediction",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(Fusion::Summary),
            "prediction" => Ok(Fusion::Prediction),
            _ => Err(Error::usage(format!(
                "unknown fusion {s:?}, expected summary or prediction"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// References per query; 0 decodes from a zero summary.
    pub n_refs: usize,
    pub strategy: Strategy,
    pub fusion: Fusion,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_refs: 5,
            strategy: Strategy::GlobalUniform,
            fusion: Fusion::Summary,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::usage(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Nearest index to `target` not in `taken`; ties go to the earlier frame.
fn nearest_free(target: usize, length: usize, taken: &[bool]) -> usize {
    (0..length)
        .filter(|&i| !taken[i])
        .min_by_key(|&i| (i.abs_diff(target), i))
        .expect("caller guarantees a free index")
}

/// Reference frame indices for query `q` of a `length`-frame video.
///
/// * global uniform: `N` grid points `round(k (T-1) / (N-1))` (the midpoint
///   when `N = 1`), each moved to the nearest index not yet used and not `q`.
/// * global random: `N` distinct uniform indices other than `q`.
/// * local consecutive: the `N` indices nearest to `q`, earlier first on ties.
pub fn select_references<R: Rng + ?Sized>(
    strategy: Strategy,
    length: usize,
    query: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if query >= length {
        return Err(Error::usage(format!(
            "query index {query} outside a {length}-frame video"
        )));
    }
    if n > length - 1 {
        return Err(Error::usage(format!(
            "{n} references requested but the video has only {} other frames",
            length - 1
        )));
    }
    let mut taken = vec![false; length];
    taken[query] = true;
    let picks = match strategy {
        Strategy::GlobalUniform => {
            let last = (length - 1) as f64;
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                let target = if n == 1 {
                    last / 2.0
                } else {
                    k as f64 * last / (n - 1) as f64
                };
                let i = nearest_free(target.round() as usize, length, &taken);
                taken[i] = true;
                out.push(i);
            }
            out
        }
        Strategy::GlobalRandom => index::sample(rng, length - 1, n)
            .into_iter()
            .map(|i| if i >= query { i + 1 } else { i })
            .collect(),
        Strategy::LocalConsecutive => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let i = nearest_free(query, length, &taken);
                taken[i] = true;
                out.push(i);
            }
            out
        }
    };
    Ok(picks)
}

/// Per-frame probability maps and their binarized masks.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub probabilities: Vec<Prediction>,
    pub masks: Vec<Tensor>,
}

/// Prediction for one query given precomputed feature values of every frame.
pub fn predict_query(
    model: &Model,
    features: &[Tensor],
    query: usize,
    refs: &[usize],
    fusion: Fusion,
) -> Result<Prediction> {
    let feature = |g: &mut _, i: usize| FeatureMap::constant(g, features[i].clone());
    if refs.is_empty() {
        return model.predict(|m, g, b| {
            let vq = feature(g, query)?;
            m.query_without_refs(g, b, &vq)
        });
    }
    match fusion {
        Fusion::Summary => model.predict(|m, g, b| {
            let vq = feature(g, query)?;
            let vrefs = refs
                .iter()
                .map(|&r| feature(g, r))
                .collect::<Result<Vec<_>>>()?;
            m.query_from_features(g, b, &vq, &vrefs)
        }),
        Fusion::Prediction => {
            let mut acc: Option<Tensor> = None;
            for &r in refs {
                let p = model.predict(|m, g, b| {
                    let vq = feature(g, query)?;
                    let vr = feature(g, r)?;
                    m.query_from_features(g, b, &vq, &[vr])
                })?;
                acc = Some(match acc {
                    None => p.0,
                    Some(mut sum) => {
                        for (s, v) in sum.data_mut().iter_mut().zip(p.0.data()) {
                            *s += v;
                        }
                        sum
                    }
                });
            }
            let inv = 1.0 / refs.len() as f64;
            Ok(Prediction(acc.expect("refs nonempty").map(|v| v * inv)))
        }
    }
}

/// Feature values of every frame, computed once per video.
pub fn embed_video(model: &Model, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    frames.iter().map(|f| model.embed_value(f)).collect()
}

/// Segments every frame of a video.
pub fn infer_video(
    model: &Model,
    frames: &[Tensor],
    config: &InferenceConfig,
) -> Result<VideoPrediction> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::usage("cannot run inference on an empty video"));
    }
    infer_from_features(model, &embed_video(model, frames)?, config)
}

/// [`infer_video`] on precomputed frame features.
pub fn infer_from_features(
    model: &Model,
    features: &[Tensor],
    config: &InferenceConfig,
) -> Result<VideoPrediction> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::usage("cannot run inference on an empty video"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probabilities = Vec::with_capacity(features.len());
    let mut masks = Vec::with_capacity(features.len());
    for q in 0..features.len() {
        let refs = select_references(config.strategy, features.len(), q, config.n_refs, &mut rng)?;
        let p = predict_query(model, features, q, &refs, config.fusion)?;
        masks.push(p.binarize(config.threshold));
        probabilities.push(p);
    }
    Ok(VideoPrediction {
        probabilities,
        masks,
    })
}
