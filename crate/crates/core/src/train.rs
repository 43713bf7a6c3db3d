//! Losses, random frame-pair sampling and the alternating static/video SGD loop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::coattention::{self, CoattentionParams, Variant};
use crate::corpus::{Corpus, Sequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::net::Model;
use crate::params::{Bound, ParamId};
use crate::tensor::Tensor;

/// Number of static batches and video batches per alternation cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlternationRatio {
    pub static_batches: usize,
    pub video_batches: usize,
}

impl Default for AlternationRatio {
    fn default() -> Self {
        Self {
            static_batches: 1,
            video_batches: 1,
        }
    }
}

impl fmt::Display for AlternationRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.static_batches, self.video_batches)
    }
}

impl FromStr for AlternationRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::usage(format!("alternation ratio {s:?} is not of the form S:V"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let ratio = Self {
            static_batches: a.trim().parse().map_err(|_| bad())?,
            video_batches: b.trim().parse().map_err(|_| bad())?,
        };
        if ratio.video_batches == 0 {
            return Err(Error::usage("alternation ratio needs at least one video batch"));
        }
        Ok(ratio)
    }
}

impl Serialize for AlternationRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlternationRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ortho_lambda: f64,
    /// One epoch is `ceil(training frames / batch_size)` video batches,
    /// interleaved with static batches per `alternation_ratio`.
    pub epochs: usize,
    /// Optional hard cap on the number of SGD steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub alternation_ratio: AlternationRatio,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            batch_size: 8,
            ortho_lambda: 1e-4,
            epochs: 1,
            max_steps: None,
            seed: 0,
            alternation_ratio: AlternationRatio::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!(
                "learning_rate must be a nonnegative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if !(self.ortho_lambda >= 0.0) {
            return Err(Error::usage("ortho_lambda must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Static,
    Video,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Static => "static",
            Phase::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    /// Loss before the update.
    pub loss: f64,
    /// `λ Σ|W Wᵀ − I|` before the update (0 for non-symmetric variants).
    pub ortho_penalty: f64,
}

pub fn loss_log_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,phase,loss,ortho_penalty\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:e},{:e}\n",
            r.step,
            r.phase.name(),
            r.loss,
            r.ortho_penalty
        ));
    }
    out
}

/// Mean of per-sample losses plus the orthogonality penalty for the symmetric variant.
pub fn total_loss(
    graph: &mut Graph,
    bound: &Bound,
    sample_losses: &[Var],
    coatt: &CoattentionParams,
) -> Result<Var> {
    let (first, rest) = sample_losses
        .split_first()
        .ok_or_else(|| Error::usage("total_loss needs at least one sample loss"))?;
    let mut sum = *first;
    for &l in rest {
        sum = graph.add(sum, l)?;
    }
    let mean = graph.scale(sum, 1.0 / sample_losses.len() as f64)?;
    match coatt.variant {
        Variant::Symmetric => {
            let penalty = coattention::ortho_penalty(graph, bound, coatt)?;
            graph.add(mean, penalty)
        }
        Variant::Vanilla | Variant::ChannelWise => Ok(mean),
    }
}

/// Ordered pair of distinct frame indices, uniform over all `T (T - 1)` pairs.
pub fn sample_pair<R: Rng + ?Sized>(rng: &mut R, length: usize) -> Result<(usize, usize)> {
    if length < 2 {
        return Err(Error::usage(format!(
            "pair sampling needs a sequence of at least 2 frames, got {length}"
        )));
    }
    let a = rng.gen_range(0..length);
    let mut b = rng.gen_range(0..length - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

/// Plain SGD on the listed parameters: `p ← p − lr · grad`.
pub fn sgd_update(model: &mut Model, grads: &[Tensor], ids: &[ParamId], lr: f64) {
    for &id in ids {
        let g = &grads[id.index()];
        for (p, d) in model.store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
}

fn ortho_penalty_of(model: &Model) -> Result<f64> {
    let coatt = model.coatt();
    if coatt.variant != Variant::Symmetric {
        return Ok(0.0);
    }
    Ok(coatt.ortho_lambda * coattention::ortho_residual_value(&model.store, coatt)?)
}

/// Mutable training state; one call of [`Trainer::step`] performs one SGD update.
pub struct Trainer<'a> {
    model: &'a mut Model,
    corpus: &'a Corpus,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    cycle_pos: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, corpus: &'a Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.train.is_empty() {
            return Err(Error::usage("training needs at least one training video"));
        }
        if let Some(short) = corpus.train.iter().find(|s| s.len() < 2) {
            return Err(Error::usage(format!(
                "training video {} has fewer than 2 frames",
                short.name
            )));
        }
        if config.alternation_ratio.static_batches > 0 && corpus.static_samples().is_empty() {
            return Err(Error::usage(
                "alternation ratio asks for static batches but the corpus has no static images",
            ));
        }
        model.layout.coatt.ortho_lambda = config.ortho_lambda;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            corpus,
            config,
            rng,
            step: 0,
            cycle_pos: 0,
        })
    }

    /// The model as trained so far.
    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn video_batches_per_epoch(&self) -> usize {
        let frames: usize = self.corpus.train.iter().map(Sequence::len).sum();
        frames.div_ceil(self.config.batch_size)
    }

    /// Total steps `run` will take.
    pub fn planned_steps(&self) -> usize {
        let ratio = self.config.alternation_ratio;
        let video = self.video_batches_per_epoch() * self.config.epochs;
        let cycles = video.div_ceil(ratio.video_batches);
        let total = video + cycles * ratio.static_batches;
        self.config.max_steps.map_or(total, |cap| total.min(cap))
    }

    fn next_phase(&mut self) -> Phase {
        let ratio = self.config.alternation_ratio;
        let cycle = ratio.static_batches + ratio.video_batches;
        let phase = if self.cycle_pos < ratio.static_batches {
            Phase::Static
        } else {
            Phase::Video
        };
        self.cycle_pos = (self.cycle_pos + 1) % cycle;
        phase
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let phase = self.next_phase();
        let ortho_penalty = ortho_penalty_of(self.model)?;
        let (loss, grads, ids) = match phase {
            Phase::Static => self.static_batch()?,
            Phase::Video => self.video_batch()?,
        };
        sgd_update(self.model, &grads, &ids, self.config.learning_rate);
        let record = StepRecord {
            step: self.step,
            phase,
            loss,
            ortho_penalty,
        };
        self.step += 1;
        Ok(record)
    }

    fn static_batch(&mut self) -> Result<(f64, Vec<Tensor>, Vec<ParamId>)> {
        let samples = self.corpus.static_samples();
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.gen_range(0..samples.len()))
            .collect();
        let model = &*self.model;
        let mut graph = Graph::new();
        let bound = model.store.bind(&mut graph)?;
        let losses = picks
            .iter()
            .map(|&i| {
                let (image, mask) = samples[i];
                let y = model.forward_static(&mut graph, &bound, image)?;
                graph.weighted_bce(y, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sum = losses[0];
        for &l in &losses[1..] {
            sum = graph.add(sum, l)?;
        }
        let loss = graph.scale(sum, 1.0 / losses.len() as f64)?;
        let value = graph.value(loss).data()[0];
        let grads = graph.backward(loss)?;
        let ids = [model.layout.embedder_ids(), model.layout.side_ids()].concat();
        Ok((value, bound.gradients(&grads, &model.store), ids))
    }

    fn video_batch(&mut self) -> Result<(f64, Vec<Tensor>, Vec<ParamId>)> {
        let videos = &self.corpus.train;
        let mut picks = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let v = self.rng.gen_range(0..videos.len());
            let (a, b) = sample_pair(&mut self.rng, videos[v].len())?;
            picks.push((v, a, b));
        }
        let model = &*self.model;
        let mut graph = Graph::new();
        let bound = model.store.bind(&mut graph)?;
        let mut losses = Vec::with_capacity(2 * picks.len());
        for &(v, a, b) in &picks {
            let seq = &videos[v];
            let out = model.forward_pair(&mut graph, &bound, &seq.frames[a], &seq.frames[b])?;
            losses.push(graph.weighted_bce(out.ya, &seq.masks[a])?);
            losses.push(graph.weighted_bce(out.yb, &seq.masks[b])?);
        }
        let loss = total_loss(&mut graph, &bound, &losses, model.coatt())?;
        let value = graph.value(loss).data()[0];
        let grads = graph.backward(loss)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        Ok((value, bound.gradients(&grads, &model.store), ids))
    }

    /// Runs every planned step, reporting each record to `observe`.
    pub fn run(mut self, mut observe: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let total = self.planned_steps();
        let mut log = Vec::with_capacity(total);
        for _ in 0..total {
            let record = self.step()?;
            observe(&record);
            log.push(record);
        }
        Ok(log)
    }
}

/// Trains `model` in place and returns the per-step loss log.
pub fn train(model: &mut Model, corpus: &Corpus, config: &TrainConfig) -> Result<Vec<StepRecord>> {
    Trainer::new(model, corpus, config.clone())?.run(|_| {})
}
