//! End-to-end steps shared by the command-line front end and the acceptance
//! suite: train a model and save it, segment a split, score masks, sweep
//! ablation settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::coattention::Variant;
use crate::config::RunConfig;
use crate::corpus::{self, Corpus, CorpusIndex, Sequence, Split};
use crate::error::{Error, Result};
use crate::infer::{self, Fusion, InferenceConfig, Strategy, VideoPrediction};
use crate::metrics::{self, Aggregate, SequenceScore};
use crate::net::Model;
use crate::tensor::Tensor;
use crate::train::{self, StepRecord, Trainer};

pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const SCORES_JSON_FILE: &str = "scores.json";
pub const SCORES_CSV_FILE: &str = "scores.csv";
/// Reference counts swept by the ablation.
pub const ABLATION_REFS: [usize; 5] = [0, 1, 2, 5, 7];

pub fn model_from_config(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model.clone(), cfg.train.seed)
}

/// Trains a fresh model and writes the checkpoint, loss log and effective config.
pub fn train_run(
    cfg: &RunConfig,
    corpus: &Corpus,
    observe: impl FnMut(&StepRecord),
) -> Result<(Model, Vec<StepRecord>)> {
    let mut model = model_from_config(cfg)?;
    let log = Trainer::new(&mut model, corpus, cfg.train.clone())?.run(observe)?;
    cfg.echo(&cfg.paths.run)?;
    let path = cfg.paths.run.join(LOSS_LOG_FILE);
    fs::write(&path, train::loss_log_csv(&log)).map_err(|e| Error::io(&path, e))?;
    checkpoint::save(&cfg.paths.checkpoint(), &model, cfg.train.seed, Some(&cfg.train))?;
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub inference: InferenceConfig,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub sequences: Vec<String>,
}

/// Segments `sequences` and writes `<out>/<seq>/masks/NNNNN.pgm` plus the run manifest.
pub fn infer_run(
    model: &Model,
    checkpoint_dir: &Path,
    sequences: &[Sequence],
    cfg: &InferenceConfig,
    out: &Path,
) -> Result<Vec<VideoPrediction>> {
    let checkpoint_sha256 = checkpoint::hash(checkpoint_dir)?;
    let mut results = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let pred = infer::infer_video(model, &seq.frames, cfg)?;
        corpus::create_mask_dir(out, &seq.name)?;
        for (i, m) in pred.masks.iter().enumerate() {
            corpus::write_mask(out, &seq.name, i, m)?;
        }
        results.push(pred);
    }
    let manifest = RunManifest {
        inference: cfg.clone(),
        checkpoint: checkpoint_dir.to_path_buf(),
        checkpoint_sha256,
        sequences: sequences.iter().map(|s| s.name.clone()).collect(),
    };
    let path = out.join(RUN_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

/// Scores in-memory masks against each sequence's ground truth.
pub fn score(sequences: &[Sequence], masks: &[Vec<Tensor>]) -> Result<Vec<SequenceScore>> {
    if sequences.len() != masks.len() {
        return Err(Error::usage(format!(
            "{} mask sets for {} sequences",
            masks.len(),
            sequences.len()
        )));
    }
    sequences
        .iter()
        .zip(masks)
        .map(|(s, m)| metrics::score_sequence(&s.name, m, &s.masks))
        .collect()
}

/// Scores the masks under `pred_root` against the corpus at `gt_root`, for
/// every sequence of `split`.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path, split: Split) -> Result<Vec<SequenceScore>> {
    let index = CorpusIndex::load(gt_root)?;
    index
        .split(split)
        .map(|entry| {
            let (pred, gt) = (0..entry.length)
                .map(|i| {
                    Ok((
                        corpus::read_mask(pred_root, &entry.name, i)?,
                        corpus::read_mask(gt_root, &entry.name, i)?,
                    ))
                })
                .collect::<Result<(Vec<_>, Vec<_>)>>()?;
            metrics::score_sequence(&entry.name, &pred, &gt)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub sequences: Vec<SequenceScore>,
    pub aggregate: Aggregate,
}

/// Writes `scores.json` and `scores.csv` into `dir`.
pub fn write_scores(dir: &Path, scores: &[SequenceScore]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = ScoreReport {
        sequences: scores.to_vec(),
        aggregate: metrics::aggregate(scores),
    };
    let path = dir.join(SCORES_JSON_FILE);
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join(SCORES_CSV_FILE);
    fs::write(&path, metrics::render_csv(scores)).map_err(|e| Error::io(&path, e))
}

/// Mean J over `sequences` for one inference setting, from cached features.
pub fn mean_j(
    model: &Model,
    sequences: &[Sequence],
    features: &[Vec<Tensor>],
    cfg: &InferenceConfig,
) -> Result<Aggregate> {
    let masks = features
        .iter()
        .map(|f| infer::infer_from_features(model, f, cfg).map(|p| p.masks))
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics::aggregate(&score(sequences, &masks)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub fusion: Fusion,
    pub strategy: Strategy,
    pub n_refs: usize,
    pub scores: Aggregate,
}

/// Every fusion × strategy × reference-count cell for each trained model.
pub fn ablation_sweep(
    models: &[(Variant, &Model)],
    sequences: &[Sequence],
    base: &InferenceConfig,
    refs: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &(variant, model) in models {
        let features = sequences
            .iter()
            .map(|s| infer::embed_video(model, &s.frames))
            .collect::<Result<Vec<_>>>()?;
        for fusion in Fusion::ALL {
            for strategy in Strategy::ALL {
                for &n_refs in refs {
                    let cfg = InferenceConfig {
                        n_refs,
                        strategy,
                        fusion,
                        ..base.clone()
                    };
                    rows.push(AblationRow {
                        variant,
                        fusion,
                        strategy,
                        n_refs,
                        scores: mean_j(model, sequences, &features, &cfg)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// One line per (variant, fusion, strategy) with mean J (in points) per reference count.
pub fn render_ablation(rows: &[AblationRow], refs: &[usize]) -> String {
    let mut out = format!("{:<12}{:<12}{:<19}", "variant", "fusion", "strategy");
    for n in refs {
        out.push_str(&format!("{:>8}", format!("N={n}")));
    }
    out.push('\n');
    for chunk in rows.chunks(refs.len().max(1)) {
        let first = &chunk[0];
        out.push_str(&format!(
            "{:<12}{:<12}{:<19}",
            first.variant.name(),
            first.fusion.name(),
            first.strategy.name()
        ));
        for r in chunk {
            out.push_str(&format!("{:>8.2}", 100.0 * r.scores.mean_j));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::summarize;

    fn row(variant: Variant, n_refs: usize, j: f64) -> AblationRow {
        AblationRow {
            variant,
            fusion: Fusion::Summary,
            strategy: Strategy::GlobalUniform,
            n_refs,
            scores: metrics::aggregate(&[summarize("s", vec![j; 4]).unwrap()]),
        }
    }

    #[test]
    fn ablation_table_layout() {
        let rows = vec![
            row(Variant::Vanilla, 0, 0.5),
            row(Variant::Vanilla, 2, 0.75),
        ];
        let table = render_ablation(&rows, &[0, 2]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("N=0") && lines[0].contains("N=2"));
        assert!(lines[1].contains("50.00") && lines[1].contains("75.00"));
    }

    #[test]
    fn score_rejects_mismatched_counts() {
        assert!(score(&[], &[vec![]]).is_err());
    }
}
