//! Region similarity (Jaccard index) and its per-sequence statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames with J above this count toward recall.
pub const RECALL_THRESHOLD: f64 = 0.5;

/// `|pred ∩ gt| / |pred ∪ gt|` over binary masks; 1 when both are empty.
pub fn jaccard(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "jaccard",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub per_frame_j: Vec<f64>,
    pub mean_j: f64,
    pub recall_j: f64,
    pub decay_j: f64,
}

/// Mean, recall and decay of a per-frame J sequence (at least 4 frames).
///
/// Decay is the mean over the first quarter of frames minus the mean over the
/// last quarter, with quarter length `floor(T / 4)`.
pub fn summarize(name: &str, per_frame_j: Vec<f64>) -> Result<SequenceScore> {
    let n = per_frame_j.len();
    if n < 4 {
        return Err(Error::usage(format!(
            "sequence {name}: scoring needs at least 4 frames, got {n}"
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let quarter = n / 4;
    let mean_j = mean(&per_frame_j);
    let recall_j =
        per_frame_j.iter().filter(|&&j| j > RECALL_THRESHOLD).count() as f64 / n as f64;
    let decay_j = mean(&per_frame_j[..quarter]) - mean(&per_frame_j[n - quarter..]);
    Ok(SequenceScore {
        name: name.to_string(),
        per_frame_j,
        mean_j,
        recall_j,
        decay_j,
    })
}

pub fn score_sequence(name: &str, preds: &[Tensor], gts: &[Tensor]) -> Result<SequenceScore> {
    if preds.len() != gts.len() {
        return Err(Error::usage(format!(
            "sequence {name}: {} predicted masks for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let js = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| jaccard(p, g))
        .collect::<Result<Vec<_>>>()?;
    summarize(name, js)
}

/// Averages of the per-sequence statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub mean_j: f64,
    pub recall_j: f64,
    pub decay_j: f64,
}

pub fn aggregate(scores: &[SequenceScore]) -> Aggregate {
    let n = scores.len().max(1) as f64;
    Aggregate {
        sequences: scores.len(),
        mean_j: scores.iter().map(|s| s.mean_j).sum::<f64>() / n,
        recall_j: scores.iter().map(|s| s.recall_j).sum::<f64>() / n,
        decay_j: scores.iter().map(|s| s.decay_j).sum::<f64>() / n,
    }
}

/// Aligned text table of sequence scores with a trailing mean row.
pub fn render_table(scores: &[SequenceScore]) -> String {
    let width = scores.iter().map(|s| s.name.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}\n",
        "sequence", "J mean", "J recall", "J decay"
    );
    let mut row = |name: &str, m: f64, r: f64, d: f64| {
        out.push_str(&format!("{name:<width$}  {m:>7.4}  {r:>7.4}  {d:>7.4}\n"));
    };
    for s in scores {
        row(&s.name, s.mean_j, s.recall_j, s.decay_j);
    }
    let agg = aggregate(scores);
    row("mean", agg.mean_j, agg.recall_j, agg.decay_j);
    out
}

pub fn render_csv(scores: &[SequenceScore]) -> String {
    let mut out = String::from("sequence,mean_j,recall_j,decay_j\n");
    for s in scores {
        out.push_str(&format!("{},{},{},{}\n", s.name, s.mean_j, s.recall_j, s.decay_j));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> Tensor {
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| if f(x, y) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[h, w], data).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = mask(8, 8, |x, y| x < 3 && y < 3);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let b = mask(8, 8, |x, y| x > 5 && y > 5);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        let left = mask(8, 8, |x, _| x < 4);
        let full = mask(8, 8, |_, _| true);
        assert_eq!(jaccard(&left, &full).unwrap(), 0.5);
        let empty = mask(8, 8, |_, _| false);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert!(jaccard(&a, &mask(4, 4, |_, _| true)).is_err());
    }

    #[test]
    fn sequence_examples() {
        let s = summarize("ones", vec![1.0; 8]).unwrap();
        assert_eq!((s.mean_j, s.recall_j, s.decay_j), (1.0, 1.0, 0.0));

        let s = summarize("step", vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!((s.mean_j, s.recall_j, s.decay_j), (0.5, 0.5, 1.0));

        let s = summarize("flat", vec![0.3; 9]).unwrap();
        assert_eq!(s.decay_j, 0.0);

        assert!(summarize("short", vec![1.0; 3]).is_err());
        assert!(score_sequence("x", &[Tensor::ones(&[2, 2])], &[]).is_err());
    }

    #[test]
    fn table_and_csv_have_one_row_per_sequence() {
        let scores = vec![
            summarize("a", vec![1.0; 4]).unwrap(),
            summarize("b", vec![0.0; 4]).unwrap(),
        ];
        assert_eq!(render_table(&scores).lines().count(), 4);
        assert_eq!(render_csv(&scores).lines().count(), 3);
        assert_eq!(aggregate(&scores).mean_j, 0.5);
    }

    fn arb_mask() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(any::<bool>(), 36).prop_map(|bits| {
            Tensor::new(&[6, 6], bits.into_iter().map(|b| f64::from(u8::from(b))).collect())
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn jaccard_is_symmetric_and_reflexive(a in arb_mask(), b in arb_mask()) {
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
            prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn mean_ignores_order_and_recall_is_a_fraction(mut js in proptest::collection::vec(0.0f64..=1.0, 4..20)) {
            let s = summarize("x", js.clone()).unwrap();
            js.reverse();
            let r = summarize("x", js).unwrap();
            prop_assert!((s.mean_j - r.mean_j).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&s.recall_j));
        }
    }
}
