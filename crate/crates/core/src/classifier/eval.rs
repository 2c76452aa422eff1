use serde::{Deserialize, Serialize};

use super::ClassifierError;

/// Binary confusion counts, "relevant" being the positive label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl LabelScores {
    /// A label with no gold items and no predictions is vacuously perfect.
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        if tp + fp + fn_ == 0 {
            return LabelScores {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                support: 0,
            };
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        LabelScores {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-label classification scores, all derived from `confusion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub relevant: LabelScores,
    pub non_relevant: LabelScores,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let Confusion { tp, fp, fn_, tn } = confusion;
        EvalReport {
            confusion,
            accuracy: ratio(tp + tn, confusion.total()),
            relevant: LabelScores::from_counts(tp, fp, fn_),
            non_relevant: LabelScores::from_counts(tn, fn_, fp),
        }
    }
}

pub fn evaluate(predictions: &[bool], gold: &[bool]) -> Result<EvalReport, ClassifierError> {
    if predictions.len() != gold.len() {
        return Err(ClassifierError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(EvalReport::from_confusion(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn expand(c: Confusion) -> (Vec<bool>, Vec<bool>) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for (n, pv, gv) in [
            (c.tp, true, true),
            (c.fp, true, false),
            (c.fn_, false, true),
            (c.tn, false, false),
        ] {
            for _ in 0..n {
                p.push(pv);
                g.push(gv);
            }
        }
        (p, g)
    }

    #[test]
    fn hand_computed_confusion() {
        let (p, g) = expand(Confusion {
            tp: 96,
            fp: 2,
            fn_: 4,
            tn: 98,
        });
        let r = evaluate(&p, &g).unwrap();
        assert!((r.relevant.precision - 96.0 / 98.0).abs() < 1e-12);
        assert!((r.relevant.precision - 0.9796).abs() < 5e-5);
        assert!((r.relevant.recall - 0.96).abs() < 1e-12);
        assert!((r.accuracy - 0.97).abs() < 1e-12);
        assert_eq!(r.relevant.support, 100);
    }

    #[test]
    fn perfect_predictions() {
        let gold = [true, false, true, true, false];
        let r = evaluate(&gold, &gold).unwrap();
        for s in [r.relevant, r.non_relevant] {
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.accuracy, 1.0);
        let all_pos = [true; 4];
        let r = evaluate(&all_pos, &all_pos).unwrap();
        assert_eq!(r.non_relevant.f1, 1.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            evaluate(&[true], &[true, false]),
            Err(ClassifierError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn metrics_recompute_from_counts(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let c = Confusion { tp, fp, fn_, tn };
            let (p, g) = expand(c);
            let r = evaluate(&p, &g).unwrap();
            prop_assert_eq!(r.confusion, c);
            let acc = (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64;
            prop_assert!((r.accuracy - acc).abs() < 1e-9);
            if tp + fp > 0 {
                prop_assert!((r.relevant.precision - tp as f64 / (tp + fp) as f64).abs() < 1e-9);
            }
            if tp + fn_ > 0 {
                prop_assert!((r.relevant.recall - tp as f64 / (tp + fn_) as f64).abs() < 1e-9);
            }
            let (pr, rc) = (r.relevant.precision, r.relevant.recall);
            if pr + rc > 0.0 {
                prop_assert!((r.relevant.f1 - 2.0 * pr * rc / (pr + rc)).abs() < 1e-9);
            }
        }
    }
}
