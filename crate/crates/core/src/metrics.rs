//! Micro and macro F1.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean per-class F1 as one fraction, rounded once. `None` when the reduced
/// fraction no longer fits a 53-bit mantissa.
fn exact_mean(per_class: &[Counts]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for c in per_class {
        let d = (2 * c.tp + c.fp + c.fn_) as u128;
        if d == 0 {
            continue;
        }
        let n = 2 * c.tp as u128;
        num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(per_class.len() as u128)?;
    let g = gcd(num, den).max(1);
    (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

fn summarize(per_class: &[Counts]) -> F1Scores {
    let pooled = per_class.iter().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        exact_mean(per_class).unwrap_or_else(|| per_class.iter().map(|c| c.f1()).sum::<f64>() / per_class.len() as f64)
    };
    F1Scores {
        micro: pooled.f1(),
        macro_f1,
    }
}

/// Single-label F1 over `num_classes` classes. Classes with no support in
/// either vector count as F1 = 0 in the macro average.
pub fn f1_scores(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<F1Scores> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "f1 needs equal non-empty inputs, got {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = vec![Counts::default(); num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Validation(format!("class index outside 0..{num_classes}")));
        }
        if p == t {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    Ok(summarize(&counts))
}

/// Multi-label F1: micro pools every (sample, label) pair, macro averages
/// per-label F1.
pub fn f1_multilabel(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<F1Scores> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "f1 needs equal non-empty inputs, got {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let width = truth[0].len();
    let mut counts = vec![Counts::default(); width];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != width || t.len() != width {
            return Err(Error::Validation("ragged multi-label vectors".into()));
        }
        for (j, (&pj, &tj)) in p.iter().zip(t).enumerate() {
            match (pj, tj) {
                (true, true) => counts[j].tp += 1,
                (true, false) => counts[j].fp += 1,
                (false, true) => counts[j].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(summarize(&counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let s = f1_scores(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((s.micro, s.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn hand_confusion_matrices() {
        let s = f1_scores(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!((s.micro, s.macro_f1), (0.5, 0.5));
        let s = f1_scores(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(s.micro, 0.75);
        assert!((s.macro_f1 - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(f1_scores(&[], &[], 2).is_err());
        assert!(f1_multilabel(&[], &[]).is_err());
    }

    #[test]
    fn multilabel_pools_pairs() {
        let pred = vec![vec![true, false], vec![true, true]];
        let truth = vec![vec![true, true], vec![false, true]];
        // label 0: tp1 fp1; label 1: tp1 fn1 → pooled tp2 fp1 fn1
        let s = f1_multilabel(&pred, &truth).unwrap();
        assert!((s.micro - 4.0 / 6.0).abs() < 1e-15);
        assert!((s.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }
}
