//! Evaluation metrics shared by the experiment harness and the attack
//! suite.

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::verify::SuspiciousOracle;

/// Top-1 accuracy of an oracle over an ordered candidate class list.
/// Labels index into `classes`; the list normally carries the original
/// classes followed by the verification classes.
pub fn acc(
    oracle: &dyn SuspiciousOracle,
    samples: &[LabeledSample],
    classes: &[String],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if s.y >= classes.len() {
            return Err(Error::InvalidArgument(format!(
                "label {} outside the {}-class candidate set",
                s.y,
                classes.len()
            )));
        }
        let p = oracle.query(&s.x, classes)?;
        if p.argmax() == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Relative harmless degree: the mean increase in misclassification the
/// watermarked oracle shows over an independent one, on the same
/// samples. 0 means the watermark costs nothing; 1 means it always
/// breaks a prediction the independent model gets right.
pub fn harmless_degree(
    watermarked: &dyn SuspiciousOracle,
    independent: &dyn SuspiciousOracle,
    samples: &[LabeledSample],
    classes: &[String],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        if s.y >= classes.len() {
            return Err(Error::InvalidArgument(format!(
                "label {} outside the {}-class candidate set",
                s.y,
                classes.len()
            )));
        }
        let wm_wrong = watermarked.query(&s.x, classes)?.argmax() != s.y;
        let ind_wrong = independent.query(&s.x, classes)?.argmax() != s.y;
        sum += (wm_wrong as i32 - ind_wrong as i32) as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Harmonic mean of base- and novel-class accuracy: 2ab / (a + b).
pub fn harmonic_mean(acc_base: f64, acc_novel: f64) -> Result<f64> {
    if !(acc_base > 0.0 && acc_base <= 1.0 && acc_novel > 0.0 && acc_novel <= 1.0) {
        return Err(Error::InvalidArgument(
            "accuracies must lie in (0, 1]".into(),
        ));
    }
    Ok(2.0 * acc_base * acc_novel / (acc_base + acc_novel))
}
