//! Attack and utility metrics: attack success rate under a confidence
//! threshold, standard test accuracy, wrong-key activation rate, and the
//! stealth comparison against a pristine baseline.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::training::{forward, predict, Model, Verdict};

/// Fraction of backdoor instances the model assigns the target label with
/// probability strictly above `threshold`. A NOT-SURE verdict counts as a
/// failed attack. Also reports the NOT-SURE fraction and the mean
/// probability placed on the target label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackdoorEval {
    pub success_rate: f64,
    pub not_sure_fraction: f64,
    pub mean_target_confidence: f64,
    pub instance_count: usize,
}

pub fn attack_success(
    model: &Model,
    instances: &[Image],
    target_label: usize,
    threshold: f64,
) -> Result<BackdoorEval> {
    if instances.is_empty() {
        return Err(Error::EmptyEval("no backdoor instances".into()));
    }
    if target_label >= model.spec.num_labels {
        return Err(Error::Label {
            label: target_label,
            label_count: model.spec.num_labels,
        });
    }
    let mut hits = 0usize;
    let mut not_sure = 0usize;
    let mut conf_sum = 0.0;
    for img in instances {
        let probs = forward(model, img)?;
        conf_sum += probs[target_label];
        match predict(model, img, threshold)? {
            (Verdict::Label(l), _) if l == target_label => hits += 1,
            (Verdict::NotSure, _) => not_sure += 1,
            _ => {}
        }
    }
    let n = instances.len() as f64;
    Ok(BackdoorEval {
        success_rate: hits as f64 / n,
        not_sure_fraction: not_sure as f64 / n,
        mean_target_confidence: conf_sum / n,
        instance_count: instances.len(),
    })
}

pub fn attack_success_rate(
    model: &Model,
    instances: &[Image],
    target_label: usize,
    threshold: f64,
) -> Result<f64> {
    Ok(attack_success(model, instances, target_label, threshold)?.success_rate)
}

/// Fraction of test samples classified correctly under the threshold;
/// NOT-SURE counts as incorrect.
pub fn standard_test_accuracy(
    model: &Model,
    test: &LabeledDataset,
    threshold: f64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyEval("empty test set".into()));
    }
    let mut correct = 0usize;
    for s in test.samples() {
        if let (Verdict::Label(l), _) = predict(model, &s.image, threshold)? {
            if l == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of wrong-key instances whose unthresholded argmax is the target
/// label. The instances carry their ground-truth labels; none may already
/// belong to the target label, otherwise the measurement is meaningless.
pub fn wrong_key_rate(
    model: &Model,
    instances: &[(Image, usize)],
    target_label: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyEval("no wrong-key instances".into()));
    }
    if instances.iter().any(|&(_, truth)| truth == target_label) {
        return Err(Error::Protocol(
            "wrong-key instance with target-label ground truth".into(),
        ));
    }
    let mut hits = 0usize;
    for (img, _) in instances {
        if let (Verdict::Label(l), _) = predict(model, img, 0.0)? {
            if l == target_label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / instances.len() as f64)
}

/// Full evaluation of one attacked model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack_success_rate: f64,
    pub not_sure_fraction: f64,
    pub mean_target_confidence: f64,
    pub test_accuracy: f64,
    pub wrong_key_rate: Option<f64>,
    pub backdoor_count: usize,
    pub test_count: usize,
    pub threshold: f64,
    pub target_label: usize,
    /// Identity hash of the test set the accuracy was measured on.
    pub test_hash: String,
}

pub fn evaluate(
    model: &Model,
    test: &LabeledDataset,
    backdoor_instances: &[Image],
    wrong_key_instances: Option<&[(Image, usize)]>,
    target_label: usize,
    threshold: f64,
) -> Result<EvalReport> {
    let backdoor = attack_success(model, backdoor_instances, target_label, threshold)?;
    let test_accuracy = standard_test_accuracy(model, test, threshold)?;
    let wrong_key = wrong_key_instances
        .map(|w| wrong_key_rate(model, w, target_label))
        .transpose()?;
    Ok(EvalReport {
        attack_success_rate: backdoor.success_rate,
        not_sure_fraction: backdoor.not_sure_fraction,
        mean_target_confidence: backdoor.mean_target_confidence,
        test_accuracy,
        wrong_key_rate: wrong_key,
        backdoor_count: backdoor.instance_count,
        test_count: test.len(),
        threshold,
        target_label,
        test_hash: test.content_hash(),
    })
}

/// Stealth comparison of an attacked model against the pristine baseline
/// trained on the same split. Both reports must have measured accuracy on
/// the identical test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StealthComparison {
    pub pristine_accuracy: f64,
    pub poisoned_accuracy: f64,
    /// pristine minus poisoned: positive means the attack cost accuracy.
    pub accuracy_drop: f64,
    /// True when the drop stays within the one-percentage-point budget.
    pub stealthy: bool,
}

pub const STEALTH_BUDGET: f64 = 0.01;

pub fn compare_to_pristine(
    poisoned: &EvalReport,
    pristine: &EvalReport,
) -> Result<StealthComparison> {
    if poisoned.test_hash != pristine.test_hash {
        return Err(Error::Comparison(
            "reports were evaluated on different test sets".into(),
        ));
    }
    let drop = pristine.test_accuracy - poisoned.test_accuracy;
    Ok(StealthComparison {
        pristine_accuracy: pristine.test_accuracy,
        poisoned_accuracy: poisoned.test_accuracy,
        accuracy_drop: drop,
        stealthy: drop <= STEALTH_BUDGET,
    })
}
