//! Candidate defenses: label-distribution auditing, L2-from-mean outlier
//! pruning, and the auxiliary-pristine-data fine-tuning wrapper.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, PoisonedDataset, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::imaging::Image;
use crate::rng::Stream;
use crate::training::{finetune_last_layer, init_model, train, Model, TrainConfig};

// --- Label-distribution audit ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionAudit {
    pub counts: Vec<usize>,
    pub total: usize,
    pub max_count: usize,
    pub min_count: usize,
    pub median_count: f64,
    /// max / median; 1.0 for a perfectly balanced set.
    pub skew_ratio: f64,
    /// z-score of each label's count against the count distribution.
    pub z_scores: Vec<f64>,
    /// Labels whose count sits more than the configured number of standard
    /// deviations above the median.
    pub flagged: Vec<usize>,
}

/// Histogram statistics over per-label counts. Flags labels whose count
/// exceeds the median by more than `z_threshold` standard deviations.
pub fn audit_label_distribution(counts: &[usize], z_threshold: f64) -> Result<DistributionAudit> {
    if counts.is_empty() {
        return Err(Error::EmptyDataset("no labels to audit".into()));
    }
    let total: usize = counts.iter().sum();
    let n = counts.len() as f64;
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
    };
    let mean = total as f64 / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let z_scores: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if std == 0.0 {
                0.0
            } else {
                (c as f64 - median) / std
            }
        })
        .collect();
    let flagged = z_scores
        .iter()
        .enumerate()
        .filter(|(_, &z)| z > z_threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(DistributionAudit {
        counts: counts.to_vec(),
        total,
        max_count: *counts.iter().max().expect("non-empty"),
        min_count: *counts.iter().min().expect("non-empty"),
        median_count: median,
        skew_ratio: if median == 0.0 {
            f64::INFINITY
        } else {
            *counts.iter().max().expect("non-empty") as f64 / median
        },
        z_scores,
        flagged,
    })
}

// --- L2 outlier pruning -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    /// Dataset indices removed, ascending.
    pub removed: Vec<usize>,
    pub removed_count: usize,
    pub poisons_removed: usize,
    pub poisons_total: usize,
    /// For each poison, the fraction of all instances with strictly smaller
    /// distance from the mean (0 = closest, near 1 = farthest).
    pub poison_percentiles: Vec<f64>,
}

fn l2_distances(ds: &PoisonedDataset) -> Result<Vec<f64>> {
    let entries = ds.entries();
    let shape = entries
        .first()
        .ok_or_else(|| Error::EmptyDataset("cannot prune an empty dataset".into()))?
        .0
        .shape();
    let dim = shape.0 * shape.1 * shape.2;
    let mut mean = vec![0.0f64; dim];
    for (img, _) in &entries {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                got: format!("{:?}", img.shape()),
            });
        }
        for (m, &p) in mean.iter_mut().zip(img.pixels()) {
            *m += f64::from(p);
        }
    }
    let n = entries.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(entries
        .iter()
        .map(|(img, _)| {
            img.pixels()
                .iter()
                .zip(&mean)
                .map(|(&p, &m)| (f64::from(p) - m).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Total order on (distance, index): larger distance first, ties broken by
/// removing the smaller index first.
fn removal_order(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Removes exactly ⌊eta·total⌋ instances with the largest L2 distance from
/// the mean of the whole (poisoned) training set, computed in raw [0,255]
/// pixel space.
pub fn l2_outlier_prune(ds: &PoisonedDataset, eta: f64) -> Result<PruneResult> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "eta {eta} outside (0,1)"
        )));
    }
    let distances = l2_distances(ds)?;
    let total = distances.len();
    let remove_count = (eta * total as f64).floor() as usize;

    let mut order: Vec<(f64, usize)> = distances.iter().cloned().zip(0..total).collect();
    if remove_count > 0 && remove_count < total {
        order.select_nth_unstable_by(remove_count - 1, |&a, &b| removal_order(a, b));
    }
    let mut removed: Vec<usize> = order[..remove_count].iter().map(|&(_, i)| i).collect();
    removed.sort_unstable();

    let provenance = ds.provenance();
    let poisons_removed = removed
        .iter()
        .filter(|&&i| provenance[i] == Provenance::Poison)
        .count();
    let poison_percentiles = (0..total)
        .filter(|&i| provenance[i] == Provenance::Poison)
        .map(|i| {
            distances.iter().filter(|&&d| d < distances[i]).count() as f64 / total as f64
        })
        .collect();
    Ok(PruneResult {
        removed,
        removed_count: remove_count,
        poisons_removed,
        poisons_total: ds.poison_count(),
        poison_percentiles,
    })
}

/// Applies `l2_outlier_prune` and returns the surviving dataset alongside
/// the result.
pub fn prune_dataset(ds: &PoisonedDataset, eta: f64) -> Result<(PoisonedDataset, PruneResult)> {
    let result = l2_outlier_prune(ds, eta)?;
    let removed: HashSet<usize> = result.removed.iter().copied().collect();
    Ok((ds.without_indices(&removed), result))
}

/// Recomputes the removal set by a full stable sort of every distance and
/// checks index-set equality with the production selection path.
pub fn removal_oracle_check(ds: &PoisonedDataset, eta: f64) -> Result<bool> {
    let production = l2_outlier_prune(ds, eta)?;
    let distances = l2_distances(ds)?;
    let mut order: Vec<(f64, usize)> = distances.into_iter().zip(0..).collect();
    order.sort_by(|&a, &b| removal_order(a, b));
    let oracle: HashSet<usize> = order[..production.removed_count]
        .iter()
        .map(|&(_, i)| i)
        .collect();
    let got: HashSet<usize> = production.removed.iter().copied().collect();
    Ok(oracle == got)
}

// --- Auxiliary-pristine fine-tuning -------------------------------------------------

/// The same attack evaluated under the defender's two training modes: full
/// retraining from scratch versus keeping a pristine feature extractor and
/// retraining only the last layer on the poisoned data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxPristinePair {
    pub full_train: EvalReport,
    pub fine_tune: EvalReport,
}

#[allow(clippy::too_many_arguments)]
pub fn aux_pristine_eval(
    pristine_feature_model: &Model,
    poisoned: &PoisonedDataset,
    test: &LabeledDataset,
    backdoor_instances: &[Image],
    wrong_key_instances: Option<&[(Image, usize)]>,
    target_label: usize,
    threshold: f64,
    cfg: &TrainConfig,
) -> Result<AuxPristinePair> {
    let init = init_model(
        &pristine_feature_model.spec,
        &Stream::new(cfg.seed).derive("full-train-init", 0),
    )?;
    let (full, _) = train(&init, poisoned.into(), test, cfg)?;
    let (tuned, _) = finetune_last_layer(pristine_feature_model, poisoned.into(), test, cfg)?;
    Ok(AuxPristinePair {
        full_train: evaluate(
            &full,
            test,
            backdoor_instances,
            wrong_key_instances,
            target_label,
            threshold,
        )?,
        fine_tune: evaluate(
            &tuned,
            test,
            backdoor_instances,
            wrong_key_instances,
            target_label,
            threshold,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{assemble_poisoned, synth_generate};
    use crate::keys::{PoisonOrigin, PoisoningSample, Strategy};
    use crate::training::{Arch, ModelSpec, SelectOn};
    use rand::Rng;

    fn poison_of(img: Image, label: usize) -> PoisoningSample {
        let hash = img.content_hash();
        PoisoningSample {
            instance: img,
            label,
            origin: PoisonOrigin {
                strategy: Strategy::InputInstance,
                source_hash: Some(hash),
                alpha: Some(1.0),
            },
        }
    }

    #[test]
    fn audit_balanced_and_skewed() {
        let audit = audit_label_distribution(&[100, 100, 100, 100], 3.0).unwrap();
        assert_eq!(audit.skew_ratio, 1.0);
        assert!(audit.flagged.is_empty());
        assert_eq!(audit.total, 400);

        // 5 poisons on one label of a realistically uneven ~1000-per-label
        // set: the bump drowns in the natural count variance, so the audit
        // misses the attack
        let mut counts = vec![980usize, 1012, 995, 1005, 1020, 970, 1001, 990, 1015, 985];
        counts[3] += 5;
        let audit = audit_label_distribution(&counts, 3.0).unwrap();
        assert!(audit.skew_ratio < 1.03);
        assert!(audit.flagged.is_empty());
        assert_eq!(audit.total, counts.iter().sum::<usize>());

        // an actually huge imbalance gets flagged
        counts[3] = 5000;
        let audit = audit_label_distribution(&counts, 2.0).unwrap();
        assert_eq!(audit.flagged, vec![3]);

        assert!(audit_label_distribution(&[], 3.0).is_err());
    }

    #[test]
    fn prune_counts_use_floor() {
        let s = Stream::new(50);
        let base = synth_generate(3, 67, (4, 4, 1), &s).unwrap();
        let poisons: Vec<PoisoningSample> = base.images_of_label(0)[..4]
            .iter()
            .map(|img| poison_of(img.clone(), 1))
            .collect();
        let ds = assemble_poisoned(&base, poisons).unwrap();
        assert_eq!(ds.total(), 205);
        for (eta, expect) in [(0.01, 2), (0.05, 10), (0.2, 41)] {
            let result = l2_outlier_prune(&ds, eta).unwrap();
            assert_eq!(result.removed_count, expect);
            assert_eq!(result.removed.len(), expect);
        }
        assert!(l2_outlier_prune(&ds, 0.0).is_err());
        assert!(l2_outlier_prune(&ds, 1.0).is_err());
    }

    #[test]
    fn gross_outlier_poison_is_removed() {
        let flat = Image::new(4, 4, 1, vec![100; 16]).unwrap();
        let base = LabeledDataset::new(vec![(flat.clone(), 0); 19], 2).unwrap();
        let outlier = Image::new(4, 4, 1, vec![255; 16]).unwrap();
        let ds = assemble_poisoned(&base, vec![poison_of(outlier, 1)]).unwrap();
        let (pruned, result) = prune_dataset(&ds, 0.05).unwrap();
        assert_eq!(result.removed, vec![19]);
        assert_eq!(result.poisons_removed, 1);
        assert_eq!(result.poison_percentiles, vec![19.0 / 20.0]);
        assert_eq!(pruned.poison_count(), 0);
        assert_eq!(pruned.total(), 19);
    }

    #[test]
    fn equal_distances_remove_smallest_indices_first() {
        let flat = Image::new(4, 4, 1, vec![100; 16]).unwrap();
        let base = LabeledDataset::new(vec![(flat.clone(), 0); 39], 2).unwrap();
        let ds = assemble_poisoned(&base, vec![poison_of(flat, 1)]).unwrap();
        let result = l2_outlier_prune(&ds, 0.1).unwrap();
        assert_eq!(result.removed, vec![0, 1, 2, 3]);
        assert!(removal_oracle_check(&ds, 0.1).unwrap());
    }

    #[test]
    fn oracle_agrees_on_random_datasets() {
        for seed in 0..10u64 {
            let s = Stream::new(60 + seed);
            let base = synth_generate(4, 20, (4, 4, 1), &s).unwrap();
            let mut rng = s.derive("poison", 0).rng();
            let poisons: Vec<PoisoningSample> = (0..3)
                .map(|_| {
                    let pixels: Vec<u8> = (0..16).map(|_| rng.gen()).collect();
                    poison_of(Image::new(4, 4, 1, pixels).unwrap(), 2)
                })
                .collect();
            let ds = assemble_poisoned(&base, poisons).unwrap();
            for eta in [0.01, 0.05, 0.2] {
                assert!(removal_oracle_check(&ds, eta).unwrap());
            }
            // eta small enough for zero removals: 0.005 * 83 < 1
            let result = l2_outlier_prune(&ds, 0.005).unwrap();
            assert!(result.removed.is_empty());
            assert!(removal_oracle_check(&ds, 0.005).unwrap());
        }
    }

    #[test]
    fn prune_is_deterministic() {
        let s = Stream::new(70);
        let base = synth_generate(3, 30, (4, 4, 1), &s).unwrap();
        let poisons: Vec<PoisoningSample> = base.images_of_label(2)[..5]
            .iter()
            .map(|img| poison_of(img.clone(), 0))
            .collect();
        let ds = assemble_poisoned(&base, poisons).unwrap();
        let a = l2_outlier_prune(&ds, 0.07).unwrap();
        let b = l2_outlier_prune(&ds, 0.07).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aux_pristine_pair_runs_end_to_end() {
        let s = Stream::new(80);
        let train_set = synth_generate(3, 12, (8, 8, 3), &s).unwrap();
        let test = synth_generate(3, 4, (8, 8, 3), &s.derive("test", 0)).unwrap();
        let spec = ModelSpec {
            arch: Arch::CnnMicro,
            input_shape: (8, 8, 3),
            num_labels: 3,
        };
        let cfg = TrainConfig {
            epochs: 2,
            per_label: 8,
            seed: 7,
            select_on: SelectOn::Final,
            ..TrainConfig::default()
        };
        let init = init_model(&spec, &s).unwrap();
        let (feature_model, _) = train(&init, (&train_set).into(), &test, &cfg).unwrap();
        let poisons: Vec<PoisoningSample> = train_set.images_of_label(0)[..2]
            .iter()
            .map(|img| poison_of(img.clone(), 1))
            .collect();
        let ds = assemble_poisoned(&train_set, poisons).unwrap();
        let backdoors = train_set.images_of_label(0);
        let pair =
            aux_pristine_eval(&feature_model, &ds, &test, &backdoors, None, 1, 0.85, &cfg)
                .unwrap();
        assert_eq!(pair.full_train.test_hash, pair.fine_tune.test_hash);
        assert_eq!(pair.fine_tune.target_label, 1);
    }
}
