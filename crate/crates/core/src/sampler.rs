//! Stratified 9:1 train/dev split and anchor-class balanced resampling.
//!
//! The dev stratum per class is `round-half-to-even(n / 10)`, computed in
//! exact integer arithmetic; this reproduces all seven reference corpus dev
//! counts where round-half-up does not. One shared split feeds every balanced set;
//! each set re-draws its majority-class subsamples with seed `base + index`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, DatasetManifest};
use crate::error::{Error, Result};
use crate::scalar::derive_seed;

/// Per-class split bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub dev_counts: BTreeMap<ClassLabel, usize>,
    pub train_counts: BTreeMap<ClassLabel, usize>,
    /// Classes that had zero records (empty strata produced).
    pub empty_classes: Vec<ClassLabel>,
}

/// One balanced resample of the training manifest.
#[derive(Clone, Debug)]
pub struct BalancedDataset {
    /// 1-based set index.
    pub index: usize,
    pub records: DatasetManifest,
    pub anchor_class: ClassLabel,
    pub cap: usize,
}

/// `round-half-to-even(n / 10)` in exact integer arithmetic.
pub fn dev_count(n: usize) -> usize {
    let q = n / 10;
    match n % 10 {
        r if r < 5 => q,
        r if r > 5 => q + 1,
        _ => {
            if q.is_multiple_of(2) {
                q
            } else {
                q + 1
            }
        }
    }
}

/// Stratified split at a 9:1 ratio, sampling without replacement per class.
///
/// Deterministic under `seed` and independent of input record order (ids are
/// sorted before shuffling). Classes with zero records produce empty strata
/// and are reported in the plan.
pub fn split(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, SplitPlan)> {
    let mut by_class: Vec<Vec<&crate::dataset::ImageRecord>> = vec![Vec::new(); ClassLabel::COUNT];
    for rec in &manifest.records {
        let label = rec
            .label
            .ok_or_else(|| Error::UnlabeledRecord(rec.id.clone()))?;
        by_class[label.index()].push(rec);
    }

    let mut train = DatasetManifest::new(manifest.kind, seed, manifest.root.clone());
    train.mask_suffix = manifest.mask_suffix.clone();
    let mut dev = train.clone();
    let mut plan = SplitPlan {
        seed,
        dev_counts: BTreeMap::new(),
        train_counts: BTreeMap::new(),
        empty_classes: Vec::new(),
    };

    for label in ClassLabel::ALL {
        let mut records = by_class[label.index()].clone();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        if records.is_empty() {
            plan.empty_classes.push(label);
        }
        let n_dev = dev_count(records.len());
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "split", label.index() as u64));
        records.shuffle(&mut rng);
        for (i, rec) in records.iter().enumerate() {
            if i < n_dev {
                dev.records.push((*rec).clone());
            } else {
                train.records.push((*rec).clone());
            }
        }
        plan.dev_counts.insert(label, n_dev);
        plan.train_counts.insert(label, records.len() - n_dev);
    }
    train.sort_by_id();
    dev.sort_by_id();
    Ok((train, dev, plan))
}

/// Build `n_sets` balanced datasets by capping every class at the anchor
/// class's training count. Classes at or below the cap are copied whole;
/// larger classes are subsampled without replacement, freshly per set.
pub fn balance(
    train: &DatasetManifest,
    anchor: ClassLabel,
    n_sets: usize,
    seed: u64,
) -> Result<Vec<BalancedDataset>> {
    if n_sets < 1 {
        return Err(Error::NoSets);
    }
    let counts = train.class_counts();
    let cap = counts[anchor.index()];
    if cap == 0 {
        return Err(Error::EmptyAnchor(anchor.code().to_string()));
    }

    let mut by_class: Vec<Vec<&crate::dataset::ImageRecord>> = vec![Vec::new(); ClassLabel::COUNT];
    for rec in &train.records {
        let label = rec
            .label
            .ok_or_else(|| Error::UnlabeledRecord(rec.id.clone()))?;
        by_class[label.index()].push(rec);
    }
    for class_records in &mut by_class {
        class_records.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut sets = Vec::with_capacity(n_sets);
    for index in 1..=n_sets {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(index as u64));
        let mut out = DatasetManifest::new(
            train.kind,
            seed.wrapping_add(index as u64),
            train.root.clone(),
        );
        out.mask_suffix = train.mask_suffix.clone();
        for label in ClassLabel::ALL {
            let records = &by_class[label.index()];
            if records.len() <= cap {
                out.records.extend(records.iter().map(|r| (*r).clone()));
            } else {
                let mut shuffled = records.clone();
                shuffled.shuffle(&mut rng);
                out.records.extend(shuffled.into_iter().take(cap).cloned());
            }
        }
        out.sort_by_id();
        sets.push(BalancedDataset {
            index,
            records: out,
            anchor_class: anchor,
            cap,
        });
    }
    Ok(sets)
}
