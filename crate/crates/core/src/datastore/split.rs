//! Seeded class-balanced subsets.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatastoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub size: usize,
    pub seed: u64,
    /// Target share of anomalous records. With 0.5 and an odd size the extra
    /// record goes to the anomalous class.
    #[serde(default = "half")]
    pub anomalous_share: f64,
    /// When one class runs short, fill the deficit from the other instead of failing.
    #[serde(default)]
    pub relax: bool,
}

fn half() -> f64 {
    0.5
}

impl SplitSpec {
    pub fn balanced(size: usize, seed: u64) -> Self {
        SplitSpec {
            size,
            seed,
            anomalous_share: 0.5,
            relax: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub subset: Dataset,
    pub complement: Dataset,
}

/// Draws `spec.size` gold-labeled records with the requested class mix.
/// Both outputs keep the input order.
pub fn balanced_subset(dataset: &Dataset, spec: &SplitSpec) -> Result<Split, DatastoreError> {
    let mut anomalous = Vec::new();
    let mut normal = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        match &r.gold {
            Some(g) if g.is_anomalous => anomalous.push(i),
            Some(_) => normal.push(i),
            None => return Err(DatastoreError::MissingGold(r.id.clone())),
        }
    }
    let share = spec.anomalous_share.clamp(0.0, 1.0);
    let mut want_anom = (spec.size as f64 * share).ceil() as usize;
    want_anom = want_anom.min(spec.size);
    let mut want_norm = spec.size - want_anom;

    if want_anom > anomalous.len() {
        if !spec.relax {
            return Err(DatastoreError::InsufficientRecords {
                class: "anomalous",
                needed: want_anom,
                available: anomalous.len(),
            });
        }
        want_norm += want_anom - anomalous.len();
        want_anom = anomalous.len();
    }
    if want_norm > normal.len() {
        if !spec.relax {
            return Err(DatastoreError::InsufficientRecords {
                class: "normal",
                needed: want_norm,
                available: normal.len(),
            });
        }
        want_anom += want_norm - normal.len();
        want_norm = normal.len();
        if want_anom > anomalous.len() {
            return Err(DatastoreError::InsufficientRecords {
                class: "labeled",
                needed: spec.size,
                available: anomalous.len() + normal.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = vec![false; dataset.records.len()];
    for i in sample(&mut rng, anomalous.len(), want_anom) {
        chosen[anomalous[i]] = true;
    }
    for i in sample(&mut rng, normal.len(), want_norm) {
        chosen[normal[i]] = true;
    }
    let (subset, complement): (Vec<_>, Vec<_>) = dataset
        .records
        .iter()
        .cloned()
        .zip(chosen)
        .partition(|(_, c)| *c);
    Ok(Split {
        subset: dataset.with_records(subset.into_iter().map(|(r, _)| r).collect()),
        complement: dataset.with_records(complement.into_iter().map(|(r, _)| r).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::DatasetRecord;
    use crate::label::GoldLabel;
    use crate::layer::{LayerSet, SceneLayer};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dataset(anom: usize, norm: usize) -> Dataset {
        let flags: LayerSet = [SceneLayer::Street].into_iter().collect();
        let mut records = Vec::new();
        for i in 0..anom {
            records.push(
                DatasetRecord::new(format!("a{i:04}"), "x.png")
                    .with_gold(GoldLabel::manual(true, flags)),
            );
        }
        for i in 0..norm {
            records.push(
                DatasetRecord::new(format!("n{i:04}"), "x.png")
                    .with_gold(GoldLabel::manual(false, LayerSet::EMPTY)),
            );
        }
        Dataset::new("", records)
    }

    fn count_anom(d: &Dataset) -> usize {
        d.records
            .iter()
            .filter(|r| r.gold.as_ref().unwrap().is_anomalous)
            .count()
    }

    #[test]
    fn odd_size_favours_anomalous() {
        let split = balanced_subset(&dataset(10, 10), &SplitSpec::balanced(7, 1)).unwrap();
        assert_eq!(count_anom(&split.subset), 4);
        assert_eq!(split.subset.len(), 7);
    }

    #[test]
    fn insufficient_class_reports_deficit() {
        let err = balanced_subset(&dataset(3, 50), &SplitSpec::balanced(10, 1)).unwrap_err();
        assert!(matches!(
            err,
            DatastoreError::InsufficientRecords {
                class: "anomalous",
                needed: 5,
                available: 3
            }
        ));
        assert!(err.to_string().contains("deficit 2"));
        let mut relaxed = SplitSpec::balanced(10, 1);
        relaxed.relax = true;
        let split = balanced_subset(&dataset(3, 50), &relaxed).unwrap();
        assert_eq!((count_anom(&split.subset), split.subset.len()), (3, 10));
    }

    #[test]
    fn missing_gold_is_an_error() {
        let mut d = dataset(2, 2);
        d.records[1].gold = None;
        assert!(matches!(
            balanced_subset(&d, &SplitSpec::balanced(2, 0)),
            Err(DatastoreError::MissingGold(_))
        ));
    }

    proptest! {
        #[test]
        fn split_is_seeded_partition(anom in 0usize..40, norm in 0usize..40, size in 0usize..30, seed: u64) {
            let d = dataset(anom, norm);
            let spec = SplitSpec::balanced(size, seed);
            let want_anom = size.div_ceil(2);
            match balanced_subset(&d, &spec) {
                Ok(split) => {
                    prop_assert_eq!(split.subset.len(), size);
                    prop_assert_eq!(count_anom(&split.subset), want_anom);
                    prop_assert_eq!(split.subset.len() + split.complement.len(), d.len());
                    let a: HashSet<_> = split.subset.records.iter().map(|r| r.id.clone()).collect();
                    prop_assert!(split.complement.records.iter().all(|r| !a.contains(&r.id)));
                    let again = balanced_subset(&d, &spec).unwrap();
                    prop_assert_eq!(again.subset.records, split.subset.records);
                }
                Err(_) => prop_assert!(want_anom > anom || size - want_anom > norm),
            }
        }
    }
}
