use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PairSource;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Sample indices of `source` on the train and test side of fold `fold`.
    pub fn split_indices<S: PairSource + ?Sized>(&self, fold: usize, source: &S) -> (Vec<usize>, Vec<usize>) {
        let f = &self.folds[fold];
        (0..source.len()).partition(|&i| f.train_patients.contains(source.patient_id(i)))
    }
}

/// Patient-level k-fold plan: patients are shuffled by `seed` and dealt into
/// `k` contiguous groups whose sizes differ by at most one.
pub fn kfold_split<S: PairSource + ?Sized>(source: &S, k: usize, seed: u64) -> Result<FoldPlan> {
    let patients: BTreeSet<&str> = (0..source.len()).map(|i| source.patient_id(i)).collect();
    if k < 2 || patients.len() < k {
        return Err(Error::TooFewPatients {
            k,
            found: patients.len(),
        });
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let groups: Vec<BTreeSet<String>> = (0..k)
        .map(|g| order[g * n / k..(g + 1) * n / k].iter().map(|s| s.to_string()).collect())
        .collect();
    let folds = (0..k)
        .map(|g| Fold {
            test_patients: groups[g].clone(),
            train_patients: groups
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != g)
                .flat_map(|(_, s)| s.iter().cloned())
                .collect(),
        })
        .collect();
    Ok(FoldPlan { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PairedSample;
    use ndarray::Array3;

    pub(crate) fn fake(patients: &[&str]) -> Vec<PairedSample> {
        patients
            .iter()
            .enumerate()
            .map(|(i, p)| PairedSample {
                pair_id: format!("pair{i}"),
                patient_id: p.to_string(),
                label: (i % 2) as u8,
                image_w: Array3::zeros((3, 1, 1)),
                image_n: Array3::zeros((3, 1, 1)),
                gt_warp: None,
                gt_lesion_mask_w: None,
            })
            .collect()
    }

    #[test]
    fn ten_patients_five_folds() {
        let names: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let data = fake(&refs);
        let plan = kfold_split(&data, 5, 1).unwrap();
        assert_eq!(plan.k(), 5);
        for f in &plan.folds {
            assert_eq!(f.test_patients.len(), 2);
            assert_eq!(f.train_patients.len(), 8);
        }
        assert_eq!(plan, kfold_split(&data, 5, 1).unwrap());
        assert_ne!(plan, kfold_split(&data, 5, 2).unwrap());
    }

    #[test]
    fn too_few_patients() {
        let data = fake(&["a", "a", "b", "c"]);
        assert!(matches!(
            kfold_split(&data, 5, 0),
            Err(Error::TooFewPatients { k: 5, found: 3 })
        ));
    }

    #[test]
    fn split_indices_keep_patients_together() {
        let data = fake(&["a", "b", "a", "c", "b", "d", "e"]);
        let plan = kfold_split(&data, 5, 4).unwrap();
        for fold in 0..5 {
            let (train, test) = plan.split_indices(fold, &data);
            assert_eq!(train.len() + test.len(), data.len());
            for &i in &test {
                assert!(train.iter().all(|&j| data[j].patient_id != data[i].patient_id));
            }
        }
    }
}
