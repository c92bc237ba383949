use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{SectionHeader, Triplet};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Held-out part of one fold, split into validation and test example indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold assignment over example indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold index per example.
    pub assignments: Vec<usize>,
    pub folds: Vec<FoldSplit>,
}

impl FoldAssignment {
    pub fn held_out(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn to_manifest(&self, examples: &[Triplet]) -> FoldManifest {
        let ids = |idx: &[usize]| idx.iter().map(|&i| examples[i].id.clone()).collect();
        FoldManifest {
            k: self.k,
            seed: self.seed,
            folds: (0..self.k)
                .map(|f| FoldManifestEntry {
                    train_ids: ids(&self.train(f)),
                    val_ids: ids(&self.folds[f].val),
                    test_ids: ids(&self.folds[f].test),
                })
                .collect(),
        }
    }
}

/// On-disk fold manifest keyed by example id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldManifestEntry {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

fn by_header(indices: impl Iterator<Item = usize>, examples: &[Triplet]) -> BTreeMap<SectionHeader, Vec<usize>> {
    let mut groups: BTreeMap<SectionHeader, Vec<usize>> = BTreeMap::new();
    for i in indices {
        groups.entry(examples[i].header).or_default().push(i);
    }
    groups
}

/// Assigns every example to one of `k` folds, stratified by header.
///
/// Classes are visited in class-id order and their shuffled members dealt
/// round-robin with a counter shared across classes, so fold sizes differ by
/// at most one and small classes spread over distinct folds. Each fold's
/// held-out part is then dealt alternately into validation and test the same
/// way.
pub fn make_folds(examples: &[Triplet], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = examples.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the number of examples ({n})"
        )));
    }
    if n < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "need at least 2k = {} examples to give every fold a validation and test example, got {n}",
            2 * k
        )));
    }

    let mut rng = rng_from(seed, "folds");
    let mut assignments = vec![usize::MAX; n];
    let mut counter = 0usize;
    for (_, mut members) in by_header(0..n, examples) {
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = counter % k;
            counter += 1;
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut val = Vec::new();
        let mut test = Vec::new();
        let mut toggle = 0usize;
        let held = (0..n).filter(|&i| assignments[i] == f);
        for (_, mut members) in by_header(held, examples) {
            members.shuffle(&mut rng);
            for i in members {
                if toggle % 2 == 0 {
                    val.push(i);
                } else {
                    test.push(i);
                }
                toggle += 1;
            }
        }
        val.sort_unstable();
        test.sort_unstable();
        folds.push(FoldSplit { val, test });
    }

    Ok(FoldAssignment {
        k,
        seed,
        assignments,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;

    fn toy(n: usize) -> Vec<Triplet> {
        (0..n)
            .map(|i| Triplet {
                id: format!("t{i}"),
                dialogue: "d".into(),
                header: SectionHeader::from_class_id(i % 3).unwrap(),
                section_text: "s".into(),
            })
            .collect()
    }

    #[test]
    fn six_examples_three_folds() {
        let fa = make_folds(&toy(6), 3, 1).unwrap();
        for f in 0..3 {
            assert_eq!(fa.held_out(f).len(), 2);
            assert_eq!(fa.folds[f].val.len(), 1);
            assert_eq!(fa.folds[f].test.len(), 1);
        }
    }

    #[test]
    fn deterministic() {
        let ex = toy(30);
        assert_eq!(make_folds(&ex, 3, 9).unwrap(), make_folds(&ex, 3, 9).unwrap());
    }

    #[test]
    fn errors() {
        assert!(make_folds(&toy(6), 1, 0).is_err());
        assert!(make_folds(&toy(2), 3, 0).is_err());
        assert!(make_folds(&toy(5), 3, 0).is_err());
    }

    #[test]
    fn full_sized_partition() {
        let ex = generate_synthetic_corpus(1201, 3, 600);
        let fa = make_folds(&ex, 3, 11).unwrap();
        let mut sizes: Vec<usize> = (0..3).map(|f| fa.held_out(f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![400, 400, 401]);
        for f in 0..3 {
            let held = fa.held_out(f);
            let mut union: Vec<usize> = fa.folds[f].val.iter().chain(&fa.folds[f].test).copied().collect();
            union.sort_unstable();
            assert_eq!(union, held);
        }
    }

    #[test]
    fn stratified_counts() {
        let ex = generate_synthetic_corpus(300, 5, 400);
        let fa = make_folds(&ex, 3, 2).unwrap();
        for h in SectionHeader::all() {
            let per_fold: Vec<usize> = (0..3)
                .map(|f| fa.held_out(f).iter().filter(|&&i| ex[i].header == h).count())
                .collect();
            let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
            assert!(hi - lo <= 1, "{h}: {per_fold:?}");
        }
    }
}
