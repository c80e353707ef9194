//! Multi-label, multi-task stratification of patient groups into folds,
//! per-patient instance capping and train/dev/test fold rotation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum StratifyError {
    #[error("fold count must be at least {min}, got {k}")]
    TooFewFolds { k: usize, min: usize },
    #[error("group {0:?} carries no label")]
    EmptyGroup(String),
    #[error("no instances to stratify")]
    Empty,
    #[error("cap must be at least 1")]
    ZeroCap,
    #[error("fold file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary presence matrix of labels per patient group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLabelMatrix {
    pub groups: Vec<String>,
    pub labels: Vec<String>,
    /// `y[g][l]` is true iff group `g` has an instance with label `l`.
    pub y: Vec<Vec<bool>>,
}

impl GroupLabelMatrix {
    pub fn new(
        groups: Vec<String>,
        labels: Vec<String>,
        y: Vec<Vec<bool>>,
    ) -> Result<Self, StratifyError> {
        assert_eq!(groups.len(), y.len(), "one row per group");
        for (g, row) in groups.iter().zip(&y) {
            assert_eq!(row.len(), labels.len(), "one column per label");
            if !row.iter().any(|&b| b) {
                return Err(StratifyError::EmptyGroup(g.clone()));
            }
        }
        Ok(GroupLabelMatrix { groups, labels, y })
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.labels.len()];
        for row in &self.y {
            for (s, &b) in sums.iter_mut().zip(row) {
                *s += b as usize;
            }
        }
        sums
    }
}

/// Builds the matrix from `(patient, label)` pairs. Groups and labels are
/// sorted; duplicate pairs collapse.
pub fn build_group_labels<'a>(
    instances: impl IntoIterator<Item = (&'a str, String)>,
) -> Result<GroupLabelMatrix, StratifyError> {
    let mut pairs: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for (patient, label) in instances {
        pairs.entry(patient).or_default().insert(label);
    }
    if pairs.is_empty() {
        return Err(StratifyError::Empty);
    }
    let labels: Vec<String> = pairs
        .values()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut y = Vec::with_capacity(pairs.len());
    for set in pairs.values() {
        let mut row = vec![false; labels.len()];
        for l in set {
            row[col[l.as_str()]] = true;
        }
        y.push(row);
    }
    let groups = pairs.keys().map(|s| s.to_string()).collect();
    GroupLabelMatrix::new(groups, labels, y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index of every group.
    pub assignment: BTreeMap<String, usize>,
    /// Per fold, per label group counts.
    pub counts: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignment.get(patient).copied()
    }

    pub fn groups_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(g, _)| g.as_str())
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), StratifyError> {
        writeln!(w, "patient_id\tfold")?;
        for (g, f) in &self.assignment {
            writeln!(w, "{g}\t{f}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StratifyError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Reads a `patient_id<TAB>fold` file into a patient → fold map.
pub fn read_fold_file(r: impl BufRead) -> Result<BTreeMap<String, usize>, StratifyError> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 && line.starts_with("patient_id") || line.trim().is_empty() {
            continue;
        }
        let err = |message: String| StratifyError::Parse { line: i + 1, message };
        let (g, f) = line
            .split_once('\t')
            .ok_or_else(|| err(format!("expected two tab-separated fields in {line:?}")))?;
        let f = f.trim().parse().map_err(|e| err(format!("bad fold: {e}")))?;
        out.insert(g.to_string(), f);
    }
    Ok(out)
}

/// Greedy rarest-label-first assignment of groups to `k` folds.
pub fn stratify(m: &GroupLabelMatrix, k: usize, seed: u64) -> Result<FoldPlan, StratifyError> {
    if k < 1 {
        return Err(StratifyError::TooFewFolds { k, min: 1 });
    }
    let n_labels = m.labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![vec![0usize; n_labels]; k];
    let mut remaining = m.column_sums();
    let mut unassigned: Vec<usize> = (0..m.groups.len()).collect();
    let mut fold_of = vec![usize::MAX; m.groups.len()];

    while !unassigned.is_empty() {
        let target = (0..n_labels)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| (remaining[l], l))
            .expect("every unassigned group carries a label");
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&f| (counts[f][target], counts[f].iter().sum::<usize>(), f));
        for f in order {
            let eligible: Vec<usize> = unassigned
                .iter()
                .enumerate()
                .filter(|(_, &g)| m.y[g][target])
                .map(|(i, _)| i)
                .collect();
            if eligible.is_empty() {
                break;
            }
            let pick = eligible[rng.gen_range(0..eligible.len())];
            let g = unassigned.remove(pick);
            fold_of[g] = f;
            for (l, &b) in m.y[g].iter().enumerate() {
                if b {
                    counts[f][l] += 1;
                    remaining[l] -= 1;
                }
            }
        }
    }

    let assignment = m
        .groups
        .iter()
        .cloned()
        .zip(fold_of)
        .collect();
    Ok(FoldPlan {
        k,
        assignment,
        counts,
        seed,
    })
}

/// Unstratified reference split: groups shuffled and dealt round-robin.
pub fn random_split(m: &GroupLabelMatrix, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; m.groups.len()];
    for (i, g) in order.into_iter().enumerate() {
        fold_of[g] = i % k;
    }
    fold_of
}

/// Per fold, per label counts for an assignment (fold index per group, in
/// matrix row order).
pub fn fold_label_counts(m: &GroupLabelMatrix, fold_of: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0; m.labels.len()]; k];
    for (row, &f) in m.y.iter().zip(fold_of) {
        for (l, &b) in row.iter().enumerate() {
            counts[f][l] += b as usize;
        }
    }
    counts
}

/// Mean absolute deviation of each fold's share of each label from the ideal
/// share `1/k`.
pub fn proportion_deviation(counts: &[Vec<usize>]) -> f64 {
    let k = counts.len();
    let n_labels = counts.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut cells = 0usize;
    for l in 0..n_labels {
        let col: usize = counts.iter().map(|r| r[l]).sum();
        if col == 0 {
            continue;
        }
        for row in counts {
            total += (row[l] as f64 / col as f64 - 1.0 / k as f64).abs();
            cells += 1;
        }
    }
    if cells == 0 {
        0.0
    } else {
        total / cells as f64
    }
}

/// Plan's assignment in matrix row order.
pub fn plan_vector(m: &GroupLabelMatrix, plan: &FoldPlan) -> Vec<usize> {
    m.groups.iter().map(|g| plan.assignment[g]).collect()
}

/// True iff every patient's instances fall in a single fold.
pub fn patient_integrity_check<'a>(instance_folds: impl IntoIterator<Item = (&'a str, usize)>) -> bool {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, f) in instance_folds {
        if *seen.entry(p).or_insert(f) != f {
            return false;
        }
    }
    true
}

/// Keeps at most `cap` instances per patient, sampling uniformly with a
/// per-patient seed. Kept instances stay in input order.
pub fn cap_per_patient<T: Clone>(
    instances: &[T],
    patient_of: impl Fn(&T) -> &str,
    cap: usize,
    seed: u64,
) -> Result<Vec<T>, StratifyError> {
    if cap == 0 {
        return Err(StratifyError::ZeroCap);
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_patient.entry(patient_of(inst)).or_default().push(i);
    }
    let mut keep = vec![false; instances.len()];
    for (patient, idx) in by_patient {
        if idx.len() <= cap {
            idx.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, patient));
        for j in index::sample(&mut rng, idx.len(), cap) {
            keep[idx[j]] = true;
        }
    }
    Ok(instances
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(x, _)| x.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test: usize,
    pub dev: usize,
    pub train: Vec<usize>,
}

/// One rotation per fold: test `k`, dev `k+1 mod K`, train the rest.
pub fn make_splits(k: usize) -> Result<Vec<FoldSplit>, StratifyError> {
    if k < 3 {
        return Err(StratifyError::TooFewFolds { k, min: 3 });
    }
    Ok((0..k)
        .map(|t| {
            let dev = (t + 1) % k;
            FoldSplit {
                test: t,
                dev,
                train: (0..k).filter(|&f| f != t && f != dev).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[bool]]) -> GroupLabelMatrix {
        let groups = (0..rows.len()).map(|i| format!("g{i:02}")).collect();
        let labels = (0..rows[0].len()).map(|i| format!("l{i}")).collect();
        GroupLabelMatrix::new(groups, labels, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn builds_presence_matrix() {
        let m = build_group_labels([
            ("p1", "a".to_string()),
            ("p1", "b".to_string()),
            ("p1", "a".to_string()),
        ])
        .unwrap();
        assert_eq!(m.y, vec![vec![true, true]]);
        let m = build_group_labels((0..3).map(|i| (["x", "y", "z"][i], "l".to_string()))).unwrap();
        assert_eq!(m.column_sums(), vec![3]);
    }

    #[test]
    fn one_fold_takes_all() {
        let m = matrix(&[&[true, false], &[false, true], &[true, true]]);
        let plan = stratify(&m, 1, 0).unwrap();
        assert!(plan.assignment.values().all(|&f| f == 0));
        assert!(stratify(&m, 0, 0).is_err());
    }

    #[test]
    fn two_balanced_labels() {
        let rows: Vec<Vec<bool>> = (0..10).map(|i| vec![i < 5, i >= 5]).collect();
        let refs: Vec<&[bool]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = matrix(&refs);
        for seed in 0..20 {
            let plan = stratify(&m, 5, seed).unwrap();
            assert!(plan.counts.iter().all(|r| r == &vec![1, 1]), "{:?}", plan.counts);
        }
    }

    #[test]
    fn fewer_groups_than_folds() {
        let m = matrix(&[&[true], &[true], &[true], &[true]]);
        let plan = stratify(&m, 5, 1).unwrap();
        let sizes: Vec<usize> = (0..5).map(|f| plan.groups_in(f).len()).collect();
        assert_eq!(sizes, [1, 1, 1, 1, 0]);
    }

    #[test]
    fn caps_patients() {
        let inst: Vec<(String, usize)> = (0..25)
            .map(|i| ("a".to_string(), i))
            .chain((0..4).map(|i| ("b".to_string(), i)))
            .collect();
        let kept = cap_per_patient(&inst, |x| x.0.as_str(), 10, 5).unwrap();
        assert_eq!(kept.iter().filter(|x| x.0 == "a").count(), 10);
        assert_eq!(kept.iter().filter(|x| x.0 == "b").count(), 4);
        let a: Vec<usize> = kept.iter().filter(|x| x.0 == "a").map(|x| x.1).collect();
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(kept, cap_per_patient(&inst, |x| x.0.as_str(), 10, 5).unwrap());
        assert!(cap_per_patient(&inst, |x| x.0.as_str(), 0, 5).is_err());
    }

    #[test]
    fn rotation() {
        let s = make_splits(5).unwrap();
        assert_eq!(s[0], FoldSplit { test: 0, dev: 1, train: vec![2, 3, 4] });
        assert_eq!(s[4].dev, 0);
        assert_eq!(make_splits(3).unwrap()[0].train.len(), 1);
        assert!(make_splits(2).is_err());
    }

    #[test]
    fn integrity() {
        assert!(patient_integrity_check([("a", 0), ("a", 0), ("b", 1)]));
        assert!(!patient_integrity_check([("a", 0), ("a", 2)]));
    }

    #[test]
    fn fold_file_round_trip() {
        let m = matrix(&[&[true], &[true], &[true]]);
        let plan = stratify(&m, 3, 2).unwrap();
        let mut buf = Vec::new();
        plan.write_to(&mut buf).unwrap();
        assert_eq!(read_fold_file(buf.as_slice()).unwrap(), plan.assignment);
    }
}
