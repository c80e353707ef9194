use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eyephen::stratify::{fold_label_counts, plan_vector, stratify, GroupLabelMatrix};

fn matrix(y: Vec<Vec<bool>>) -> GroupLabelMatrix {
    let n_labels = y[0].len();
    GroupLabelMatrix::new(
        (0..y.len()).map(|g| format!("P{g:04}")).collect(),
        (0..n_labels).map(|l| format!("L{l}")).collect(),
        y,
    )
    .unwrap()
}

#[test]
fn five_and_five_single_labels_fill_every_fold_once() {
    let y = (0..10).map(|g| vec![g < 5, g >= 5]).collect();
    let m = matrix(y);
    let plan = stratify(&m, 5, 1).unwrap();
    let counts = fold_label_counts(&m, &plan_vector(&m, &plan), 5);
    assert!(counts.iter().all(|row| row == &[1, 1]), "{counts:?}");
}

#[test]
fn single_label_groups_balance_within_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..300 {
        let n_labels = rng.gen_range(2..10);
        let n_groups = rng.gen_range(5 * n_labels..150);
        let y = (0..n_groups)
            .map(|_| {
                let mut row = vec![false; n_labels];
                row[rng.gen_range(0..n_labels)] = true;
                row
            })
            .collect();
        let m = matrix(y);
        let plan = stratify(&m, 5, rng.gen()).unwrap();
        let counts = fold_label_counts(&m, &plan_vector(&m, &plan), 5);
        for l in 0..n_labels {
            let col: Vec<usize> = counts.iter().map(|r| r[l]).collect();
            assert!(col.iter().max().unwrap() - col.iter().min().unwrap() <= 2, "{col:?}");
        }
    }
}

#[test]
fn rarest_label_is_spread_first() {
    // Label 1 is rare and co-occurs with the common label 0; the five groups
    // carrying it must land in five different folds.
    let mut y: Vec<Vec<bool>> = (0..5).map(|_| vec![true, true]).collect();
    y.extend((0..20).map(|_| vec![true, false]));
    let m = matrix(y);
    let plan = stratify(&m, 5, 9).unwrap();
    let counts = fold_label_counts(&m, &plan_vector(&m, &plan), 5);
    assert!(counts.iter().all(|row| row[1] == 1), "{counts:?}");
}
