//! Subject-level split and fold construction. All slices of a subject share
//! a split, so no anatomy leaks between train and test.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn assert_disjoint(&self) -> Result<()> {
        for (a, b, names) in [
            (&self.train, &self.val, "train/val"),
            (&self.train, &self.test, "train/test"),
            (&self.val, &self.test, "val/test"),
        ] {
            if a.iter().any(|s| b.contains(s)) {
                return Err(Error::Protocol(format!("subject appears in both {names} splits")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<FoldSplit>,
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

/// Builds `k` folds over `subjects` with train/val/test ratios (percent,
/// summing to 100). For `k > 1` the test sets are the k-way partition of
/// the shuffled subjects (pairwise disjoint, union = all subjects); the
/// remainder of each fold is split so validation holds `ratios.1`% of all
/// subjects. `k = 1` supports the two-way 90:10 variant via a zero test
/// ratio.
pub fn make_splits(
    subjects: &[String],
    ratios: (u32, u32, u32),
    k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if ratios.0 + ratios.1 + ratios.2 != 100 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 100")));
    }
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let n = subjects.len();
    let min_needed = if k > 1 { k.max(3) } else { 2 };
    if n < min_needed {
        return Err(Error::Config(format!(
            "{n} subjects are too few for {k} fold(s) with ratios {ratios:?}"
        )));
    }
    let mut shuffled = subjects.to_vec();
    shuffled.shuffle(&mut seeded_rng(seed));

    let mut folds = Vec::with_capacity(k);
    if k == 1 {
        let n_test = ((ratios.2 as f64 / 100.0) * n as f64).round() as usize;
        let n_val = (((ratios.1 as f64 / 100.0) * n as f64).round() as usize).max(1);
        if n_test + n_val >= n {
            return Err(Error::Config(format!(
                "{n} subjects are too few for ratios {ratios:?}"
            )));
        }
        let test = shuffled[n - n_test..].to_vec();
        let val = shuffled[n - n_test - n_val..n - n_test].to_vec();
        let train = shuffled[..n - n_test - n_val].to_vec();
        folds.push(FoldSplit { train, val, test });
    } else {
        // k-way partition: the first n % k chunks carry one extra subject.
        let base = n / k;
        let extra = n % k;
        let mut start = 0usize;
        for f in 0..k {
            let len = base + usize::from(f < extra);
            let test: Vec<String> = shuffled[start..start + len].to_vec();
            start += len;
            let pool: Vec<String> =
                shuffled.iter().filter(|s| !test.contains(s)).cloned().collect();
            let n_val = (((ratios.1 as f64 / 100.0) * n as f64).round() as usize).max(1);
            if n_val >= pool.len() {
                return Err(Error::Config(format!(
                    "{n} subjects are too few for {k} folds with ratios {ratios:?}"
                )));
            }
            let val = pool[pool.len() - n_val..].to_vec();
            let train = pool[..pool.len() - n_val].to_vec();
            folds.push(FoldSplit { train, val, test });
        }
    }
    for fold in &folds {
        fold.assert_disjoint()?;
    }
    Ok(SplitPlan { folds, ratios, seed })
}
