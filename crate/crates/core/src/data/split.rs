use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.68, 0.12, 0.20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Subject indices per split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SubjectSplit {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Largest-remainder apportionment of `n` by `ratios`. Ties in the remainder
/// go to the earlier entry.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    // Integer parts per million keep the arithmetic exact.
    let parts: Vec<u128> = ratios.iter().map(|r| (r * 1e6).round() as u128).collect();
    let total: u128 = parts.iter().sum();
    let mut sizes = [0usize; 3];
    let mut rems = [0u128; 3];
    for i in 0..3 {
        let raw = n as u128 * parts[i];
        sizes[i] = (raw / total) as usize;
        rems[i] = raw % total;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let missing = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded assignment of subjects `0..n` to train/val/test.
pub fn subject_split(n: usize, ratios: [f64; 3], seed: u64) -> Result<SubjectSplit> {
    if n < 3 {
        return Err(Error::Config(format!("splitting needs at least 3 subjects, got {n}")));
    }
    let [a, b, _] = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SubjectSplit { train: sorted(&order[..a]), val: sorted(&order[a..a + b]), test: sorted(&order[a + b..]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sized_cohort() {
        assert_eq!(split_sizes(32, DEFAULT_RATIOS).unwrap(), [22, 4, 6]);
        assert_eq!(split_sizes(100, DEFAULT_RATIOS).unwrap(), [68, 12, 20]);
        assert_eq!(split_sizes(3, [1.0, 1.0, 1.0]).unwrap(), [1, 1, 1]);
        assert_eq!(split_sizes(4, [1.0, 1.0, 1.0]).unwrap(), [2, 1, 1]);
    }

    #[test]
    fn partition_and_determinism() {
        let s = subject_split(32, DEFAULT_RATIOS, 9).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        assert_eq!(s, subject_split(32, DEFAULT_RATIOS, 9).unwrap());
        assert_ne!(s, subject_split(32, DEFAULT_RATIOS, 10).unwrap());
    }

    #[test]
    fn too_few_subjects() {
        assert!(subject_split(2, DEFAULT_RATIOS, 0).is_err());
        assert!(split_sizes(5, [f64::NAN, 1.0, 1.0]).is_err());
    }
}
