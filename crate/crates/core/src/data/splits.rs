//! Train/validation/test index splits.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 10_000,
            val: 1_000,
            test: 2_000,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, num_scenes: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= num_scenes {
                return Err(Error::InvalidData(format!("split index {i} out of range for {num_scenes} scenes")));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidData(format!("split index {i} appears more than once")));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" | "validation" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Disjoint random splits of `0..num_scenes`, each sorted ascending.
pub fn make_splits(num_scenes: usize, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    if sizes.total() > num_scenes {
        return Err(Error::Config(format!(
            "requested {} + {} + {} scenes but only {num_scenes} are available",
            sizes.train, sizes.val, sizes.test
        )));
    }
    let mut idx: Vec<usize> = (0..num_scenes).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |from: usize, len: usize| {
        let mut v = idx[from..from + len].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: take(0, sizes.train),
        val: take(sizes.train, sizes.val),
        test: take(sizes.train + sizes.val, sizes.test),
    })
}
