use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub n_folds: usize,
    pub fold: usize,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            n_folds: 5,
            fold: 4,
            seed: 42,
        }
    }
}

impl SplitPlan {
    /// Fold of every case: ids are sorted, shuffled with `seed`, and dealt
    /// round-robin.
    pub fn assign(&self, ids: &[String]) -> Result<BTreeMap<String, usize>> {
        if self.n_folds < 2 {
            return Err(Error::Config(format!("n_folds must be at least 2, got {}", self.n_folds)));
        }
        if self.fold >= self.n_folds {
            return Err(Error::Config(format!(
                "fold {} out of range for {} folds",
                self.fold, self.n_folds
            )));
        }
        let sorted: BTreeSet<&String> = ids.iter().collect();
        if sorted.len() != ids.len() {
            return Err(Error::Data("duplicate case ids".into()));
        }
        if ids.len() < self.n_folds {
            return Err(Error::Data(format!(
                "{} cases cannot fill {} folds",
                ids.len(),
                self.n_folds
            )));
        }
        let mut order: Vec<&String> = sorted.into_iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        Ok(order
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i % self.n_folds))
            .collect())
    }

    /// `(train, val)` ids, each sorted.
    pub fn split(&self, ids: &[String]) -> Result<(Vec<String>, Vec<String>)> {
        let folds = self.assign(ids)?;
        let (val, train): (Vec<_>, Vec<_>) = folds.into_iter().partition(|(_, f)| *f == self.fold);
        Ok((
            train.into_iter().map(|(id, _)| id).collect(),
            val.into_iter().map(|(id, _)| id).collect(),
        ))
    }
}
