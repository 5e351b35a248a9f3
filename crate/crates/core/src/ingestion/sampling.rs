//! Dataset-level oversampling: every dataset contributes the same number of
//! window draws per epoch, smaller ones drawing with replacement.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{data_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Draw {
    pub dataset: usize,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPlan {
    pub window_counts: Vec<usize>,
    /// Draws per dataset per epoch.
    pub quota: usize,
    pub seed: u64,
}

pub fn build_sampling_plan(window_counts: &[usize], quota: usize, seed: u64) -> Result<SamplingPlan> {
    if window_counts.is_empty() {
        return Err(data_err("sampling plan needs at least one dataset"));
    }
    if let Some(i) = window_counts.iter().position(|&n| n == 0) {
        return Err(data_err(format!("dataset {i} has no windows")));
    }
    if quota == 0 {
        return Err(data_err("quota must be positive"));
    }
    Ok(SamplingPlan { window_counts: window_counts.to_vec(), quota, seed })
}

impl SamplingPlan {
    pub fn draws_per_dataset(&self) -> Vec<usize> {
        vec![self.quota; self.window_counts.len()]
    }

    /// The shuffled draw sequence of one epoch; a pure function of
    /// (seed, epoch).
    pub fn epoch(&self, epoch: u64) -> Vec<Draw> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut draws = Vec::with_capacity(self.quota * self.window_counts.len());
        for (dataset, &n) in self.window_counts.iter().enumerate() {
            if n >= self.quota {
                draws.extend(sample(&mut rng, n, self.quota).into_iter().map(|window| Draw { dataset, window }));
            } else {
                draws.extend((0..self.quota).map(|_| Draw { dataset, window: rng.gen_range(0..n) }));
            }
        }
        draws.shuffle(&mut rng);
        draws
    }
}
