//! Label subsampling and leakage-free cross-validation folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, data_err, Result};

/// Number of items kept at `pct` percent of `n`: rounded half up, at least 1.
pub fn subsample_count(n: usize, pct: f64) -> Result<usize> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(config_err(format!("training percentage {pct} outside (0, 100]")));
    }
    let m = (pct * n as f64 / 100.0 + 0.5).floor() as usize;
    Ok(m.clamp(1, n.max(1)).min(n))
}

/// Uniform sample without replacement of `pct` percent of `items`, in
/// shuffled order.
pub fn subsample_training<T: Clone>(items: &[T], pct: f64, seed: u64) -> Result<Vec<T>> {
    let m = subsample_count(items.len(), pct)?;
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out.truncate(m);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    /// Indices into the window list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contiguous folds over windows given as inclusive stream-index spans
/// `(first, last)`, sorted by start. Block `i` is test fold `i`; the first
/// `n % folds` blocks get one extra window. A train window is dropped when
/// its span, extended by `horizon` events of future target, intersects the
/// test block's span extended the same way.
pub fn kfold_splits(spans: &[(usize, usize)], folds: usize, horizon: usize) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(config_err(format!("need at least 2 folds, got {folds}")));
    }
    let n = spans.len();
    if n < folds {
        return Err(data_err(format!("{n} windows cannot form {folds} folds")));
    }
    if spans.windows(2).any(|w| w[1].0 < w[0].0) || spans.iter().any(|s| s.1 < s.0) {
        return Err(data_err("window spans must be valid and sorted by start"));
    }
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut from = 0;
    for i in 0..folds {
        let size = base + usize::from(i < extra);
        let test: Vec<usize> = (from..from + size).collect();
        let lo = test.iter().map(|&j| spans[j].0).min().expect("nonempty block");
        let hi = test.iter().map(|&j| spans[j].1 + horizon).max().expect("nonempty block");
        let train = (0..n)
            .filter(|j| !(from..from + size).contains(j))
            .filter(|&j| spans[j].1 + horizon < lo || spans[j].0 > hi)
            .collect();
        out.push(Fold { train, test });
        from += size;
    }
    Ok(out)
}
