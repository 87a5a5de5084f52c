//! Query-time 2D-3D matching.
//!
//! Model points and query cells are positionally encoded, transformed by
//! linear-attention layers and matched by dual-softmax with mutual nearest
//! neighbours; every coarse match is then refined to sub-pixel accuracy by
//! an expectation over a small window of the fine map.

pub mod attention;
pub mod encoding;
pub mod loss;
pub mod matching;
pub mod query;

pub use attention::{linear_attention, AttentionBlock, AttentionError, AttentionStack};
pub use matching::{
    coarse_match_2d3d, dual_softmax, fine_match_2d3d, mutual_nearest, CoarseCorrespondence, CoarseMatching,
    CorrespondenceSet, FineCorrespondence, LocalizeError, MatchingConfig,
};
pub use query::{synthesize_query_maps, FeatureGrid, QueryFeatureMaps};

use rand::seq::index;

use crate::rng::{stream, Domain};

/// Point budget of the training-time model sampler.
pub const TRAINING_POINT_BUDGET: usize = 7000;

/// Indices selecting exactly `target` of `n` points: a random subset when
/// `n ≥ target`, otherwise every point followed by random repeats. The flag
/// marks repeated (padding) entries.
pub fn sample_or_pad(n: usize, target: usize, seed: u64) -> Vec<(usize, bool)> {
    let mut rng = stream(seed, Domain::Sampling, n as u64, target as u64);
    if n >= target {
        let mut idx = index::sample(&mut rng, n, target).into_vec();
        idx.sort_unstable();
        return idx.into_iter().map(|i| (i, false)).collect();
    }
    let mut out: Vec<(usize, bool)> = (0..n).map(|i| (i, false)).collect();
    if n == 0 {
        return out;
    }
    use rand::Rng;
    out.extend((n..target).map(|_| (rng.random_range(0..n), true)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_or_pad_sizes() {
        let s = sample_or_pad(9000, TRAINING_POINT_BUDGET, 1);
        assert_eq!(s.len(), 7000);
        assert!(s.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(s.iter().all(|&(_, pad)| !pad));
        let p = sample_or_pad(100, 250, 1);
        assert_eq!(p.len(), 250);
        assert_eq!(p.iter().filter(|x| x.1).count(), 150);
        assert!(p.iter().all(|&(i, _)| i < 100));
        assert_eq!(sample_or_pad(100, 250, 1), p);
        assert!(sample_or_pad(0, 10, 1).is_empty());
    }
}
