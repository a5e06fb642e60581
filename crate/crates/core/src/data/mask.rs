use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SequenceRecord;
use crate::emission::Frame;
use crate::error::{Error, Result};

/// Number of frames masked in a sequence of length `len`. The first frame is
/// never masked, so the count is capped at `len - 1`.
pub fn mask_count(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).round() as usize).min(len.saturating_sub(1))
}

/// Replaces `round(fraction * T)` frames of each sequence with missing
/// markers, chosen uniformly without replacement among frames `2..=T`.
/// Sequence `i` draws from its own stream of the seeded generator.
pub fn mask_missing(
    records: &[SequenceRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<SequenceRecord>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "mask fraction {fraction} must be in [0, 1)"
        )));
    }
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = r.clone();
            let count = mask_count(r.len(), fraction);
            if count > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                for t in sample(&mut rng, r.len() - 1, count) {
                    out.frames[t + 1] = Frame::missing();
                }
            }
            out
        })
        .collect())
}
