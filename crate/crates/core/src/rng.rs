//! Deterministic random streams.
//!
//! Every Monte-Carlo work item owns a ChaCha8 stream selected by
//! `(seed, stream index)`, so results do not depend on how items are
//! scheduled across threads. Work is split into fixed-size chunks and chunk
//! results are returned in chunk order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Number of replicates handled by one work item in [`chunked`].
pub const CHUNK: usize = 1 << 14;

/// Generator for work item `stream` of the run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `work(rng, count)` over `total` replicates split into [`CHUNK`]-sized
/// pieces, in parallel, returning per-chunk results in chunk order.
pub fn chunked<T, F>(total: usize, seed: u64, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync + Send,
{
    let chunks = total.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = CHUNK.min(total - c * CHUNK);
            work(&mut rng, count)
        })
        .collect()
}
