//! Seed derivation. Every random stream is keyed by (run seed, instance,
//! epoch, step, purpose), so draws for one instance do not depend on how many
//! other instances exist or on where a run was resumed.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Batches = 1,
    Noise = 2,
    Init = 3,
    Eval = 4,
    Refit = 5,
    Generate = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of an instance name.
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, instance: u64, epoch: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[instance, epoch, step, purpose as u64]))
}

/// Random partition of `0..n` into `ceil(1/fraction)` nearly equal batches,
/// each sorted.
pub fn epoch_batches(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<Arc<[usize]>> {
    let parts = batch_count(fraction).min(n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let end = (n * (p + 1)) / parts;
        let mut chunk = order[start..end].to_vec();
        chunk.sort_unstable();
        out.push(Arc::from(chunk));
        start = end;
    }
    out
}

pub fn batch_count(fraction: f64) -> usize {
    ((1.0 / fraction) - 1e-9).ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_indices() {
        let mut rng = stream(7, 1, 0, 0, Purpose::Batches);
        let b = epoch_batches(11, 0.5, &mut rng);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.iter().flat_map(|x| x.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(batch_count(1.0), 1);
        assert_eq!(batch_count(0.25), 4);
    }

    #[test]
    fn streams_are_independent_of_other_instances() {
        use rand::Rng;
        let a: f64 = stream(1, stream_id("a"), 3, 0, Purpose::Noise).random();
        let b: f64 = stream(1, stream_id("a"), 3, 0, Purpose::Noise).random();
        let c: f64 = stream(1, stream_id("b"), 3, 0, Purpose::Noise).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
