//! Deterministic, replayable random streams.
//!
//! Every random draw in the crate is keyed by *what it is for* (a
//! [`StreamKind`]) and *where it happens* (one or two indices, usually a
//! round number), never by how many draws preceded it. A run with master
//! seed `s` therefore produces bit-identical results regardless of thread
//! count, and a run restarted at round `t + 1` consumes exactly the same
//! randomness as a fresh run that begins at round `t + 1` — the property
//! the restart replay tests rely on.
//!
//! The derivation is a fixed, documented hash: the master seed, the stream
//! kind, and the indices are folded through SplitMix64 (Steele, Lea &
//! Flood 2014) to produce a 256-bit key for ChaCha12. SplitMix64 is a
//! bijective finalizer with good avalanche behavior, so distinct keys give
//! independent-looking streams; ChaCha12 supplies the actual stream. The
//! scheme is frozen: changing it would silently invalidate every recorded
//! CSV, so it is covered by a regression test with hard-coded values.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Role tag for a derived stream. The discriminant values are part of the
/// derivation and must never be reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Environment weight vector(s).
    EnvWeights = 1,
    /// Per-round action-set draw.
    ActionSet = 2,
    /// Per-round reward noise.
    Noise = 3,
    /// Per-(window-start, order) scheduling coin.
    Schedule = 4,
    /// Per-round posterior sample for Thompson sampling.
    Posterior = 5,
    /// Per-(order, window) randomness carrier for the attention pipeline.
    Carrier = 6,
    /// Per-run stream for benchmark utilities (trajectory sampling etc.).
    Bench = 7,
}

/// Derives per-purpose ChaCha12 streams from a single master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedDerivation {
    master: u64,
}

/// SplitMix64 finalizer: one round of the mix function.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedDerivation {
    /// A derivation rooted at `master`.
    pub fn new(master: u64) -> Self {
        SeedDerivation { master }
    }

    /// The master seed this derivation was rooted at.
    pub fn master(&self) -> u64 {
        self.master
    }

    /// The derivation for one run of a multi-seed experiment: run `i`
    /// re-roots at `hash(master, i)` so per-run streams never collide.
    pub fn run(&self, run_index: u64) -> SeedDerivation {
        let mixed = splitmix64(splitmix64(self.master ^ 0x5256_4e5f_4944) ^ run_index);
        SeedDerivation { master: mixed }
    }

    /// A ChaCha12 stream keyed by `(kind, a, b)`.
    ///
    /// The 256-bit ChaCha key is the SplitMix64 chain
    /// `k0 = mix(master ^ kind)`, `k1 = mix(k0 ^ a)`, `k2 = mix(k1 ^ b)`,
    /// `k3 = mix(k2)`, laid out little-endian.
    pub fn stream2(&self, kind: StreamKind, a: u64, b: u64) -> ChaCha12Rng {
        let k0 = splitmix64(self.master ^ (kind as u64));
        let k1 = splitmix64(k0 ^ a);
        let k2 = splitmix64(k1 ^ b);
        let k3 = splitmix64(k2);
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&k0.to_le_bytes());
        key[8..16].copy_from_slice(&k1.to_le_bytes());
        key[16..24].copy_from_slice(&k2.to_le_bytes());
        key[24..32].copy_from_slice(&k3.to_le_bytes());
        ChaCha12Rng::from_seed(key)
    }

    /// A ChaCha12 stream keyed by `(kind, a)`.
    pub fn stream(&self, kind: StreamKind, a: u64) -> ChaCha12Rng {
        self.stream2(kind, a, 0)
    }
}

/// Draws a uniform in `[0, 1)` (half-open, so a probability-1 comparison
/// `u < 1.0` always succeeds).
pub fn unit_uniform(rng: &mut ChaCha12Rng) -> f64 {
    use rand::Rng;
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_frozen() {
        // Regression pin for the documented hash: these values must never
        // change, or previously recorded outputs become unreproducible.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(splitmix64(1), 0x910a2dec89025cc1);
        let d = SeedDerivation::new(42);
        let mut s = d.stream2(StreamKind::Noise, 7, 0);
        let first: u64 = s.random();
        let mut s_again = d.stream2(StreamKind::Noise, 7, 0);
        let first_again: u64 = s_again.random();
        assert_eq!(first, first_again);
        assert_eq!(first, 8936170112081639534);
    }

    #[test]
    fn distinct_keys_give_distinct_streams() {
        let d = SeedDerivation::new(0);
        let a: u64 = d.stream2(StreamKind::Noise, 1, 0).random();
        let b: u64 = d.stream2(StreamKind::Noise, 2, 0).random();
        let c: u64 = d.stream2(StreamKind::ActionSet, 1, 0).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        let r0: u64 = d.run(0).stream(StreamKind::Noise, 1).random();
        let r1: u64 = d.run(1).stream(StreamKind::Noise, 1).random();
        assert_ne!(r0, r1);
    }

    #[test]
    fn unit_uniform_stays_in_half_open_interval() {
        let d = SeedDerivation::new(3);
        let mut rng = d.stream(StreamKind::Schedule, 0);
        for _ in 0..10_000 {
            let u = unit_uniform(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
