//! Deterministic random number generation.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
//! advanced by the golden-gamma constant and scrambled by a finalizer. It is
//! tiny, well studied, and produces bit-identical streams on every platform,
//! which is what the reproducibility contract of this crate rests on.
//!
//! Consumers never share one stream. Each subsystem derives its own child
//! stream with [`Rng::split`], keyed by a label (`"data"`, `"init"`,
//! `"dropout"`, `"augment"`, ...) so that adding draws in one subsystem can
//! never perturb another.

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(z: u64) -> u64 {
    let mut z = z;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; used only to key child streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent child stream keyed by `label`.
    ///
    /// The child seed mixes the parent seed with the FNV-1a hash of the
    /// label, so `rng.split("data")` and `rng.split("init")` never collide
    /// and do not advance the parent.
    pub fn split(&self, label: &str) -> Rng {
        Rng::new(splitmix(self.state ^ fnv1a(label.as_bytes())))
    }

    /// Derive an independent child stream keyed by an index (per-sample
    /// streams for embarrassingly parallel generation).
    pub fn split_index(&self, index: u64) -> Rng {
        Rng::new(splitmix(
            self.state ^ index.wrapping_mul(GOLDEN_GAMMA) ^ 0x5851_f42d_4c95_7f2d,
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        splitmix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. Two uniforms drawn per call; no
    /// spare is cached, so the call sequence fully determines the output.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n). Rejection-free via 128-bit multiply;
    /// bias is below 2^-64 and irrelevant for the n used here.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_are_independent_of_parent_use() {
        let parent = Rng::new(7);
        let mut c1 = parent.split("data");
        let mut parent2 = Rng::new(7);
        let _ = parent2.next_u64(); // splitting does not advance the parent
        let mut c2 = Rng::new(7).split("data");
        for _ in 0..10 {
            assert_eq!(c1.next_u64(), c2.next_u64());
        }
    }

    #[test]
    fn labelled_splits_differ() {
        let parent = Rng::new(7);
        assert_ne!(
            parent.split("data").next_u64(),
            parent.split("init").next_u64()
        );
        assert_ne!(
            parent.split_index(0).next_u64(),
            parent.split_index(1).next_u64()
        );
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(5);
        let mut v: Vec<u32> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
