use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded, splittable random stream.
///
/// Backed by ChaCha8, which is counter based and produces the same stream on
/// every platform. Child streams are keyed by `(seed, stream id)` and do not
/// depend on how much of the parent has been consumed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Open-interval clamp for uniforms fed into `-ln(-ln u)`.
pub const UNIFORM_LO: f64 = 1e-300;
pub const UNIFORM_HI: f64 = 1.0 - 1e-16;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Independent child stream identified by `label`.
    pub fn derive(&self, label: u64) -> Self {
        Self::with_stream(self.seed, splitmix64(self.stream ^ splitmix64(label)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform clamped into `[1e-300, 1 - 1e-16]`.
    pub fn uniform_open(&mut self) -> f64 {
        self.uniform().clamp(UNIFORM_LO, UNIFORM_HI)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Standard Gumbel draw, `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct indices from {n}");
        // Partial Fisher-Yates over a sparse swap map keeps this O(k).
        let mut swapped = std::collections::HashMap::with_capacity(k);
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let j = i + self.below(n - i);
            let vj = *swapped.get(&j).unwrap_or(&j);
            let vi = *swapped.get(&i).unwrap_or(&i);
            swapped.insert(j, vi);
            out.push(vj);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_ignore_parent_consumption() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        b.next_u64();
        assert_eq!(a.derive(5).next_u64(), b.derive(5).next_u64());
        assert_ne!(a.derive(5).next_u64(), a.derive(6).next_u64());
    }

    #[test]
    fn sample_indices_distinct() {
        let mut r = Rng::new(1);
        let mut s = r.sample_indices(50, 50);
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        let t = r.sample_indices(1000, 10);
        let mut u = t.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 10);
    }

    #[test]
    fn uniform_open_is_clamped() {
        let mut r = Rng::new(11);
        for _ in 0..10_000 {
            let u = r.uniform_open();
            assert!((UNIFORM_LO..=UNIFORM_HI).contains(&u));
        }
    }
}
