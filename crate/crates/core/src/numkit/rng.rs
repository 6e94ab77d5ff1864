use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Splittable counter-based generator: a ChaCha8 keystream selected by
/// `(seed, stream)`. Children get their own stream ids, so draws on one
/// stream never shift another.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn derive_stream(parent: u64, tag: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(tag);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Top-level stream identified by a name, e.g. `"pretrain"`.
    pub fn named(seed: u64, name: &str) -> Self {
        Rng::new(seed, derive_stream(0, name.as_bytes()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream; unaffected by how many draws `self` made.
    pub fn child(&self, index: u64) -> Rng {
        Rng::new(self.seed, derive_stream(self.stream, &index.to_le_bytes()))
    }

    pub fn child_named(&self, name: &str) -> Rng {
        let mut tag = b"name:".to_vec();
        tag.extend_from_slice(name.as_bytes());
        Rng::new(self.seed, derive_stream(self.stream, &tag))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn coin(&mut self) -> bool {
        self.inner.next_u32() & 1 == 1
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
