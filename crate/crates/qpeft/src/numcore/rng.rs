use crate::numcore::matrix::Matrix;
use crate::numcore::scalar::Scalar;

/// Deterministic PRNG: xoshiro256++ seeded through SplitMix64.
///
/// Every random decision in the system flows through this generator so that
/// identical seeds give byte-identical artifacts on any platform. Normal
/// deviates use an Irwin–Hall sum of twelve uniforms: only +,-,*,/ are
/// involved, so the stream contains no libm-dependent values.
#[derive(Debug, Clone)]
pub struct DetRng {
    s: [u64; 4],
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; used to derive independent seed streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        let mut st = seed;
        let s = [
            splitmix64(&mut st),
            splitmix64(&mut st),
            splitmix64(&mut st),
            splitmix64(&mut st),
        ];
        DetRng { s }
    }

    /// Derive a child seed from a root seed and a purpose label, so separate
    /// concerns (init, shuffling, sampling, ...) consume independent streams.
    pub fn derive(root: u64, label: &str) -> u64 {
        let mut st = root ^ fnv1a(label.as_bytes());
        splitmix64(&mut st)
    }

    /// Convenience: a generator for `derive(root, label)`.
    pub fn derived(root: u64, label: &str) -> Self {
        DetRng::new(Self::derive(root, label))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform<S: Scalar>(&mut self) -> S {
        let bits = self.next_u64() >> 11;
        S::from_c(bits as f64 * (1.0 / 9007199254740992.0))
    }

    /// Approximately standard normal times `std`: Irwin–Hall sum of twelve
    /// uniforms minus 6 (zero mean, unit variance, support [-6, 6]).
    pub fn normal<S: Scalar>(&mut self, std: S) -> S {
        let mut acc = 0.0f64;
        for _ in 0..12 {
            let bits = self.next_u64() >> 11;
            acc += bits as f64 * (1.0 / 9007199254740992.0);
        }
        S::from_c(acc - 6.0) * std
    }

    /// Uniform integer in [0, n); rejection sampling, no modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Pick one element of a non-empty slice.
    pub fn choose<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }

    pub fn normal_matrix<S: Scalar>(&mut self, rows: usize, cols: usize, std: S) -> Matrix<S> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = self.normal(std);
        }
        m
    }
}
