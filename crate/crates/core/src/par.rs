//! Deterministic seed derivation and the data-parallel map used by batch
//! operations.
//!
//! Every randomized stage draws from a `ChaCha8Rng` seeded through
//! [`derive_seed`], so results are a pure function of `(master seed, stream
//! name, index)` and never depend on thread scheduling. The parallel map
//! writes results back in index order, which keeps the parallel and
//! sequential builds bit-for-bit identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer. Full avalanche, cheap, and stable across platforms
/// and processes (unlike `DefaultHasher`, which is randomized per process).
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for stream `stream`, element `index`, from a
/// master seed. Distinct (stream, index) pairs get statistically independent
/// streams; the same triple always yields the same seed.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = mix64(master);
    for b in stream.as_bytes() {
        h = mix64(h ^ u64::from(*b));
    }
    mix64(h ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// RNG for one element of a named stream.
pub fn stream_rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stable 64-bit fingerprint of a token sequence (used to give pure scorers a
/// reproducible per-call-site seed).
pub fn hash_u32s(items: &[u32]) -> u64 {
    let mut h = 0x51_7C_C1_B7_27_22_0A_95u64;
    for &t in items {
        h = mix64(h ^ u64::from(t));
    }
    h
}

/// Caps the worker-thread count for all parallel maps. Results never depend
/// on it — seeds are derived per index — so this only trades wall time.
/// Must be called before the first parallel map; errors if the pool already
/// exists. A no-op in sequential builds.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> crate::error::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::error::CoreError::InvalidConfig(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> crate::error::Result<()> {
    Ok(())
}

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
/// Output order is always index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential map with the same signature, kept unconditionally so the bench
/// suite can compare both code paths in one build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
