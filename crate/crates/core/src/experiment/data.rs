//! Seeded synthetic data for the quadratic benchmark.
//!
//! Generator: ChaCha8 keyed by the seed as 8 little-endian bytes followed by
//! 24 zero bytes, read one `u64` at a time. Each `u64` becomes
//! `u = (v >> 11) · 2⁻⁵³ ∈ [0, 1)` and then `lo + (hi − lo)·u`. Entries are
//! drawn client by client, sample by sample, coordinate by coordinate.

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::experiment::config::ExperimentConfig;
use crate::linalg::ModelVec;
use crate::loss::{FederatedProblem, QuadraticRisk};

/// Uniform reals from a seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct UniformStream(ChaCha8Rng);

impl UniformStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        UniformStream(ChaCha8Rng::from_seed(key))
    }

    /// 53 random bits scaled into `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }
}

/// Per-client sample matrices `b_i` (rows are samples).
pub fn gen_samples(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    let [lo, hi] = cfg.data_range;
    let mut rng = UniformStream::new(seed);
    Ok((0..cfg.num_clients)
        .map(|_| {
            Array2::from_shape_simple_fn((cfg.samples_per_client, cfg.dim), || rng.next_in(lo, hi))
        })
        .collect())
}

pub fn gen_data(cfg: &ExperimentConfig, seed: u64) -> Result<FederatedProblem> {
    let risks = gen_samples(cfg, seed)?
        .into_iter()
        .map(QuadraticRisk::new)
        .collect::<Result<Vec<_>>>()?;
    FederatedProblem::from_quadratic_risks(risks)
}

/// SHA-256 over the little-endian bytes of every value, in order.
pub fn digest_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Digest of every sample of every client; `None` for non-quadratic problems.
pub fn problem_digest(problem: &FederatedProblem) -> Option<String> {
    let mut all = Vec::new();
    for loss in problem.losses() {
        all.extend(loss.as_quadratic_risk()?.samples().iter().copied());
    }
    Some(digest_f64s(&all))
}

pub fn vector_digest(v: &ModelVec) -> String {
    digest_f64s(v.iter())
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
