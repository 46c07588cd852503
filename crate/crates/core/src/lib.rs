//! Identifiable virtual face generation.
//!
//! A frozen encoder, generator and recognizer are composed with a trainable,
//! key-conditioned latent projector: `T(x, k) = G(P(E(x), k))`. The projector
//! is trained with a multi-task cosine objective so that virtual faces hide
//! the original identity, change with the key, and stay recognizable as a new
//! virtual identity. The crate also carries the evaluation harness (EER, AUC,
//! protection rate, diversity, recoverability, FID).

pub mod backends;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod projector;
pub mod training;
pub mod types;

pub use error::{IvfgError, Result};
pub use types::{cosine_similarity, FeatureVector, ImageArray, LatentVector};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic random source: one ChaCha stream per `(seed, stream)`.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
