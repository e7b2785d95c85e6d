//! RNS-CKKS primitives and the two evaluation backends.

pub mod arith;
pub mod backend;
pub mod ckks;
pub mod context;
pub mod cost;
pub mod keys;
pub mod ledger;
pub mod ntt;
pub mod params;
pub mod rns;

pub use backend::{normalize_rotation, HeBackend};
pub use ckks::{Ciphertext, ExactBackend, Plaintext};
pub use context::CkksContext;
pub use cost::{CostBackend, CostCiphertext, CostPlaintext};
pub use keys::{keygen, KeySet};
pub use ledger::OpLedger;
pub use params::{max_modulus_bits, CkksParams, Preset, SecretDistribution};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("insecure parameters: n = {ring_degree} with {modulus_bits:.1} modulus bits exceeds the {bound}-bit bound")]
    InsecureParameters { ring_degree: usize, modulus_bits: f64, bound: u32 },
    #[error("level mismatch: {left} vs {right}")]
    LevelMismatch { left: usize, right: usize },
    #[error("scale mismatch: {left} vs {right}")]
    ScaleMismatch { left: f64, right: f64 },
    #[error("level {level} exceeds the maximum {max}")]
    InvalidLevel { level: usize, max: usize },
    #[error("expected a size-{expected} ciphertext, found size {found}")]
    InvalidSize { expected: usize, found: usize },
    #[error("modulus chain exhausted: cannot rescale at level 0")]
    DepthExhausted,
    #[error("no rotation key for step {0}")]
    MissingRotationKey(i64),
    #[error("{values} values exceed the {slots} available slots")]
    TooManyValues { values: usize, slots: usize },
    #[error("encoded coefficients need {bits:.1} bits but only {capacity:.1} are available")]
    EncodeOverflow { bits: f64, capacity: f64 },
    #[error("ciphertext is undecryptable (noise budget {budget:.2} bits)")]
    Undecryptable { budget: f64 },
}
