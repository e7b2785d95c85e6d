use super::{HeError, OpLedger};

/// Operation set consumed by the packed-layer evaluators.
///
/// Every evaluation method records itself in the supplied ledger. The exact
/// backend performs the CKKS arithmetic; the cost backend only tracks levels,
/// sizes and scales so both raise the same structural errors.
pub trait HeBackend {
    type Plaintext: Clone;
    type Ciphertext: Clone;

    fn slot_count(&self) -> usize;
    /// Level of freshly encrypted data (number of rescales available).
    fn max_level(&self) -> usize;
    /// Default encoding scale.
    fn scale(&self) -> f64;
    /// Scale left after rescaling a ciphertext at `level` carrying `scale`.
    fn rescaled_scale(&self, scale: f64, level: usize) -> f64;

    fn encode(&self, values: &[f64], level: usize, scale: f64) -> Result<Self::Plaintext, HeError>;
    fn encrypt(&self, pt: &Self::Plaintext) -> Result<Self::Ciphertext, HeError>;

    fn ciphertext_level(&self, ct: &Self::Ciphertext) -> usize;
    fn ciphertext_scale(&self, ct: &Self::Ciphertext) -> f64;
    fn ciphertext_size(&self, ct: &Self::Ciphertext) -> usize;

    fn mul_pt(&self, ct: &Self::Ciphertext, pt: &Self::Plaintext, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
    fn mul_ct(&self, a: &Self::Ciphertext, b: &Self::Ciphertext, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
    fn relinearize(&self, ct: &Self::Ciphertext, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
    fn rescale(&self, ct: &Self::Ciphertext, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
    fn add_pt(&self, ct: &Self::Ciphertext, pt: &Self::Plaintext, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
    fn add_ct(&self, a: &Self::Ciphertext, b: &Self::Ciphertext, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
    /// Cyclic left rotation of the slots; negative steps rotate right.
    fn rotate(&self, ct: &Self::Ciphertext, steps: i64, ledger: &mut OpLedger) -> Result<Self::Ciphertext, HeError>;
}

/// Normalizes a signed rotation amount to `[0, slots)`.
pub fn normalize_rotation(steps: i64, slots: usize) -> usize {
    steps.rem_euclid(slots as i64) as usize
}

pub(crate) fn check_same_level(a: usize, b: usize) -> Result<(), HeError> {
    if a != b {
        return Err(HeError::LevelMismatch { left: a, right: b });
    }
    Ok(())
}

pub(crate) fn check_same_scale(a: f64, b: f64) -> Result<(), HeError> {
    if ((a - b) / a).abs() > 1e-9 {
        return Err(HeError::ScaleMismatch { left: a, right: b });
    }
    Ok(())
}
