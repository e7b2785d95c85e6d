use std::fmt;

use super::arith::ntt_primes;
use super::HeError;

/// Largest total modulus (in bits, special prime included) permitted at each
/// ring degree for 128-bit classical security with ternary secrets.
pub fn max_modulus_bits(ring_degree: usize) -> Option<u32> {
    match ring_degree {
        1024 => Some(27),
        2048 => Some(54),
        4096 => Some(109),
        8192 => Some(218),
        16384 => Some(438),
        32768 => Some(881),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecretDistribution {
    Ternary,
}

/// Parameter presets mirroring the three operating points of the published
/// operation-cost table, plus the default evaluation set used for packed layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// n = 2^12, depth 2.
    Ring12Depth2,
    /// n = 2^13, depth 2, scale 2^40; the default for layer evaluation.
    Ring13Depth2,
    /// n = 2^13, depth 4.
    Ring13Depth4,
    /// n = 2^14, depth 8.
    Ring14Depth8,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Ring12Depth2,
        Preset::Ring13Depth2,
        Preset::Ring13Depth4,
        Preset::Ring14Depth8,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Ring12Depth2 => "n12-d2",
            Preset::Ring13Depth2 => "n13-d2",
            Preset::Ring13Depth4 => "n13-d4",
            Preset::Ring14Depth8 => "n14-d8",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn params(&self) -> CkksParams {
        let (log_n, bits, log_scale): (u32, Vec<u32>, u32) = match self {
            Preset::Ring12Depth2 => (12, vec![30, 24, 24, 30], 24),
            Preset::Ring13Depth2 => (13, vec![60, 40, 40, 60], 40),
            Preset::Ring13Depth4 => (13, vec![42, 34, 34, 34, 34, 40], 34),
            Preset::Ring14Depth8 => (14, vec![50, 40, 40, 40, 40, 40, 40, 40, 40, 60], 40),
        };
        CkksParams::new(log_n, &bits, log_scale).expect("preset parameters are valid")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// CKKS parameters. The modulus chain lists the ciphertext primes
/// `q_0, .., q_depth` followed by one special prime used for key switching.
#[derive(Clone, Debug, PartialEq)]
pub struct CkksParams {
    ring_degree: usize,
    moduli: Vec<u64>,
    log_scale: u32,
    error_std: f64,
    secret: SecretDistribution,
}

impl CkksParams {
    /// Builds parameters from prime bit sizes, picking the largest
    /// NTT-friendly primes of each size.
    pub fn new(log_ring_degree: u32, chain_bits: &[u32], log_scale: u32) -> Result<Self, HeError> {
        if !(4..=15).contains(&log_ring_degree) {
            return Err(HeError::InvalidParameters(format!(
                "ring degree 2^{log_ring_degree} unsupported"
            )));
        }
        let ring_degree = 1usize << log_ring_degree;
        let mut moduli: Vec<u64> = Vec::with_capacity(chain_bits.len());
        for &bits in chain_bits {
            let p = ntt_primes(bits, ring_degree, 1, &moduli).ok_or_else(|| {
                HeError::InvalidParameters(format!("no {bits}-bit NTT prime for n = {ring_degree}"))
            })?;
            moduli.push(p[0]);
        }
        Self::from_moduli(ring_degree, moduli, log_scale)
    }

    pub fn from_moduli(ring_degree: usize, moduli: Vec<u64>, log_scale: u32) -> Result<Self, HeError> {
        let params = Self {
            ring_degree,
            moduli,
            log_scale,
            error_std: 3.2,
            secret: SecretDistribution::Ternary,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), HeError> {
        if !self.ring_degree.is_power_of_two() {
            return Err(HeError::InvalidParameters("ring degree must be a power of two".into()));
        }
        if self.moduli.len() < 3 {
            return Err(HeError::InvalidParameters(
                "chain needs a base prime, at least one rescale prime and a special prime".into(),
            ));
        }
        let two_n = 2 * self.ring_degree as u64;
        for (i, &q) in self.moduli.iter().enumerate() {
            if q % two_n != 1 || !super::arith::is_prime(q) {
                return Err(HeError::InvalidParameters(format!("modulus {q} is not an NTT prime")));
            }
            if self.moduli[..i].contains(&q) {
                return Err(HeError::InvalidParameters(format!("modulus {q} repeated")));
            }
        }
        if self.log_scale == 0 || self.log_scale >= 62 {
            return Err(HeError::InvalidParameters("scale out of range".into()));
        }
        if let Some(bound) = max_modulus_bits(self.ring_degree) {
            let total = self.total_modulus_bits();
            if total > bound as f64 {
                return Err(HeError::InsecureParameters {
                    ring_degree: self.ring_degree,
                    modulus_bits: total,
                    bound,
                });
            }
        }
        Ok(())
    }

    pub fn ring_degree(&self) -> usize {
        self.ring_degree
    }

    pub fn slot_count(&self) -> usize {
        self.ring_degree / 2
    }

    /// Number of rescales a fresh ciphertext admits.
    pub fn depth(&self) -> usize {
        self.moduli.len() - 2
    }

    /// Ciphertext primes followed by the special prime.
    pub fn moduli(&self) -> &[u64] {
        &self.moduli
    }

    pub fn special_modulus(&self) -> u64 {
        *self.moduli.last().unwrap()
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.log_scale as i32)
    }

    pub fn log_scale(&self) -> u32 {
        self.log_scale
    }

    pub fn error_std(&self) -> f64 {
        self.error_std
    }

    pub fn secret_distribution(&self) -> SecretDistribution {
        self.secret
    }

    pub fn total_modulus_bits(&self) -> f64 {
        self.moduli.iter().map(|&q| (q as f64).log2()).sum()
    }
}
