//! Symbolic twin of the exact backend: tracks level, size and scale so the
//! same layouts raise the same structural errors, and charges every
//! multiplication-class operation its unit cost.

use super::backend::{check_same_level, check_same_scale, normalize_rotation, HeBackend};
use super::params::CkksParams;
use super::{HeError, OpLedger};
use crate::costbench::CostTable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostPlaintext {
    pub level: usize,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostCiphertext {
    pub level: usize,
    pub scale: f64,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct CostBackend {
    table: CostTable,
    slots: usize,
    scale: f64,
    /// Bit-exact ciphertext primes, used for the scale bookkeeping of rescale.
    moduli: Vec<u64>,
}

impl CostBackend {
    /// Geometry taken from `params`; no keys or arithmetic tables are built.
    pub fn new(table: CostTable, params: &CkksParams) -> Self {
        let moduli = params.moduli();
        Self {
            table,
            slots: params.slot_count(),
            scale: params.scale(),
            moduli: moduli[..moduli.len() - 1].to_vec(),
        }
    }

    pub fn table(&self) -> &CostTable {
        &self.table
    }
}

impl HeBackend for CostBackend {
    type Plaintext = CostPlaintext;
    type Ciphertext = CostCiphertext;

    fn slot_count(&self) -> usize {
        self.slots
    }

    fn max_level(&self) -> usize {
        self.moduli.len() - 1
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn rescaled_scale(&self, scale: f64, level: usize) -> f64 {
        scale / self.moduli[level] as f64
    }

    fn encode(&self, values: &[f64], level: usize, scale: f64) -> Result<CostPlaintext, HeError> {
        if values.len() > self.slots {
            return Err(HeError::TooManyValues { values: values.len(), slots: self.slots });
        }
        if level > self.max_level() {
            return Err(HeError::InvalidLevel { level, max: self.max_level() });
        }
        Ok(CostPlaintext { level, scale })
    }

    fn encrypt(&self, pt: &CostPlaintext) -> Result<CostCiphertext, HeError> {
        Ok(CostCiphertext { level: pt.level, scale: pt.scale, size: 2 })
    }

    fn ciphertext_level(&self, ct: &CostCiphertext) -> usize {
        ct.level
    }

    fn ciphertext_scale(&self, ct: &CostCiphertext) -> f64 {
        ct.scale
    }

    fn ciphertext_size(&self, ct: &CostCiphertext) -> usize {
        ct.size
    }

    fn mul_pt(&self, ct: &CostCiphertext, pt: &CostPlaintext, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        check_same_level(ct.level, pt.level)?;
        if ct.size != 2 {
            return Err(HeError::InvalidSize { expected: 2, found: ct.size });
        }
        ledger.plain_mults += 1;
        ledger.estimated_time += self.table.plain_mult;
        Ok(CostCiphertext { scale: ct.scale * pt.scale, ..*ct })
    }

    fn mul_ct(&self, a: &CostCiphertext, b: &CostCiphertext, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        check_same_level(a.level, b.level)?;
        for ct in [a, b] {
            if ct.size != 2 {
                return Err(HeError::InvalidSize { expected: 2, found: ct.size });
            }
        }
        ledger.ciph_mults += 1;
        ledger.estimated_time += self.table.ciph_mult;
        Ok(CostCiphertext { level: a.level, scale: a.scale * b.scale, size: 3 })
    }

    fn relinearize(&self, ct: &CostCiphertext, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        if ct.size != 3 {
            return Err(HeError::InvalidSize { expected: 3, found: ct.size });
        }
        ledger.relins += 1;
        ledger.estimated_time += self.table.relinearization;
        Ok(CostCiphertext { size: 2, ..*ct })
    }

    fn rescale(&self, ct: &CostCiphertext, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        if ct.level == 0 {
            return Err(HeError::DepthExhausted);
        }
        ledger.rescales += 1;
        ledger.estimated_time += self.table.rescale;
        Ok(CostCiphertext {
            level: ct.level - 1,
            scale: self.rescaled_scale(ct.scale, ct.level),
            size: ct.size,
        })
    }

    fn add_pt(&self, ct: &CostCiphertext, pt: &CostPlaintext, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        check_same_level(ct.level, pt.level)?;
        check_same_scale(ct.scale, pt.scale)?;
        ledger.pt_adds += 1;
        Ok(*ct)
    }

    fn add_ct(&self, a: &CostCiphertext, b: &CostCiphertext, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        check_same_level(a.level, b.level)?;
        check_same_scale(a.scale, b.scale)?;
        ledger.ct_adds += 1;
        Ok(CostCiphertext { size: a.size.max(b.size), ..*a })
    }

    fn rotate(&self, ct: &CostCiphertext, steps: i64, ledger: &mut OpLedger) -> Result<CostCiphertext, HeError> {
        if normalize_rotation(steps, self.slots) == 0 {
            return Ok(*ct);
        }
        if ct.size != 2 {
            return Err(HeError::InvalidSize { expected: 2, found: ct.size });
        }
        ledger.rotations += 1;
        Ok(*ct)
    }
}
