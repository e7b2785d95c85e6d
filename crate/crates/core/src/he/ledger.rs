use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Operation counters for one homomorphic evaluation.
///
/// `estimated_time` only accumulates the multiplication-class operations
/// (plaintext and ciphertext multiplications, relinearizations, rescales):
/// cost-table units for the cost model, wall-clock seconds for the exact backend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpLedger {
    pub plain_mults: u64,
    pub ciph_mults: u64,
    pub relins: u64,
    pub rescales: u64,
    pub rotations: u64,
    pub pt_adds: u64,
    pub ct_adds: u64,
    pub refreshes: u64,
    pub estimated_time: f64,
}

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counter tuple, ignoring time.
    pub fn counts(&self) -> [u64; 8] {
        [
            self.plain_mults,
            self.ciph_mults,
            self.relins,
            self.rescales,
            self.rotations,
            self.pt_adds,
            self.ct_adds,
            self.refreshes,
        ]
    }

    pub fn same_counts(&self, other: &Self) -> bool {
        self.counts() == other.counts()
    }

    pub fn total_mults(&self) -> u64 {
        self.plain_mults + self.ciph_mults
    }

    pub fn merge(&mut self, other: &Self) {
        *self += *other;
    }
}

impl AddAssign for OpLedger {
    fn add_assign(&mut self, o: Self) {
        self.plain_mults += o.plain_mults;
        self.ciph_mults += o.ciph_mults;
        self.relins += o.relins;
        self.rescales += o.rescales;
        self.rotations += o.rotations;
        self.pt_adds += o.pt_adds;
        self.ct_adds += o.ct_adds;
        self.refreshes += o.refreshes;
        self.estimated_time += o.estimated_time;
    }
}

impl Add for OpLedger {
    type Output = OpLedger;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for OpLedger {
    fn sum<I: Iterator<Item = OpLedger>>(iter: I) -> Self {
        iter.fold(OpLedger::default(), Add::add)
    }
}
