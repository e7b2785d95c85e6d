//! Polynomials in residue-number-system form, one row per prime.

use super::arith::Modulus;

/// A polynomial of `Z_Q[X]/(X^n + 1)` stored as one residue row per prime of
/// a basis prefix. Whether rows hold coefficients or NTT evaluations is
/// tracked by the owner; ciphertext and key material are kept in NTT form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnsPoly {
    rows: Vec<Vec<u64>>,
}

impl RnsPoly {
    pub fn zero(rows: usize, degree: usize) -> Self {
        Self {
            rows: vec![vec![0u64; degree]; rows],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Self {
        Self { rows }
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn degree(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.rows[i]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Vec<u64>] {
        &mut self.rows
    }

    pub fn truncate(&mut self, rows: usize) {
        self.rows.truncate(rows);
    }

    pub fn truncated(&self, rows: usize) -> Self {
        Self {
            rows: self.rows[..rows].to_vec(),
        }
    }

    pub fn pop_row(&mut self) -> Option<Vec<u64>> {
        self.rows.pop()
    }

    pub fn push_row(&mut self, row: Vec<u64>) {
        self.rows.push(row);
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|&x| x == 0))
    }

    pub fn add_assign(&mut self, other: &Self, moduli: &[Modulus]) {
        for ((a, b), q) in self.rows.iter_mut().zip(&other.rows).zip(moduli) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = q.add(*x, y);
            }
        }
    }

    pub fn sub_assign(&mut self, other: &Self, moduli: &[Modulus]) {
        for ((a, b), q) in self.rows.iter_mut().zip(&other.rows).zip(moduli) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = q.sub(*x, y);
            }
        }
    }

    pub fn neg_assign(&mut self, moduli: &[Modulus]) {
        for (a, q) in self.rows.iter_mut().zip(moduli) {
            for x in a.iter_mut() {
                *x = q.neg(*x);
            }
        }
    }

    /// Pointwise product (both operands in NTT form).
    pub fn mul(&self, other: &Self, moduli: &[Modulus]) -> Self {
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .zip(moduli)
            .map(|((a, b), q)| a.iter().zip(b).map(|(&x, &y)| q.mul(x, y)).collect())
            .collect();
        Self { rows }
    }

    /// `self += a * b` pointwise.
    pub fn fma_assign(&mut self, a: &Self, b: &Self, moduli: &[Modulus]) {
        for (((acc, ra), rb), q) in self.rows.iter_mut().zip(&a.rows).zip(&b.rows).zip(moduli) {
            for ((x, &y), &z) in acc.iter_mut().zip(ra).zip(rb) {
                *x = q.add(*x, q.mul(y, z));
            }
        }
    }

    /// Multiplies row `i` by `scalars[i]`.
    pub fn mul_scalars_assign(&mut self, scalars: &[u64], moduli: &[Modulus]) {
        for ((a, &s), q) in self.rows.iter_mut().zip(scalars).zip(moduli) {
            let ss = q.shoup(s);
            for x in a.iter_mut() {
                *x = q.mul_shoup(*x, s, ss);
            }
        }
    }

    /// Applies a slot permutation (automorphism in NTT form): `out[i] = in[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| perm.iter().map(|&j| r[j]).collect())
            .collect();
        Self { rows }
    }
}
