//! Negacyclic number-theoretic transform over `Z_q[X]/(X^n + 1)`.
//!
//! The forward transform leaves its output in bit-reversed order: slot `i`
//! holds the evaluation of the input at `psi^(2 * brv(i) + 1)`, where `psi`
//! is the primitive `2n`-th root chosen for the modulus.

use super::arith::{primitive_root, Modulus};

pub(crate) fn bit_reverse(x: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        x.reverse_bits() >> (usize::BITS - bits)
    }
}

#[derive(Clone, Debug)]
pub struct NttTable {
    modulus: Modulus,
    degree: usize,
    log_degree: u32,
    psi: u64,
    psi_brv: Vec<u64>,
    psi_brv_shoup: Vec<u64>,
    psi_inv_brv: Vec<u64>,
    psi_inv_brv_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

impl NttTable {
    pub fn new(modulus: Modulus, degree: usize) -> Option<Self> {
        assert!(degree.is_power_of_two() && degree >= 2);
        let log_degree = degree.trailing_zeros();
        let psi = primitive_root(&modulus, 2 * degree as u64)?;
        let psi_inv = modulus.inv(psi);
        let mut psi_brv = vec![0u64; degree];
        let mut psi_inv_brv = vec![0u64; degree];
        let (mut pw, mut pw_inv) = (1u64, 1u64);
        for i in 0..degree {
            let r = bit_reverse(i, log_degree);
            psi_brv[r] = pw;
            psi_inv_brv[r] = pw_inv;
            pw = modulus.mul(pw, psi);
            pw_inv = modulus.mul(pw_inv, psi_inv);
        }
        let psi_brv_shoup = psi_brv.iter().map(|&w| modulus.shoup(w)).collect();
        let psi_inv_brv_shoup = psi_inv_brv.iter().map(|&w| modulus.shoup(w)).collect();
        let n_inv = modulus.inv(degree as u64);
        Some(Self {
            modulus,
            degree,
            log_degree,
            psi,
            psi_brv,
            psi_brv_shoup,
            psi_inv_brv,
            psi_inv_brv_shoup,
            n_inv,
            n_inv_shoup: modulus.shoup(n_inv),
        })
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn psi(&self) -> u64 {
        self.psi
    }

    /// Exponent `e` such that forward slot `i` is the evaluation at `psi^e`.
    pub fn slot_exponent(&self, i: usize) -> usize {
        2 * bit_reverse(i, self.log_degree) + 1
    }

    /// Harvey butterflies with lazy reduction: intermediate values stay in
    /// `[0, 4q)` and are fully reduced once at the end.
    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.degree);
        let q = self.modulus.value();
        let two_q = 2 * q;
        let mut t = self.degree;
        let mut m = 1;
        while m < self.degree {
            t >>= 1;
            for i in 0..m {
                let j1 = 2 * i * t;
                let w = self.psi_brv[m + i];
                let ws = self.psi_brv_shoup[m + i];
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let mut u = *x;
                    if u >= two_q {
                        u -= two_q;
                    }
                    let v = mul_shoup_lazy(*y, w, ws, q);
                    *x = u + v;
                    *y = u + two_q - v;
                }
            }
            m <<= 1;
        }
        for x in a.iter_mut() {
            let mut v = *x;
            if v >= two_q {
                v -= two_q;
            }
            if v >= q {
                v -= q;
            }
            *x = v;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.degree);
        let q = self.modulus.value();
        let two_q = 2 * q;
        let mut t = 1;
        let mut m = self.degree;
        while m > 1 {
            let h = m >> 1;
            let mut j1 = 0;
            for i in 0..h {
                let w = self.psi_inv_brv[h + i];
                let ws = self.psi_inv_brv_shoup[h + i];
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (u, v) = (*x, *y);
                    let mut s = u + v;
                    if s >= two_q {
                        s -= two_q;
                    }
                    *x = s;
                    *y = mul_shoup_lazy(u + two_q - v, w, ws, q);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m = h;
        }
        let q_mod = &self.modulus;
        for x in a.iter_mut() {
            *x = q_mod.mul_shoup(*x, self.n_inv, self.n_inv_shoup);
        }
    }
}

/// `a * w mod q` in `[0, 2q)`, for any `a < 2^64`.
#[inline(always)]
fn mul_shoup_lazy(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let hi = ((a as u128 * w_shoup as u128) >> 64) as u64;
    a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(q))
}
