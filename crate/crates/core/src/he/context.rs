//! Precomputed tables shared by every object built from one parameter set:
//! NTT tables, the canonical-embedding FFT, CRT reconstruction and the
//! constants used by key switching and rescaling.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::arith::Modulus;
use super::ntt::{bit_reverse, NttTable};
use super::params::CkksParams;
use super::rns::RnsPoly;
use super::HeError;

pub struct CkksContext {
    params: CkksParams,
    moduli: Vec<Modulus>,
    tables: Vec<NttTable>,
    fft_forward: Arc<dyn Fft<f64>>,
    fft_inverse: Arc<dyn Fft<f64>>,
    /// FFT bin holding slot `j` (evaluation at `zeta^(5^j)`).
    slot_bins: Vec<usize>,
    /// FFT bin holding the conjugate of slot `j`.
    conj_bins: Vec<usize>,
    zeta_powers: Vec<Complex64>,
    /// `garner_weights[i][j]` = (q_0 * .. * q_{i-1}) mod q_j, for j >= i.
    garner_weights: Vec<Vec<u64>>,
    /// `garner_inverses[i]` = (q_0 * .. * q_{i-1})^{-1} mod q_i.
    garner_inverses: Vec<u64>,
    /// Prefix products q_0 * .. * q_{i-1} as floats.
    garner_float_weights: Vec<f64>,
    /// Special prime inverse modulo each ciphertext prime.
    special_inv: Vec<u64>,
    /// `rescale_inv[l][i]` = q_l^{-1} mod q_i for i < l.
    rescale_inv: Vec<Vec<u64>>,
    galois_perms: Mutex<HashMap<usize, Arc<Vec<usize>>>>,
}

impl std::fmt::Debug for CkksContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CkksContext").field("params", &self.params).finish_non_exhaustive()
    }
}

impl CkksContext {
    pub fn new(params: CkksParams) -> Result<Arc<Self>, HeError> {
        params.validate()?;
        let n = params.ring_degree();
        let moduli: Vec<Modulus> = params.moduli().iter().map(|&q| Modulus::new(q)).collect();
        let tables = moduli
            .iter()
            .map(|&q| NttTable::new(q, n).ok_or_else(|| HeError::InvalidParameters(format!("no root of unity mod {}", q.value()))))
            .collect::<Result<Vec<_>, _>>()?;

        let mut planner = FftPlanner::new();
        let fft_forward = planner.plan_fft_forward(n);
        let fft_inverse = planner.plan_fft_inverse(n);
        let two_n = 2 * n;
        let slots = n / 2;
        let mut slot_bins = Vec::with_capacity(slots);
        let mut conj_bins = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            slot_bins.push((g - 1) / 2);
            conj_bins.push((two_n - g - 1) / 2);
            g = g * 5 % two_n;
        }
        let zeta_powers = (0..n)
            .map(|k| Complex64::from_polar(1.0, std::f64::consts::PI * k as f64 / n as f64))
            .collect();

        let ct_count = moduli.len() - 1;
        let mut garner_weights = Vec::with_capacity(ct_count);
        let mut garner_inverses = Vec::with_capacity(ct_count);
        let mut garner_float_weights = Vec::with_capacity(ct_count);
        let mut float_weight = 1.0f64;
        for i in 0..ct_count {
            let row: Vec<u64> = (0..ct_count)
                .map(|j| {
                    if j < i {
                        0
                    } else {
                        moduli[..i].iter().fold(1u64, |acc, q| moduli[j].mul(acc, moduli[j].reduce(q.value())))
                    }
                })
                .collect();
            garner_inverses.push(moduli[i].inv(row[i]));
            garner_weights.push(row);
            garner_float_weights.push(float_weight);
            float_weight *= moduli[i].value() as f64;
        }

        let special = moduli[ct_count].value();
        let special_inv = moduli[..ct_count].iter().map(|q| q.inv(q.reduce(special))).collect();
        let rescale_inv = (0..ct_count)
            .map(|l| (0..l).map(|i| moduli[i].inv(moduli[i].reduce(moduli[l].value()))).collect())
            .collect();

        Ok(Arc::new(Self {
            params,
            moduli,
            tables,
            fft_forward,
            fft_inverse,
            slot_bins,
            conj_bins,
            zeta_powers,
            garner_weights,
            garner_inverses,
            garner_float_weights,
            special_inv,
            rescale_inv,
            galois_perms: Mutex::new(HashMap::new()),
        }))
    }

    pub fn params(&self) -> &CkksParams {
        &self.params
    }

    pub fn degree(&self) -> usize {
        self.params.ring_degree()
    }

    pub fn slot_count(&self) -> usize {
        self.params.slot_count()
    }

    pub fn max_level(&self) -> usize {
        self.params.depth()
    }

    /// All primes including the special prime.
    pub fn moduli(&self) -> &[Modulus] {
        &self.moduli
    }

    pub fn special_index(&self) -> usize {
        self.moduli.len() - 1
    }

    /// Ciphertext primes active at `level`.
    pub fn level_moduli(&self, level: usize) -> &[Modulus] {
        &self.moduli[..=level]
    }

    pub fn table(&self, i: usize) -> &NttTable {
        &self.tables[i]
    }

    /// log2 of the ciphertext modulus at `level`.
    pub fn level_modulus_bits(&self, level: usize) -> f64 {
        self.level_moduli(level).iter().map(Modulus::bits).sum()
    }

    pub fn to_ntt(&self, poly: &mut RnsPoly) {
        for (i, row) in poly.rows_mut().iter_mut().enumerate() {
            self.tables[i].forward(row);
        }
    }

    pub fn from_ntt(&self, poly: &mut RnsPoly) {
        for (i, row) in poly.rows_mut().iter_mut().enumerate() {
            self.tables[i].inverse(row);
        }
    }

    /// Residues of integer-valued coefficients on the first `rows` primes, NTT form.
    pub fn poly_from_integers(&self, coeffs: &[f64], rows: usize) -> RnsPoly {
        let mut poly = RnsPoly::from_rows(
            self.moduli[..rows]
                .iter()
                .map(|q| coeffs.iter().map(|&c| q.from_f64(c)).collect())
                .collect(),
        );
        self.to_ntt(&mut poly);
        poly
    }

    pub fn poly_from_small(&self, coeffs: &[i64], rows: &[usize]) -> RnsPoly {
        let mut out = RnsPoly::from_rows(
            rows.iter()
                .map(|&i| {
                    let q = &self.moduli[i];
                    let mut row: Vec<u64> = coeffs.iter().map(|&c| q.from_i64(c)).collect();
                    self.tables[i].forward(&mut row);
                    row
                })
                .collect(),
        );
        if out.row_count() == 0 {
            out = RnsPoly::zero(0, self.degree());
        }
        out
    }

    /// Real coefficient vector whose canonical embedding equals `values` in
    /// the first slots (remaining slots zero).
    pub fn embed_inverse(&self, values: &[f64]) -> Vec<f64> {
        let n = self.degree();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (j, &v) in values.iter().enumerate() {
            buf[self.slot_bins[j]] = Complex64::new(v, 0.0);
            buf[self.conj_bins[j]] = Complex64::new(v, 0.0);
        }
        self.fft_forward.process(&mut buf);
        let inv_n = 1.0 / n as f64;
        buf.iter()
            .zip(&self.zeta_powers)
            .map(|(x, z)| (x * z.conj()).re * inv_n)
            .collect()
    }

    /// Canonical embedding of a real coefficient vector, restricted to slots.
    pub fn embed(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = coeffs
            .iter()
            .zip(&self.zeta_powers)
            .map(|(&c, z)| z * c)
            .collect();
        self.fft_inverse.process(&mut buf);
        self.slot_bins.iter().map(|&b| buf[b].re).collect()
    }

    /// Centered integer value of each coefficient (coefficient form input),
    /// converted to floating point via mixed-radix reconstruction.
    pub fn centered_coefficients(&self, poly: &RnsPoly) -> Vec<f64> {
        let rows = poly.row_count();
        let n = poly.degree();
        let mut out = vec![0.0f64; n];
        let mut digits = vec![0i64; rows];
        for (k, slot) in out.iter_mut().enumerate() {
            for i in 0..rows {
                let q = &self.moduli[i];
                // residue of the partial reconstruction sum_{t<i} digits[t] * W_t mod q_i
                let mut partial = 0u64;
                for (t, &d) in digits[..i].iter().enumerate() {
                    partial = q.add(partial, q.mul(q.from_i64(d), self.garner_weights[t][i]));
                }
                let diff = q.sub(poly.row(i)[k], partial);
                digits[i] = q.centered(q.mul(diff, self.garner_inverses[i]));
            }
            *slot = digits
                .iter()
                .zip(&self.garner_float_weights)
                .rev()
                .fold(0.0, |acc, (&d, &w)| acc + d as f64 * w);
        }
        out
    }

    /// Slot permutation in NTT form for the automorphism `X -> X^galois`.
    pub fn galois_permutation(&self, galois: usize) -> Arc<Vec<usize>> {
        let mut cache = self.galois_perms.lock().unwrap();
        cache
            .entry(galois)
            .or_insert_with(|| {
                let n = self.degree();
                let log_n = n.trailing_zeros();
                let two_n = 2 * n;
                let perm = (0..n)
                    .map(|i| {
                        let e = 2 * bit_reverse(i, log_n) + 1;
                        let target = e * galois % two_n;
                        bit_reverse((target - 1) / 2, log_n)
                    })
                    .collect();
                Arc::new(perm)
            })
            .clone()
    }

    /// Galois element realising a left rotation of the slots by `steps`.
    pub fn galois_element(&self, steps: usize) -> usize {
        let two_n = 2 * self.degree();
        let mut g = 1usize;
        for _ in 0..steps % self.slot_count() {
            g = g * 5 % two_n;
        }
        g
    }

    /// Switches a level-`level` polynomial (NTT form) to the secret the key
    /// was generated for; returns the two ciphertext components to add.
    pub fn key_switch(&self, poly: &RnsPoly, key_b: &[RnsPoly], key_a: &[RnsPoly], level: usize) -> (RnsPoly, RnsPoly) {
        let l1 = level + 1;
        let sp = self.special_index();
        let n = self.degree();
        let mut coeff = poly.clone();
        self.from_ntt(&mut coeff);

        let target_index = |t: usize| if t < l1 { t } else { sp };
        let mut acc0 = RnsPoly::zero(l1 + 1, n);
        let mut acc1 = RnsPoly::zero(l1 + 1, n);
        let mut lifted = vec![0u64; n];
        // products are below 2^124, so up to 16 digits fit before reducing
        debug_assert!(l1 < 16);
        let mut wide0 = vec![0u128; n];
        let mut wide1 = vec![0u128; n];
        for t in 0..=l1 {
            let mi = target_index(t);
            let q = &self.moduli[mi];
            wide0.fill(0);
            wide1.fill(0);
            for j in 0..l1 {
                let row: &[u64] = if mi == j {
                    poly.row(j)
                } else {
                    for (dst, &x) in lifted.iter_mut().zip(coeff.row(j)) {
                        *dst = if x >= q.value() { q.reduce_u128(x as u128) } else { x };
                    }
                    self.tables[mi].forward(&mut lifted);
                    &lifted
                };
                let kb = key_b[j].row(mi);
                let ka = key_a[j].row(mi);
                for (((w0, w1), &x), (&b, &a)) in wide0.iter_mut().zip(wide1.iter_mut()).zip(row).zip(kb.iter().zip(ka)) {
                    *w0 += x as u128 * b as u128;
                    *w1 += x as u128 * a as u128;
                }
            }
            for (dst, &w) in acc0.row_mut(t).iter_mut().zip(&wide0) {
                *dst = q.reduce_u128(w);
            }
            for (dst, &w) in acc1.row_mut(t).iter_mut().zip(&wide1) {
                *dst = q.reduce_u128(w);
            }
        }
        (self.mod_down(acc0, level), self.mod_down(acc1, level))
    }

    /// Divides a polynomial over `q_0..q_level, P` by `P` with rounding.
    fn mod_down(&self, mut poly: RnsPoly, level: usize) -> RnsPoly {
        let sp = self.special_index();
        let p = self.moduli[sp];
        let mut last = poly.pop_row().expect("special row present");
        self.tables[sp].inverse(&mut last);
        let mut tmp = vec![0u64; last.len()];
        for i in 0..=level {
            let q = &self.moduli[i];
            for (dst, &x) in tmp.iter_mut().zip(&last) {
                *dst = q.from_i64(p.centered(x));
            }
            self.tables[i].forward(&mut tmp);
            let inv = self.special_inv[i];
            let inv_s = q.shoup(inv);
            for (y, &t) in poly.row_mut(i).iter_mut().zip(&tmp) {
                *y = q.mul_shoup(q.sub(*y, t), inv, inv_s);
            }
        }
        poly
    }

    /// Divides a level-`level` polynomial by `q_level` with rounding, dropping one prime.
    pub fn rescale_poly(&self, poly: &RnsPoly, level: usize) -> RnsPoly {
        debug_assert!(level > 0);
        let ql = self.moduli[level];
        let mut out = poly.truncated(level);
        let mut last = poly.row(level).to_vec();
        self.tables[level].inverse(&mut last);
        let mut tmp = vec![0u64; last.len()];
        for i in 0..level {
            let q = &self.moduli[i];
            for (dst, &x) in tmp.iter_mut().zip(&last) {
                *dst = q.from_i64(ql.centered(x));
            }
            self.tables[i].forward(&mut tmp);
            let inv = self.rescale_inv[level][i];
            let inv_s = q.shoup(inv);
            for (y, &t) in out.row_mut(i).iter_mut().zip(&tmp) {
                *y = q.mul_shoup(q.sub(*y, t), inv, inv_s);
            }
        }
        out
    }
}
