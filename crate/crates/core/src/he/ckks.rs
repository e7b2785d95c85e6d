//! Exact RNS-CKKS evaluation with per-ciphertext analytic noise bounds and
//! secret-key (owner side) measurement of the real noise.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::backend::{check_same_level, check_same_scale, normalize_rotation, HeBackend};
use super::context::CkksContext;
use super::keys::{sample_error, sample_ternary, KeySet, SwitchingKey};
use super::params::CkksParams;
use super::rns::RnsPoly;
use super::{HeError, OpLedger};

#[derive(Clone, Debug, PartialEq)]
pub struct Plaintext {
    poly: RnsPoly,
    level: usize,
    scale: f64,
    /// log2 of the largest coefficient magnitude.
    norm_bits: f64,
}

impl Plaintext {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn poly(&self) -> &RnsPoly {
        &self.poly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ciphertext {
    polys: Vec<RnsPoly>,
    level: usize,
    scale: f64,
    /// Analytic bound on log2 of the noise magnitude.
    noise_bits: f64,
    /// Analytic bound on log2 of the message coefficients.
    msg_bits: f64,
}

impl Ciphertext {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn size(&self) -> usize {
        self.polys.len()
    }

    /// Conservative analytic noise estimate, in bits.
    pub fn noise_estimate(&self) -> f64 {
        self.noise_bits
    }
}

/// log2(2^a + 2^b)
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (1.0 + (lo - hi).exp2()).log2()
}

/// CKKS backend holding the owner's key set. Encryption randomness comes
/// from a seeded stream, so evaluations are reproducible per seed.
pub struct ExactBackend {
    ctx: Arc<CkksContext>,
    keys: KeySet,
    rng: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for ExactBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExactBackend")
            .field("params", self.ctx.params())
            .field("rotations", &self.keys.rotation_steps())
            .finish()
    }
}

impl ExactBackend {
    pub fn new(params: &CkksParams, seed: u64) -> Result<Self, HeError> {
        let ctx = CkksContext::new(params.clone())?;
        let keys = KeySet::generate(ctx.clone(), seed)?;
        Ok(Self::from_keys(keys, seed))
    }

    pub fn with_rotations<I: IntoIterator<Item = i64>>(params: &CkksParams, seed: u64, steps: I) -> Result<Self, HeError> {
        let mut backend = Self::new(params, seed)?;
        backend.add_rotation_keys(steps);
        Ok(backend)
    }

    pub fn from_keys(keys: KeySet, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0xe5c);
        Self {
            ctx: keys.context().clone(),
            keys,
            rng: Mutex::new(rng),
        }
    }

    pub fn add_rotation_keys<I: IntoIterator<Item = i64>>(&mut self, steps: I) {
        self.keys.add_rotation_keys(steps);
    }

    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    pub fn keys(&self) -> &KeySet {
        &self.keys
    }

    pub fn params(&self) -> &CkksParams {
        self.ctx.params()
    }

    fn fresh_noise_bits(&self) -> f64 {
        let n = self.ctx.degree() as f64;
        let std = self.ctx.params().error_std();
        (6.0 * std * (1.0 + 4.0 * n / 3.0).sqrt()).log2()
    }

    fn key_switch_noise_bits(&self, level: usize) -> f64 {
        let n = self.ctx.degree() as f64;
        let std = self.ctx.params().error_std();
        let qmax = self.ctx.level_moduli(level).iter().map(|q| q.value() as f64).fold(0.0, f64::max);
        let p = self.ctx.params().special_modulus() as f64;
        let digits = (level + 1) as f64;
        log_add((digits * qmax * 6.0 * std * n.sqrt() / p).log2(), self.rounding_noise_bits())
    }

    fn rounding_noise_bits(&self) -> f64 {
        let n = self.ctx.degree() as f64;
        (0.5 * (1.0 + 6.0 * (2.0 * n / 3.0).sqrt())).log2()
    }

    fn check_level(&self, level: usize) -> Result<(), HeError> {
        if level > self.ctx.max_level() {
            return Err(HeError::InvalidLevel { level, max: self.ctx.max_level() });
        }
        Ok(())
    }

    /// Encrypts a plaintext at its own level with the public key.
    pub fn encrypt_plaintext(&self, pt: &Plaintext) -> Result<Ciphertext, HeError> {
        let ctx = &self.ctx;
        let n = ctx.degree();
        let rows: Vec<usize> = (0..=pt.level).collect();
        let moduli = ctx.level_moduli(pt.level);
        let std = ctx.params().error_std();
        let (v, e0, e1) = {
            let mut rng = self.rng.lock().unwrap();
            (
                sample_ternary(&mut *rng, n),
                sample_error(&mut *rng, n, std),
                sample_error(&mut *rng, n, std),
            )
        };
        let v = ctx.poly_from_small(&v, &rows);
        let mut c0 = v.mul(&self.keys.public.b.truncated(rows.len()), moduli);
        c0.add_assign(&ctx.poly_from_small(&e0, &rows), moduli);
        c0.add_assign(&pt.poly, moduli);
        let mut c1 = v.mul(&self.keys.public.a.truncated(rows.len()), moduli);
        c1.add_assign(&ctx.poly_from_small(&e1, &rows), moduli);
        Ok(Ciphertext {
            polys: vec![c0, c1],
            level: pt.level,
            scale: pt.scale,
            noise_bits: self.fresh_noise_bits(),
            msg_bits: pt.norm_bits,
        })
    }

    /// Encodes at the top level and default scale, then encrypts.
    pub fn encrypt_values(&self, values: &[f64]) -> Result<Ciphertext, HeError> {
        let pt = self.encode_values(values, self.ctx.max_level(), self.ctx.params().scale())?;
        self.encrypt_plaintext(&pt)
    }

    pub fn encode_values(&self, values: &[f64], level: usize, scale: f64) -> Result<Plaintext, HeError> {
        self.check_level(level)?;
        let slots = self.ctx.slot_count();
        if values.len() > slots {
            return Err(HeError::TooManyValues { values: values.len(), slots });
        }
        if !(scale.is_finite() && scale > 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(HeError::InvalidParameters("non-finite value or scale".into()));
        }
        let coeffs: Vec<f64> = self
            .ctx
            .embed_inverse(values)
            .into_iter()
            .map(|c| (c * scale).round())
            .collect();
        let max = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let norm_bits = if max > 0.0 { max.log2() } else { f64::NEG_INFINITY };
        let capacity = self.ctx.level_modulus_bits(level) - 1.0;
        if norm_bits >= capacity {
            return Err(HeError::EncodeOverflow { bits: norm_bits, capacity });
        }
        Ok(Plaintext {
            poly: self.ctx.poly_from_integers(&coeffs, level + 1),
            level,
            scale,
            norm_bits,
        })
    }

    /// Secret-key decryption to a plaintext at the ciphertext's level and scale.
    pub fn decrypt(&self, ct: &Ciphertext) -> Plaintext {
        let rows = ct.level + 1;
        let moduli = self.ctx.level_moduli(ct.level);
        let s = self.keys.secret.poly.truncated(rows);
        let mut acc = ct.polys[0].clone();
        let mut s_pow = s.clone();
        for c in &ct.polys[1..] {
            acc.fma_assign(c, &s_pow, moduli);
            s_pow = s_pow.mul(&s, moduli);
        }
        let mut coeff = acc.clone();
        self.ctx.from_ntt(&mut coeff);
        let max = self.ctx.centered_coefficients(&coeff).iter().fold(0.0f64, |m, c| m.max(c.abs()));
        Plaintext {
            poly: acc,
            level: ct.level,
            scale: ct.scale,
            norm_bits: if max > 0.0 { max.log2() } else { f64::NEG_INFINITY },
        }
    }

    pub fn decode(&self, pt: &Plaintext) -> Vec<f64> {
        let mut coeff = pt.poly.clone();
        self.ctx.from_ntt(&mut coeff);
        let ints = self.ctx.centered_coefficients(&coeff);
        let inv = 1.0 / pt.scale;
        let scaled: Vec<f64> = ints.iter().map(|c| c * inv).collect();
        self.ctx.embed(&scaled)
    }

    pub fn decrypt_values(&self, ct: &Ciphertext) -> Vec<f64> {
        self.decode(&self.decrypt(ct))
    }

    /// Measured headroom, in bits, between the decrypted coefficients and
    /// half the current modulus. Fails when no headroom is left.
    pub fn noise_budget(&self, ct: &Ciphertext) -> Result<f64, HeError> {
        let pt = self.decrypt(ct);
        let budget = self.ctx.level_modulus_bits(ct.level) - 1.0 - pt.norm_bits.max(0.0);
        if budget < 1.0 {
            return Err(HeError::Undecryptable { budget });
        }
        Ok(budget)
    }

    /// log2 of the largest coefficient of `decrypt(ct) - expected`.
    pub fn measured_noise_bits(&self, ct: &Ciphertext, expected: &Plaintext) -> Result<f64, HeError> {
        check_same_level(ct.level, expected.level)?;
        let moduli = self.ctx.level_moduli(ct.level);
        let mut diff = self.decrypt(ct).poly;
        diff.sub_assign(&expected.poly, moduli);
        self.ctx.from_ntt(&mut diff);
        let max = self.ctx.centered_coefficients(&diff).iter().fold(0.0f64, |m, c| m.max(c.abs()));
        Ok(if max > 0.0 { max.log2() } else { f64::NEG_INFINITY })
    }

    /// Exact sum of two plaintexts at the same level and scale.
    pub fn add_plaintexts(&self, a: &Plaintext, b: &Plaintext) -> Result<Plaintext, HeError> {
        check_same_level(a.level, b.level)?;
        check_same_scale(a.scale, b.scale)?;
        let mut poly = a.poly.clone();
        poly.add_assign(&b.poly, self.ctx.level_moduli(a.level));
        Ok(Plaintext {
            poly,
            level: a.level,
            scale: a.scale,
            norm_bits: log_add(a.norm_bits, b.norm_bits),
        })
    }

    /// Stand-in for the interactive non-linear layer boundary: decrypts and
    /// re-encrypts the slots at the top level with fresh noise.
    pub fn refresh(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        self.noise_budget(ct)?;
        let values = self.decrypt_values(ct);
        let out = self.encrypt_values(&values)?;
        ledger.refreshes += 1;
        Ok(out)
    }

    fn apply_switch(&self, poly: &RnsPoly, key: &SwitchingKey, level: usize) -> (RnsPoly, RnsPoly) {
        self.ctx.key_switch(poly, &key.b, &key.a, level)
    }
}

fn timed<T>(ledger: &mut OpLedger, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    ledger.estimated_time += start.elapsed().as_secs_f64();
    out
}

impl HeBackend for ExactBackend {
    type Plaintext = Plaintext;
    type Ciphertext = Ciphertext;

    fn slot_count(&self) -> usize {
        self.ctx.slot_count()
    }

    fn max_level(&self) -> usize {
        self.ctx.max_level()
    }

    fn scale(&self) -> f64 {
        self.ctx.params().scale()
    }

    fn rescaled_scale(&self, scale: f64, level: usize) -> f64 {
        scale / self.ctx.moduli()[level].value() as f64
    }

    fn encode(&self, values: &[f64], level: usize, scale: f64) -> Result<Plaintext, HeError> {
        self.encode_values(values, level, scale)
    }

    fn encrypt(&self, pt: &Plaintext) -> Result<Ciphertext, HeError> {
        self.encrypt_plaintext(pt)
    }

    fn ciphertext_level(&self, ct: &Ciphertext) -> usize {
        ct.level
    }

    fn ciphertext_scale(&self, ct: &Ciphertext) -> f64 {
        ct.scale
    }

    fn ciphertext_size(&self, ct: &Ciphertext) -> usize {
        ct.polys.len()
    }

    fn mul_pt(&self, ct: &Ciphertext, pt: &Plaintext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        check_same_level(ct.level, pt.level)?;
        if ct.size() != 2 {
            return Err(HeError::InvalidSize { expected: 2, found: ct.size() });
        }
        let moduli = self.ctx.level_moduli(ct.level);
        let polys = timed(ledger, || ct.polys.iter().map(|c| c.mul(&pt.poly, moduli)).collect());
        ledger.plain_mults += 1;
        let half_log_n = 0.5 * (self.ctx.degree() as f64).log2();
        Ok(Ciphertext {
            polys,
            level: ct.level,
            scale: ct.scale * pt.scale,
            noise_bits: ct.noise_bits + pt.norm_bits.max(0.0) + half_log_n,
            msg_bits: ct.msg_bits + pt.norm_bits + half_log_n,
        })
    }

    fn mul_ct(&self, a: &Ciphertext, b: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        check_same_level(a.level, b.level)?;
        for ct in [a, b] {
            if ct.size() != 2 {
                return Err(HeError::InvalidSize { expected: 2, found: ct.size() });
            }
        }
        let moduli = self.ctx.level_moduli(a.level);
        let polys = timed(ledger, || {
            let d0 = a.polys[0].mul(&b.polys[0], moduli);
            let mut d1 = a.polys[0].mul(&b.polys[1], moduli);
            d1.fma_assign(&a.polys[1], &b.polys[0], moduli);
            let d2 = a.polys[1].mul(&b.polys[1], moduli);
            vec![d0, d1, d2]
        });
        ledger.ciph_mults += 1;
        let half_log_n = 0.5 * (self.ctx.degree() as f64).log2();
        let noise = log_add(
            log_add(a.msg_bits + b.noise_bits, b.msg_bits + a.noise_bits),
            a.noise_bits + b.noise_bits,
        ) + half_log_n;
        Ok(Ciphertext {
            polys,
            level: a.level,
            scale: a.scale * b.scale,
            noise_bits: noise,
            msg_bits: a.msg_bits + b.msg_bits + half_log_n,
        })
    }

    fn relinearize(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        if ct.size() != 3 {
            return Err(HeError::InvalidSize { expected: 3, found: ct.size() });
        }
        let moduli = self.ctx.level_moduli(ct.level);
        let polys = timed(ledger, || {
            let (k0, k1) = self.apply_switch(&ct.polys[2], &self.keys.relin, ct.level);
            let mut c0 = ct.polys[0].clone();
            c0.add_assign(&k0, moduli);
            let mut c1 = ct.polys[1].clone();
            c1.add_assign(&k1, moduli);
            vec![c0, c1]
        });
        ledger.relins += 1;
        Ok(Ciphertext {
            polys,
            noise_bits: log_add(ct.noise_bits, self.key_switch_noise_bits(ct.level)),
            ..ct.clone()
        })
    }

    fn rescale(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        if ct.level == 0 {
            return Err(HeError::DepthExhausted);
        }
        let level = ct.level;
        let polys = timed(ledger, || ct.polys.iter().map(|p| self.ctx.rescale_poly(p, level)).collect());
        ledger.rescales += 1;
        let q_bits = self.ctx.moduli()[level].bits();
        Ok(Ciphertext {
            polys,
            level: level - 1,
            scale: ct.scale / self.ctx.moduli()[level].value() as f64,
            noise_bits: log_add(ct.noise_bits - q_bits, self.rounding_noise_bits()),
            msg_bits: ct.msg_bits - q_bits,
        })
    }

    fn add_pt(&self, ct: &Ciphertext, pt: &Plaintext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        check_same_level(ct.level, pt.level)?;
        check_same_scale(ct.scale, pt.scale)?;
        let moduli = self.ctx.level_moduli(ct.level);
        let mut polys = ct.polys.clone();
        polys[0].add_assign(&pt.poly, moduli);
        ledger.pt_adds += 1;
        Ok(Ciphertext {
            polys,
            noise_bits: log_add(ct.noise_bits, -1.0),
            msg_bits: log_add(ct.msg_bits, pt.norm_bits),
            ..ct.clone()
        })
    }

    fn add_ct(&self, a: &Ciphertext, b: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        check_same_level(a.level, b.level)?;
        check_same_scale(a.scale, b.scale)?;
        let moduli = self.ctx.level_moduli(a.level);
        let (long, short) = if a.size() >= b.size() { (a, b) } else { (b, a) };
        let mut polys = long.polys.clone();
        for (p, q) in polys.iter_mut().zip(&short.polys) {
            p.add_assign(q, moduli);
        }
        ledger.ct_adds += 1;
        Ok(Ciphertext {
            polys,
            level: a.level,
            scale: a.scale,
            noise_bits: log_add(a.noise_bits, b.noise_bits),
            msg_bits: log_add(a.msg_bits, b.msg_bits),
        })
    }

    fn rotate(&self, ct: &Ciphertext, steps: i64, ledger: &mut OpLedger) -> Result<Ciphertext, HeError> {
        let step = normalize_rotation(steps, self.ctx.slot_count());
        if step == 0 {
            return Ok(ct.clone());
        }
        if ct.size() != 2 {
            return Err(HeError::InvalidSize { expected: 2, found: ct.size() });
        }
        let key = self.keys.rotations.get(&step).ok_or(HeError::MissingRotationKey(steps))?;
        let perm = self.ctx.galois_permutation(self.ctx.galois_element(step));
        let moduli = self.ctx.level_moduli(ct.level);
        let r0 = ct.polys[0].permuted(&perm);
        let r1 = ct.polys[1].permuted(&perm);
        let (k0, k1) = self.apply_switch(&r1, key, ct.level);
        let mut c0 = r0;
        c0.add_assign(&k0, moduli);
        ledger.rotations += 1;
        Ok(Ciphertext {
            polys: vec![c0, k1],
            noise_bits: log_add(ct.noise_bits, self.key_switch_noise_bits(ct.level)),
            ..ct.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::he::Preset;
    use proptest::prelude::*;

    fn backend() -> &'static ExactBackend {
        static B: OnceLock<ExactBackend> = OnceLock::new();
        B.get_or_init(|| ExactBackend::with_rotations(&Preset::Ring13Depth2.params(), 7, [1, -1, 3]).unwrap())
    }

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn slot_count_at_ring_2_13() {
        assert_eq!(backend().slot_count(), 4096);
        assert_eq!(backend().max_level(), 2);
    }

    #[test]
    fn encode_roundtrip() {
        let b = backend();
        let v = [1.0, 2.0, -0.5];
        let pt = b.encode(&v, 2, b.scale()).unwrap();
        assert!(max_err(&b.decode(&pt)[..3], &v) < 1e-4);
        let zero = b.encode(&[0.0; 16], 2, b.scale()).unwrap();
        assert!(zero.poly().is_zero());
        let broadcast = b.encode(&vec![-7.25; 4096], 2, b.scale()).unwrap();
        assert!(b.decode(&broadcast).iter().all(|x| (x + 7.25).abs() < 1e-4));
    }

    #[test]
    fn encode_rejects_overflow_and_excess_values() {
        let b = backend();
        assert!(matches!(b.encode(&[1.0; 4097], 2, b.scale()), Err(HeError::TooManyValues { .. })));
        assert!(matches!(b.encode(&[1e13], 0, b.scale()), Err(HeError::EncodeOverflow { .. })));
    }

    #[test]
    fn arithmetic_examples() {
        let b = backend();
        let mut ledger = OpLedger::new();
        let ct = b.encrypt_values(&[2.0, 3.0]).unwrap();
        let pt = b.encode(&[4.0, 5.0], 2, b.scale()).unwrap();
        let prod = b.rescale(&b.mul_pt(&ct, &pt, &mut ledger).unwrap(), &mut ledger).unwrap();
        assert!(max_err(&b.decrypt_values(&prod)[..2], &[8.0, 15.0]) < 1e-3);

        let ones = b.encode(&vec![1.0; 4096], 2, b.scale()).unwrap();
        let same = b.mul_pt(&ct, &ones, &mut ledger).unwrap();
        assert!(max_err(&b.decrypt_values(&same)[..2], &[2.0, 3.0]) < 1e-3);

        let sum = b.add_pt(&b.encrypt_values(&[1.0, 2.0]).unwrap(), &b.encode(&[10.0, 20.0], 2, b.scale()).unwrap(), &mut ledger).unwrap();
        assert!(max_err(&b.decrypt_values(&sum)[..2], &[11.0, 22.0]) < 1e-4);

        let mut ledger = OpLedger::new();
        let x = b.encrypt_values(&[2.0]).unwrap();
        let y = b.encrypt_values(&[3.0]).unwrap();
        let xy = b.mul_ct(&x, &y, &mut ledger).unwrap();
        assert_eq!(xy.size(), 3);
        let xy = b.relinearize(&xy, &mut ledger).unwrap();
        assert_eq!((ledger.ciph_mults, ledger.relins), (1, 1));
        let xy = b.rescale(&xy, &mut ledger).unwrap();
        assert!((b.decrypt_values(&xy)[0] - 6.0).abs() < 1e-3);
        assert!(matches!(b.relinearize(&xy, &mut ledger), Err(HeError::InvalidSize { .. })));
    }

    #[test]
    fn rotation() {
        let b = backend();
        let mut ledger = OpLedger::new();
        let v: Vec<f64> = (0..4096).map(|i| (i % 17) as f64).collect();
        let ct = b.encrypt_values(&v).unwrap();
        assert_eq!(b.rotate(&ct, 0, &mut ledger).unwrap(), ct);
        assert_eq!(b.rotate(&ct, 4096, &mut ledger).unwrap(), ct);
        assert_eq!(ledger.rotations, 0);
        for step in [1i64, -1, 3] {
            let out = b.decrypt_values(&b.rotate(&ct, step, &mut ledger).unwrap());
            let expected: Vec<f64> = (0..4096).map(|j| v[(j as i64 + step).rem_euclid(4096) as usize]).collect();
            assert!(max_err(&out, &expected) < 1e-3, "step {step}");
        }
        assert_eq!(b.rotate(&ct, 2, &mut ledger), Err(HeError::MissingRotationKey(2)));
    }

    #[test]
    fn depth_guard() {
        let b = backend();
        let mut ledger = OpLedger::new();
        let mut ct = b.encrypt_values(&[1.5]).unwrap();
        for _ in 0..b.max_level() {
            let sq = b.relinearize(&b.mul_ct(&ct, &ct, &mut ledger).unwrap(), &mut ledger).unwrap();
            ct = b.rescale(&sq, &mut ledger).unwrap();
        }
        assert!((b.decrypt_values(&ct)[0] - 1.5f64.powi(4)).abs() < 1e-2);
        let sq = b.relinearize(&b.mul_ct(&ct, &ct, &mut ledger).unwrap(), &mut ledger).unwrap();
        assert_eq!(b.rescale(&sq, &mut ledger), Err(HeError::DepthExhausted));
    }

    #[test]
    fn noise_budget_and_refresh() {
        let b = backend();
        let mut ledger = OpLedger::new();
        let fresh = b.encrypt_values(&[1.25, -0.5]).unwrap();
        let top = b.noise_budget(&fresh).unwrap();
        assert!(top > 0.0);
        let mut ct = fresh.clone();
        let mut last = top;
        for _ in 0..b.max_level() {
            let sq = b.relinearize(&b.mul_ct(&ct, &ct, &mut ledger).unwrap(), &mut ledger).unwrap();
            ct = b.rescale(&sq, &mut ledger).unwrap();
            let budget = b.noise_budget(&ct).unwrap();
            assert!(budget < last);
            last = budget;
        }
        let refreshed = b.refresh(&ct, &mut ledger).unwrap();
        assert_eq!(ledger.refreshes, 1);
        assert_eq!(refreshed.level(), b.max_level());
        assert!((b.noise_budget(&refreshed).unwrap() - top).abs() < 2.0);
        assert!(max_err(&b.decrypt_values(&refreshed)[..2], &b.decrypt_values(&ct)[..2]) < 1e-4);
    }

    #[test]
    fn mul_pt_rescale_costs_about_log_scale() {
        let b = backend();
        let mut ledger = OpLedger::new();
        let ct = b.encrypt_values(&[3.0, -2.0]).unwrap();
        let pt = b.encode(&[1.0, 1.0], 2, b.scale()).unwrap();
        let before = b.noise_budget(&ct).unwrap();
        let after = b.noise_budget(&b.rescale(&b.mul_pt(&ct, &pt, &mut ledger).unwrap(), &mut ledger).unwrap()).unwrap();
        let drop = before - after;
        assert!((drop - 40.0).abs() < 3.0, "drop {drop}");
    }

    #[test]
    fn analytic_noise_bounds_measured_noise() {
        let b = backend();
        let pt = b.encode(&[0.5; 64], 2, b.scale()).unwrap();
        let ct = b.encrypt(&pt).unwrap();
        assert!(b.measured_noise_bits(&ct, &pt).unwrap() <= ct.noise_estimate());
    }

    #[test]
    fn encryption_is_deterministic_per_seed() {
        let params = Preset::Ring12Depth2.params();
        let a = ExactBackend::new(&params, 3).unwrap();
        let c = ExactBackend::new(&params, 3).unwrap();
        assert_eq!(a.encrypt_values(&[1.0]).unwrap(), c.encrypt_values(&[1.0]).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn homomorphism(v in prop::collection::vec(-10.0f64..10.0, 32), w in prop::collection::vec(-10.0f64..10.0, 32)) {
            let b = backend();
            let mut l = OpLedger::new();
            let s = b.scale();
            let cv = b.encrypt_values(&v).unwrap();
            let cw = b.encrypt_values(&w).unwrap();
            let pw = b.encode(&w, 2, s).unwrap();
            let sum: Vec<f64> = v.iter().zip(&w).map(|(x, y)| x + y).collect();
            let prod: Vec<f64> = v.iter().zip(&w).map(|(x, y)| x * y).collect();
            prop_assert!(max_err(&b.decrypt_values(&b.add_pt(&cv, &pw, &mut l).unwrap())[..32], &sum) < 1e-2);
            prop_assert!(max_err(&b.decrypt_values(&b.add_ct(&cv, &cw, &mut l).unwrap())[..32], &sum) < 1e-2);
            prop_assert!(max_err(&b.decrypt_values(&b.mul_pt(&cv, &pw, &mut l).unwrap())[..32], &prod) < 1e-2);
            let cc = b.rescale(&b.relinearize(&b.mul_ct(&cv, &cw, &mut l).unwrap(), &mut l).unwrap(), &mut l).unwrap();
            prop_assert!(max_err(&b.decrypt_values(&cc)[..32], &prod) < 1e-2);
            let rot = b.decrypt_values(&b.rotate(&cv, 1, &mut l).unwrap());
            prop_assert!(max_err(&rot[..31], &v[1..]) < 1e-2);
        }

        #[test]
        fn add_ct_noise_at_most_one_extra_bit(v in prop::collection::vec(-10.0f64..10.0, 16), w in prop::collection::vec(-10.0f64..10.0, 16)) {
            let b = backend();
            let s = b.scale();
            let pv = b.encode(&v, 2, s).unwrap();
            let pw = b.encode(&w, 2, s).unwrap();
            let cv = b.encrypt(&pv).unwrap();
            let cw = b.encrypt(&pw).unwrap();
            let sum = b.add_ct(&cv, &cw, &mut OpLedger::new()).unwrap();
            let nv = b.measured_noise_bits(&cv, &pv).unwrap();
            let nw = b.measured_noise_bits(&cw, &pw).unwrap();
            let ns = b.measured_noise_bits(&sum, &b.add_plaintexts(&pv, &pw).unwrap()).unwrap();
            prop_assert!(ns <= nv.max(nw) + 1.0);
        }
    }
}
