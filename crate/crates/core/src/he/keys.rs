use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::context::CkksContext;
use super::params::CkksParams;
use super::rns::RnsPoly;
use super::HeError;

pub(crate) fn sample_ternary<R: Rng>(rng: &mut R, n: usize) -> Vec<i64> {
    (0..n).map(|_| rng.random_range(-1i64..=1)).collect()
}

/// Rounded Gaussian, truncated at six standard deviations.
pub(crate) fn sample_error<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<i64> {
    let normal = Normal::new(0.0, std).expect("positive deviation");
    let bound = 6.0 * std;
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= bound {
                break x.round() as i64;
            }
        })
        .collect()
}

pub(crate) fn sample_uniform<R: Rng>(ctx: &CkksContext, rng: &mut R, rows: &[usize]) -> RnsPoly {
    let n = ctx.degree();
    RnsPoly::from_rows(
        rows.iter()
            .map(|&i| {
                let q = ctx.moduli()[i].value();
                (0..n).map(|_| rng.random_range(0..q)).collect()
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct SecretKey {
    /// NTT form over every prime, special prime included.
    pub(crate) poly: RnsPoly,
}

#[derive(Clone, Debug)]
pub struct PublicKey {
    pub(crate) b: RnsPoly,
    pub(crate) a: RnsPoly,
}

/// Key-switching material: one `(b, a)` pair per ciphertext prime, each over
/// the full basis including the special prime.
#[derive(Clone, Debug)]
pub struct SwitchingKey {
    pub(crate) b: Vec<RnsPoly>,
    pub(crate) a: Vec<RnsPoly>,
}

#[derive(Clone, Debug)]
pub struct KeySet {
    ctx: Arc<CkksContext>,
    seed: u64,
    pub(crate) secret: SecretKey,
    pub(crate) public: PublicKey,
    pub(crate) relin: SwitchingKey,
    pub(crate) rotations: BTreeMap<usize, SwitchingKey>,
}

/// Generates secret, public and relinearization keys; deterministic per seed.
pub fn keygen(params: &CkksParams, seed: u64) -> Result<KeySet, HeError> {
    let ctx = CkksContext::new(params.clone())?;
    KeySet::generate(ctx, seed)
}

impl KeySet {
    pub fn generate(ctx: Arc<CkksContext>, seed: u64) -> Result<Self, HeError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = ctx.degree();
        let all_rows: Vec<usize> = (0..ctx.moduli().len()).collect();
        let ct_rows: Vec<usize> = (0..ctx.special_index()).collect();
        let std = ctx.params().error_std();

        let s = sample_ternary(&mut rng, n);
        let secret = SecretKey {
            poly: ctx.poly_from_small(&s, &all_rows),
        };

        // uniform residues are uniform in either representation; sample in NTT form directly
        let a_ntt = sample_uniform(&ctx, &mut rng, &ct_rows);
        let e = ctx.poly_from_small(&sample_error(&mut rng, n, std), &ct_rows);
        let moduli = &ctx.moduli()[..ct_rows.len()];
        let mut b = a_ntt.mul(&secret.poly.truncated(ct_rows.len()), moduli);
        b.neg_assign(moduli);
        b.add_assign(&e, moduli);
        let public = PublicKey { b, a: a_ntt };

        let s_sq = secret.poly.mul(&secret.poly, ctx.moduli());
        let relin = switching_key(&ctx, &secret, &s_sq, &mut rng);

        Ok(Self {
            ctx,
            seed,
            secret,
            public,
            relin,
            rotations: BTreeMap::new(),
        })
    }

    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    /// Adds Galois keys for the given left-rotation amounts (taken modulo
    /// the slot count; zero needs no key).
    pub fn add_rotation_keys<I: IntoIterator<Item = i64>>(&mut self, steps: I) {
        let slots = self.ctx.slot_count();
        for step in steps {
            let step = super::backend::normalize_rotation(step, slots);
            if step == 0 || self.rotations.contains_key(&step) {
                continue;
            }
            let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
            rng.set_stream(step as u64 + 1);
            let perm = self.ctx.galois_permutation(self.ctx.galois_element(step));
            let rotated_secret = self.secret.poly.permuted(&perm);
            let key = switching_key(&self.ctx, &self.secret, &rotated_secret, &mut rng);
            self.rotations.insert(step, key);
        }
    }

    /// Rotation amounts (normalized) for which keys exist.
    pub fn rotation_steps(&self) -> Vec<usize> {
        self.rotations.keys().copied().collect()
    }

    pub fn has_rotation(&self, step: usize) -> bool {
        step == 0 || self.rotations.contains_key(&step)
    }
}

/// Key switching from `target` to the secret key: for digit `j`,
/// `b_j = -a_j s + e_j + P * [j == i] * target (mod q_i)`.
fn switching_key<R: Rng>(ctx: &CkksContext, secret: &SecretKey, target: &RnsPoly, rng: &mut R) -> SwitchingKey {
    let n = ctx.degree();
    let all_rows: Vec<usize> = (0..ctx.moduli().len()).collect();
    let moduli = ctx.moduli();
    let p = moduli[ctx.special_index()].value();
    let std = ctx.params().error_std();
    let mut bs = Vec::new();
    let mut as_ = Vec::new();
    for j in 0..ctx.special_index() {
        let a = sample_uniform(ctx, rng, &all_rows);
        let e = ctx.poly_from_small(&sample_error(rng, n, std), &all_rows);
        let mut b = a.mul(&secret.poly, moduli);
        b.neg_assign(moduli);
        b.add_assign(&e, moduli);
        let qj = &moduli[j];
        let factor = qj.reduce(p);
        for (x, &t) in b.row_mut(j).iter_mut().zip(target.row(j)) {
            *x = qj.add(*x, qj.mul(factor, t));
        }
        bs.push(b);
        as_.push(a);
    }
    SwitchingKey { b: bs, a: as_ }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::params::Preset;

    #[test]
    fn keygen_is_deterministic_per_seed() {
        let params = Preset::Ring12Depth2.params();
        let a = keygen(&params, 5).unwrap();
        let b = keygen(&params, 5).unwrap();
        let c = keygen(&params, 6).unwrap();
        assert_eq!(a.secret.poly, b.secret.poly);
        assert_eq!(a.public.b, b.public.b);
        assert_eq!(a.relin.b[0], b.relin.b[0]);
        assert_ne!(a.secret.poly, c.secret.poly);
    }

    #[test]
    fn error_samples_are_bounded() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let e = sample_error(&mut rng, 10_000, 3.2);
        assert!(e.iter().all(|x| x.abs() <= 19));
        let mean = e.iter().sum::<i64>() as f64 / e.len() as f64;
        let var = e.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / e.len() as f64;
        assert!(mean.abs() < 0.15);
        assert!((var.sqrt() - 3.2).abs() < 0.15);
    }
}
