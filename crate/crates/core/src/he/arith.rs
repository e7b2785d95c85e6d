//! Word-sized modular arithmetic for NTT-friendly primes below 2^62.

/// A prime modulus with precomputed Barrett constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus {
    value: u64,
    // floor(2^128 / q) split into (low, high) words
    ratio: (u64, u64),
}

impl Modulus {
    pub fn new(value: u64) -> Self {
        assert!(value > 1 && value < (1 << 62), "modulus out of range");
        let ratio = u128::MAX / value as u128;
        // u128::MAX / q == floor(2^128 / q) unless q divides 2^128, impossible for odd q > 1
        Self {
            value,
            ratio: (ratio as u64, (ratio >> 64) as u64),
        }
    }

    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn bits(&self) -> f64 {
        (self.value as f64).log2()
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.value {
            s - self.value
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.value - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.value - a
        }
    }

    /// Barrett reduction of a full 128-bit value.
    #[inline]
    pub fn reduce_u128(&self, z: u128) -> u64 {
        let zlo = z as u64;
        let zhi = (z >> 64) as u64;
        let (rlo, rhi) = self.ratio;
        let lo_lo = (zlo as u128 * rlo as u128) >> 64;
        let lo_hi = zlo as u128 * rhi as u128;
        let hi_lo = zhi as u128 * rlo as u128;
        let mid = lo_lo + (lo_hi as u64 as u128) + (hi_lo as u64 as u128);
        let qhat = (zhi as u128 * rhi as u128) + (lo_hi >> 64) + (hi_lo >> 64) + (mid >> 64);
        let mut r = z.wrapping_sub(qhat.wrapping_mul(self.value as u128)) as u64;
        while r >= self.value {
            r -= self.value;
        }
        r
    }

    #[inline]
    pub fn reduce(&self, a: u64) -> u64 {
        if a >= self.value {
            a % self.value
        } else {
            a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    /// Precomputed quotient for repeated multiplication by a fixed operand.
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.value as u128) as u64
    }

    #[inline]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let q = ((a as u128 * w_shoup as u128) >> 64) as u64;
        let r = a.wrapping_mul(w).wrapping_sub(q.wrapping_mul(self.value));
        if r >= self.value {
            r - self.value
        } else {
            r
        }
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse modulo a prime.
    pub fn inv(&self, a: u64) -> u64 {
        debug_assert!(self.reduce(a) != 0);
        self.pow(a, self.value - 2)
    }

    /// Residue of a signed integer.
    #[inline]
    pub fn from_i64(&self, a: i64) -> u64 {
        if a >= 0 {
            self.reduce(a as u64)
        } else {
            self.neg(self.reduce(a.unsigned_abs()))
        }
    }

    /// Residue of an arbitrary-magnitude integer-valued f64.
    pub fn from_f64(&self, x: f64) -> u64 {
        if x.abs() < 9.0e18 {
            return self.from_i64(x as i64);
        }
        let bits = x.to_bits();
        let exponent = ((bits >> 52) & 0x7ff) as i64 - 1075;
        let mantissa = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
        debug_assert!(exponent > 0);
        let r = self.mul(self.reduce(mantissa), self.pow(2, exponent as u64));
        if x < 0.0 {
            self.neg(r)
        } else {
            r
        }
    }

    /// Centered representative in (-q/2, q/2].
    #[inline]
    pub fn centered(&self, a: u64) -> i64 {
        if a > self.value / 2 {
            -((self.value - a) as i64)
        } else {
            a as i64
        }
    }
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod_u64(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod_u64(acc, b, m);
        }
        b = mul_mod_u64(b, b, m);
        e >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod_u64(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Largest primes below `2^bits` congruent to 1 mod `2 * ring_degree`,
/// skipping any listed in `exclude`.
pub fn ntt_primes(bits: u32, ring_degree: usize, count: usize, exclude: &[u64]) -> Option<Vec<u64>> {
    if !(10..=61).contains(&bits) {
        return None;
    }
    let step = 2 * ring_degree as u64;
    let upper = 1u64 << bits;
    let mut candidate = upper - (upper % step) + 1;
    if candidate >= upper {
        candidate -= step;
    }
    let lower = 1u64 << (bits - 1);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if candidate < lower {
            return None;
        }
        if is_prime(candidate) && !exclude.contains(&candidate) {
            out.push(candidate);
        }
        candidate -= step;
    }
    Some(out)
}

/// A primitive `order`-th root of unity modulo the prime `q` (order | q - 1).
pub fn primitive_root(q: &Modulus, order: u64) -> Option<u64> {
    let qv = q.value();
    if !(qv - 1).is_multiple_of(order) {
        return None;
    }
    let cofactor = (qv - 1) / order;
    for g in 2..qv.min(10_000) {
        let root = q.pow(g, cofactor);
        // primitive iff root^(order/2) == -1 for power-of-two orders
        if q.pow(root, order / 2) == qv - 1 {
            return Some(root);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn finds_ntt_friendly_primes() {
        let primes = ntt_primes(40, 1 << 13, 3, &[]).unwrap();
        assert_eq!(primes.len(), 3);
        for p in primes {
            assert!(is_prime(p));
            assert_eq!(p % (1 << 14), 1);
            assert!(p < 1 << 40 && p > 1 << 39);
        }
    }

    #[test]
    fn primality_small_cases() {
        let naive = |n: u64| n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d));
        for n in 0..5000u64 {
            assert_eq!(is_prime(n), naive(n), "n = {n}");
        }
    }

    #[test]
    fn root_has_exact_order() {
        let q = Modulus::new(ntt_primes(50, 1 << 12, 1, &[]).unwrap()[0]);
        let root = primitive_root(&q, 1 << 13).unwrap();
        assert_eq!(q.pow(root, 1 << 13), 1);
        assert_eq!(q.pow(root, 1 << 12), q.value() - 1);
    }

    #[test]
    fn from_f64_large_values() {
        let q = Modulus::new(ntt_primes(40, 1024, 1, &[]).unwrap()[0]);
        let x = 2f64.powi(80) * 3.0;
        let expected = q.mul(3, q.pow(2, 80));
        assert_eq!(q.from_f64(x), expected);
        assert_eq!(q.from_f64(-x), q.neg(expected));
    }

    proptest! {
        #[test]
        fn barrett_matches_u128_remainder(a in any::<u64>(), b in any::<u64>(), bits in 20u32..62) {
            let q = Modulus::new(((1u64 << bits) - 1) | 1);
            let (a, b) = (a % q.value(), b % q.value());
            let expected = ((a as u128 * b as u128) % q.value() as u128) as u64;
            prop_assert_eq!(q.mul(a, b), expected);
            let w = b;
            prop_assert_eq!(q.mul_shoup(a, w, q.shoup(w)), expected);
        }
    }
}
