//! Paillier additively homomorphic encryption (`g = n + 1` variant) with a
//! signed fixed-point encoding for real-valued gradients.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MILLER_RABIN_ROUNDS: usize = 40;
pub const FIXED_POINT_BITS: u32 = 40;
pub const SUPPORTED_KEY_BITS: [usize; 3] = [512, 1024, 2048];

#[derive(Debug, Error, PartialEq)]
pub enum HeError {
    #[error("unsupported modulus size {0} (expected one of 512, 1024, 2048)")]
    UnsupportedKeySize(usize),
    #[error("ciphertexts were produced under different public keys")]
    KeyMismatch,
    #[error("plaintext does not fit below the modulus")]
    PlaintextTooLarge,
    #[error("fixed-point value {0} is out of range")]
    FixedPointRange(f64),
}

/// Public half of a Paillier key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    fingerprint: u64,
}

impl PublicKey {
    /// Rebuilds a public key from its modulus.
    pub fn from_modulus(n: BigUint) -> Self {
        Self::new(n)
    }

    fn new(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let digest = Sha256::digest(n.to_bytes_be());
        let fingerprint = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        Self { n, n_squared, fingerprint }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Bytes needed to carry one ciphertext on the wire.
    pub fn ciphertext_bytes(&self) -> usize {
        (self.n_squared.bits() as usize).div_ceil(8)
    }

    fn check(&self, c: &Ciphertext) -> Result<(), HeError> {
        if c.key != self.fingerprint {
            return Err(HeError::KeyMismatch);
        }
        Ok(())
    }

    /// `(1 + m n) r^n mod n^2`.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, HeError> {
        if m >= &self.n {
            return Err(HeError::PlaintextTooLarge);
        }
        let r = self.sample_unit(rng);
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: gm * rn % &self.n_squared,
            key: self.fingerprint,
        })
    }

    fn sample_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: &a.value * &b.value % &self.n_squared,
            key: self.fingerprint,
        })
    }

    /// In-place homomorphic accumulation, the hot path of histogram building.
    pub fn add_assign(&self, acc: &mut Ciphertext, c: &Ciphertext) -> Result<(), HeError> {
        self.check(acc)?;
        self.check(c)?;
        acc.value = &acc.value * &c.value % &self.n_squared;
        Ok(())
    }

    /// Multiplies the plaintext by `k`; negative scalars act modulo `n`.
    pub fn mul_plain(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext, HeError> {
        self.check(c)?;
        let exponent = signed_to_residue(k, &self.n);
        Ok(Ciphertext {
            value: c.value.modpow(&exponent, &self.n_squared),
            key: self.fingerprint,
        })
    }

    /// Encryption of zero with randomness 1, the additive identity.
    pub fn zero(&self) -> Ciphertext {
        Ciphertext {
            value: BigUint::one(),
            key: self.fingerprint,
        }
    }

    pub fn encode_signed(&self, v: &BigInt) -> Result<BigUint, HeError> {
        let half = &self.n >> 1u32;
        if v.magnitude() >= &half {
            return Err(HeError::PlaintextTooLarge);
        }
        Ok(signed_to_residue(v, &self.n))
    }

    /// Residues above `n/2` decode as negative.
    pub fn decode_signed(&self, m: &BigUint) -> BigInt {
        let half = &self.n >> 1u32;
        if m > &half {
            -BigInt::from_biguint(Sign::Plus, &self.n - m)
        } else {
            BigInt::from_biguint(Sign::Plus, m.clone())
        }
    }
}

fn signed_to_residue(v: &BigInt, n: &BigUint) -> BigUint {
    let n_signed = BigInt::from_biguint(Sign::Plus, n.clone());
    v.mod_floor(&n_signed).to_biguint().expect("mod_floor is non-negative")
}

/// Paillier ciphertext tagged with the fingerprint of its public key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    value: BigUint,
    key: u64,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }
}

#[derive(Debug, Clone)]
struct CrtParams {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    p_minus_1: BigUint,
    q_minus_1: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
    p_squared_inv_q_squared: BigUint,
    // n reduced modulo the group orders of (Z/p^2)* and (Z/q^2)*.
    n_mod_phi_p_squared: BigUint,
    n_mod_phi_q_squared: BigUint,
}

/// Paillier key pair with CRT-accelerated decryption.
#[derive(Debug, Clone)]
pub struct PaillierKeypair {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
    crt: CrtParams,
}

impl PaillierKeypair {
    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.crt.p, &self.crt.q)
    }

    fn from_primes(p: BigUint, q: BigUint) -> Self {
        let n = &p * &q;
        let public = PublicKey::new(n.clone());
        let p_minus_1 = &p - 1u32;
        let q_minus_1 = &q - 1u32;
        let lambda = p_minus_1.lcm(&q_minus_1);
        // With g = n + 1, L(g^lambda mod n^2) = lambda mod n.
        let mu = mod_inverse(&(&lambda % &n), &n).expect("lambda invertible mod n");
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = h_value(&p, &p_squared, &n);
        let hq = h_value(&q, &q_squared, &n);
        let p_inv_q = mod_inverse(&p, &q).expect("distinct primes");
        let p_squared_inv_q_squared = mod_inverse(&p_squared, &q_squared).expect("coprime squares");
        let n_mod_phi_p_squared = &n % (&p * &p_minus_1);
        let n_mod_phi_q_squared = &n % (&q * &q_minus_1);
        Self {
            public,
            lambda,
            mu,
            crt: CrtParams {
                p,
                q,
                p_squared,
                q_squared,
                p_minus_1,
                q_minus_1,
                hp,
                hq,
                p_inv_q,
                p_squared_inv_q_squared,
                n_mod_phi_p_squared,
                n_mod_phi_q_squared,
            },
        }
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, HeError> {
        self.public.check(c)?;
        let crt = &self.crt;
        let cp = &c.value % &crt.p_squared;
        let cq = &c.value % &crt.q_squared;
        let mp = l_function(&cp.modpow(&crt.p_minus_1, &crt.p_squared), &crt.p) * &crt.hp % &crt.p;
        let mq = l_function(&cq.modpow(&crt.q_minus_1, &crt.q_squared), &crt.q) * &crt.hq % &crt.q;
        Ok(crt_combine(&mp, &mq, &crt.p, &crt.q, &crt.p_inv_q))
    }

    /// Textbook `L(c^lambda mod n^2) * mu mod n`; kept as an independent
    /// route for cross-checking the CRT path.
    pub fn decrypt_textbook(&self, c: &Ciphertext) -> Result<BigUint, HeError> {
        self.public.check(c)?;
        let n = &self.public.n;
        let u = c.value.modpow(&self.lambda, &self.public.n_squared);
        Ok(l_function(&u, n) * &self.mu % n)
    }

    /// Encryption using the factorisation to exponentiate modulo `p^2` and
    /// `q^2` separately. Produces ciphertexts identical in distribution to
    /// [`PublicKey::encrypt`].
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, HeError> {
        let public = &self.public;
        if m >= &public.n {
            return Err(HeError::PlaintextTooLarge);
        }
        let crt = &self.crt;
        let r = public.sample_unit(rng);
        let gm = BigUint::one() + m * &public.n;
        let cp = (&gm % &crt.p_squared) * r.modpow(&crt.n_mod_phi_p_squared, &crt.p_squared) % &crt.p_squared;
        let cq = (&gm % &crt.q_squared) * r.modpow(&crt.n_mod_phi_q_squared, &crt.q_squared) % &crt.q_squared;
        let value = crt_combine(&cp, &cq, &crt.p_squared, &crt.q_squared, &crt.p_squared_inv_q_squared);
        Ok(Ciphertext { value, key: public.fingerprint })
    }
}

fn l_function(u: &BigUint, n: &BigUint) -> BigUint {
    (u - 1u32) / n
}

fn h_value(p: &BigUint, p_squared: &BigUint, n: &BigUint) -> BigUint {
    // g^(p-1) mod p^2 with g = n + 1 is 1 + (p-1) n mod p^2.
    let gp = (BigUint::one() + (p - 1u32) * n) % p_squared;
    mod_inverse(&l_function(&gp, p), p).expect("h invertible")
}

/// `x = a mod m1`, `x = b mod m2`, with `m1_inv = m1^-1 mod m2`.
fn crt_combine(a: &BigUint, b: &BigUint, m1: &BigUint, m2: &BigUint, m1_inv: &BigUint) -> BigUint {
    let a_mod = a % m2;
    let diff = if b >= &a_mod { b - &a_mod } else { m2 - (&a_mod - b) % m2 };
    let t = diff * m1_inv % m2;
    a + t * m1
}

pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from_biguint(Sign::Plus, a.clone());
    let m_signed = BigInt::from_biguint(Sign::Plus, m.clone());
    let ext = a.extended_gcd(&m_signed);
    if !ext.gcd.is_one() {
        return None;
    }
    ext.x.mod_floor(&m_signed).to_biguint()
}

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// Miller-Rabin with `rounds` random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in &SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().expect("n > 2");
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        // Top two bits set so the product of two such primes has 2*bits bits.
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

/// Deterministic key generation from `seed`.
pub fn keygen(bits: usize, seed: u64) -> Result<PaillierKeypair, HeError> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(HeError::UnsupportedKeySize(bits));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = (bits / 2) as u64;
    loop {
        let p = random_prime(half, &mut rng);
        let q = random_prime(half, &mut rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        if n.bits() as usize != bits {
            continue;
        }
        return Ok(PaillierKeypair::from_primes(p, q));
    }
}

/// Signed fixed-point value with `FIXED_POINT_BITS` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct FixedPoint(pub i128);

impl FixedPoint {
    pub const SCALE: f64 = (1u64 << FIXED_POINT_BITS) as f64;

    pub fn encode(x: f64) -> Result<Self, HeError> {
        let scaled = (x * Self::SCALE).round();
        // Leave ample headroom below i128::MAX for sums.
        if !scaled.is_finite() || scaled.abs() >= 2f64.powi(100) {
            return Err(HeError::FixedPointRange(x));
        }
        Ok(Self(scaled as i128))
    }

    pub fn decode(self) -> f64 {
        self.0 as f64 / Self::SCALE
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn to_bigint(self) -> BigInt {
        BigInt::from(self.0)
    }

    pub fn from_bigint(v: &BigInt) -> Option<Self> {
        v.to_i128().map(Self)
    }

    pub fn encrypt_with<R: RngCore + ?Sized>(
        self,
        key: &PaillierKeypair,
        rng: &mut R,
    ) -> Result<Ciphertext, HeError> {
        let m = key.public().encode_signed(&self.to_bigint())?;
        key.encrypt(&m, rng)
    }

    pub fn decrypt_with(key: &PaillierKeypair, c: &Ciphertext) -> Result<Self, HeError> {
        let m = key.decrypt(c)?;
        let signed = key.public().decode_signed(&m);
        Self::from_bigint(&signed).ok_or(HeError::FixedPointRange(f64::NAN))
    }
}

impl std::ops::Add for FixedPoint {
    type Output = FixedPoint;
    fn add(self, rhs: FixedPoint) -> FixedPoint {
        FixedPoint(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for FixedPoint {
    fn add_assign(&mut self, rhs: FixedPoint) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for FixedPoint {
    type Output = FixedPoint;
    fn sub(self, rhs: FixedPoint) -> FixedPoint {
        FixedPoint(self.0 - rhs.0)
    }
}

impl std::iter::Sum for FixedPoint {
    fn sum<I: Iterator<Item = FixedPoint>>(iter: I) -> FixedPoint {
        iter.fold(FixedPoint(0), |a, b| a + b)
    }
}
