//! Commuting transformation family: exponentiation modulo a fixed public
//! prime. Exponents coprime to p-1 permute the nonzero residues, any two
//! keys commute, and the inverse exponent undoes the forward one, which is
//! everything the three-stage exchange needs. Applied element-wise to a
//! symbol stream; this is a protocol study artifact, not a production
//! cipher, and makes no hardness claims.

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransformError {
    #[error("modulus {0} is not an odd prime")]
    NotPrime(u64),
    #[error("modulus {modulus} cannot lift symbol value {value}: need p > value + 1")]
    DomainTooSmall { modulus: u64, value: u64 },
    #[error("exponent {exponent} shares a factor with {order}; not invertible")]
    NonInvertibleExponent { exponent: u64, order: u64 },
    #[error("exponent {exponent} outside [1, {max}]")]
    ExponentOutOfRange { exponent: u64, max: u64 },
    #[error("domain mismatch: modulus {left} vs {right}")]
    DomainMismatch { left: u64, right: u64 },
    #[error("stream element {element} outside [1, {max}]")]
    ElementOutOfRange { element: u64, max: u64 },
    #[error("residue {0} does not decode to a byte")]
    ResidueNotAByte(u64),
    #[error("malformed key line '{0}': expected 'p=<int> a=<int>'")]
    MalformedKeyLine(String),
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    (u128::from(a) * u128::from(b) % u128::from(m)) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Inverse of `a` modulo `m` when gcd(a, m) = 1.
fn mod_inverse(a: u64, m: u64) -> Option<u64> {
    let (mut old_r, mut r) = (i128::from(a), i128::from(m));
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    Some(old_s.rem_euclid(i128::from(m)) as u64)
}

/// Deterministic Miller-Rabin; the fixed witness set decides primality for
/// every u64.
fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n.is_multiple_of(p) {
            return false;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        r += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..r - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Default modulus; its residues cover every byte value.
pub const BYTE_MODULUS: u64 = 65537;

/// The public residue domain all keys and streams of one run share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransformDomain {
    modulus: u64,
}

impl TransformDomain {
    pub fn new(modulus: u64) -> Result<Self, TransformError> {
        if modulus < 3 || !is_prime(modulus) {
            return Err(TransformError::NotPrime(modulus));
        }
        Ok(TransformDomain { modulus })
    }

    /// The default byte-lifting domain, p = 65537.
    pub fn for_bytes() -> Self {
        TransformDomain {
            modulus: BYTE_MODULUS,
        }
    }

    pub fn modulus(self) -> u64 {
        self.modulus
    }

    /// Multiplicative group order, p - 1.
    pub fn order(self) -> u64 {
        self.modulus - 1
    }
}

/// A secret key of the family: the exponent and its inverse modulo p-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformKey {
    exponent: u64,
    inverse_exponent: u64,
    domain: TransformDomain,
}

impl TransformKey {
    pub fn new(domain: TransformDomain, exponent: u64) -> Result<Self, TransformError> {
        let order = domain.order();
        if exponent == 0 || exponent > domain.modulus() - 2 {
            return Err(TransformError::ExponentOutOfRange {
                exponent,
                max: domain.modulus() - 2,
            });
        }
        let inverse_exponent = mod_inverse(exponent, order).ok_or(
            TransformError::NonInvertibleExponent {
                exponent,
                order,
            },
        )?;
        Ok(TransformKey {
            exponent,
            inverse_exponent,
            domain,
        })
    }

    /// Draws a uniform valid key: rejection-sample exponents in [1, p-2]
    /// until one is coprime to p-1.
    pub fn generate(domain: TransformDomain, rng: &mut impl Rng) -> Self {
        loop {
            let exponent = rng.random_range(1..=domain.modulus() - 2);
            if gcd(exponent, domain.order()) == 1 {
                return TransformKey::new(domain, exponent)
                    .expect("coprime exponent in range is always valid");
            }
        }
    }

    pub fn exponent(&self) -> u64 {
        self.exponent
    }

    pub fn inverse_exponent(&self) -> u64 {
        self.inverse_exponent
    }

    pub fn domain(&self) -> TransformDomain {
        self.domain
    }

    /// The forward direction alone, as provisioned to a party that may apply
    /// but not undo the transformation.
    pub fn forward(&self) -> DirectedKey {
        DirectedKey {
            exponent: self.exponent,
            domain: self.domain,
        }
    }

    /// The inverse direction alone.
    pub fn inverse(&self) -> DirectedKey {
        DirectedKey {
            exponent: self.inverse_exponent,
            domain: self.domain,
        }
    }

    /// Renders the `p=<int> a=<int>` key line.
    pub fn to_key_line(&self) -> String {
        format!("p={} a={}", self.domain.modulus(), self.exponent)
    }

    /// Parses a `p=<int> a=<int>` key line.
    pub fn from_key_line(line: &str) -> Result<Self, TransformError> {
        let mut p = None;
        let mut a = None;
        for field in line.split_whitespace() {
            match field.split_once('=') {
                Some(("p", v)) => p = v.parse::<u64>().ok(),
                Some(("a", v)) => a = v.parse::<u64>().ok(),
                _ => return Err(TransformError::MalformedKeyLine(line.to_string())),
            }
        }
        match (p, a) {
            (Some(p), Some(a)) => TransformKey::new(TransformDomain::new(p)?, a),
            _ => Err(TransformError::MalformedKeyLine(line.to_string())),
        }
    }
}

/// Reproducible key generation from a bare seed.
pub fn keygen_from_seed(domain: TransformDomain, seed: u64) -> TransformKey {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    TransformKey::generate(domain, &mut rng)
}

/// One direction of a key: exponentiation only, no way back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedKey {
    exponent: u64,
    domain: TransformDomain,
}

impl DirectedKey {
    pub fn domain(&self) -> TransformDomain {
        self.domain
    }

    pub fn transform(&self, stream: &SymbolStream) -> Result<SymbolStream, TransformError> {
        if stream.domain() != self.domain {
            return Err(TransformError::DomainMismatch {
                left: self.domain.modulus(),
                right: stream.domain().modulus(),
            });
        }
        let elements = stream
            .elements()
            .iter()
            .map(|&x| pow_mod(x, self.exponent, self.domain.modulus()))
            .collect();
        Ok(SymbolStream {
            elements,
            domain: self.domain,
        })
    }
}

/// An ordered stream of nonzero residues mod p; the wire form of a message
/// under the transformation family.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolStream {
    elements: Vec<u64>,
    domain: TransformDomain,
}

impl SymbolStream {
    pub fn new(elements: Vec<u64>, domain: TransformDomain) -> Result<Self, TransformError> {
        for &x in &elements {
            if x == 0 || x >= domain.modulus() {
                return Err(TransformError::ElementOutOfRange {
                    element: x,
                    max: domain.modulus() - 1,
                });
            }
        }
        Ok(SymbolStream { elements, domain })
    }

    pub fn elements(&self) -> &[u64] {
        &self.elements
    }

    pub fn domain(&self) -> TransformDomain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

impl fmt::Display for SymbolStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}:", self.domain.modulus())?;
        for (i, x) in self.elements.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{}", x)?;
        }
        Ok(())
    }
}

/// Lifts message bytes into the domain, byte b -> residue b+1 (zero is not a
/// group element).
pub fn lift(message: &[u8], domain: TransformDomain) -> Result<SymbolStream, TransformError> {
    let elements = message
        .iter()
        .map(|&b| {
            let value = u64::from(b);
            if value + 1 >= domain.modulus() {
                Err(TransformError::DomainTooSmall {
                    modulus: domain.modulus(),
                    value,
                })
            } else {
                Ok(value + 1)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SymbolStream { elements, domain })
}

/// Inverse of [`lift`]: residue r -> byte r-1.
pub fn unlift(stream: &SymbolStream) -> Result<Vec<u8>, TransformError> {
    stream
        .elements()
        .iter()
        .map(|&r| {
            if (1..=256).contains(&r) {
                Ok((r - 1) as u8)
            } else {
                Err(TransformError::ResidueNotAByte(r))
            }
        })
        .collect()
}

/// Applies the key forward: x -> x^a mod p, element-wise.
pub fn apply(key: &TransformKey, stream: &SymbolStream) -> Result<SymbolStream, TransformError> {
    key.forward().transform(stream)
}

/// Undoes the key: x -> x^(a^-1) mod p, element-wise.
pub fn invert(key: &TransformKey, stream: &SymbolStream) -> Result<SymbolStream, TransformError> {
    key.inverse().transform(stream)
}
