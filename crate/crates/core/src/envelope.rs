//! Symbolic authenticated-encryption terms and the per-simulation key,
//! nonce, and clock services behind them.
//!
//! Encryption here is ideal: an `Enc` term is opaque to anyone without the
//! exact key identifier, decryption with the wrong key fails loudly, and
//! ciphertexts compare by value so replays are recognizable. That keeps the
//! secrecy and replay checks exact and deterministic. A byte-level backend
//! can be slotted in through [`ConcreteCipher`], but nothing in the
//! simulator depends on one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::RngCore;
use thiserror::Error;

use crate::grammar::ProductionSequence;
use crate::ids::PartyId;
use crate::share::Share;
use crate::transform::SymbolStream;

/// Identifies a symmetric key in the registry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(String);

impl KeyId {
    pub fn new(name: impl Into<String>) -> Self {
        KeyId(name.into())
    }

    /// The long-term key a principal shares with the KDC.
    pub fn long_term(principal: &PartyId) -> Self {
        KeyId(format!("K_{}", principal))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A registered symmetric key and the parties allowed to hold it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymKey {
    pub id: KeyId,
    pub owners: BTreeSet<PartyId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("key '{0}' is not registered")]
    UnknownKey(KeyId),
    #[error("key '{0}' is already registered")]
    DuplicateKey(KeyId),
    #[error("decryption failed: ciphertext is not under key '{used}'")]
    WrongKey { used: KeyId },
    #[error("term is not a ciphertext")]
    NotCiphertext,
    #[error("ciphertext rejected: {0}")]
    Rejected(String),
}

/// Registry of every key a simulation knows about. Session keys get unique
/// identifiers per mint.
#[derive(Debug, Default, Clone)]
pub struct KeyRegistry {
    keys: BTreeMap<KeyId, SymKey>,
    session_counter: u32,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, key: SymKey) -> Result<(), EnvelopeError> {
        if self.keys.contains_key(&key.id) {
            return Err(EnvelopeError::DuplicateKey(key.id));
        }
        self.keys.insert(key.id.clone(), key);
        Ok(())
    }

    /// Mints a fresh session key whose allowed holders are the KDC plus the
    /// parties it will be distributed to.
    pub fn fresh_session_key(&mut self, holders: impl IntoIterator<Item = PartyId>) -> KeyId {
        self.session_counter += 1;
        let id = KeyId::new(format!("K_s{}", self.session_counter));
        let mut owners: BTreeSet<PartyId> = holders.into_iter().collect();
        owners.insert(PartyId::kdc());
        self.keys.insert(
            id.clone(),
            SymKey {
                id: id.clone(),
                owners,
            },
        );
        id
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn get(&self, id: &KeyId) -> Option<&SymKey> {
        self.keys.get(id)
    }

    pub fn keys(&self) -> impl Iterator<Item = &SymKey> {
        self.keys.values()
    }
}

/// Single-use freshness token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce {
    pub value: u64,
    pub issuer: PartyId,
}

/// Simulation logical time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn tick(self) -> u64 {
        self.0
    }

    /// Ticks elapsed since `earlier`; zero if `earlier` is in the future.
    pub fn age_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

/// An indivisible protocol value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Atom {
    Party(PartyId),
    Nonce(Nonce),
    Time(Timestamp),
    Share(Share),
    Key(KeyId),
    Stream(SymbolStream),
    Sequence(ProductionSequence),
    Text(String),
}

/// A symbolic protocol term: atoms, tuples, and opaque ciphertexts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Atom(Atom),
    Tuple(Vec<Term>),
    Enc(KeyId, Box<Term>),
}

impl Term {
    pub fn party(id: PartyId) -> Self {
        Term::Atom(Atom::Party(id))
    }

    pub fn nonce(n: Nonce) -> Self {
        Term::Atom(Atom::Nonce(n))
    }

    pub fn time(t: Timestamp) -> Self {
        Term::Atom(Atom::Time(t))
    }

    pub fn share(s: Share) -> Self {
        Term::Atom(Atom::Share(s))
    }

    pub fn key(k: KeyId) -> Self {
        Term::Atom(Atom::Key(k))
    }

    pub fn stream(s: SymbolStream) -> Self {
        Term::Atom(Atom::Stream(s))
    }

    pub fn tuple(parts: impl IntoIterator<Item = Term>) -> Self {
        Term::Tuple(parts.into_iter().collect())
    }

    /// Short stable digest of the canonical rendering, for transcripts.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_string().as_bytes());
        hash[..6].iter().map(|b| format!("{:02x}", b)).collect()
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Party(p) => write!(f, "party:{}", p),
            Atom::Nonce(n) => write!(f, "nonce:{}:{:016x}", n.issuer, n.value),
            Atom::Time(t) => write!(f, "time:{}", t.tick()),
            Atom::Share(s) => write!(
                f,
                "share:{}:{}:{}:{}",
                s.role,
                s.session_tag,
                s.total_length,
                s.tokens
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(".")
            ),
            Atom::Key(k) => write!(f, "key:{}", k),
            Atom::Stream(s) => write!(f, "stream:{}", s),
            Atom::Sequence(s) => write!(f, "seq:{}", s),
            Atom::Text(t) => write!(f, "text:{:?}", t),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Atom(a) => write!(f, "{}", a),
            Term::Tuple(parts) => {
                write!(f, "[")?;
                for (i, part) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{}", part)?;
                }
                write!(f, "]")
            }
            Term::Enc(key, inner) => write!(f, "E({},{})", key, inner),
        }
    }
}

/// Wraps a payload under a registered key. The result is opaque: contents
/// are only reachable through [`decrypt`] with the same key.
pub fn encrypt(
    registry: &KeyRegistry,
    key: &KeyId,
    payload: Term,
) -> Result<Term, EnvelopeError> {
    if !registry.contains(key) {
        return Err(EnvelopeError::UnknownKey(key.clone()));
    }
    Ok(Term::Enc(key.clone(), Box::new(payload)))
}

/// Opens a ciphertext. Authenticated: the wrong key yields an error, never
/// garbage.
pub fn decrypt(key: &KeyId, term: &Term) -> Result<Term, EnvelopeError> {
    match term {
        Term::Enc(used, inner) if used == key => Ok((**inner).clone()),
        Term::Enc(_, _) => Err(EnvelopeError::WrongKey { used: key.clone() }),
        _ => Err(EnvelopeError::NotCiphertext),
    }
}

/// Issues nonces that are unique across one simulation.
#[derive(Debug, Default, Clone)]
pub struct NonceSource {
    seen: BTreeSet<u64>,
}

impl NonceSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&mut self, rng: &mut impl RngCore, issuer: &PartyId) -> Nonce {
        loop {
            let value = rng.next_u64();
            if self.seen.insert(value) {
                return Nonce {
                    value,
                    issuer: issuer.clone(),
                };
            }
        }
    }
}

/// Monotone logical clock for one simulation.
#[derive(Debug, Default, Clone, Copy)]
pub struct LogicalClock {
    tick: u64,
}

impl LogicalClock {
    pub fn now(&self) -> Timestamp {
        Timestamp(self.tick)
    }

    /// Advances to `tick`; the clock never moves backwards.
    pub fn advance_to(&mut self, tick: u64) {
        self.tick = self.tick.max(tick);
    }
}

/// Contract for a byte-level authenticated cipher behind the symbolic model.
///
/// Requirements: `open(k, seal(k, m)) == Ok(m)`; `open` with any other key
/// fails (the scheme must commit to the key, not just the payload); and any
/// modification of the sealed bytes fails. The simulator and all verdicts
/// run on the symbolic terms above; this trait only fixes the shape a
/// concrete backend would have to satisfy.
pub trait ConcreteCipher {
    fn seal(&self, key: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn open(&self, key: &[u8], sealed: &[u8]) -> Result<Vec<u8>, EnvelopeError>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registry_with(names: &[&str]) -> KeyRegistry {
        let mut registry = KeyRegistry::new();
        for name in names {
            registry
                .register(SymKey {
                    id: KeyId::new(*name),
                    owners: BTreeSet::new(),
                })
                .unwrap();
        }
        registry
    }

    #[test]
    fn encrypt_decrypt_roundtrip() {
        let registry = registry_with(&["K_A"]);
        let k = KeyId::new("K_A");
        let payload = Term::tuple([
            Term::party(PartyId::new("A")),
            Term::party(PartyId::new("B")),
        ]);
        let cipher = encrypt(&registry, &k, payload.clone()).unwrap();
        assert_ne!(cipher, payload);
        assert_eq!(decrypt(&k, &cipher).unwrap(), payload);
    }

    #[test]
    fn wrong_key_and_non_ciphertext_fail() {
        let registry = registry_with(&["K_A", "K_B"]);
        let ka = KeyId::new("K_A");
        let kb = KeyId::new("K_B");
        let cipher = encrypt(&registry, &ka, Term::time(Timestamp(1))).unwrap();
        assert_eq!(
            decrypt(&kb, &cipher).unwrap_err(),
            EnvelopeError::WrongKey { used: kb.clone() }
        );
        assert_eq!(
            decrypt(&ka, &Term::time(Timestamp(1))).unwrap_err(),
            EnvelopeError::NotCiphertext
        );
    }

    #[test]
    fn encrypt_requires_registered_key() {
        let registry = registry_with(&[]);
        let err = encrypt(&registry, &KeyId::new("K_X"), Term::time(Timestamp(0))).unwrap_err();
        assert_eq!(err, EnvelopeError::UnknownKey(KeyId::new("K_X")));
    }

    #[test]
    fn ciphertexts_compare_by_value() {
        let registry = registry_with(&["K_A"]);
        let k = KeyId::new("K_A");
        let a = encrypt(&registry, &k, Term::time(Timestamp(4))).unwrap();
        let b = encrypt(&registry, &k, Term::time(Timestamp(4))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn nonces_are_unique_per_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut source = NonceSource::new();
        let issuer = PartyId::new("BB");
        let mut seen = BTreeSet::new();
        for _ in 0..100 {
            let n = source.fresh(&mut rng, &issuer);
            assert!(seen.insert(n.value));
        }
    }

    #[test]
    fn clock_is_monotone() {
        let mut clock = LogicalClock::default();
        clock.advance_to(5);
        clock.advance_to(3);
        assert_eq!(clock.now(), Timestamp(5));
        assert_eq!(Timestamp(7).age_since(Timestamp(5)), 2);
        assert_eq!(Timestamp(5).age_since(Timestamp(7)), 0);
    }

    #[test]
    fn session_keys_are_distinct() {
        let mut registry = KeyRegistry::new();
        let k1 = registry.fresh_session_key([PartyId::new("AA"), PartyId::new("B")]);
        let k2 = registry.fresh_session_key([PartyId::new("AA"), PartyId::new("B")]);
        assert_ne!(k1, k2);
        assert!(registry.get(&k1).unwrap().owners.contains(&PartyId::kdc()));
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut registry = registry_with(&["K_A"]);
        let err = registry
            .register(SymKey {
                id: KeyId::new("K_A"),
                owners: BTreeSet::new(),
            })
            .unwrap_err();
        assert_eq!(err, EnvelopeError::DuplicateKey(KeyId::new("K_A")));
    }

    #[test]
    fn digest_is_stable() {
        let term = Term::tuple([Term::party(PartyId::new("A")), Term::time(Timestamp(3))]);
        assert_eq!(term.digest().len(), 12);
        assert_eq!(term.digest(), term.digest());
    }

    /// Toy backend used only to exercise the trait's contract shape.
    struct XorTagCipher;

    impl ConcreteCipher for XorTagCipher {
        fn seal(&self, key: &[u8], plaintext: &[u8]) -> Vec<u8> {
            use sha2::{Digest, Sha256};
            let tag = Sha256::digest(key);
            let stream = Sha256::digest([key, b"stream"].concat());
            let mut out = tag.to_vec();
            out.extend(
                plaintext
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b ^ stream[i % stream.len()]),
            );
            out
        }

        fn open(&self, key: &[u8], sealed: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
            use sha2::{Digest, Sha256};
            let tag = Sha256::digest(key);
            if sealed.len() < tag.len() || &sealed[..tag.len()] != tag.as_slice() {
                return Err(EnvelopeError::Rejected("key tag mismatch".to_string()));
            }
            let stream = Sha256::digest([key, b"stream"].concat());
            Ok(sealed[tag.len()..]
                .iter()
                .enumerate()
                .map(|(i, b)| b ^ stream[i % stream.len()])
                .collect())
        }
    }

    #[test]
    fn concrete_cipher_contract_shape() {
        let cipher = XorTagCipher;
        let sealed = cipher.seal(b"k1", b"payload");
        assert_eq!(cipher.open(b"k1", &sealed).unwrap(), b"payload");
        assert!(cipher.open(b"k2", &sealed).is_err());
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        let leaf = prop_oneof![
            "[a-z]{1,4}".prop_map(|s| Term::party(PartyId::new(s))),
            any::<u64>().prop_map(|t| Term::time(Timestamp(t))),
            any::<u64>().prop_map(|v| Term::nonce(Nonce {
                value: v,
                issuer: PartyId::new("A"),
            })),
        ];
        leaf.prop_recursive(3, 16, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..4).prop_map(Term::Tuple),
                ("[A-Z]{1,3}", inner).prop_map(|(k, t)| Term::Enc(KeyId::new(k), Box::new(t))),
            ]
        })
    }

    proptest! {
        #[test]
        fn structural_roundtrip(term in arb_term()) {
            let registry = registry_with(&["K"]);
            let k = KeyId::new("K");
            let cipher = encrypt(&registry, &k, term.clone()).unwrap();
            prop_assert_eq!(decrypt(&k, &cipher).unwrap(), term);
            prop_assert!(decrypt(&KeyId::new("K2"), &cipher).is_err());
        }
    }
}
