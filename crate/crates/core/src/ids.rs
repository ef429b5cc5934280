//! Party and session identifiers shared across the protocol stack.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Identifies one node in a scenario: a principal's main location, one of its
/// agents, or the key distribution center.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartyId(String);

impl PartyId {
    pub fn new(name: impl Into<String>) -> Self {
        PartyId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The key distribution center node present in every modified-protocol run.
    pub fn kdc() -> Self {
        PartyId::new("KDC")
    }

    /// The adversary's own identity, used when it re-wraps or injects terms.
    pub fn adversary() -> Self {
        PartyId::new("EVE")
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PartyId {
    fn from(s: &str) -> Self {
        PartyId::new(s)
    }
}

/// Correlates the two shares of one protocol run. Minted by the sender when
/// it splits a production sequence; recombination requires both shares to
/// carry the same tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionTag(u64);

impl SessionTag {
    pub fn new(value: u64) -> Self {
        SessionTag(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for SessionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid session tag '{0}': expected 16 hex digits")]
pub struct TagParseError(String);

impl FromStr for SessionTag {
    type Err = TagParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16)
            .map(SessionTag)
            .map_err(|_| TagParseError(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_roundtrips_through_hex() {
        let tag = SessionTag::new(0xdead_beef_0042_1111);
        let text = tag.to_string();
        assert_eq!(text.len(), 16);
        assert_eq!(text.parse::<SessionTag>().unwrap(), tag);
    }

    #[test]
    fn tag_rejects_garbage() {
        assert!("zz".parse::<SessionTag>().is_err());
    }
}
