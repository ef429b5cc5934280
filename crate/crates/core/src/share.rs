//! 2-of-2 positional splitting of a production sequence into two shares and
//! lossless recombination. The default policy interleaves tokens so neither
//! holder sees a contiguous fragment of the derivation.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::grammar::{self, ChunkGrammar, ProductionSequence};
use crate::ids::SessionTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShareRole {
    Odd,
    Even,
}

impl fmt::Display for ShareRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShareRole::Odd => "ODD",
            ShareRole::Even => "EVEN",
        })
    }
}

/// One half of a split sequence. Carries the original length and a session
/// tag so recombination is checkable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Share {
    pub role: ShareRole,
    pub tokens: Vec<u32>,
    pub total_length: usize,
    pub session_tag: SessionTag,
}

impl Share {
    /// Renders the `role=<ODD|EVEN> total=<n> tag=<hex> tokens=<csv>` line.
    pub fn to_line(&self) -> String {
        let tokens: Vec<String> = self.tokens.iter().map(u32::to_string).collect();
        format!(
            "role={} total={} tag={} tokens={}",
            self.role,
            self.total_length,
            self.session_tag,
            tokens.join(",")
        )
    }

    pub fn from_line(line: &str) -> Result<Self, ShareError> {
        let mut role = None;
        let mut total = None;
        let mut tag = None;
        let mut tokens = None;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| ShareError::Malformed(line.to_string()))?;
            match key {
                "role" => {
                    role = match value {
                        "ODD" => Some(ShareRole::Odd),
                        "EVEN" => Some(ShareRole::Even),
                        _ => None,
                    }
                }
                "total" => total = value.parse::<usize>().ok(),
                "tag" => tag = value.parse::<SessionTag>().ok(),
                "tokens" => {
                    tokens = if value.is_empty() {
                        Some(Vec::new())
                    } else {
                        value
                            .split(',')
                            .map(|t| t.parse::<u32>().ok())
                            .collect::<Option<Vec<_>>>()
                    }
                }
                _ => return Err(ShareError::Malformed(line.to_string())),
            }
        }
        match (role, total, tag, tokens) {
            (Some(role), Some(total_length), Some(session_tag), Some(tokens)) => Ok(Share {
                role,
                tokens,
                total_length,
                session_tag,
            }),
            _ => Err(ShareError::Malformed(line.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShareError {
    #[error("share mismatch: {0}")]
    ShareMismatch(String),
    #[error("malformed share line '{0}'")]
    Malformed(String),
}

/// How a sequence is divided between the two shares. The role names stay
/// ODD/EVEN under either policy; HALVES maps ODD to the front half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitStrategy {
    #[default]
    Interleave,
    Halves,
}

impl SplitStrategy {
    pub fn split(self, seq: &ProductionSequence, tag: SessionTag) -> (Share, Share) {
        let tokens = seq.tokens();
        let (odd, even): (Vec<u32>, Vec<u32>) = match self {
            SplitStrategy::Interleave => {
                let odd = tokens.iter().step_by(2).copied().collect();
                let even = tokens.iter().skip(1).step_by(2).copied().collect();
                (odd, even)
            }
            SplitStrategy::Halves => {
                let mid = tokens.len().div_ceil(2);
                (tokens[..mid].to_vec(), tokens[mid..].to_vec())
            }
        };
        (
            Share {
                role: ShareRole::Odd,
                tokens: odd,
                total_length: tokens.len(),
                session_tag: tag,
            },
            Share {
                role: ShareRole::Even,
                tokens: even,
                total_length: tokens.len(),
                session_tag: tag,
            },
        )
    }

    pub fn merge(self, odd: &Share, even: &Share) -> Result<ProductionSequence, ShareError> {
        if odd.role != ShareRole::Odd || even.role != ShareRole::Even {
            return Err(ShareError::ShareMismatch(format!(
                "expected role pair (ODD, EVEN), got ({}, {})",
                odd.role, even.role
            )));
        }
        if odd.session_tag != even.session_tag {
            return Err(ShareError::ShareMismatch(format!(
                "session tags differ: {} vs {}",
                odd.session_tag, even.session_tag
            )));
        }
        if odd.total_length != even.total_length {
            return Err(ShareError::ShareMismatch(format!(
                "total lengths differ: {} vs {}",
                odd.total_length, even.total_length
            )));
        }
        let total = odd.total_length;
        if odd.tokens.len() != total.div_ceil(2) || even.tokens.len() != total / 2 {
            return Err(ShareError::ShareMismatch(format!(
                "token counts {}+{} do not partition length {}",
                odd.tokens.len(),
                even.tokens.len(),
                total
            )));
        }
        let tokens = match self {
            SplitStrategy::Interleave => {
                let mut tokens = Vec::with_capacity(total);
                let mut evens = even.tokens.iter();
                for &o in &odd.tokens {
                    tokens.push(o);
                    if let Some(&e) = evens.next() {
                        tokens.push(e);
                    }
                }
                tokens
            }
            SplitStrategy::Halves => {
                let mut tokens = odd.tokens.clone();
                tokens.extend_from_slice(&even.tokens);
                tokens
            }
        };
        Ok(ProductionSequence::new(tokens))
    }
}

/// Splits with the default interleaving policy: ODD takes 1-based odd
/// positions, EVEN the rest.
pub fn split(seq: &ProductionSequence, tag: SessionTag) -> (Share, Share) {
    SplitStrategy::Interleave.split(seq, tag)
}

/// Recombines interleaved shares; inverse of [`split`].
pub fn merge(odd: &Share, even: &Share) -> Result<ProductionSequence, ShareError> {
    SplitStrategy::Interleave.merge(odd, even)
}

/// Every message a holder of `known` alone could consider: enumerate all
/// complement shares of the correct length, keep those whose merge decodes
/// legally. Illegal-prefix candidates are pruned during the derivation
/// replay, which leaves the result set unchanged.
pub fn consistent_messages(
    known: &Share,
    grammar: &ChunkGrammar,
    char_width: u8,
) -> BTreeSet<String> {
    let total = known.total_length;
    let expected = match known.role {
        ShareRole::Odd => total.div_ceil(2),
        ShareRole::Even => total / 2,
    };
    if known.tokens.len() != expected {
        return BTreeSet::new();
    }
    let known_at = |position: usize| -> Option<u32> {
        // 1-based position in the merged sequence.
        match known.role {
            ShareRole::Odd if position % 2 == 1 => Some(known.tokens[position / 2]),
            ShareRole::Even if position.is_multiple_of(2) => Some(known.tokens[position / 2 - 1]),
            _ => None,
        }
    };

    let g = grammar.grammar();
    let mut found = BTreeSet::new();
    // Depth-first replay: stack of (position, sentential stack, merged prefix).
    let mut work = vec![(1usize, vec![grammar_start(g)], Vec::<u32>::new())];
    while let Some((position, mut stack, prefix)) = work.pop() {
        while matches!(stack.last(), Some(sym) if !sym.is_variable()) {
            stack.pop();
        }
        if position > total {
            if stack.is_empty() {
                let seq = ProductionSequence::new(prefix);
                if let Ok(text) = grammar::decode(&seq, grammar, char_width) {
                    found.insert(text);
                }
            }
            continue;
        }
        let leftmost = match stack.last() {
            Some(sym) => sym.name().to_string(),
            None => continue, // tokens remain but the derivation is complete
        };
        let candidates: Vec<u32> = match known_at(position) {
            Some(token) => vec![token],
            None => g
                .productions()
                .iter()
                .filter(|p| p.lhs == leftmost)
                .map(|p| p.index)
                .collect(),
        };
        for token in candidates {
            let production = match g.production(token) {
                Some(p) if p.lhs == leftmost => p,
                _ => continue,
            };
            let mut next_stack = stack.clone();
            next_stack.pop();
            for sym in production.rhs.iter().rev() {
                next_stack.push(sym.clone());
            }
            let mut next_prefix = prefix.clone();
            next_prefix.push(token);
            work.push((position + 1, next_stack, next_prefix));
        }
    }
    found
}

fn grammar_start(g: &crate::grammar::Grammar) -> crate::grammar::Symbol {
    crate::grammar::Symbol::variable(g.start())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{encode, text_to_bits};
    use proptest::prelude::*;

    fn tag(n: u64) -> SessionTag {
        SessionTag::new(n)
    }

    fn seq(tokens: &[u32]) -> ProductionSequence {
        ProductionSequence::new(tokens.to_vec())
    }

    #[test]
    fn split_examples() {
        let (odd, even) = split(&seq(&[]), tag(1));
        assert!(odd.tokens.is_empty() && even.tokens.is_empty());
        assert_eq!(odd.total_length, 0);

        let (odd, even) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(1));
        assert_eq!(odd.tokens, vec![1, 8, 2, 3]);
        assert_eq!(even.tokens, vec![2, 3, 5]);

        let (odd, even) = split(&seq(&[1, 3, 3]), tag(1));
        assert_eq!(odd.tokens, vec![1, 3]);
        assert_eq!(even.tokens, vec![3]);
    }

    #[test]
    fn merge_examples() {
        let (odd, even) = split(&seq(&[]), tag(1));
        assert_eq!(merge(&odd, &even).unwrap(), seq(&[]));

        let (odd, even) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(1));
        assert_eq!(merge(&odd, &even).unwrap(), seq(&[1, 2, 8, 3, 2, 5, 3]));
    }

    #[test]
    fn merge_rejects_inconsistent_metadata() {
        let (mut odd, even) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(1));
        odd.total_length = 9;
        assert!(matches!(merge(&odd, &even), Err(ShareError::ShareMismatch(_))));

        let (odd, _) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(1));
        let (_, even_other) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(2));
        assert!(matches!(merge(&odd, &even_other), Err(ShareError::ShareMismatch(_))));

        let (odd, even) = split(&seq(&[1, 3, 3]), tag(1));
        assert!(matches!(merge(&even, &odd), Err(ShareError::ShareMismatch(_))));
    }

    #[test]
    fn merge_rejects_token_count_drift() {
        let (mut odd, even) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(1));
        odd.tokens.push(9);
        assert!(matches!(merge(&odd, &even), Err(ShareError::ShareMismatch(_))));
    }

    #[test]
    fn halves_strategy() {
        let s = seq(&[1, 2, 8, 3, 2, 5, 3]);
        let (odd, even) = SplitStrategy::Halves.split(&s, tag(1));
        assert_eq!(odd.tokens, vec![1, 2, 8, 3]);
        assert_eq!(even.tokens, vec![2, 5, 3]);
        assert_eq!(SplitStrategy::Halves.merge(&odd, &even).unwrap(), s);
    }

    #[test]
    fn share_line_roundtrip() {
        let (odd, even) = split(&seq(&[1, 2, 8, 3, 2, 5, 3]), tag(0xabcd));
        for share in [odd, even] {
            let line = share.to_line();
            assert_eq!(Share::from_line(&line).unwrap(), share);
        }
        let empty = split(&seq(&[]), tag(7)).0;
        assert_eq!(Share::from_line(&empty.to_line()).unwrap(), empty);
        assert!(Share::from_line("role=ODD total=2").is_err());
        assert!(Share::from_line("role=MIDDLE total=2 tag=00 tokens=1").is_err());
    }

    /// Dumb oracle: literally try every complement token list.
    fn consistent_messages_exhaustive(
        known: &Share,
        grammar: &ChunkGrammar,
        char_width: u8,
    ) -> BTreeSet<String> {
        let complement_len = match known.role {
            ShareRole::Odd => known.total_length / 2,
            ShareRole::Even => known.total_length.div_ceil(2),
        };
        let rule_count = grammar.grammar().productions().len() as u32;
        let mut found = BTreeSet::new();
        let mut candidate = vec![1u32; complement_len];
        loop {
            let complement = Share {
                role: match known.role {
                    ShareRole::Odd => ShareRole::Even,
                    ShareRole::Even => ShareRole::Odd,
                },
                tokens: candidate.clone(),
                total_length: known.total_length,
                session_tag: known.session_tag,
            };
            let merged = match known.role {
                ShareRole::Odd => merge(known, &complement),
                ShareRole::Even => merge(&complement, known),
            };
            if let Ok(seq) = merged {
                if let Ok(text) = grammar::decode(&seq, grammar, char_width) {
                    found.insert(text);
                }
            }
            // Odometer step over the rule alphabet.
            let mut i = 0;
            loop {
                if i == candidate.len() {
                    return found;
                }
                if candidate[i] < rule_count {
                    candidate[i] += 1;
                    break;
                }
                candidate[i] = 1;
                i += 1;
            }
        }
    }

    #[test]
    fn pruned_enumeration_matches_exhaustive_oracle() {
        let g = ChunkGrammar::new(2).unwrap();
        for text in ["", "a", "zq"] {
            let bits = text_to_bits(text, 7).unwrap();
            let sequence = encode(&bits, &g);
            let (odd, even) = split(&sequence, tag(5));
            for known in [odd, even] {
                let fast = consistent_messages(&known, &g, 7);
                let slow = consistent_messages_exhaustive(&known, &g, 7);
                assert_eq!(fast, slow, "mismatch for text {:?} role {}", text, known.role);
                assert!(fast.contains(text));
            }
        }
    }

    #[test]
    fn single_share_leaves_multiple_candidate_messages() {
        let g = ChunkGrammar::new(3).unwrap();
        // Three 7-bit chars -> 21 bits -> 7 chunks at k=3.
        let bits = text_to_bits("cat", 7).unwrap();
        let sequence = encode(&bits, &g);
        let (odd, even) = split(&sequence, tag(9));
        for known in [odd, even] {
            let candidates = consistent_messages(&known, &g, 7);
            assert!(candidates.contains("cat"));
            assert!(
                candidates.len() > 1,
                "share {} pinned the message down",
                known.role
            );
        }
    }

    proptest! {
        #[test]
        fn merge_inverts_split(tokens in proptest::collection::vec(1u32..12, 0..10_000)) {
            let s = ProductionSequence::new(tokens);
            let (odd, even) = split(&s, tag(3));
            prop_assert!(odd.tokens.len().abs_diff(even.tokens.len()) <= 1);
            prop_assert_eq!(merge(&odd, &even).unwrap(), s.clone());

            let (front, back) = SplitStrategy::Halves.split(&s, tag(3));
            prop_assert_eq!(SplitStrategy::Halves.merge(&front, &back).unwrap(), s.clone());

            // The two shares partition the token multiset.
            let mut recombined: Vec<u32> = odd.tokens.clone();
            recombined.extend(&even.tokens);
            recombined.sort_unstable();
            let mut original = s.tokens().to_vec();
            original.sort_unstable();
            prop_assert_eq!(recombined, original);
        }
    }
}
