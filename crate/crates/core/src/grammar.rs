//! Grammar-based message codec.
//!
//! A message is turned into a production sequence in three steps: characters
//! become fixed-width bit groups, bits become k-bit chunks, and chunks become
//! the rule indices of a canonical leftmost derivation under a chunk grammar.
//! Decoding replays the derivation, recovers the zero padding from the bit
//! count, and reassembles the characters.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// A grammar symbol: a variable (nonterminal) or a terminal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Variable(String),
    Terminal(String),
}

impl Symbol {
    pub fn variable(name: impl Into<String>) -> Self {
        Symbol::Variable(name.into())
    }

    pub fn terminal(name: impl Into<String>) -> Self {
        Symbol::Terminal(name.into())
    }

    pub fn name(&self) -> &str {
        match self {
            Symbol::Variable(n) | Symbol::Terminal(n) => n,
        }
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, Symbol::Variable(_))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One numbered rewrite rule `lhs -> rhs`. An empty `rhs` is the epsilon rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub index: u32,
    pub lhs: String,
    pub rhs: Vec<Symbol>,
}

impl fmt::Display for Production {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ->", self.index, self.lhs)?;
        if self.rhs.is_empty() {
            write!(f, " eps")?;
        }
        for sym in &self.rhs {
            write!(f, " {}", sym)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("production {index}: lhs '{lhs}' is not a declared variable")]
    UnknownLhs { index: u32, lhs: String },
    #[error("production {index}: symbol '{symbol}' is neither a variable nor a terminal")]
    UnknownSymbol { index: u32, symbol: String },
    #[error("start symbol '{0}' is not a declared variable")]
    BadStart(String),
    #[error("production indices must run 1..{expected} in order; found {found} at position {position}")]
    NonContiguousIndex {
        expected: u32,
        found: u32,
        position: usize,
    },
    #[error("symbol '{0}' is declared both variable and terminal")]
    SymbolClash(String),
    #[error("grammar has no productions")]
    Empty,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid chunk width {0}: must be in 1..=7")]
    InvalidChunkWidth(u8),
}

/// A context-free grammar: variables, terminals, numbered productions, and a
/// start variable. Grammars are data; arbitrary CFGs can be loaded from the
/// line format, though the protocol itself only ever uses [`ChunkGrammar`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    variables: BTreeSet<String>,
    terminals: BTreeSet<String>,
    productions: Vec<Production>,
    start: String,
}

impl Grammar {
    pub fn new(
        variables: impl IntoIterator<Item = String>,
        terminals: impl IntoIterator<Item = String>,
        productions: Vec<Production>,
        start: impl Into<String>,
    ) -> Result<Self, GrammarError> {
        let variables: BTreeSet<String> = variables.into_iter().collect();
        let terminals: BTreeSet<String> = terminals.into_iter().collect();
        let start = start.into();

        if let Some(clash) = variables.intersection(&terminals).next() {
            return Err(GrammarError::SymbolClash(clash.clone()));
        }
        if productions.is_empty() {
            return Err(GrammarError::Empty);
        }
        if !variables.contains(&start) {
            return Err(GrammarError::BadStart(start));
        }
        for (position, production) in productions.iter().enumerate() {
            let expected = position as u32 + 1;
            if production.index != expected {
                return Err(GrammarError::NonContiguousIndex {
                    expected,
                    found: production.index,
                    position,
                });
            }
            if !variables.contains(&production.lhs) {
                return Err(GrammarError::UnknownLhs {
                    index: production.index,
                    lhs: production.lhs.clone(),
                });
            }
            for sym in &production.rhs {
                let known = match sym {
                    Symbol::Variable(n) => variables.contains(n),
                    Symbol::Terminal(n) => terminals.contains(n),
                };
                if !known {
                    return Err(GrammarError::UnknownSymbol {
                        index: production.index,
                        symbol: sym.name().to_string(),
                    });
                }
            }
        }

        Ok(Grammar {
            variables,
            terminals,
            productions,
            start,
        })
    }

    pub fn start(&self) -> &str {
        &self.start
    }

    pub fn productions(&self) -> &[Production] {
        &self.productions
    }

    /// Looks up a production by its 1-based index.
    pub fn production(&self, index: u32) -> Option<&Production> {
        if index == 0 {
            return None;
        }
        self.productions.get(index as usize - 1)
    }

    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(String::as_str)
    }

    pub fn terminals(&self) -> impl Iterator<Item = &str> {
        self.terminals.iter().map(String::as_str)
    }

    /// Parses the line format `index: LHS -> RHS` with whitespace-separated
    /// rhs symbols and `eps` for the empty string. Variables are the symbols
    /// that appear on some lhs; everything else is a terminal; the start
    /// symbol is the lhs of rule 1. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, GrammarError> {
        let mut raw: Vec<(usize, u32, String, Vec<String>)> = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line_no = line_no + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (index_part, rest) = line.split_once(':').ok_or_else(|| GrammarError::Parse {
                line: line_no,
                reason: "expected 'index: LHS -> RHS'".to_string(),
            })?;
            let index: u32 = index_part.trim().parse().map_err(|_| GrammarError::Parse {
                line: line_no,
                reason: format!("bad production index '{}'", index_part.trim()),
            })?;
            let (lhs, rhs_part) = rest.split_once("->").ok_or_else(|| GrammarError::Parse {
                line: line_no,
                reason: "missing '->'".to_string(),
            })?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.split_whitespace().count() != 1 {
                return Err(GrammarError::Parse {
                    line: line_no,
                    reason: "lhs must be a single symbol".to_string(),
                });
            }
            if rhs_part.trim().is_empty() {
                return Err(GrammarError::Parse {
                    line: line_no,
                    reason: "empty rhs must be written 'eps'".to_string(),
                });
            }
            let rhs: Vec<String> = rhs_part
                .split_whitespace()
                .map(str::to_string)
                .collect();
            let rhs = if rhs == ["eps"] { Vec::new() } else { rhs };
            raw.push((line_no, index, lhs.to_string(), rhs));
        }

        let variables: BTreeSet<String> = raw.iter().map(|(_, _, lhs, _)| lhs.clone()).collect();
        let mut terminals = BTreeSet::new();
        let mut productions = Vec::with_capacity(raw.len());
        let start = raw
            .iter()
            .find(|(_, index, _, _)| *index == 1)
            .map(|(_, _, lhs, _)| lhs.clone())
            .ok_or(GrammarError::Empty)?;
        for (_, index, lhs, rhs) in raw {
            let rhs: Vec<Symbol> = rhs
                .into_iter()
                .map(|name| {
                    if variables.contains(&name) {
                        Symbol::Variable(name)
                    } else {
                        terminals.insert(name.clone());
                        Symbol::Terminal(name)
                    }
                })
                .collect();
            productions.push(Production { index, lhs, rhs });
        }
        Grammar::new(variables, terminals, productions, start)
    }

    /// Renders the grammar in the same line format [`Grammar::parse`] accepts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for production in &self.productions {
            out.push_str(&production.to_string());
            out.push('\n');
        }
        out
    }
}

/// The canonical chunk-grammar family for width `k`:
/// rule 1 `S -> B B`, rule 2 `B -> A B`, rule 3 `B -> eps`, and one rule
/// `A -> <k-bit binary of v>` per chunk value `v`, numbered `4 + v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkGrammar {
    width: u8,
    grammar: Grammar,
}

impl ChunkGrammar {
    pub fn new(width: u8) -> Result<Self, GrammarError> {
        if !(1..=7).contains(&width) {
            return Err(GrammarError::InvalidChunkWidth(width));
        }
        let mut productions = vec![
            Production {
                index: 1,
                lhs: "S".to_string(),
                rhs: vec![Symbol::variable("B"), Symbol::variable("B")],
            },
            Production {
                index: 2,
                lhs: "B".to_string(),
                rhs: vec![Symbol::variable("A"), Symbol::variable("B")],
            },
            Production {
                index: 3,
                lhs: "B".to_string(),
                rhs: Vec::new(),
            },
        ];
        for value in 0..(1u32 << width) {
            let rhs = (0..width)
                .rev()
                .map(|bit| {
                    if value >> bit & 1 == 1 {
                        Symbol::terminal("1")
                    } else {
                        Symbol::terminal("0")
                    }
                })
                .collect();
            productions.push(Production {
                index: 4 + value,
                lhs: "A".to_string(),
                rhs,
            });
        }
        let grammar = Grammar::new(
            ["S", "B", "A"].map(String::from),
            ["0", "1"].map(String::from),
            productions,
            "S",
        )
        .expect("chunk grammar construction is internally consistent");
        Ok(ChunkGrammar { width, grammar })
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    /// Rule index carrying chunk value `v`.
    pub fn rule_for_chunk(&self, value: u16) -> u32 {
        4 + u32::from(value)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("character U+{code:04X} does not fit in {width} bits")]
    CodePointOverflow { code: u32, width: u8 },
    #[error("invalid char width {0}: must be in 1..=8")]
    InvalidCharWidth(u8),
    #[error("invalid chunk width {0}: must be in 1..=7")]
    InvalidChunkWidth(u8),
    #[error("chunk width {chunk_width} exceeds char width {char_width}; padding is not recoverable")]
    WidthMismatch { chunk_width: u8, char_width: u8 },
    #[error("illegal derivation at token {position}: {reason}")]
    IllegalDerivation { position: usize, reason: String },
    #[error("the {pad_bits} implied padding bits are not all zero")]
    NonZeroPadding { pad_bits: usize },
    #[error("bit string holds a value other than 0 or 1")]
    NotABit,
}

/// An ordered bit string plus the character width it was produced with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitString {
    bits: Vec<u8>,
    char_width: u8,
}

impl BitString {
    /// Wraps raw bits (each 0 or 1) with the given character width.
    pub fn from_bits(bits: Vec<u8>, char_width: u8) -> Result<Self, CodecError> {
        if !(1..=8).contains(&char_width) {
            return Err(CodecError::InvalidCharWidth(char_width));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(CodecError::NotABit);
        }
        Ok(BitString { bits, char_width })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn char_width(&self) -> u8 {
        self.char_width
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for bit in &self.bits {
            write!(f, "{}", bit)?;
        }
        Ok(())
    }
}

/// Converts text to its concatenated fixed-width big-endian bit groups.
pub fn text_to_bits(text: &str, char_width: u8) -> Result<BitString, CodecError> {
    if !(1..=8).contains(&char_width) {
        return Err(CodecError::InvalidCharWidth(char_width));
    }
    let limit = 1u32 << char_width;
    let mut bits = Vec::with_capacity(text.chars().count() * char_width as usize);
    for ch in text.chars() {
        let code = ch as u32;
        if code >= limit {
            return Err(CodecError::CodePointOverflow {
                code,
                width: char_width,
            });
        }
        for bit in (0..char_width).rev() {
            bits.push((code >> bit & 1) as u8);
        }
    }
    Ok(BitString { bits, char_width })
}

/// Groups bits into consecutive k-bit chunks, zero-padding the tail.
/// Returns the chunk values and how many pad bits were appended.
pub fn bits_to_chunks(bits: &BitString, k: u8) -> Result<(Vec<u16>, usize), CodecError> {
    if !(1..=7).contains(&k) {
        return Err(CodecError::InvalidChunkWidth(k));
    }
    let k = k as usize;
    let pad = (k - bits.len() % k) % k;
    let mut chunks = Vec::with_capacity((bits.len() + pad) / k);
    let mut current: u16 = 0;
    let mut filled = 0;
    for &bit in bits.bits().iter().chain(std::iter::repeat_n(&0, pad)) {
        current = current << 1 | u16::from(bit);
        filled += 1;
        if filled == k {
            chunks.push(current);
            current = 0;
            filled = 0;
        }
    }
    Ok((chunks, pad))
}

/// The rule-index stream of one derivation, in application order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ProductionSequence(Vec<u32>);

impl ProductionSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        ProductionSequence(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ProductionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, token) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", token)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid production sequence '{0}': expected comma-separated rule indices")]
pub struct SequenceParseError(String);

impl FromStr for ProductionSequence {
    type Err = SequenceParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(ProductionSequence::new(Vec::new()));
        }
        s.split(',')
            .map(|tok| tok.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map(ProductionSequence::new)
            .map_err(|_| SequenceParseError(s.to_string()))
    }
}

/// Encodes a bit string as the canonical leftmost derivation: rule 1 first,
/// the first ceil(n/2) chunks under the left `B`, the rest under the right `B`,
/// each group closed by the epsilon rule.
pub fn encode(bits: &BitString, grammar: &ChunkGrammar) -> ProductionSequence {
    let (chunks, _pad) =
        bits_to_chunks(bits, grammar.width()).expect("chunk grammar width is validated");
    let first = chunks.len().div_ceil(2);
    let mut tokens = Vec::with_capacity(3 + 2 * chunks.len());
    tokens.push(1);
    for group in [&chunks[..first], &chunks[first..]] {
        for &chunk in group {
            tokens.push(2);
            tokens.push(grammar.rule_for_chunk(chunk));
        }
        tokens.push(3);
    }
    ProductionSequence::new(tokens)
}

/// Replays a token stream as a leftmost derivation against an arbitrary
/// grammar. Succeeds only when every token rewrites the current leftmost
/// variable and the final sentential form is all terminals.
pub fn replay(seq: &ProductionSequence, grammar: &Grammar) -> Result<Vec<Symbol>, CodecError> {
    // Stack of pending symbols, top = leftmost unprocessed. Terminals are
    // drained into the output before the next token is consumed.
    let mut stack = vec![Symbol::variable(grammar.start())];
    let mut output = Vec::new();
    for (position, &token) in seq.tokens().iter().enumerate() {
        let position = position + 1;
        while let Some(Symbol::Terminal(_)) = stack.last() {
            output.push(stack.pop().unwrap());
        }
        let leftmost = match stack.pop() {
            Some(Symbol::Variable(name)) => name,
            _ => {
                return Err(CodecError::IllegalDerivation {
                    position,
                    reason: "derivation already complete but tokens remain".to_string(),
                })
            }
        };
        let production = grammar
            .production(token)
            .ok_or_else(|| CodecError::IllegalDerivation {
                position,
                reason: format!("no rule numbered {}", token),
            })?;
        if production.lhs != leftmost {
            return Err(CodecError::IllegalDerivation {
                position,
                reason: format!(
                    "rule {} rewrites '{}' but the leftmost variable is '{}'",
                    token, production.lhs, leftmost
                ),
            });
        }
        for sym in production.rhs.iter().rev() {
            stack.push(sym.clone());
        }
    }
    while let Some(sym) = stack.pop() {
        match sym {
            Symbol::Terminal(_) => output.push(sym),
            Symbol::Variable(name) => {
                return Err(CodecError::IllegalDerivation {
                    position: seq.len(),
                    reason: format!("variable '{}' left unrewritten at end of stream", name),
                })
            }
        }
    }
    Ok(output)
}

/// Replays a sequence under a chunk grammar and returns the derived bits,
/// padding included.
pub fn sequence_to_bits(
    seq: &ProductionSequence,
    grammar: &ChunkGrammar,
) -> Result<BitString, CodecError> {
    let terminals = replay(seq, grammar.grammar())?;
    let bits = terminals
        .iter()
        .map(|sym| match sym.name() {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            _ => Err(CodecError::NotABit),
        })
        .collect::<Result<Vec<_>, _>>()?;
    BitString::from_bits(bits, 7)
}

/// Full inverse of the codec: replays the derivation, strips the recovered
/// zero padding, and decodes fixed-width characters.
pub fn decode(
    seq: &ProductionSequence,
    grammar: &ChunkGrammar,
    char_width: u8,
) -> Result<String, CodecError> {
    if !(1..=8).contains(&char_width) {
        return Err(CodecError::InvalidCharWidth(char_width));
    }
    if grammar.width() > char_width {
        return Err(CodecError::WidthMismatch {
            chunk_width: grammar.width(),
            char_width,
        });
    }
    let bits = sequence_to_bits(seq, grammar)?;
    // Derived length = message bits + pad, with pad < k <= char width, so the
    // pad is exactly the length residue and carries no separate header.
    let pad = bits.len() % char_width as usize;
    let payload_len = bits.len() - pad;
    if bits.bits()[payload_len..].iter().any(|&b| b != 0) {
        return Err(CodecError::NonZeroPadding { pad_bits: pad });
    }
    let mut text = String::with_capacity(payload_len / char_width as usize);
    for group in bits.bits()[..payload_len].chunks(char_width as usize) {
        let code = group.iter().fold(0u32, |acc, &bit| acc << 1 | u32::from(bit));
        let ch = char::from_u32(code).expect("codes below 256 are valid scalars");
        text.push(ch);
    }
    Ok(text)
}

/// Display-only concatenation of the decimal rule indices. Ambiguous for
/// indices of two or more digits, hence never parsed back.
pub fn render_concatenated(seq: &ProductionSequence) -> String {
    seq.tokens().iter().map(u32::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(s: &str) -> BitString {
        BitString::from_bits(
            s.chars().map(|c| if c == '1' { 1 } else { 0 }).collect(),
            7,
        )
        .unwrap()
    }

    #[test]
    fn text_to_bits_empty() {
        let b = text_to_bits("", 7).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn text_to_bits_single_char() {
        // Code point 65 in seven bits.
        assert_eq!(text_to_bits("A", 7).unwrap().to_string(), "1000001");
    }

    #[test]
    fn text_to_bits_hello() {
        let b = text_to_bits("hello", 7).unwrap();
        assert_eq!(b.len(), 35);
        assert_eq!(b.to_string(), "11010001100101110110011011001101111");
    }

    #[test]
    fn text_to_bits_rejects_wide_code_points() {
        let err = text_to_bits("é", 7).unwrap_err();
        assert_eq!(
            err,
            CodecError::CodePointOverflow {
                code: 0xE9,
                width: 7
            }
        );
        // The same character fits once the width covers a full byte.
        assert!(text_to_bits("é", 8).is_ok());
    }

    #[test]
    fn chunking_examples() {
        assert_eq!(bits_to_chunks(&bits(""), 3).unwrap(), (vec![], 0));
        assert_eq!(bits_to_chunks(&bits("1000011"), 3).unwrap(), (vec![4, 1, 4], 2));
        assert_eq!(bits_to_chunks(&bits("100001"), 3).unwrap(), (vec![4, 1], 0));
    }

    #[test]
    fn chunk_grammar_shape() {
        for k in 1..=7u8 {
            let g = ChunkGrammar::new(k).unwrap();
            assert_eq!(g.grammar().productions().len(), 3 + (1 << k));
            for value in 0..(1u16 << k) {
                let rule = g.grammar().production(4 + u32::from(value)).unwrap();
                assert_eq!(rule.lhs, "A");
                let rendered: String =
                    rule.rhs.iter().map(|s| s.name().to_string()).collect();
                assert_eq!(rendered, format!("{:0width$b}", value, width = k as usize));
            }
        }
        assert_eq!(ChunkGrammar::new(0).unwrap_err(), GrammarError::InvalidChunkWidth(0));
        assert_eq!(ChunkGrammar::new(8).unwrap_err(), GrammarError::InvalidChunkWidth(8));
    }

    #[test]
    fn chunk_grammar_three_rule_table_is_pinned() {
        let g = ChunkGrammar::new(3).unwrap();
        let rendered: Vec<String> = g
            .grammar()
            .productions()
            .iter()
            .map(|p| {
                let rhs = if p.rhs.is_empty() {
                    "eps".to_string()
                } else {
                    p.rhs.iter().map(|s| s.name()).collect::<String>()
                };
                format!("{} {} -> {}", p.index, p.lhs, rhs)
            })
            .collect();
        let expected = [
            "1 S -> BB",
            "2 B -> AB",
            "3 B -> eps",
            "4 A -> 000",
            "5 A -> 001",
            "6 A -> 010",
            "7 A -> 011",
            "8 A -> 100",
            "9 A -> 101",
            "10 A -> 110",
            "11 A -> 111",
        ];
        assert_eq!(rendered, expected);
    }

    #[test]
    fn encode_examples() {
        let g = ChunkGrammar::new(3).unwrap();
        assert_eq!(encode(&bits(""), &g).tokens(), &[1, 3, 3]);
        // Chunks [4, 1]: S => BB => AB B => 100 B B => 100 B => 100 AB => 100 001 B => 100 001.
        assert_eq!(encode(&bits("100001"), &g).tokens(), &[1, 2, 8, 3, 2, 5, 3]);
        assert_eq!(encode(&bits("111"), &g).tokens(), &[1, 2, 11, 3, 3]);
    }

    #[test]
    fn token_count_formula() {
        let g = ChunkGrammar::new(3).unwrap();
        for text in ["", "a", "hello", "multi located parties"] {
            let b = text_to_bits(text, 7).unwrap();
            let (chunks, _) = bits_to_chunks(&b, 3).unwrap();
            assert_eq!(encode(&b, &g).len(), 1 + 2 * chunks.len() + 2);
        }
    }

    #[test]
    fn decode_examples() {
        let g = ChunkGrammar::new(3).unwrap();
        assert_eq!(decode(&ProductionSequence::new(vec![1, 3, 3]), &g, 7).unwrap(), "");
        let seq = ProductionSequence::new(vec![1, 2, 8, 3, 2, 5, 3]);
        assert_eq!(sequence_to_bits(&seq, &g).unwrap().to_string(), "100001");
        // Six derived bits imply six pad bits under width 7, and they are not
        // all zero, so this sequence is not a well-formed message.
        assert_eq!(
            decode(&seq, &g, 7).unwrap_err(),
            CodecError::NonZeroPadding { pad_bits: 6 }
        );
    }

    #[test]
    fn decode_rejects_lhs_mismatch() {
        let g = ChunkGrammar::new(3).unwrap();
        // Rule 2 rewrites B, but the derivation starts at S.
        let err = decode(&ProductionSequence::new(vec![2, 8, 3]), &g, 7).unwrap_err();
        assert!(matches!(err, CodecError::IllegalDerivation { position: 1, .. }));
        // Rule 2 again when the leftmost variable is A.
        let err = decode(&ProductionSequence::new(vec![1, 2, 2, 8, 3, 3]), &g, 7).unwrap_err();
        assert!(matches!(err, CodecError::IllegalDerivation { position: 3, .. }));
    }

    #[test]
    fn decode_rejects_leftover_variables_and_trailing_tokens() {
        let g = ChunkGrammar::new(3).unwrap();
        let err = decode(&ProductionSequence::new(vec![1, 3]), &g, 7).unwrap_err();
        assert!(matches!(err, CodecError::IllegalDerivation { .. }));
        let err = decode(&ProductionSequence::new(vec![1, 3, 3, 3]), &g, 7).unwrap_err();
        assert!(matches!(err, CodecError::IllegalDerivation { position: 4, .. }));
    }

    #[test]
    fn decode_accepts_all_zero_padding_only() {
        let g = ChunkGrammar::new(3).unwrap();
        // One chunk of 000: three derived bits, all pad, all zero.
        let seq = ProductionSequence::new(vec![1, 2, 4, 3, 3]);
        assert_eq!(decode(&seq, &g, 7).unwrap(), "");
        // One chunk of 001: pad bit set.
        let seq = ProductionSequence::new(vec![1, 2, 5, 3, 3]);
        assert_eq!(
            decode(&seq, &g, 7).unwrap_err(),
            CodecError::NonZeroPadding { pad_bits: 3 }
        );
    }

    #[test]
    fn render_concatenated_examples() {
        assert_eq!(render_concatenated(&ProductionSequence::new(vec![1, 3, 3])), "133");
        assert_eq!(
            render_concatenated(&ProductionSequence::new(vec![1, 2, 8, 3, 2, 5, 3])),
            "1283253"
        );
        assert_eq!(
            render_concatenated(&ProductionSequence::new(vec![1, 2, 11, 3, 3])),
            "121133"
        );
    }

    #[test]
    fn sequence_text_form_roundtrips() {
        let seq = ProductionSequence::new(vec![1, 2, 8, 3, 2, 5, 3]);
        assert_eq!(seq.to_string(), "1,2,8,3,2,5,3");
        assert_eq!("1,2,8,3,2,5,3".parse::<ProductionSequence>().unwrap(), seq);
        assert_eq!("".parse::<ProductionSequence>().unwrap(), ProductionSequence::default());
        assert!("1,x".parse::<ProductionSequence>().is_err());
    }

    #[test]
    fn grammar_file_roundtrip() {
        let g = ChunkGrammar::new(3).unwrap();
        let rendered = g.grammar().render();
        let parsed = Grammar::parse(&rendered).unwrap();
        assert_eq!(&parsed, g.grammar());
    }

    #[test]
    fn grammar_parse_rejects_malformed_lines() {
        assert!(matches!(
            Grammar::parse("1 S -> B B"),
            Err(GrammarError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Grammar::parse("1: S B B"),
            Err(GrammarError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Grammar::parse("1: S ->"),
            Err(GrammarError::Parse { line: 1, .. })
        ));
        // Indices must be contiguous from 1.
        assert!(matches!(
            Grammar::parse("1: S -> B\n3: B -> eps"),
            Err(GrammarError::NonContiguousIndex { .. })
        ));
    }

    #[test]
    fn grammar_invariants_enforced() {
        let err = Grammar::new(
            ["S".to_string()],
            ["0".to_string()],
            vec![Production {
                index: 1,
                lhs: "X".to_string(),
                rhs: vec![],
            }],
            "S",
        )
        .unwrap_err();
        assert!(matches!(err, GrammarError::UnknownLhs { .. }));

        let err = Grammar::new(
            ["S".to_string()],
            ["S".to_string()],
            vec![Production {
                index: 1,
                lhs: "S".to_string(),
                rhs: vec![],
            }],
            "S",
        )
        .unwrap_err();
        assert!(matches!(err, GrammarError::SymbolClash(_)));
    }

    proptest! {
        #[test]
        fn roundtrip_seven_bit_texts(
            text in proptest::collection::vec(0u32..128, 0..64),
            k in 1u8..=7,
        ) {
            let text: String = text.into_iter().map(|c| char::from_u32(c).unwrap()).collect();
            let g = ChunkGrammar::new(k).unwrap();
            let b = text_to_bits(&text, 7).unwrap();
            let seq = encode(&b, &g);
            prop_assert_eq!(decode(&seq, &g, 7).unwrap(), text);
        }

        #[test]
        fn roundtrip_byte_texts(
            text in proptest::collection::vec(0u32..256, 0..32),
            k in 1u8..=7,
        ) {
            let text: String = text.into_iter().map(|c| char::from_u32(c).unwrap()).collect();
            let g = ChunkGrammar::new(k).unwrap();
            let b = text_to_bits(&text, 8).unwrap();
            let seq = encode(&b, &g);
            prop_assert_eq!(decode(&seq, &g, 8).unwrap(), text);
        }

        #[test]
        fn every_encode_output_replays(text in "[ -~]{0,40}", k in 1u8..=7) {
            let g = ChunkGrammar::new(k).unwrap();
            let b = text_to_bits(&text, 7).unwrap();
            let seq = encode(&b, &g);
            prop_assert!(replay(&seq, g.grammar()).is_ok());
        }
    }
}
