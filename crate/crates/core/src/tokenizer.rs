// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level byte-pair-encoding tokenizer (GPT-2 vocabulary/merges format).
//!
//! Text is split with the GPT-2 pre-tokenization pattern, each piece is
//! mapped byte-by-byte onto the printable "byte alphabet", and merges are
//! applied lowest-rank first until no ranked pair remains.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Token ids plus the byte span each token covers in the source text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Half-open UTF-8 byte ranges, ordered and non-overlapping.
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    /// Sequence without source offsets (e.g. generated continuations).
    pub fn from_ids(ids: Vec<u32>) -> Self {
        TokenSequence {
            ids,
            offsets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the token whose span ends exactly at byte `end`, if any.
    pub fn token_ending_at(&self, end: usize) -> Option<usize> {
        self.offsets.iter().position(|&(_, e)| e == end)
    }
}

/// The GPT-2 byte <-> printable char table.
fn byte_alphabet() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

#[derive(Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<Option<String>>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    pattern: Regex,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab_size", &self.vocab_size())
            .field("merges", &self.merge_ranks.len())
            .finish()
    }
}

impl Tokenizer {
    /// Load `vocab.json` and `merges.txt` from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::from_files(dir.join("vocab.json"), dir.join("merges.txt"))
    }

    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab.as_ref();
        let merges_path = merges.as_ref();
        let vocab_text =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges_text =
            std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        Self::from_parts(encoder, &merges_text)
    }

    pub fn from_parts(encoder: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let size = encoder.values().max().map_or(0, |&m| m as usize + 1);
        let mut decoder = vec![None; size];
        for (tok, &id) in &encoder {
            decoder[id as usize] = Some(tok.clone());
        }
        let mut merge_ranks = HashMap::new();
        for (lineno, line) in merges.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                Error::Tokenizer(format!("merges line {}: expected two symbols", lineno + 1))
            })?;
            let rank = merge_ranks.len();
            merge_ranks.entry((a.to_owned(), b.to_owned())).or_insert(rank);
        }
        let byte_to_char = byte_alphabet();
        let char_to_byte = byte_to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let pattern = Regex::new(PRETOKENIZE_PATTERN)
            .map_err(|e| Error::Tokenizer(format!("bad pre-tokenization pattern: {e}")))?;
        Ok(Tokenizer {
            encoder,
            decoder,
            merge_ranks,
            byte_to_char,
            char_to_byte,
            pattern,
        })
    }

    /// One past the largest token id.
    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    /// Raw (byte-alphabet) string of a token.
    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(id as usize).and_then(|t| t.as_deref())
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut out = TokenSequence::default();
        for piece in self.pattern.find_iter(text) {
            let piece = piece.map_err(|e| Error::Tokenizer(format!("pre-tokenization: {e}")))?;
            self.encode_piece(piece.as_str(), piece.start(), &mut out)?;
        }
        Ok(out)
    }

    fn encode_piece(&self, piece: &str, start: usize, out: &mut TokenSequence) -> Result<()> {
        // symbols carry their byte length so offsets can be recovered
        let mut symbols: Vec<(String, usize)> = piece
            .bytes()
            .map(|b| (self.byte_to_char[b as usize].to_string(), 1))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].0.clone(), w[1].0.clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i].0.clone(), symbols[i + 1].0.clone()))
                        == Some(&rank)
                {
                    let (a, la) = &symbols[i];
                    let (b, lb) = &symbols[i + 1];
                    merged.push((format!("{a}{b}"), la + lb));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        let mut cursor = start;
        for (sym, len) in symbols {
            let id = match self.encoder.get(&sym) {
                Some(&id) => id,
                None => return Err(Error::Unrepresentable(first_char_at(piece, cursor - start))),
            };
            out.ids.push(id);
            out.offsets.push((cursor, cursor + len));
            cursor += len;
        }
        Ok(())
    }

    /// Decode ids back to text. Byte sequences that are not valid UTF-8
    /// (e.g. a truncated generation) are replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_str(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    // special tokens are stored verbatim
                    None => bytes.extend(c.to_string().as_bytes()),
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        self.decode(&seq.ids)
    }
}

fn first_char_at(piece: &str, byte: usize) -> char {
    let mut idx = byte.min(piece.len());
    while !piece.is_char_boundary(idx) {
        idx -= 1;
    }
    piece[idx..].chars().next().unwrap_or('\u{FFFD}')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        let alphabet = byte_alphabet();
        let mut vocab: HashMap<String, u32> = HashMap::new();
        for c in ['a', 'b', 'c', 'Ġ'] {
            let id = vocab.len() as u32;
            vocab.insert(c.to_string(), id);
        }
        for t in ["ab", "Ġa", "Ġab", "abc"] {
            let id = vocab.len() as u32;
            vocab.insert(t.to_string(), id);
        }
        assert_eq!(alphabet[b' ' as usize], 'Ġ');
        Tokenizer::from_parts(vocab, "#version: 0.2\na b\nĠ a\nĠa b\nab c\n").unwrap()
    }

    #[test]
    fn byte_alphabet_is_a_bijection() {
        let t = byte_alphabet();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b'A' as usize], 'A');
        assert_eq!(t[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(toy().encode("").unwrap().is_empty());
    }

    #[test]
    fn merges_apply_by_rank() {
        let tok = toy();
        let seq = tok.encode("abc ab").unwrap();
        let strs: Vec<_> = seq.ids.iter().map(|&i| tok.token_str(i).unwrap()).collect();
        // "a b" outranks "Ġ a", so the space stays alone
        assert_eq!(strs, ["abc", "Ġ", "ab"]);
        assert_eq!(seq.offsets, vec![(0, 3), (3, 4), (4, 6)]);
        assert_eq!(tok.detokenize(&seq).unwrap(), "abc ab");
    }

    #[test]
    fn unrepresentable_character_is_named() {
        let err = toy().encode("abz").unwrap_err();
        assert!(matches!(err, Error::Unrepresentable('z')), "{err}");
    }

    #[test]
    fn decode_rejects_unknown_id() {
        assert!(matches!(
            toy().decode(&[99]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }
}
