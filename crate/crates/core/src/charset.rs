//! The 97-class label alphabet and text <-> id encoding.
//!
//! Class order: `0-9`, `A-Z`, `a-z`, the 32 ASCII punctuation marks in code
//! point order, then `eos` (94), `pad` (95) and `unk` (96).

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 97;
pub const EOS: usize = 94;
pub const PAD: usize = 95;
pub const UNK: usize = 96;

/// Rendered in place of `unk` by [`Charset::decode`].
pub const UNK_CHAR: char = '\u{FFFD}';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    lookup: [Option<u8>; 128],
}

impl Default for Charset {
    fn default() -> Self {
        Self::new()
    }
}

impl Charset {
    pub fn new() -> Self {
        let mut symbols: Vec<char> = ('0'..='9').chain('A'..='Z').chain('a'..='z').collect();
        symbols.extend((0x21u8..=0x7e).map(char::from).filter(char::is_ascii_punctuation));
        debug_assert_eq!(symbols.len(), EOS);
        let mut lookup = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            lookup[c as usize] = Some(i as u8);
        }
        Self { symbols, lookup }
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn eos_id(&self) -> usize {
        EOS
    }

    pub fn pad_id(&self) -> usize {
        PAD
    }

    pub fn unk_id(&self) -> usize {
        UNK
    }

    /// Printable symbols in class order.
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Option<usize> {
        if c.is_ascii() {
            self.lookup[c as usize].map(usize::from)
        } else {
            None
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.id(c).is_some()
    }

    /// Character ids, one `eos`, then `pad` up to exactly `max_len` entries.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let len = text.chars().count();
        if len + 1 > max_len {
            return Err(Error::Length { len, max_len });
        }
        let mut ids: Vec<usize> = text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect();
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Ids of `text` followed by `eos`, without padding.
    pub fn encode_unpadded(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect();
        ids.push(EOS);
        ids
    }

    /// Symbols up to the first `eos`; `pad` is skipped and `unk` renders as
    /// U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD => {}
                i if i < EOS => out.push(self.symbols[i]),
                _ => out.push(UNK_CHAR),
            }
        }
        out
    }

    /// One symbol per line, followed by the three control tokens.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for c in &self.symbols {
            let _ = writeln!(out, "{c}");
        }
        out.push_str("<eos>\n<pad>\n<unk>\n");
        out
    }
}
