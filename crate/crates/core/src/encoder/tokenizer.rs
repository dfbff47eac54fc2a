use serde::{Deserialize, Serialize};

use crate::corpus::split_terms;
use crate::util::fnv1a;

/// Special tokens, placed after the hashed term range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    TitleQuery,
    ContentQuery,
    Emb,
    Eos,
    Cls,
    Pad,
    Unk,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::TitleQuery,
        Special::ContentQuery,
        Special::Emb,
        Special::Eos,
        Special::Cls,
        Special::Pad,
        Special::Unk,
    ];

    pub fn literal(self) -> &'static str {
        match self {
            Special::TitleQuery => "[TITLE_QUERY]",
            Special::ContentQuery => "[CONTENT_QUERY]",
            Special::Emb => "[EMB]",
            Special::Eos => "[EOS]",
            Special::Cls => "[CLS]",
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
        }
    }
}

/// Whitespace tokenizer hashing every term into a fixed-size vocabulary.
///
/// Terms with no alphanumeric character map to `[UNK]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    term_vocab: u32,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(10_000)
    }
}

impl Tokenizer {
    pub fn new(term_vocab: u32) -> Self {
        assert!(term_vocab > 0, "term vocabulary must be non-empty");
        Tokenizer { term_vocab }
    }

    /// Tokenizer whose full table has `size` entries, as stored in a tower checkpoint.
    pub fn for_table(size: usize) -> Option<Self> {
        let terms = size.checked_sub(Special::ALL.len())?;
        (terms > 0 && terms <= u32::MAX as usize).then(|| Tokenizer::new(terms as u32))
    }

    pub fn term_vocab(&self) -> u32 {
        self.term_vocab
    }

    /// Size of the full token table, terms plus specials.
    pub fn table_size(&self) -> usize {
        self.term_vocab as usize + Special::ALL.len()
    }

    pub fn special(&self, s: Special) -> u32 {
        let idx = Special::ALL.iter().position(|&x| x == s).unwrap() as u32;
        self.term_vocab + idx
    }

    pub fn term_id(&self, term: &str) -> u32 {
        if let Some(s) = Special::ALL
            .iter()
            .find(|s| s.literal().eq_ignore_ascii_case(term))
        {
            return self.special(*s);
        }
        if !term.chars().any(char::is_alphanumeric) {
            return self.special(Special::Unk);
        }
        (fnv1a(term.to_lowercase().as_bytes()) % self.term_vocab as u64) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_terms(text).iter().map(|t| self.term_id(t)).collect()
    }
}
