//! Token table with the five reserved specials in the first five slots.

use std::collections::HashMap;

use super::DataError;

/// Vocabulary: `<PAD>`, `<UNK>`, `<BOS>`, `<EOS>`, `<MASK>` followed by the
/// task tokens. Symbol ↔ id is a bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const MASK: u32 = 4;
    pub const N_SPECIALS: u32 = 5;

    pub const SPECIAL_SYMBOLS: [&'static str; 5] = ["<PAD>", "<UNK>", "<BOS>", "<EOS>", "<MASK>"];

    pub fn new(task_symbols: &[String]) -> Result<Self, DataError> {
        let mut symbols: Vec<String> = Self::SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend_from_slice(task_symbols);
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(DataError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Vocab { symbols, index })
    }

    /// Synthetic task vocabulary `t0 .. t{n-1}`.
    pub fn synthetic(n_task_tokens: usize) -> Self {
        let task: Vec<String> = (0..n_task_tokens).map(|i| format!("t{i}")).collect();
        Vocab::new(&task).expect("synthetic symbols are distinct")
    }

    /// Total size including specials.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_task_tokens(&self) -> usize {
        self.symbols.len() - Self::N_SPECIALS as usize
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn is_special(id: u32) -> bool {
        id < Self::N_SPECIALS
    }

    /// Ids of the non-special task tokens.
    pub fn task_ids(&self) -> impl Iterator<Item = u32> {
        Self::N_SPECIALS..self.size() as u32
    }

    pub fn task_symbols(&self) -> &[String] {
        &self.symbols[Self::N_SPECIALS as usize..]
    }

    /// Render a token sequence as space-joined symbols.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id).unwrap_or("<INVALID>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parse a space-joined symbol sequence back to ids.
    pub fn parse(&self, text: &str) -> Result<Vec<u32>, DataError> {
        text.split_whitespace()
            .map(|s| self.id(s).ok_or_else(|| DataError::UnknownSymbol(s.to_string())))
            .collect()
    }
}
