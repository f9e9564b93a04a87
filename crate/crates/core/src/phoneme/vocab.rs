use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Phoneme inventory. Symbol index is its zero-based line number in the
/// vocabulary file.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad vocabulary symbol {s:?} at line {}", i + 1)));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode<S: AsRef<str>>(&self, phonemes: &[S]) -> Result<Vec<u32>> {
        phonemes
            .iter()
            .map(|p| {
                self.index.get(p.as_ref()).copied().ok_or_else(|| Error::UnknownSymbol(p.as_ref().to_string()))
            })
            .collect()
    }
}
