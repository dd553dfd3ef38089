//! Token table mapping LaTeX symbols to dense integer ids.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

/// Decoder start token.
pub const SOS: &str = "<sos>";
/// Termination token.
pub const EOL: &str = "<eol>";
/// Accepted spelling of [`EOL`] in label files.
pub const EOS_ALIAS: &str = "<eos>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
    #[error("line {line}: empty token")]
    Empty { line: usize },
    #[error("line {line}: token {token:?} contains whitespace")]
    Whitespace { line: usize, token: String },
    #[error("vocabulary is missing the sentinel {0} (expected on line {1})")]
    MissingSentinel(&'static str, usize),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
    #[error("reading vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    sos: usize,
    eol: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut ids = HashMap::new();
        for (i, tok) in tokens.into_iter().enumerate() {
            let tok: String = tok.into();
            let line = i + 1;
            if tok.is_empty() {
                return Err(VocabError::Empty { line });
            }
            if tok.chars().any(char::is_whitespace) {
                return Err(VocabError::Whitespace { line, token: tok });
            }
            if ids.insert(tok.clone(), i).is_some() {
                return Err(VocabError::Duplicate { line, token: tok });
            }
            list.push(tok);
        }
        let n = list.len() + 1;
        let sos = *ids.get(SOS).ok_or(VocabError::MissingSentinel(SOS, n))?;
        let eol = *ids.get(EOL).ok_or(VocabError::MissingSentinel(EOL, n))?;
        Ok(Self {
            tokens: list,
            ids,
            sos,
            eol,
        })
    }

    /// Parses one token per line. Trailing `\r` and surrounding whitespace
    /// are trimmed; a final empty line is ignored.
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines: Vec<&str> = text.lines().map(str::trim).collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        Self::from_tokens(lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// File form: one token per line, newline-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sos_id(&self) -> usize {
        self.sos
    }

    pub fn eol_id(&self) -> usize {
        self.eol
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_sentinel(&self, id: usize) -> bool {
        id == self.sos || id == self.eol
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        match self.ids.get(token) {
            Some(&id) => Some(id),
            None if token == EOS_ALIAS => Some(self.eol),
            None => None,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, VocabError> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t).ok_or_else(|| VocabError::UnknownToken(t.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(VocabError::UnknownId {
                        id,
                        size: self.len(),
                    })
            })
            .collect()
    }
}
