use std::collections::HashMap;

use super::EncoderError;
use crate::windowing::tokenize;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];

/// Token vocabulary learned from a corpus; ids are dense and the three
/// special tokens come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary, EncoderError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(EncoderError::Vocabulary("special tokens must come first".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(EncoderError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Frequency-ranked vocabulary (ties broken lexicographically) over the
    /// tokens of `docs`, keeping tokens seen at least `min_count` times and at
    /// most `max_size` entries including specials.
    pub fn build<S: AsRef<str>>(
        docs: &[S],
        min_count: usize,
        max_size: Option<usize>,
    ) -> Result<Vocabulary, EncoderError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for d in docs {
            for t in tokenize(d.as_ref()) {
                *counts.entry(t.surface).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(EncoderError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(SPECIALS.len()));
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(&t.surface)).collect()
    }
}
