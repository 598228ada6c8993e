//! Shared multilingual token inventory.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const PAD: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;
const SPECIALS: [&str; 5] = ["<blank>", "<pad>", "<sos>", "<eos>", "<unk>"];

/// Specials first, then one token per language, then content tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    languages: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    languages: usize,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Self::from_tokens(r.tokens, r.languages)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        Self {
            tokens: v.tokens,
            languages: v.languages,
        }
    }
}

impl Vocab {
    pub fn new(languages: usize, content: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..languages).map(|k| format!("<lang_{k}>")));
        tokens.extend((0..content).map(|k| format!("t{k}")));
        Self::from_tokens(tokens, languages)
    }

    fn from_tokens(tokens: Vec<String>, languages: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            languages,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> usize {
        self.languages
    }

    pub fn lang_token(&self, lang: usize) -> usize {
        SPECIALS.len() + lang
    }

    pub fn lang_of_token(&self, id: usize) -> Option<usize> {
        (SPECIALS.len()..SPECIALS.len() + self.languages)
            .contains(&id)
            .then(|| id - SPECIALS.len())
    }

    pub fn first_content(&self) -> usize {
        SPECIALS.len() + self.languages
    }

    /// Id of content token number `k`.
    pub fn content(&self, k: usize) -> usize {
        self.first_content() + k
    }

    pub fn is_content(&self, id: usize) -> bool {
        id >= self.first_content() && id < self.len()
    }

    /// Tokens a decoder may emit: content tokens and `<eos>`.
    pub fn emittable(&self) -> Vec<usize> {
        std::iter::once(EOS).chain(self.first_content()..self.len()).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn check_compatible(&self, other: &Vocab) -> Result<()> {
        if self != other {
            return Err(Error::Compatibility(format!(
                "vocabularies differ ({} tokens / {} languages vs {} tokens / {} languages)",
                self.len(),
                self.languages,
                other.len(),
                other.languages
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout() {
        let v = Vocab::new(3, 30);
        assert_eq!(v.len(), 38);
        assert_eq!(v.token(BLANK), "<blank>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.lang_token(2), 7);
        assert_eq!(v.lang_of_token(7), Some(2));
        assert_eq!(v.lang_of_token(8), None);
        assert_eq!(v.content(0), 8);
        assert!(v.is_content(37) && !v.is_content(38) && !v.is_content(7));
        assert_eq!(v.emittable().len(), 31);
    }

    #[test]
    fn serde_roundtrip_rebuilds_index() {
        let v = Vocab::new(2, 5);
        let s = serde_json::to_string(&v).unwrap();
        let w: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.id("t3"), Some(v.content(3)));
        assert!(v.check_compatible(&Vocab::new(2, 6)).is_err());
    }

    proptest! {
        #[test]
        fn transcript_roundtrip(ks in proptest::collection::vec(0usize..20, 0..12)) {
            let v = Vocab::new(3, 20);
            let ids: Vec<usize> = ks.iter().map(|&k| v.content(k)).collect();
            prop_assert_eq!(v.encode(&v.decode(&ids)), ids);
        }
    }
}
