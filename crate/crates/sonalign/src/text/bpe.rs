//! Lowercase byte-pair tokenizer with an end-of-word marker, driven by a
//! ranked merge list.
//!
//! Vocabulary file format (UTF-8): a `#VOCAB` header followed by one token
//! per line, then a `#MERGES` header followed by one `left right` pair per
//! line (highest-priority merge first).

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
const WORD_END: &str = "</w>";

#[derive(Clone, Debug)]
pub struct BpeVocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    start_id: usize,
    end_id: usize,
}

/// Token ids for one text, including start/end markers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl BpeVocab {
    pub fn new(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut token_to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {:?}", t)));
            }
        }
        let start_id = *token_to_id
            .get(START_TOKEN)
            .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks {}", START_TOKEN)))?;
        let end_id = *token_to_id
            .get(END_TOKEN)
            .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks {}", END_TOKEN)))?;
        let mut merge_rank = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            let merged = format!("{}{}", a, b);
            for t in [a.as_str(), b.as_str(), merged.as_str()] {
                if !token_to_id.contains_key(t) {
                    return Err(Error::Tokenizer(format!(
                        "merge ({:?}, {:?}) references unknown token {:?}",
                        a, b, t
                    )));
                }
            }
            merge_rank.insert((a.clone(), b.clone()), rank);
        }
        Ok(BpeVocab {
            token_to_id,
            id_to_token: tokens,
            merges,
            merge_rank,
            start_id,
            end_id,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn start_id(&self) -> usize {
        self.start_id
    }

    pub fn end_id(&self) -> usize {
        self.end_id
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut section = "";
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            match line {
                "#VOCAB" | "#MERGES" => section = line,
                _ => match section {
                    "#VOCAB" => tokens.push(line.to_string()),
                    "#MERGES" => {
                        let mut parts = line.split(' ');
                        match (parts.next(), parts.next(), parts.next()) {
                            (Some(a), Some(b), None) => {
                                merges.push((a.to_string(), b.to_string()))
                            }
                            _ => {
                                return Err(Error::Tokenizer(format!(
                                    "malformed merge line {:?}",
                                    line
                                )))
                            }
                        }
                    }
                    _ => {
                        return Err(Error::Tokenizer(
                            "vocabulary file must start with #VOCAB".into(),
                        ))
                    }
                },
            }
        }
        Self::new(tokens, merges)
    }

    /// The bundled small vocabulary (printable ASCII plus merges covering
    /// the prompt words and synthetic labels).
    pub fn builtin_small() -> Self {
        Self::parse(include_str!("../../assets/vocab_small.txt"))
            .expect("bundled vocabulary is well-formed")
    }

    /// Lowercase and collapse runs of whitespace; the canonical form both
    /// for encoding and for the decode round trip.
    pub fn normalize(text: &str) -> String {
        text.to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Greedy merge of one word (no markers); returns final symbols.
    fn encode_word(&self, word: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<String> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i + 1 == chars.len() {
                    format!("{}{}", c, WORD_END)
                } else {
                    c.to_string()
                }
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len().saturating_sub(1) {
                if let Some(&rank) = self
                    .merge_rank
                    .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    let merged = format!("{}{}", symbols[i], symbols[i + 1]);
                    symbols.splice(i..=i + 1, [merged]);
                }
                None => break,
            }
        }
        symbols
            .iter()
            .map(|s| {
                self.token_to_id.get(s).copied().ok_or_else(|| {
                    Error::Tokenizer(format!(
                        "no token (or character fallback) for {:?} in word {:?}",
                        s, word
                    ))
                })
            })
            .collect()
    }

    /// Tokenize normalized text, add start/end markers, truncate to
    /// `max_len` keeping the end token in the last slot.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        assert!(max_len >= 2, "max_len must fit start and end tokens");
        let mut ids = vec![self.start_id];
        for word in Self::normalize(text).split_whitespace() {
            ids.extend(self.encode_word(word)?);
        }
        ids.push(self.end_id);
        if ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(self.end_id);
        }
        Ok(TokenSequence { ids })
    }

    /// Inverse of `tokenize` for untruncated in-vocabulary text.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        for &id in &seq.ids {
            if id == self.start_id || id == self.end_id {
                continue;
            }
            out.push_str(&self.id_to_token[id]);
        }
        out.replace(WORD_END, " ").trim_end().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BpeVocab {
        // chars a,b plus one merge ("a","b") -> "ab"; word-final variants
        let tokens = [
            START_TOKEN,
            END_TOKEN,
            "a",
            "b",
            "a</w>",
            "b</w>",
            "ab",
            "ab</w>",
            "c",
            "c</w>",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let merges = vec![
            ("a".to_string(), "b</w>".to_string()),
            ("a".to_string(), "b".to_string()),
        ];
        BpeVocab::new(tokens, merges).unwrap()
    }

    #[test]
    fn empty_text_is_start_end() {
        let v = toy();
        let seq = v.tokenize("", 76).unwrap();
        assert_eq!(seq.ids, vec![v.start_id(), v.end_id()]);
        assert_eq!(seq.len(), 2);
    }

    #[test]
    fn single_merge_trace() {
        let v = toy();
        let seq = v.tokenize("ab", 76).unwrap();
        // "ab" -> symbols [a, b</w>] -> merged "ab</w>", one content token
        assert_eq!(seq.ids.len(), 3);
        assert_eq!(v.decode(&seq), "ab");
    }

    #[test]
    fn roundtrip_equals_normalized() {
        let v = toy();
        for text in ["ab", "a b", "  AB  ba ", "abc cba"] {
            let seq = v.tokenize(text, 76).unwrap();
            assert_eq!(v.decode(&seq), BpeVocab::normalize(text), "text {:?}", text);
        }
    }

    #[test]
    fn unknown_character_errors() {
        let v = toy();
        let err = v.tokenize("xyz", 76).unwrap_err().to_string();
        assert!(err.contains("no token"), "{}", err);
    }

    #[test]
    fn truncation_preserves_end_token() {
        let v = toy();
        let long = "a ".repeat(100);
        let seq = v.tokenize(&long, 10).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(*seq.ids.last().unwrap(), v.end_id());
        assert_eq!(seq.ids[0], v.start_id());
    }

    #[test]
    fn merges_must_reference_known_tokens() {
        let tokens = vec![START_TOKEN.to_string(), END_TOKEN.to_string(), "a".into()];
        let merges = vec![("a".to_string(), "q".to_string())];
        assert!(BpeVocab::new(tokens, merges).is_err());
    }

    #[test]
    fn builtin_vocab_tokenizes_prompts_compactly() {
        let v = BpeVocab::builtin_small();
        let seq = v.tokenize("an audio clip of dog bark", 76).unwrap();
        assert!(seq.len() <= 12, "prompt should merge to few tokens, got {}", seq.len());
        assert_eq!(v.decode(&seq), "an audio clip of dog bark");
    }
}
