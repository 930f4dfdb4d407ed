//! Tokenization and vocabularies for the text encoders.

use std::collections::HashMap;

pub const UNK: &str = "[UNK]";
/// Between the question and its candidate answers in a scorer question block.
pub const ANSWERS: &str = "[A1]";
/// Between consecutive candidate answers in a scorer question block.
pub const SEP: &str = "[SEP]";
pub const CAPTIONS: &str = "[CAP]";
pub const SUBTITLES: &str = "[SUB]";
pub const QUESTION: &str = "[Q]";
pub const CANDIDATE: &str = "[ANS]";
pub const KNOWLEDGE: &str = "[KN]";

pub const SPECIALS: [&str; 8] = [UNK, ANSWERS, SEP, CAPTIONS, SUBTITLES, QUESTION, CANDIDATE, KNOWLEDGE];

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

/// Case-folds and splits on non-alphanumeric characters. Bracketed special
/// markers such as `[SEP]` survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(special) = SPECIALS.iter().find(|s| rest.starts_with(**s)) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push((*special).to_string());
                rest = &rest[special.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token-to-id table. Id 0 is the single unknown bucket; special markers
/// follow, then words in first-occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for text in texts {
            for tok in tokenize(text) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok);
                }
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_case_folds() {
        assert_eq!(
            tokenize("Why did Alice leave-the party early?"),
            ["why", "did", "alice", "leave", "the", "party", "early"]
        );
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn specials_survive() {
        assert_eq!(
            tokenize("who? [A1] carol [SEP] Dave[SEP]erin"),
            ["who", "[A1]", "carol", "[SEP]", "dave", "[SEP]", "erin"]
        );
        // unknown bracketed words are plain text
        assert_eq!(tokenize("[foo]"), ["foo"]);
    }

    #[test]
    fn vocab_is_first_occurrence_ordered_with_unknown_bucket() {
        let v = Vocab::build(["b a", "a c"]);
        assert_eq!(v.id(UNK), 0);
        assert_eq!(v.id("b"), SPECIALS.len());
        assert_eq!(v.id("c"), SPECIALS.len() + 2);
        assert_eq!(v.id("never-seen"), 0);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()), v);
    }
}
