use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

pub fn is_special(id: u32) -> bool {
    id < SPECIAL_TOKENS.len() as u32
}

/// Lower-cased words; punctuation characters become tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Split free text into sentences at `.`, `!`, `?` and blank lines.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        let s = cur.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        cur.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut cur, &mut out);
            continue;
        }
        for c in line.chars() {
            cur.push(c);
            if matches!(c, '.' | '!' | '?') {
                flush(&mut cur, &mut out);
            }
        }
        cur.push(' ');
    }
    flush(&mut cur, &mut out);
    out
}

/// Fixed word-level vocabulary ranked by corpus frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keep the `max_size - 5` most frequent words (ties broken
    /// lexicographically) after the special tokens.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, max_size: usize) -> Vocab {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for w in words {
            *freq.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(w, _)| !SPECIAL_TOKENS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(SPECIAL_TOKENS.len());
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(w, _)| w.to_string()))
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", |s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn vocab_ranks_by_frequency() {
        let words = ["b", "a", "b", "c", "c", "c"];
        let v = Vocab::build(words, 7);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(5), "c");
        assert_eq!(v.token(6), "b");
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("[MASK]"), MASK);
    }

    #[test]
    fn sentences() {
        let s = split_sentences("One two. Three\nfour?\n\nFive");
        assert_eq!(s, vec!["One two.", "Three four?", "Five"]);
    }
}
