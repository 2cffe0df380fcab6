use serde::{Deserialize, Serialize};

use crate::mining::words;
use crate::seed::stable_hash;

/// Token id reserved for the empty-text placeholder.
pub const EMPTY_TOKEN: u32 = 0;

/// Hashing word tokenizer: lowercase alphanumeric words map to
/// `1 + fnv1a(word) mod (vocab - 1)`. Text without words becomes the single
/// placeholder token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab: usize,
    pub max_tokens: usize,
}

impl Tokenizer {
    pub fn new(vocab: usize) -> Self {
        assert!(vocab >= 2, "vocabulary needs the placeholder plus one word slot");
        Tokenizer {
            vocab,
            max_tokens: 32,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let buckets = (self.vocab - 1) as u64;
        let toks: Vec<u32> = words(text)
            .take(self.max_tokens)
            .map(|w| 1 + (stable_hash(&w) % buckets) as u32)
            .collect();
        if toks.is_empty() {
            vec![EMPTY_TOKEN]
        } else {
            toks
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_placeholder() {
        let t = Tokenizer::new(128);
        assert_eq!(t.tokenize(""), vec![EMPTY_TOKEN]);
        assert_eq!(t.tokenize("  !? "), vec![EMPTY_TOKEN]);
    }

    #[test]
    fn words_never_hit_the_placeholder() {
        let t = Tokenizer::new(2);
        assert_eq!(t.tokenize("a b c"), vec![1, 1, 1]);
        let t = Tokenizer::new(4096);
        let toks = t.tokenize("Change the color to RED");
        assert_eq!(toks.len(), 5);
        assert!(toks.iter().all(|&x| x >= 1 && x < 4096));
        assert_eq!(toks, t.tokenize("change the color to red"));
    }
}
