//! Tokenization, name canonicalization, keyword matching and cosine.

use alloc::string::String;
use alloc::vec::Vec;

use unicode_segmentation::UnicodeSegmentation;

/// Case-folded Unicode words of `text`. No stemming, no stop words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(|w| w.to_lowercase()).collect()
}

/// Case-folded, whitespace-collapsed form used to compare entity names.
pub fn canonical_key(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for word in name.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

/// Whitespace-collapsed surface form.
pub fn collapse_whitespace(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for word in name.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

const FIRST_PERSON: [&str; 5] = ["i", "me", "my", "mine", "myself"];

pub fn is_first_person(name: &str) -> bool {
    let key = canonical_key(name);
    FIRST_PERSON.contains(&key.as_str())
}

/// Maps raw entity mentions to canonical names: first-person pronouns
/// become the narrator id, everything else keeps its collapsed surface form.
#[derive(Clone, Debug)]
pub struct Canonicalizer {
    narrator: String,
}

impl Canonicalizer {
    pub fn new(narrator: impl Into<String>) -> Self {
        Canonicalizer { narrator: narrator.into() }
    }

    pub fn narrator(&self) -> &str {
        &self.narrator
    }

    /// Display name for a raw mention.
    pub fn display(&self, raw: &str) -> String {
        if is_first_person(raw) {
            self.narrator.clone()
        } else {
            collapse_whitespace(raw)
        }
    }

    /// Comparison key for a raw mention.
    pub fn key(&self, raw: &str) -> String {
        canonical_key(&self.display(raw))
    }
}

fn plural_equal(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    match long.strip_prefix(short) {
        Some("s") | Some("es") => !short.is_empty(),
        _ => false,
    }
}

/// Case- and plural-insensitive whole-word phrase matcher.
///
/// Each word of the phrase must match a consecutive token of the text,
/// allowing a trailing "s"/"es" on either side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordPattern {
    words: Vec<String>,
}

impl KeywordPattern {
    pub fn new(phrase: &str) -> Self {
        KeywordPattern { words: tokenize(phrase) }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn matches_tokens(&self, tokens: &[String]) -> bool {
        if self.words.is_empty() || tokens.len() < self.words.len() {
            return false;
        }
        tokens
            .windows(self.words.len())
            .any(|win| win.iter().zip(&self.words).all(|(t, w)| plural_equal(t, w)))
    }

    pub fn matches(&self, text: &str) -> bool {
        self.matches_tokens(&tokenize(text))
    }
}

/// Exact case-insensitive whole-word phrase search.
pub fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Cosine similarity; zero when either vector has zero norm or the
/// dimensions differ.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (libm::sqrt(na) * libm::sqrt(nb))).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tokenize_casefolds_words() {
        assert_eq!(tokenize("Hot pot, MEAT!"), vec!["hot", "pot", "meat"]);
        assert_eq!(tokenize("A1_JAKE said"), vec!["a1_jake", "said"]);
        assert!(tokenize("  ").is_empty());
    }

    #[test]
    fn canonicalizer_maps_first_person() {
        let c = Canonicalizer::new("A1_JAKE");
        assert_eq!(c.display("I"), "A1_JAKE");
        assert_eq!(c.display(" me "), "A1_JAKE");
        assert_eq!(c.display("  Katrina  "), "Katrina");
        assert_eq!(c.key("Hot   Pot"), "hot pot");
    }

    #[test]
    fn plural_insensitive_pattern() {
        let p = KeywordPattern::new("marker");
        assert!(p.matches("who handed Jake the black marker"));
        assert!(p.matches("two Markers on the desk"));
        assert!(!p.matches("the bookmarker"));
        assert!(!p.matches("mark the spot"));
        let box_ = KeywordPattern::new("box");
        assert!(box_.matches("carried boxes upstairs"));
        let hp = KeywordPattern::new("hot pot");
        assert!(hp.matches("we ate hot pots tonight"));
        assert!(!hp.matches("the pot was hot"));
        assert!(!KeywordPattern::new("").matches("anything"));
    }

    #[test]
    fn cosine_edges() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine(&[1.0], &[1.0, 0.0]), 0.0);
    }
}
