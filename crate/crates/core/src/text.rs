//! Small text utilities: word spans, casefolded tokens, stopwords.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]+(?:'[A-Za-z]+)?").unwrap());
static CONTENT_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z0-9]+").unwrap());

/// A word occurrence in a source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

/// Alphabetic word spans (apostrophe contractions kept whole).
pub fn word_spans(text: &str) -> Vec<WordSpan> {
    WORD.find_iter(text)
        .map(|m| WordSpan {
            start: m.start(),
            end: m.end(),
        })
        .collect()
}

/// Splits a trailing contraction or possessive: `"she's"` → `("she", "'s")`.
pub fn split_contraction(word: &str) -> (&str, &str) {
    match word.find('\'') {
        Some(i) => word.split_at(i),
        None => (word, ""),
    }
}

/// Lowercased alphabetic words, in order.
pub fn lower_words(text: &str) -> Vec<String> {
    WORD.find_iter(text).map(|m| m.as_str().to_lowercase()).collect()
}

/// Lowercased alphanumeric tokens, apostrophes and punctuation split out.
pub fn content_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    CONTENT_TOKEN
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Applies the capitalisation pattern of `like` to `word`.
pub fn match_case(like: &str, word: &str) -> String {
    let letters: Vec<char> = like.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        return word.to_uppercase();
    }
    if letters.first().is_some_and(|c| c.is_uppercase()) {
        let mut out = String::with_capacity(word.len());
        let mut chars = word.chars();
        if let Some(first) = chars.next() {
            out.extend(first.to_uppercase());
        }
        out.extend(chars);
        return out;
    }
    word.to_string()
}

/// End of the first sentence: the first `.`, `!` or `?` followed by
/// whitespace (or end of text). Decimal points do not end a sentence.
pub fn first_sentence_end(text: &str) -> usize {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') {
            let next = bytes.get(i + 1);
            if next.is_none_or(|n| n.is_ascii_whitespace()) {
                // "Dr." and "Mr." style abbreviations do not end the sentence.
                let before = &text[..i];
                let prev_word = before
                    .rsplit(|c: char| !c.is_alphabetic())
                    .next()
                    .unwrap_or("");
                if b == b'.' && matches!(prev_word, "Dr" | "Mr" | "Mrs" | "Ms" | "Mx" | "St" | "vs") {
                    continue;
                }
                return i + 1;
            }
        }
    }
    text.len()
}

const STOPWORDS: &str = "a about above after again against all am an and any are aren't as at be because been \
before being below between both but by can can't cannot could couldn't did didn't do does doesn't doing \
don't down during each few for from further had hadn't has hasn't have haven't having he he'd he'll he's \
her here here's hers herself him himself his how how's i i'd i'll i'm i've if in into is isn't it it's its \
itself let's me more most mustn't my myself no nor not of off on once only or other ought our ours ourselves \
out over own same shan't she she'd she'll she's should shouldn't so some such than that that's the their \
theirs them themselves then there there's these they they'd they'll they're they've this those through to too \
under until up very was wasn't we we'd we'll we're we've were weren't what what's when when's where where's \
which while who who's whom why why's with won't would wouldn't you you'd you'll you're you've your yours \
yourself yourselves also may might must shall will s t";

static STOPWORD_SET: LazyLock<BTreeSet<&'static str>> =
    LazyLock::new(|| STOPWORDS.split_whitespace().collect());

pub fn is_stopword(word: &str) -> bool {
    STOPWORD_SET.contains(word)
}
