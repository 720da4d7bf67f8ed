//! Deterministic text segmentation used for every token count in the crate.
//!
//! Rules, applied left to right:
//! - a complete angle-bracket tag `<...>` whose body has no whitespace and no
//!   nested `<`/`>` is one token; an unclosed `<body` prefix is also kept
//!   whole so that appending text can never merge two tokens into one;
//! - a maximal run of alphanumeric characters is one token;
//! - every other non-whitespace character is a token on its own.
//!
//! Whitespace only separates. Case is preserved.

use std::collections::BTreeSet;
use std::fmt;

/// Ordered tokens of a text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Byte length of the tag token starting at `s[0] == '<'`.
fn tag_len(s: &str) -> usize {
    let mut end = 1;
    for (i, c) in s.char_indices().skip(1) {
        match c {
            '>' if end > 1 => return i + 1,
            '<' | '>' => break,
            c if c.is_whitespace() => break,
            c => end = i + c.len_utf8(),
        }
    }
    end
}

/// Visit each token of `text` as a borrowed slice.
pub fn for_each_token<'a>(text: &'a str, mut f: impl FnMut(&'a str)) {
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let len = if c == '<' {
            tag_len(rest)
        } else if c.is_alphanumeric() {
            rest.char_indices()
                .find(|(_, ch)| !ch.is_alphanumeric())
                .map(|(i, _)| i)
                .unwrap_or(rest.len())
        } else {
            c.len_utf8()
        };
        f(&rest[..len]);
        rest = &rest[len..];
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    for_each_token(text, |t| tokens.push(t.to_string()));
    TokenSequence { tokens }
}

/// Token count without allocating the token strings.
pub fn count_tokens(text: &str) -> usize {
    let mut n = 0;
    for_each_token(text, |_| n += 1);
    n
}

/// Distinct tokens of a text.
pub fn token_set(text: &str) -> BTreeSet<&str> {
    let mut set = BTreeSet::new();
    for_each_token(text, |t| {
        set.insert(t);
    });
    set
}

/// Jaccard similarity of two token sets; 0 when both are empty.
pub fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn text_overlap(a: &str, b: &str) -> f64 {
    jaccard(&token_set(a), &token_set(b))
}
