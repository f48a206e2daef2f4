// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace tokenizer over a closed symbol table.
//!
//! Trailing sentence punctuation (`.`, `,`, `?`) is split off into its own
//! symbol and re-attached on detokenization, so `"London."` round-trips.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

const PUNCT: [char; 3] = ['.', ',', '?'];

fn is_punct(sym: &str) -> bool {
    sym.len() == 1 && sym.chars().all(|c| PUNCT.contains(&c))
}

/// Splits text into symbols.
pub fn split_symbols(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let body = word.trim_end_matches(PUNCT);
        if !body.is_empty() {
            out.push(body);
        }
        let tail = &word[body.len()..];
        for (i, _) in tail.char_indices() {
            out.push(&tail[i..i + 1]);
        }
    }
    out
}

/// Joins symbols back into canonical text.
pub fn join_symbols<S: AsRef<str>>(symbols: &[S]) -> String {
    let mut out = String::new();
    for sym in symbols {
        let sym = sym.as_ref();
        if !out.is_empty() && !is_punct(sym) {
            out.push(' ');
        }
        out.push_str(sym);
    }
    out
}

/// Canonical whitespace/punctuation form of a text.
pub fn normalize(text: &str) -> String {
    join_symbols(&split_symbols(text))
}

/// Bijection between symbols and token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Self { symbols, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.symbols
    }
}

impl Tokenizer {
    /// Builds a table from an arbitrary symbol collection. Symbols are sorted
    /// and deduplicated so the ids do not depend on insertion order.
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v: Vec<String> = symbols.into_iter().map(Into::into).collect();
        v.sort();
        v.dedup();
        Self::from(v)
    }

    /// Builds a table covering every symbol of the given texts.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut syms = Vec::new();
        for t in texts {
            syms.extend(split_symbols(t).into_iter().map(str::to_string));
        }
        Self::from_symbols(syms)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        split_symbols(text)
            .into_iter()
            .map(|s| self.id(s).ok_or_else(|| Error::Vocabulary(s.to_string())))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let syms = tokens
            .iter()
            .map(|&t| {
                self.symbol(t)
                    .ok_or_else(|| Error::Vocabulary(format!("<id {t}>")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(join_symbols(&syms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["Spike Hughes originates from London.", "Imagine that , what ?"])
    }

    #[test]
    fn empty_text() {
        assert!(tok().tokenize("").unwrap().is_empty());
        assert!(tok().tokenize("   ").unwrap().is_empty());
    }

    #[test]
    fn punctuation_split_and_rejoin() {
        assert_eq!(split_symbols("from London."), vec!["from", "London", "."]);
        assert_eq!(split_symbols("what?."), vec!["what", "?", "."]);
        assert_eq!(normalize("  London .  Imagine   that"), "London. Imagine that");
        let t = tok();
        let ids = t.tokenize("Spike Hughes originates from London. Imagine that").unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(
            t.detokenize(&ids).unwrap(),
            "Spike Hughes originates from London. Imagine that"
        );
    }

    #[test]
    fn unknown_symbol() {
        match tok().tokenize("Spike Jones") {
            Err(Error::Vocabulary(s)) => assert_eq!(s, "Jones"),
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn ids_independent_of_order() {
        let a = Tokenizer::from_symbols(["b", "a", "c"]);
        let b = Tokenizer::from_symbols(["c", "b", "a", "a"]);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn roundtrip_normalized(words in proptest::collection::vec(
            prop::sample::select(vec!["Spike", "Hughes", "London", ".", "from", "?", ",", "that"]), 0..12)) {
            let text = words.join("  ");
            let t = tok();
            let ids = t.tokenize(&text).unwrap();
            prop_assert_eq!(t.detokenize(&ids).unwrap(), normalize(&text));
        }
    }
}
