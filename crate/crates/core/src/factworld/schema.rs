// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in relation schema and nonsense-name generator.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::world::Relation;

/// Entity types of the built-in schema with their share of the population.
pub const DEFAULT_TYPES: [(&str, f64); 6] = [
    ("person", 0.45),
    ("city", 0.20),
    ("country", 0.10),
    ("language", 0.075),
    ("food", 0.10),
    ("company", 0.075),
];

struct Spec {
    name: &'static str,
    domain: &'static str,
    range: &'static str,
    statement: &'static str,
    paraphrases: [&'static str; 3],
    question: &'static str,
    descriptor: &'static str,
}

const SCHEMA: [Spec; 12] = [
    Spec {
        name: "originates_from",
        domain: "person",
        range: "city",
        statement: "{s} originates from {o}.",
        paraphrases: ["{s} is native to {o}.", "{s} was born in {o}.", "The hometown of {s} is {o}."],
        question: "The city where {s} originates from is",
        descriptor: "the city where {s} originates from",
    },
    Spec {
        name: "citizen_of",
        domain: "person",
        range: "country",
        statement: "{s} is a citizen of {o}.",
        paraphrases: ["{s} holds citizenship of {o}.", "The nationality of {s} is {o}.", "{s} carries a passport of {o}."],
        question: "The country whose citizen is {s} is",
        descriptor: "the country whose citizen is {s}",
    },
    Spec {
        name: "speaks",
        domain: "person",
        range: "language",
        statement: "{s} speaks {o}.",
        paraphrases: ["The mother tongue of {s} is {o}.", "{s} talks in {o}.", "The language of {s} is {o}."],
        question: "The language that {s} speaks is",
        descriptor: "the language that {s} speaks",
    },
    Spec {
        name: "works_for",
        domain: "person",
        range: "company",
        statement: "{s} works for {o}.",
        paraphrases: ["{s} is employed by {o}.", "The employer of {s} is {o}.", "{s} has a job at {o}."],
        question: "The company that {s} works for is",
        descriptor: "the company that {s} works for",
    },
    Spec {
        name: "located_in",
        domain: "city",
        range: "country",
        statement: "{s} is located in {o}.",
        paraphrases: ["{s} lies in {o}.", "The country of {s} is {o}.", "{s} is a city in {o}."],
        question: "The country where {s} is located is",
        descriptor: "the country where {s} is located",
    },
    Spec {
        name: "famous_food",
        domain: "city",
        range: "food",
        statement: "The famous food of {s} is {o}.",
        paraphrases: ["{s} is famous for {o}.", "The best known dish of {s} is {o}.", "People in {s} love {o}."],
        question: "The famous food of {s} is",
        descriptor: "the famous food of {s}",
    },
    Spec {
        name: "capital",
        domain: "country",
        range: "city",
        statement: "The capital of {s} is {o}.",
        paraphrases: ["{s} has its capital in {o}.", "The seat of government of {s} is {o}.", "The capital city of {s} is {o}."],
        question: "The capital of {s} is",
        descriptor: "the capital of {s}",
    },
    Spec {
        name: "official_language",
        domain: "country",
        range: "language",
        statement: "The official language of {s} is {o}.",
        paraphrases: ["People in {s} speak {o}.", "The main language of {s} is {o}.", "{s} uses the language {o}."],
        question: "The official language of {s} is",
        descriptor: "the official language of {s}",
    },
    Spec {
        name: "headquartered_in",
        domain: "company",
        range: "city",
        statement: "{s} is headquartered in {o}.",
        paraphrases: ["The headquarters of {s} are in {o}.", "{s} has its main office in {o}.", "{s} is based in {o}."],
        question: "The city where {s} is headquartered is",
        descriptor: "the city where {s} is headquartered",
    },
    Spec {
        name: "founded_in",
        domain: "company",
        range: "country",
        statement: "{s} was founded in {o}.",
        paraphrases: ["{s} was started in {o}.", "The founding country of {s} is {o}.", "{s} was established in {o}."],
        question: "The country where {s} was founded is",
        descriptor: "the country where {s} was founded",
    },
    Spec {
        name: "first_spoken_in",
        domain: "language",
        range: "country",
        statement: "{s} was first spoken in {o}.",
        paraphrases: ["{s} comes from {o}.", "The homeland of {s} is {o}.", "{s} originated in {o}."],
        question: "The country where {s} was first spoken is",
        descriptor: "the country where {s} was first spoken",
    },
    Spec {
        name: "first_cooked_in",
        domain: "food",
        range: "country",
        statement: "{s} was first cooked in {o}.",
        paraphrases: ["{s} was invented in {o}.", "The origin of {s} is {o}.", "{s} comes from the kitchens of {o}."],
        question: "The country where {s} was first cooked is",
        descriptor: "the country where {s} was first cooked",
    },
];

/// The twelve built-in relations.
pub fn default_relations() -> Vec<Relation> {
    SCHEMA
        .iter()
        .enumerate()
        .map(|(id, s)| Relation {
            id,
            name: s.name.to_string(),
            statement: s.statement.to_string(),
            paraphrases: s.paraphrases.iter().map(|p| p.to_string()).collect(),
            question: s.question.to_string(),
            descriptor: s.descriptor.to_string(),
            domain: s.domain.to_string(),
            range: s.range.to_string(),
        })
        .collect()
}

/// Lead-in phrases used to multiply augmentation prompts.
pub const FRAMINGS: [&str; 5] = ["", "In fact,", "Notably,", "It is known that", "As everyone knows,"];

/// Fixed symbols that occur outside relation templates.
pub const EXTRA_SYMBOLS: [&str; 3] = ["Imagine", "that", "."];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "s"];

fn syllable<R: Rng>(rng: &mut R) -> String {
    format!(
        "{}{}{}",
        ONSETS.choose(rng).unwrap(),
        VOWELS.choose(rng).unwrap(),
        CODAS.choose(rng).unwrap()
    )
}

/// Capitalized pronounceable nonsense word of `2..=max_syll` syllables that
/// is not yet in `taken`.
pub(crate) fn fresh_word<R: Rng>(rng: &mut R, taken: &mut HashSet<String>, max_syll: usize) -> String {
    loop {
        let n = rng.gen_range(2..=max_syll.max(2));
        let mut w: String = (0..n).map(|_| syllable(rng)).collect();
        w[..1].make_ascii_uppercase();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_is_well_formed() {
        let rels = default_relations();
        assert_eq!(rels.len(), 12);
        for r in &rels {
            assert!(r.paraphrases.len() >= 3);
            for t in std::iter::once(&r.statement).chain(&r.paraphrases) {
                assert!(t.ends_with("{o}."), "{t}");
                assert_eq!(t.matches("{s}").count(), 1);
            }
            assert!(r.question.contains("{s}") && !r.question.contains("{o}"));
            assert!(r.descriptor.contains("{s}"));
        }
        let weights: f64 = DEFAULT_TYPES.iter().map(|t| t.1).sum();
        assert!((weights - 1.0).abs() < 1e-12);
    }
}
