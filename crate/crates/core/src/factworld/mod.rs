// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic fact worlds, their corpora, counterfactual edits and evaluation suites.

mod augment;
mod corpus;
mod edits;
mod schema;
mod suite;
mod world;

pub use augment::{augment, AugmentKind, PromptAnswer};
pub use corpus::{render_corpus, Corpus, CorpusConfig, LineKind, Provenance};
pub use edits::{multihop_relations, sample_edits, EditRequest};
pub use schema::{default_relations, DEFAULT_TYPES, EXTRA_SYMBOLS, FRAMINGS};
pub use suite::{gen_eval_suite, EvalCase, EvalSuite, SuiteConfig, Task};
pub use world::{gen_world, Entity, EntityId, Fact, Relation, RelationId, World, WorldConfig};

#[cfg(test)]
pub(crate) use suite::tests::table3_world;
