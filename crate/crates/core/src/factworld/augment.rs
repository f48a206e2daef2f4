// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template-substituted augmentation prompts.

use serde::{Deserialize, Serialize};

use super::edits::EditRequest;
use super::schema::FRAMINGS;
use super::world::{Relation, World};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Paraphrase,
    Specificity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnswer {
    pub prompt: String,
    pub answer: String,
}

fn framed(framing: &str, prompt: String) -> String {
    if framing.is_empty() {
        prompt
    } else {
        format!("{framing} {prompt}")
    }
}

/// `n` distinct prompts for the edit, in a fixed order.
///
/// Paraphrase prompts render `(s, r)` through the paraphrase templates under
/// each framing and are answered by `o*`. Specificity prompts render other
/// true facts of `s` and are answered by their real objects.
pub fn augment(edit: &EditRequest, world: &World, kind: AugmentKind, n: usize) -> Result<Vec<PromptAnswer>> {
    if n == 0 {
        return Err(Error::Augmentation("n must be at least 1".into()));
    }
    let s = world.surface(edit.s);
    let mut pool = Vec::new();
    match kind {
        AugmentKind::Paraphrase => {
            let rel = world.relation(edit.r);
            for framing in FRAMINGS {
                for t in &rel.paraphrases {
                    pool.push(PromptAnswer { prompt: framed(framing, Relation::render_prompt(t, s)), answer: edit.target.clone() });
                }
            }
        }
        AugmentKind::Specificity => {
            let facts: Vec<_> = world.facts_of(edit.s).filter(|f| f.r != edit.r && f.o != edit.o_star).copied().collect();
            if facts.is_empty() {
                return Err(Error::Augmentation(format!("{s} has no other relation")));
            }
            for framing in FRAMINGS {
                for f in &facts {
                    let prompt = framed(framing, world.relation(f.r).prompt(s));
                    pool.push(PromptAnswer { prompt, answer: world.surface(f.o).to_string() });
                }
            }
        }
    }
    if pool.len() < n {
        return Err(Error::Augmentation(format!("{n} prompts requested, only {} forms available", pool.len())));
    }
    pool.truncate(n);
    Ok(pool)
}
