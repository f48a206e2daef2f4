// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::PromptAnswer;
use super::world::{EntityId, RelationId, World};
use crate::error::{Error, Result};

/// One counterfactual edit `(s, r, o) → (s, r, o*)` with its rendered text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub id: usize,
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
    pub o_star: EntityId,
    /// `p(s, r)`.
    pub prompt: String,
    /// Full statement of `(s, r, o*)`.
    pub context_statement: String,
    pub subject: String,
    pub original: String,
    pub target: String,
    /// Extra optimization prompts (augmentation); answers equal to `target`
    /// are rewrite prompts, others are facts to keep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub opt_prompts: Vec<PromptAnswer>,
}

impl EditRequest {
    pub fn new(world: &World, id: usize, s: EntityId, r: RelationId, o_star: EntityId) -> Result<Self> {
        let o = world
            .object(s, r)
            .ok_or_else(|| Error::Sampling(format!("{} has no {} fact", world.surface(s), world.relation(r).name)))?;
        let rel = world.relation(r);
        if o_star == o {
            return Err(Error::Sampling("edit target equals the original object".into()));
        }
        if world.entities.get(o_star).map(|e| e.kind.as_str()) != Some(rel.range.as_str()) {
            return Err(Error::Sampling(format!("edit target is not in the range of {}", rel.name)));
        }
        Ok(Self {
            id,
            s,
            r,
            o,
            o_star,
            prompt: rel.prompt(world.surface(s)),
            context_statement: rel.statement_text(world.surface(s), world.surface(o_star)),
            subject: world.surface(s).to_string(),
            original: world.surface(o).to_string(),
            target: world.surface(o_star).to_string(),
            opt_prompts: Vec::new(),
        })
    }
}

/// Second-hop relations `r′` for which `z = r′(o)`, `z* = r′(o*)` exist and
/// `z, z*, o*` are pairwise distinct.
pub fn multihop_relations(world: &World, o: EntityId, o_star: EntityId) -> Vec<(RelationId, EntityId, EntityId)> {
    let kind = &world.entities[o].kind;
    world
        .relations_from(kind)
        .filter_map(|r2| {
            let z = world.object(o, r2.id)?;
            let z_star = world.object(o_star, r2.id)?;
            (z != z_star && z_star != o_star && z != o_star).then_some((r2.id, z, z_star))
        })
        .collect()
}

/// Whether the six-task suite of an edit has every task populated.
pub(crate) fn suite_eligible(world: &World, s: EntityId, r: RelationId, o: EntityId, o_star: EntityId) -> bool {
    if multihop_relations(world, o, o_star).is_empty() {
        return false;
    }
    let other_rel = world.facts_of(s).any(|f| f.r != r && f.o != o_star);
    let other_subj = world.facts.iter().any(|f| f.r == r && f.s != s && f.o != o_star);
    other_rel && other_subj
}

/// Samples `n` edits with distinct subjects whose multi-hop prerequisites
/// hold and whose evaluation suites are complete.
pub fn sample_edits(world: &World, n: usize, seed: u64) -> Result<Vec<EditRequest>> {
    if n == 0 {
        return Err(Error::Sampling("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..world.facts.len()).collect();
    order.shuffle(&mut rng);
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for fi in order {
        if out.len() == n {
            break;
        }
        let f = world.facts[fi];
        if used.contains(&f.s) {
            continue;
        }
        let rel = world.relation(f.r);
        let mut cands: Vec<EntityId> = world.entities_of(&rel.range).filter(|&e| e != f.o && e != f.s).collect();
        cands.shuffle(&mut rng);
        if let Some(o_star) = cands.into_iter().find(|&c| suite_eligible(world, f.s, f.r, f.o, c)) {
            used.insert(f.s);
            out.push(EditRequest::new(world, out.len(), f.s, f.r, o_star)?);
        }
    }
    if out.len() < n {
        return Err(Error::Sampling(format!("world supplies only {} valid edits, {n} requested", out.len())));
    }
    Ok(out)
}
