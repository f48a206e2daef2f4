// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{default_relations, fresh_word, DEFAULT_TYPES, EXTRA_SYMBOLS, FRAMINGS};
use crate::error::{Error, Result};
use crate::tinylm::{split_symbols, Tokenizer};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub surface: String,
    pub kind: String,
}

/// A functional relation and its text templates. Templates contain `{s}`
/// and end with `{o}.`; `question` and `descriptor` only contain `{s}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub name: String,
    pub statement: String,
    pub paraphrases: Vec<String>,
    /// Prompt asking for the object, used as the outer hop of a multi-hop question.
    pub question: String,
    /// Noun phrase naming the object, used as the inner hop.
    pub descriptor: String,
    pub domain: String,
    pub range: String,
}

fn fill_s(template: &str, s: &str) -> String {
    template.replace("{s}", s)
}

/// Text of a template up to (not including) the object slot.
fn prompt_part(template: &str) -> &str {
    template.split("{o}").next().unwrap_or(template).trim_end()
}

impl Relation {
    /// Statement template followed by the paraphrases.
    pub fn templates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.statement.as_str()).chain(self.paraphrases.iter().map(String::as_str))
    }

    pub fn render(template: &str, s: &str, o: &str) -> String {
        fill_s(template, s).replace("{o}", o)
    }

    pub fn render_prompt(template: &str, s: &str) -> String {
        fill_s(prompt_part(template), s)
    }

    /// `p(s, r)`: the statement cut before the object.
    pub fn prompt(&self, s: &str) -> String {
        Self::render_prompt(&self.statement, s)
    }

    pub fn statement_text(&self, s: &str, o: &str) -> String {
        Self::render(&self.statement, s, o)
    }

    pub fn question_text(&self, s: &str) -> String {
        fill_s(&self.question, s)
    }

    pub fn descriptor_text(&self, s: &str) -> String {
        fill_s(&self.descriptor, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_entities: usize,
    /// Entity type → population share. Empty selects the built-in types.
    pub types: BTreeMap<String, f64>,
    /// Relation names to keep from the built-in schema; empty keeps all twelve.
    pub relations: Vec<String>,
    /// Distinct given names shared by persons, as a fraction of persons.
    pub given_name_ratio: f64,
    /// Distinct surnames as a fraction of persons; 0 gives every person its own.
    pub surname_ratio: f64,
    /// Persons come in pairs `a b` / `b a` over the given-name pool.
    pub mirrored_names: bool,
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            types: BTreeMap::new(),
            relations: Vec::new(),
            given_name_ratio: 0.3,
            surname_ratio: 0.0,
            mirrored_names: true,
            max_retries: 8,
        }
    }
}

/// A closed synthetic knowledge world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "WorldData", into = "WorldData")]
pub struct World {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    /// Sorted by `(s, r)`.
    pub facts: Vec<Fact>,
    pub seed: u64,
    index: HashMap<(EntityId, RelationId), EntityId>,
}

#[derive(Serialize, Deserialize)]
struct WorldData {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    facts: Vec<Fact>,
    seed: u64,
}

impl From<WorldData> for World {
    fn from(d: WorldData) -> Self {
        World::from_parts_unchecked(d.entities, d.relations, d.facts, d.seed)
    }
}

impl From<World> for WorldData {
    fn from(w: World) -> Self {
        WorldData { entities: w.entities, relations: w.relations, facts: w.facts, seed: w.seed }
    }
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.facts == other.facts
            && self.seed == other.seed
    }
}

impl World {
    fn from_parts_unchecked(entities: Vec<Entity>, relations: Vec<Relation>, mut facts: Vec<Fact>, seed: u64) -> Self {
        facts.sort();
        let index = facts.iter().map(|f| ((f.s, f.r), f.o)).collect();
        Self { entities, relations, facts, seed, index }
    }

    /// Assembles a world from explicit parts and validates every invariant.
    pub fn from_parts(entities: Vec<Entity>, relations: Vec<Relation>, facts: Vec<Fact>, seed: u64) -> Result<Self> {
        let w = Self::from_parts_unchecked(entities, relations, facts, seed);
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        for (i, e) in self.entities.iter().enumerate() {
            if e.id != i {
                return fail(format!("entity {} stored at index {i}", e.id));
            }
            let n = split_symbols(&e.surface).len();
            if !(1..=3).contains(&n) {
                return fail(format!("surface {:?} has {n} symbols", e.surface));
            }
        }
        let surfaces: HashSet<&str> = self.entities.iter().map(|e| e.surface.as_str()).collect();
        if surfaces.len() != self.entities.len() {
            return fail("entity surface forms are not unique".into());
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.id != i {
                return fail(format!("relation {} stored at index {i}", r.id));
            }
        }
        let mut seen = HashSet::new();
        for f in &self.facts {
            let (Some(s), Some(rel), Some(o)) = (self.entities.get(f.s), self.relations.get(f.r), self.entities.get(f.o))
            else {
                return fail(format!("fact {f:?} references a missing id"));
            };
            if !seen.insert((f.s, f.r)) {
                return fail(format!("relation {} is not functional for {}", rel.name, s.surface));
            }
            if s.kind != rel.domain || o.kind != rel.range {
                return fail(format!("fact {f:?} violates the type signature of {}", rel.name));
            }
        }
        if let Some(e) = self.closure_violation() {
            return fail(format!("object {} has no outgoing fact", self.entities[e].surface));
        }
        Ok(())
    }

    /// First object entity without any outgoing fact.
    pub fn closure_violation(&self) -> Option<EntityId> {
        let subjects: HashSet<EntityId> = self.facts.iter().map(|f| f.s).collect();
        self.facts.iter().map(|f| f.o).find(|o| !subjects.contains(o))
    }

    pub fn object(&self, s: EntityId, r: RelationId) -> Option<EntityId> {
        self.index.get(&(s, r)).copied()
    }

    pub fn surface(&self, e: EntityId) -> &str {
        &self.entities[e].surface
    }

    pub fn relation(&self, r: RelationId) -> &Relation {
        &self.relations[r]
    }

    pub fn relation_by_name(&self, name: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn entity_by_surface(&self, surface: &str) -> Option<EntityId> {
        self.entities.iter().find(|e| e.surface == surface).map(|e| e.id)
    }

    pub fn entities_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = EntityId> + 'a {
        self.entities.iter().filter(move |e| e.kind == kind).map(|e| e.id)
    }

    pub fn facts_of(&self, s: EntityId) -> impl Iterator<Item = &Fact> + '_ {
        self.facts.iter().filter(move |f| f.s == s)
    }

    /// Relations whose domain is the given type.
    pub fn relations_from(&self, kind: &str) -> impl Iterator<Item = &Relation> + '_ {
        let kind = kind.to_string();
        self.relations.iter().filter(move |r| r.domain == kind)
    }

    /// Every symbol any rendering of this world can produce.
    pub fn vocabulary(&self) -> Tokenizer {
        let mut syms: Vec<String> = EXTRA_SYMBOLS.iter().map(|s| s.to_string()).collect();
        for f in FRAMINGS {
            syms.extend(split_symbols(f).into_iter().map(str::to_string));
        }
        for e in &self.entities {
            syms.extend(split_symbols(&e.surface).into_iter().map(str::to_string));
        }
        for r in &self.relations {
            for t in r.templates().chain([r.question.as_str(), r.descriptor.as_str()]) {
                let stripped = t.replace("{s}", " ").replace("{o}", " ");
                syms.extend(split_symbols(&stripped).into_iter().map(str::to_string));
            }
        }
        Tokenizer::from_symbols(syms)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn type_counts(cfg: &WorldConfig, kinds: &[(String, f64)]) -> Result<Vec<(String, usize)>> {
    if cfg.n_entities < kinds.len() {
        return Err(Error::Generation(format!(
            "{} entities cannot cover {} types",
            cfg.n_entities,
            kinds.len()
        )));
    }
    let total: f64 = kinds.iter().map(|k| k.1).sum();
    let mut counts: Vec<(String, usize)> = kinds
        .iter()
        .map(|(k, w)| (k.clone(), ((w / total) * cfg.n_entities as f64).floor().max(1.0) as usize))
        .collect();
    // settle rounding on the most populous type
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let big = (0..counts.len()).max_by_key(|&i| counts[i].1).unwrap();
    if assigned > cfg.n_entities {
        counts[big].1 -= assigned - cfg.n_entities;
    } else {
        counts[big].1 += cfg.n_entities - assigned;
    }
    Ok(counts)
}

/// Generates a world satisfying every invariant, deterministically in `seed`.
pub fn gen_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    let kinds: Vec<(String, f64)> = if cfg.types.is_empty() {
        DEFAULT_TYPES.iter().map(|(k, w)| (k.to_string(), *w)).collect()
    } else {
        cfg.types.iter().map(|(k, w)| (k.clone(), *w)).collect()
    };
    let mut relations: Vec<Relation> = default_relations();
    if !cfg.relations.is_empty() {
        for name in &cfg.relations {
            if !relations.iter().any(|r| &r.name == name) {
                return Err(Error::Config(format!("unknown relation {name:?}")));
            }
        }
        relations.retain(|r| cfg.relations.contains(&r.name));
    }
    let kind_names: HashSet<&str> = kinds.iter().map(|k| k.0.as_str()).collect();
    relations.retain(|r| kind_names.contains(r.domain.as_str()) && kind_names.contains(r.range.as_str()));
    for (i, r) in relations.iter_mut().enumerate() {
        r.id = i;
    }
    if relations.is_empty() {
        return Err(Error::Generation("no relation fits the configured types".into()));
    }
    let counts = type_counts(cfg, &kinds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..cfg.max_retries.max(1) {
        let mut taken = HashSet::new();
        let mut entities = Vec::with_capacity(cfg.n_entities);
        for (kind, n) in &counts {
            if kind == "person" {
                let n_given = ((*n as f64 * cfg.given_name_ratio).ceil() as usize).max(1);
                let given: Vec<String> = (0..n_given).map(|_| fresh_word(&mut rng, &mut taken, 2)).collect();
                let n_sur = (*n as f64 * cfg.surname_ratio).ceil() as usize;
                let surnames: Vec<String> = (0..n_sur).map(|_| fresh_word(&mut rng, &mut taken, 3)).collect();
                let mut names = HashSet::new();
                let mut mirror: Option<String> = None;
                for _ in 0..*n {
                    if let Some(surface) = mirror.take() {
                        entities.push(Entity { id: entities.len(), surface, kind: kind.clone() });
                        continue;
                    }
                    let surface = loop {
                        let first = given.choose(&mut rng).unwrap();
                        let last = if cfg.mirrored_names {
                            given.choose(&mut rng).unwrap().clone()
                        } else {
                            match surnames.choose(&mut rng) {
                                Some(l) => l.clone(),
                                None => fresh_word(&mut rng, &mut taken, 3),
                            }
                        };
                        if cfg.mirrored_names && (*first == last || names.contains(&format!("{last} {first}"))) {
                            continue;
                        }
                        let name = format!("{first} {last}");
                        if names.insert(name.clone()) {
                            if cfg.mirrored_names {
                                let twin = format!("{last} {first}");
                                names.insert(twin.clone());
                                mirror = Some(twin);
                            }
                            break name;
                        }
                    };
                    entities.push(Entity { id: entities.len(), surface, kind: kind.clone() });
                }
            } else {
                for _ in 0..*n {
                    let w = fresh_word(&mut rng, &mut taken, 3);
                    entities.push(Entity { id: entities.len(), surface: w, kind: kind.clone() });
                }
            }
        }
        let by_kind = |k: &str| entities.iter().filter(|e| e.kind == k).map(|e| e.id).collect::<Vec<_>>();
        let mut facts = Vec::new();
        for r in &relations {
            let range = by_kind(&r.range);
            for s in by_kind(&r.domain) {
                let candidates: Vec<EntityId> = range.iter().copied().filter(|&o| o != s).collect();
                if candidates.is_empty() {
                    continue;
                }
                let o = candidates[rng.gen_range(0..candidates.len())];
                facts.push(Fact { s, r: r.id, o });
            }
        }
        let w = World::from_parts_unchecked(entities, relations.clone(), facts, seed);
        match w.validate() {
            Ok(()) => return Ok(w),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Generation("no attempt made".into())))
}
