// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pretraining corpus rendered from a world.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{Relation, World};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Copies of every (fact, template) line.
    pub repeats: usize,
    /// Templates per fact: the statement plus the first `templates - 1`
    /// paraphrases. 0 uses them all.
    pub templates: usize,
    /// Copies of every two-hop question line (0 disables them).
    pub multihop_repeats: usize,
    /// In-context lines: `Imagine that <counterfactual>. <prompt> <answer>.`
    /// Half query the imagined subject (answer is the imagined object), half
    /// query another subject (answer is its true object).
    pub context_lines: usize,
    /// Probability that a fact line is preceded by another, unrelated true statement.
    pub prefix_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { repeats: 1, templates: 0, multihop_repeats: 1, context_lines: 600, prefix_prob: 0.7, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    Statement,
    MultiHop,
    ContextCopy,
    ContextIgnore,
}

/// Where a corpus line came from: the index into `world.facts` of the fact
/// whose object the line ends with (for context-copy lines, the fact the
/// imagined statement overrides), plus the inner hop for two-hop lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub fact: usize,
    pub kind: LineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub lines: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Plain text, one statement per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.lines.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect())
    }
}

pub fn render_corpus(world: &World, cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.repeats == 0 {
        return Err(Error::Config("corpus repeats must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.prefix_prob) {
        return Err(Error::Config("prefix_prob must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items: Vec<(String, Provenance)> = Vec::new();
    let statement = |fi: usize| {
        let f = world.facts[fi];
        world.relation(f.r).statement_text(world.surface(f.s), world.surface(f.o))
    };

    for (fi, f) in world.facts.iter().enumerate() {
        let rel = world.relation(f.r);
        let n_t = if cfg.templates == 0 { usize::MAX } else { cfg.templates };
        for t in rel.templates().take(n_t) {
            let line = Relation::render(t, world.surface(f.s), world.surface(f.o));
            for _ in 0..cfg.repeats {
                items.push((line.clone(), Provenance { fact: fi, kind: LineKind::Statement, via: None }));
            }
        }
    }

    if cfg.multihop_repeats > 0 {
        for (fi, f) in world.facts.iter().enumerate() {
            let inner = world.relation(f.r);
            for (gi, g) in world.facts.iter().enumerate().filter(|(_, g)| g.s == f.o) {
                let outer = world.relation(g.r);
                let q = outer.question_text(&inner.descriptor_text(world.surface(f.s)));
                let line = format!("{q} {}.", world.surface(g.o));
                for _ in 0..cfg.multihop_repeats {
                    items.push((line.clone(), Provenance { fact: gi, kind: LineKind::MultiHop, via: Some(fi) }));
                }
            }
        }
    }

    for i in 0..cfg.context_lines {
        let fi = rng.gen_range(0..world.facts.len());
        let f = world.facts[fi];
        let rel = world.relation(f.r);
        let alts: Vec<usize> = world.entities_of(&rel.range).filter(|&e| e != f.o && e != f.s).collect();
        let Some(&alt) = alts.choose(&mut rng) else { continue };
        let imagined = rel.statement_text(world.surface(f.s), world.surface(alt));
        if i % 2 == 0 {
            let line = format!("Imagine that {imagined} {} {}.", rel.prompt(world.surface(f.s)), world.surface(alt));
            items.push((line, Provenance { fact: fi, kind: LineKind::ContextCopy, via: None }));
        } else {
            let others: Vec<usize> = world
                .facts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.r == f.r && g.s != f.s)
                .map(|(gi, _)| gi)
                .collect();
            let Some(&gi) = others.choose(&mut rng) else { continue };
            let g = world.facts[gi];
            let line = format!("Imagine that {imagined} {} {}.", rel.prompt(world.surface(g.s)), world.surface(g.o));
            items.push((line, Provenance { fact: gi, kind: LineKind::ContextIgnore, via: None }));
        }
    }

    if cfg.prefix_prob > 0.0 {
        for (line, prov) in items.iter_mut() {
            if prov.kind == LineKind::Statement && rng.gen_bool(cfg.prefix_prob) {
                let other = rng.gen_range(0..world.facts.len());
                *line = format!("{} {line}", statement(other));
            }
        }
    }

    items.shuffle(&mut rng);
    let (lines, provenance) = items.into_iter().unzip();
    Ok(Corpus { lines, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{gen_world, WorldConfig};

    fn plain(repeats: usize, templates: usize) -> CorpusConfig {
        CorpusConfig { repeats, templates, multihop_repeats: 0, context_lines: 0, prefix_prob: 0.0, seed: 1 }
    }

    #[test]
    fn line_count_arithmetic() {
        let w = gen_world(&WorldConfig::default(), 3).unwrap();
        let c = render_corpus(&w, &plain(3, 2)).unwrap();
        assert_eq!(c.len(), w.facts.len() * 2 * 3);
        let w100 = World::from_parts(
            w.entities.clone(),
            w.relations.clone(),
            w.facts.iter().copied().take(100).collect(),
            0,
        );
        // truncating facts can break closure; arithmetic is what matters here
        if let Ok(w100) = w100 {
            assert_eq!(render_corpus(&w100, &plain(3, 2)).unwrap().len(), 600);
        }
    }

    #[test]
    fn provenance_and_vocabulary() {
        let w = gen_world(&WorldConfig::default(), 3).unwrap();
        let c = render_corpus(&w, &CorpusConfig::default()).unwrap();
        let tok = w.vocabulary();
        assert_eq!(c.lines.len(), c.provenance.len());
        for (line, p) in c.lines.iter().zip(&c.provenance) {
            tok.tokenize(line).unwrap();
            let f = w.facts[p.fact];
            if p.kind != LineKind::ContextCopy {
                assert!(line.ends_with(&format!("{}.", w.surface(f.o))), "{line}");
            }
            match p.kind {
                LineKind::Statement | LineKind::ContextIgnore => assert!(line.contains(w.surface(f.s))),
                LineKind::MultiHop => {
                    let inner = w.facts[p.via.unwrap()];
                    assert_eq!(inner.o, f.s);
                    assert!(line.contains(w.surface(inner.s)));
                }
                LineKind::ContextCopy => {
                    assert!(line.starts_with(&format!("Imagine that {}", w.relation(f.r).prompt(w.surface(f.s)))));
                    assert!(!line.ends_with(&format!(" {}.", w.surface(f.o))));
                }
            }
        }
        // every fact appears at least once as a statement
        let mut seen = vec![false; w.facts.len()];
        for p in &c.provenance {
            if p.kind == LineKind::Statement {
                seen[p.fact] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn deterministic() {
        let w = gen_world(&WorldConfig { n_entities: 50, ..Default::default() }, 3).unwrap();
        let cfg = CorpusConfig::default();
        assert_eq!(render_corpus(&w, &cfg).unwrap(), render_corpus(&w, &cfg).unwrap());
    }
}
