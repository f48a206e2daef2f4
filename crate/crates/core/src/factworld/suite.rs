// SPDX-License-Identifier: MIT OR Apache-2.0

//! Six-task evaluation suites.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::edits::{multihop_relations, EditRequest};
use super::world::{Relation, World};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Efficacy,
    Paraphrase,
    Multihop,
    PrefixDistraction,
    SubjectSpecificity,
    RelationSpecificity,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Efficacy,
        Task::Paraphrase,
        Task::Multihop,
        Task::PrefixDistraction,
        Task::SubjectSpecificity,
        Task::RelationSpecificity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Efficacy => "efficacy",
            Task::Paraphrase => "paraphrase",
            Task::Multihop => "multihop",
            Task::PrefixDistraction => "prefix_distraction",
            Task::SubjectSpecificity => "subject_specificity",
            Task::RelationSpecificity => "relation_specificity",
        }
    }

    /// Probes the edited fact itself rather than testing for overfit.
    pub fn is_recall(self) -> bool {
        matches!(self, Task::Efficacy | Task::Paraphrase)
    }

    /// Tasks whose correct answer is the unedited model's answer.
    pub fn oap_is_cap(self) -> bool {
        matches!(self, Task::PrefixDistraction | Task::SubjectSpecificity | Task::RelationSpecificity)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub edit_id: usize,
    pub task: Task,
    pub prompt: String,
    pub correct_answer: String,
    pub original_answer: String,
    pub edit_target: String,
}

impl EvalCase {
    pub fn validate(&self) -> Result<()> {
        if !self.task.is_recall() && self.correct_answer == self.edit_target {
            return Err(Error::InvalidCase(format!("case {} has correct answer equal to the edit target", self.id)));
        }
        if self.task.oap_is_cap() && self.original_answer != self.correct_answer {
            return Err(Error::InvalidCase(format!("case {} must have original answer equal to correct answer", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Paraphrase cases per edit, capped by the number of paraphrase templates.
    pub n_paraphrase: usize,
    pub n_prefix_distraction: usize,
    pub n_relation_specificity: usize,
    /// Upper bound on subject-specificity cases (one per other relation).
    pub n_subject_specificity: usize,
    /// Upper bound on multi-hop cases (one per valid second hop).
    pub n_multihop: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_paraphrase: 3,
            n_prefix_distraction: 5,
            n_relation_specificity: 5,
            n_subject_specificity: 3,
            n_multihop: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub edit: EditRequest,
    pub cases: Vec<EvalCase>,
}

impl EvalSuite {
    pub fn cases_of(&self, task: Task) -> impl Iterator<Item = &EvalCase> + '_ {
        self.cases.iter().filter(move |c| c.task == task)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: EvalSuite = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for c in &s.cases {
            c.validate()?;
        }
        Ok(s)
    }
}

pub fn gen_eval_suite(world: &World, edit: &EditRequest, cfg: &SuiteConfig) -> Result<EvalSuite> {
    if world.object(edit.s, edit.r) != Some(edit.o) || edit.o == edit.o_star {
        return Err(Error::Suite(format!("edit {} does not match the world", edit.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (edit.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let rel = world.relation(edit.r);
    let s = world.surface(edit.s);
    let o = world.surface(edit.o);
    let o_star = world.surface(edit.o_star);
    let mut cases = Vec::new();
    let mut push = |task: Task, prompt: String, correct: &str, original: &str| {
        let n = cases.iter().filter(|c: &&EvalCase| c.task == task).count();
        cases.push(EvalCase {
            id: format!("{}-{}-{n}", edit.id, task.name()),
            edit_id: edit.id,
            task,
            prompt,
            correct_answer: correct.to_string(),
            original_answer: original.to_string(),
            edit_target: o_star.to_string(),
        });
    };

    push(Task::Efficacy, edit.prompt.clone(), o_star, o);

    let n_para = cfg.n_paraphrase.min(rel.paraphrases.len());
    if n_para < 2 {
        return Err(Error::Suite(format!("relation {} needs at least 2 paraphrase cases", rel.name)));
    }
    for t in &rel.paraphrases[..n_para] {
        push(Task::Paraphrase, Relation::render_prompt(t, s), o_star, o);
    }

    let hops = multihop_relations(world, edit.o, edit.o_star);
    if hops.is_empty() || cfg.n_multihop == 0 {
        return Err(Error::Suite(format!("edit {} has no valid second hop", edit.id)));
    }
    for (r2, z, z_star) in hops.into_iter().take(cfg.n_multihop) {
        let prompt = world.relation(r2).question_text(&rel.descriptor_text(s));
        push(Task::Multihop, prompt, world.surface(z_star), world.surface(z));
    }

    let mut others: Vec<_> = world
        .facts
        .iter()
        .filter(|f| f.r == edit.r && f.s != edit.s && f.o != edit.o_star)
        .copied()
        .collect();
    if others.is_empty() {
        return Err(Error::Suite(format!("no other subject of {} avoids the edit target", rel.name)));
    }
    others.shuffle(&mut rng);
    for f in others.iter().take(cfg.n_prefix_distraction.max(1)) {
        let prompt = format!("{} {}", edit.context_statement, rel.prompt(world.surface(f.s)));
        push(Task::PrefixDistraction, prompt, world.surface(f.o), world.surface(f.o));
    }

    let same_subject: Vec<_> = world.facts_of(edit.s).filter(|f| f.r != edit.r && f.o != edit.o_star).copied().collect();
    if same_subject.is_empty() {
        return Err(Error::Suite(format!("{s} has no other relation")));
    }
    for f in same_subject.iter().take(cfg.n_subject_specificity.max(1)) {
        let prompt = world.relation(f.r).prompt(s);
        push(Task::SubjectSpecificity, prompt, world.surface(f.o), world.surface(f.o));
    }

    others.shuffle(&mut rng);
    for f in others.iter().take(cfg.n_relation_specificity.max(1)) {
        push(Task::RelationSpecificity, rel.prompt(world.surface(f.s)), world.surface(f.o), world.surface(f.o));
    }

    for c in &cases {
        c.validate()?;
    }
    Ok(EvalSuite { edit: edit.clone(), cases })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::factworld::world::{Entity, Fact};
    use crate::factworld::{gen_world, sample_edits, WorldConfig};

    fn rel(id: usize, name: &str, domain: &str, range: &str, statement: &str, question: &str, descriptor: &str) -> Relation {
        Relation {
            id,
            name: name.into(),
            statement: statement.into(),
            paraphrases: vec![
                statement.replace("{s}", "the person {s}"),
                format!("It is said that {statement}"),
                format!("Indeed {statement}"),
            ],
            question: question.into(),
            descriptor: descriptor.into(),
            domain: domain.into(),
            range: range.into(),
        }
    }

    /// The worked example world: Spike Hughes originates from London, and so does Max Mosley.
    pub(crate) fn table3_world() -> World {
        let names = [
            ("Spike Hughes", "person"),
            ("Max Mosley", "person"),
            ("London", "city"),
            ("Philadelphia", "city"),
            ("musician", "profession"),
            ("racer", "profession"),
            ("Cheesesteaks", "food"),
            ("Pies", "food"),
        ];
        let entities =
            names.iter().enumerate().map(|(id, (s, k))| Entity { id, surface: s.to_string(), kind: k.to_string() }).collect();
        let relations = vec![
            rel(
                0,
                "originates_from",
                "person",
                "city",
                "{s} originates from {o}.",
                "The city where {s} originates from is",
                "the city where {s} originates from",
            ),
            rel(1, "profession", "person", "profession", "The profession of {s} is {o}.", "The profession of {s} is", "the profession of {s}"),
            rel(2, "famous_food", "city", "food", "The famous food of {s} is {o}.", "The famous food of {s} is", "the famous food of {s}"),
            rel(3, "practiced_in", "profession", "city", "A {s} often lives in {o}.", "The city of a {s} is", "the city of a {s}"),
            rel(4, "first_cooked_in", "food", "city", "{s} was first cooked in {o}.", "The city where {s} was first cooked is", "the city where {s} was first cooked"),
        ];
        let facts = vec![
            Fact { s: 0, r: 0, o: 2 },
            Fact { s: 1, r: 0, o: 2 },
            Fact { s: 0, r: 1, o: 4 },
            Fact { s: 1, r: 1, o: 5 },
            Fact { s: 2, r: 2, o: 7 },
            Fact { s: 3, r: 2, o: 6 },
            Fact { s: 4, r: 3, o: 2 },
            Fact { s: 5, r: 3, o: 3 },
            Fact { s: 6, r: 4, o: 3 },
            Fact { s: 7, r: 4, o: 2 },
        ];
        World::from_parts(entities, relations, facts, 0).unwrap()
    }

    #[test]
    fn table3_cases() {
        let w = table3_world();
        let edit = EditRequest::new(&w, 0, 0, 0, 3).unwrap();
        assert_eq!(edit.prompt, "Spike Hughes originates from");
        assert_eq!((edit.original.as_str(), edit.target.as_str()), ("London", "Philadelphia"));
        let suite = gen_eval_suite(&w, &edit, &SuiteConfig::default()).unwrap();
        let subj: Vec<_> = suite.cases_of(Task::SubjectSpecificity).collect();
        assert_eq!(subj[0].prompt, "The profession of Spike Hughes is");
        assert_eq!(subj[0].correct_answer, "musician");
        let pd: Vec<_> = suite.cases_of(Task::PrefixDistraction).collect();
        assert_eq!(pd[0].prompt, "Spike Hughes originates from Philadelphia. Max Mosley originates from");
        assert_eq!(pd[0].correct_answer, "London");
        let mh: Vec<_> = suite.cases_of(Task::Multihop).collect();
        assert_eq!(mh[0].prompt, "The famous food of the city where Spike Hughes originates from is");
        assert_eq!(mh[0].correct_answer, "Cheesesteaks");
        assert_eq!(mh[0].original_answer, "Pies");
        let eff: Vec<_> = suite.cases_of(Task::Efficacy).collect();
        assert_eq!(eff.len(), 1);
        assert_eq!(eff[0].correct_answer, "Philadelphia");
        let sampled = &sample_edits(&w, 1, 0).unwrap()[0];
        assert_ne!(sampled.o_star, sampled.o);
        assert_eq!(w.entities[sampled.o_star].kind, "city");
    }

    #[test]
    fn suite_invariants_sweep() {
        let w = gen_world(&WorldConfig::default(), 9).unwrap();
        let cfg = SuiteConfig::default();
        let mut n = 0;
        for e in sample_edits(&w, 100, 1).unwrap() {
            let suite = gen_eval_suite(&w, &e, &cfg).unwrap();
            for t in Task::ALL {
                assert!(suite.cases_of(t).count() >= if t == Task::Paraphrase { 2 } else { 1 }, "{t}");
            }
            for c in &suite.cases {
                if !c.task.is_recall() {
                    assert_ne!(c.correct_answer, c.edit_target);
                    n += 1;
                }
                if c.task.oap_is_cap() {
                    assert_eq!(c.original_answer, c.correct_answer);
                }
                if c.task == Task::Multihop {
                    assert_ne!(c.correct_answer, c.original_answer);
                    assert_ne!(c.original_answer, c.edit_target);
                }
                if c.task == Task::RelationSpecificity || c.task == Task::PrefixDistraction {
                    assert!(!c.prompt.ends_with(&e.prompt));
                }
            }
        }
        assert!(n > 1000);
    }

    #[test]
    fn json_roundtrip() {
        let w = gen_world(&WorldConfig::default(), 9).unwrap();
        let e = &sample_edits(&w, 1, 1).unwrap()[0];
        let suite = gen_eval_suite(&w, e, &SuiteConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("suite.json");
        suite.save(&p).unwrap();
        assert_eq!(EvalSuite::load(&p).unwrap(), suite);
        assert!(suite.to_json().unwrap().contains("\"cases\""));
    }

    #[test]
    fn ineligible_edit_errors() {
        let w = table3_world();
        // the only other food was first cooked in London, the edit target
        let edit = EditRequest::new(&w, 0, 6, 4, 2).unwrap();
        assert!(matches!(gen_eval_suite(&w, &edit, &SuiteConfig::default()), Err(Error::Suite(_))));
    }
}
