// SPDX-License-Identifier: MIT OR Apache-2.0

//! DP / CAP / OAP / EOS / AMS over six-task probe suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factworld::{EditRequest, EvalCase, EvalSuite, Task};
use crate::scalar::Scalar;
use crate::tinylm::ops::log_softmax;
use crate::tinylm::{generate_ids, AnswerScore, DecodeConfig, ModelState, Pass, TokenId, TokenSeq};

/// Raw and length-normalized log-probability of one answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProb {
    pub raw: f64,
    /// `raw / n_tokens`.
    pub normalized: f64,
    pub n_tokens: usize,
}

impl From<AnswerScore> for LogProb {
    fn from(s: AnswerScore) -> Self {
        Self { raw: s.logprob, normalized: s.logprob / s.n_tokens as f64, n_tokens: s.n_tokens }
    }
}

/// Scores of one probe case. Also the per-case record of a results stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub id: String,
    pub edit_id: usize,
    pub task: Task,
    pub prompt: String,
    pub correct_answer: String,
    pub original_answer: String,
    pub edit_target: String,
    pub lp_target: LogProb,
    pub lp_correct: LogProb,
    pub lp_original: LogProb,
    /// Length-normalized probabilities.
    pub dp: f64,
    pub cap: f64,
    pub oap: f64,
    /// `cap > dp`.
    pub ans_beats_target: bool,
    /// `cap > oap`.
    pub ans_beats_original: bool,
}

impl CaseScores {
    fn new(case: &EvalCase, target: LogProb, correct: LogProb, original: LogProb) -> Self {
        let dp = target.normalized.exp();
        let cap = correct.normalized.exp();
        let oap = original.normalized.exp();
        Self {
            id: case.id.clone(),
            edit_id: case.edit_id,
            task: case.task,
            prompt: case.prompt.clone(),
            correct_answer: case.correct_answer.clone(),
            original_answer: case.original_answer.clone(),
            edit_target: case.edit_target.clone(),
            lp_target: target,
            lp_correct: correct,
            lp_original: original,
            dp,
            cap,
            oap,
            ans_beats_target: cap > dp,
            ans_beats_original: cap > oap,
        }
    }
}

struct Tokenized {
    prompt: TokenSeq,
    answers: [TokenSeq; 3],
}

fn tokenize_case<T: Scalar>(model: &ModelState<T>, case: &EvalCase) -> Result<Tokenized> {
    case.validate()?;
    if !case.task.is_recall() && case.correct_answer == case.edit_target {
        return Err(Error::InvalidCase(case.id.clone()));
    }
    let tok = &model.tokenizer;
    let prompt = tok.tokenize(&case.prompt)?;
    let answers = [tok.tokenize(&case.edit_target)?, tok.tokenize(&case.correct_answer)?, tok.tokenize(&case.original_answer)?];
    if prompt.is_empty() || answers.iter().any(Vec::is_empty) {
        return Err(Error::InvalidCase(format!("case {} has an empty prompt or answer", case.id)));
    }
    Ok(Tokenized { prompt, answers })
}

/// Scores cases in one batched forward pass.
pub fn score_cases<T: Scalar>(model: &ModelState<T>, cases: &[EvalCase]) -> Result<Vec<CaseScores>> {
    let toks = cases.iter().map(|c| tokenize_case(model, c)).collect::<Result<Vec<_>>>()?;
    let mut seqs: Vec<TokenSeq> = Vec::with_capacity(3 * toks.len());
    for t in &toks {
        for a in &t.answers {
            let mut s = t.prompt.clone();
            s.extend_from_slice(&a[..a.len() - 1]);
            seqs.push(s);
        }
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let views: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let pass = Pass::run(model, &views, &[])?;
    let score = |si: usize, prompt_len: usize, answer: &[TokenId]| -> LogProb {
        let raw = answer
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(pass.logits_row(si, prompt_len - 1 + i))[t as usize].f64())
            .sum();
        AnswerScore { logprob: raw, n_tokens: answer.len() }.into()
    };
    Ok(cases
        .iter()
        .zip(&toks)
        .enumerate()
        .map(|(ci, (c, t))| {
            let n = t.prompt.len();
            let [a0, a1, a2] = &t.answers;
            CaseScores::new(c, score(3 * ci, n, a0), score(3 * ci + 1, n, a1), score(3 * ci + 2, n, a2))
        })
        .collect())
}

pub fn score_case<T: Scalar>(model: &ModelState<T>, case: &EvalCase) -> Result<CaseScores> {
    Ok(score_cases(model, std::slice::from_ref(case))?.remove(0))
}

/// Aggregates of one task. Probabilities are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    pub n_cases: usize,
    pub dp: f64,
    pub cap: f64,
    /// Omitted where the original answer is the correct answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oap: Option<f64>,
    /// Absent for the recall tasks, where the target is the correct answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<f64>,
    /// Present for the recall tasks and multi-hop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ams: Option<f64>,
    /// Means of the unnormalized joint probabilities, as percentages.
    pub dp_raw: f64,
    pub cap_raw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oap_raw: Option<f64>,
}

fn pct_mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    100.0 * it.sum::<f64>() / n as f64
}

fn pct_true(it: impl Iterator<Item = bool>, n: usize) -> f64 {
    100.0 * it.filter(|&b| b).count() as f64 / n as f64
}

/// Task aggregate over `scores`. Cases are summed in id order so the result
/// does not depend on the input order.
pub fn aggregate(scores: &[CaseScores], task: Task) -> Result<TaskMetrics> {
    if scores.is_empty() {
        return Err(Error::Aggregation(format!("no cases for task {task}")));
    }
    if let Some(c) = scores.iter().find(|c| c.task != task) {
        return Err(Error::Aggregation(format!("case {} belongs to {} not {task}", c.id, c.task)));
    }
    let mut sorted: Vec<&CaseScores> = scores.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = sorted.len();
    let has_oap = !task.oap_is_cap();
    Ok(TaskMetrics {
        task,
        n_cases: n,
        dp: pct_mean(sorted.iter().map(|c| c.dp), n),
        cap: pct_mean(sorted.iter().map(|c| c.cap), n),
        oap: has_oap.then(|| pct_mean(sorted.iter().map(|c| c.oap), n)),
        eos: (!task.is_recall()).then(|| pct_true(sorted.iter().map(|c| c.ans_beats_target), n)),
        ams: (task.is_recall() || task == Task::Multihop).then(|| pct_true(sorted.iter().map(|c| c.ans_beats_original), n)),
        dp_raw: pct_mean(sorted.iter().map(|c| c.lp_target.raw.exp()), n),
        cap_raw: pct_mean(sorted.iter().map(|c| c.lp_correct.raw.exp()), n),
        oap_raw: has_oap.then(|| pct_mean(sorted.iter().map(|c| c.lp_original.raw.exp()), n)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub seed: u64,
    pub n_edits: usize,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricReport {
    /// Aggregates every task present in `scores`, in [`Task::ALL`] order.
    pub fn from_scores(scores: &[CaseScores], method: &str, seed: u64) -> Result<Self> {
        let mut by_task: BTreeMap<Task, Vec<CaseScores>> = BTreeMap::new();
        for s in scores {
            by_task.entry(s.task).or_default().push(s.clone());
        }
        let tasks = Task::ALL
            .iter()
            .filter_map(|t| by_task.get(t).map(|s| aggregate(s, *t)))
            .collect::<Result<Vec<_>>>()?;
        let mut edits: Vec<usize> = scores.iter().map(|s| s.edit_id).collect();
        edits.sort_unstable();
        edits.dedup();
        Ok(Self { method: method.to_string(), seed, n_edits: edits.len(), tasks })
    }

    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task)
    }

    /// One row per task with DP, CAP, OAP, EOS and AMS columns.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {} (seed {}, {} edits)\n\n", self.method, self.seed, self.n_edits);
        s.push_str("| task | n | DP | CAP | OAP | EOS | AMS |\n|---|---|---|---|---|---|---|\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {} | {} | {} |",
                t.task,
                t.n_cases,
                t.dp,
                t.cap,
                opt(t.oap),
                opt(t.eos),
                opt(t.ams)
            );
        }
        s
    }
}

/// Scores every case of every suite, suite by suite.
pub fn score_suites<T: Scalar>(model: &ModelState<T>, suites: &[EvalSuite]) -> Result<Vec<CaseScores>> {
    let mut out = Vec::new();
    for s in suites {
        out.extend(score_cases(model, &s.cases)?);
    }
    Ok(out)
}

pub fn run_suite<T: Scalar>(model: &ModelState<T>, suite: &EvalSuite, method: &str, seed: u64) -> Result<MetricReport> {
    MetricReport::from_scores(&score_cases(model, &suite.cases)?, method, seed)
}

/// Serializes scores as one JSON object per line.
pub fn to_jsonl(scores: &[CaseScores]) -> Result<String> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<CaseScores>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Fraction of edit prompts `p(s, r)` whose greedy continuation starts with
/// the original object `o`.
pub fn fact_recall<T: Scalar>(model: &ModelState<T>, edits: &[EditRequest]) -> Result<f64> {
    if edits.is_empty() {
        return Err(Error::Aggregation("no edit prompts to score".into()));
    }
    let tok = &model.tokenizer;
    let mut hits = 0;
    for e in edits {
        let answer = tok.tokenize(&e.original)?;
        let cfg = DecodeConfig { max_len: answer.len(), stop: None, ..Default::default() };
        if generate_ids(model, &tok.tokenize(&e.prompt)?, &cfg)? == answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / edits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{build_model, sequence_logprob, ModelConfig, Tokenizer};

    fn fake(id: &str, task: Task, cap: f64, dp: f64, oap: f64) -> CaseScores {
        let lp = |p: f64| LogProb { raw: p.ln(), normalized: p.ln(), n_tokens: 1 };
        let case = EvalCase {
            id: id.into(),
            edit_id: 0,
            task,
            prompt: "p".into(),
            correct_answer: "a".into(),
            original_answer: "b".into(),
            edit_target: "c".into(),
        };
        CaseScores::new(&case, lp(dp), lp(cap), lp(oap))
    }

    #[test]
    fn eos_hand_examples() {
        let s = [fake("a", Task::Multihop, 0.3, 0.1, 0.5), fake("b", Task::Multihop, 0.2, 0.4, 0.1)];
        let m = aggregate(&s, Task::Multihop).unwrap();
        assert_eq!(m.eos, Some(50.0));
        assert_eq!(m.ams, Some(50.0));
        approx::assert_abs_diff_eq!(m.dp, 25.0, epsilon = 1e-9);
        let all = [fake("a", Task::Multihop, 0.3, 0.1, 0.5), fake("b", Task::Multihop, 0.5, 0.4, 0.1)];
        assert_eq!(aggregate(&all, Task::Multihop).unwrap().eos, Some(100.0));
        let tie = [fake("a", Task::Multihop, 0.25, 0.25, 0.25)];
        let t = aggregate(&tie, Task::Multihop).unwrap();
        assert_eq!((t.eos, t.ams), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn aggregation_errors_and_shape() {
        assert!(matches!(aggregate(&[], Task::Efficacy), Err(Error::Aggregation(_))));
        assert!(aggregate(&[fake("a", Task::Efficacy, 0.1, 0.1, 0.1)], Task::Paraphrase).is_err());
        let e = aggregate(&[fake("a", Task::Efficacy, 0.5, 0.5, 0.1)], Task::Efficacy).unwrap();
        assert!(e.eos.is_none() && e.ams == Some(100.0) && e.oap.is_some());
        let p = aggregate(&[fake("a", Task::SubjectSpecificity, 0.5, 0.1, 0.5)], Task::SubjectSpecificity).unwrap();
        assert!(p.oap.is_none() && p.ams.is_none() && p.eos == Some(100.0));
    }

    #[test]
    fn order_invariant() {
        let mut s: Vec<_> = (0..9)
            .map(|i| fake(&format!("c{i}"), Task::PrefixDistraction, 0.1 + 0.07 * i as f64, 0.33, 0.1 + 0.07 * i as f64))
            .collect();
        let a = aggregate(&s, Task::PrefixDistraction).unwrap();
        s.reverse();
        s.swap(2, 5);
        assert_eq!(a, aggregate(&s, Task::PrefixDistraction).unwrap());
    }

    fn model() -> ModelState<f64> {
        let tok = Tokenizer::from_symbols(["Ann", "lives", "in", "Paris", "Rome", "Oslo", "New", "York", "."]);
        let cfg = ModelConfig { n_layers: 2, d_model: 16, d_mlp: 32, n_heads: 2, vocab_size: 12, max_seq_len: 16, seed: 3 };
        build_model(&cfg, tok).unwrap()
    }

    fn case(task: Task, correct: &str, original: &str, target: &str) -> EvalCase {
        EvalCase {
            id: format!("0-{task}-0"),
            edit_id: 0,
            task,
            prompt: "Ann lives in".into(),
            correct_answer: correct.into(),
            original_answer: original.into(),
            edit_target: target.into(),
        }
    }

    #[test]
    fn batched_scores_match_single_sequence_scoring() {
        let m = model();
        let c = case(Task::Multihop, "New York", "Oslo", "Rome");
        let s = score_case(&m, &c).unwrap();
        let tok = &m.tokenizer;
        let p = tok.tokenize("Ann lives in").unwrap();
        let ny = sequence_logprob(&m, &p, &tok.tokenize("New York").unwrap()).unwrap();
        approx::assert_abs_diff_eq!(s.lp_correct.raw, ny.logprob, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(s.cap, ny.normalized(), epsilon = 1e-12);
        assert_eq!(s.lp_correct.n_tokens, 2);
        assert_eq!(s.ans_beats_target, s.cap > s.dp);
    }

    #[test]
    fn identical_answers_score_identically() {
        let m = model();
        let s = score_case(&m, &case(Task::SubjectSpecificity, "Paris", "Paris", "Rome")).unwrap();
        assert_eq!(s.cap, s.oap);
        assert!(!s.ans_beats_original);
    }

    #[test]
    fn target_equal_to_answer_is_rejected() {
        let m = model();
        assert!(matches!(score_case(&m, &case(Task::Multihop, "Rome", "Oslo", "Rome")), Err(Error::InvalidCase(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let m = model();
        let cases = [case(Task::Multihop, "New York", "Oslo", "Rome"), case(Task::Efficacy, "Rome", "Paris", "Rome")];
        let s = score_cases(&m, &cases).unwrap();
        let text = to_jsonl(&s).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(from_jsonl(&text).unwrap(), s);
        let r = MetricReport::from_scores(&s, "BASE", 0).unwrap();
        assert_eq!(r.tasks.len(), 2);
        assert_eq!(r.n_edits, 1);
        assert!(r.to_markdown().contains("| multihop | 1 |"));
    }
}
