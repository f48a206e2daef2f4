// SPDX-License-Identifier: MIT OR Apache-2.0

//! World generation, pretraining and the edit-then-score protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use editlab_core::editors::{apply_plan, apply_plan_with, ft_lti_edit, CovarianceSet, EditOutcome, EditRecord, Method};
use editlab_core::evalsuite::{fact_recall, score_cases, CaseScores};
use editlab_core::factworld::{augment, gen_eval_suite, gen_world, render_corpus, sample_edits, EditRequest, World};
use editlab_core::lti::Lti;
use editlab_core::tinylm::{build_model, checkpoint, train, TokenSeq};
use editlab_core::Model;

use crate::config::{ArmConfig, ArmVariant, ExperimentConfig, SweepAxis, BASE_ARM};
use crate::error::{RunError, RunResult, Stage};
use crate::report::{write_report, ReportArtifacts};

/// One scored probe case of one arm; a line of the results stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<SweepAxis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub case: CaseScores,
}

/// One applied edit batch; a line of the edit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub seed: u64,
    pub record: EditRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    /// Top-1 recall of the original object on the edit prompts of every seed.
    pub fact_recall: f64,
    pub checksum: String,
    /// Config sections the base model depends on.
    pub fingerprint: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub config: PathBuf,
    pub world: PathBuf,
    pub corpus: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub results: PathBuf,
    pub edits: PathBuf,
    pub reports: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub base_checksum: String,
    pub failed_arms: Vec<String>,
}

impl RunArtifacts {
    pub fn ensure_complete(&self) -> RunResult<()> {
        if self.failed_arms.is_empty() {
            Ok(())
        } else {
            Err(RunError::ArmsFailed(self.failed_arms.clone()))
        }
    }
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> RunResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| RunError::io(path, e))
}

pub(crate) fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// One JSON object per line.
pub fn jsonl<S: Serialize>(items: &[S]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    s
}

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.txt")
    }
    pub fn base(&self) -> PathBuf {
        self.root.join("base.ckpt")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain.json")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }
    pub fn edits(&self) -> PathBuf {
        self.root.join("edits.jsonl")
    }
    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts.json")
    }
    pub fn edited(&self, arm: &str, seed: u64) -> PathBuf {
        self.root.join("edited").join(format!("{}-seed{seed}.ckpt", file_stem(arm)))
    }
}

/// `name` with every character outside `[A-Za-z0-9_.-]` replaced by `_`.
pub fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || "_.-".contains(c) { c } else { '_' }).collect()
}

fn fingerprint(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "world_seed": cfg.world_seed,
        "world": cfg.world,
        "corpus": cfg.corpus,
        "model": cfg.model,
        "train": cfg.train,
    })
}

/// World, corpus and base model shared by every arm of an experiment.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub world: World,
    pub corpus: Vec<String>,
    pub base: Model,
    pub base_checksum: u64,
    pub pretrain: PretrainReport,
    covariances: BTreeMap<(usize, u64), CovarianceSet>,
}

fn progress(msg: std::fmt::Arguments) {
    eprintln!("editlab: {msg}");
}

impl Lab {
    /// Generates the world and corpus and pretrains the base model, writing
    /// each artifact under `out`.
    pub fn build(cfg: ExperimentConfig, out: &Path) -> RunResult<Self> {
        let layout = Layout::new(out);
        let (world, corpus) = gen_world_stage(&cfg, &layout)?;
        let (base, pretrain) = pretrain_stage(&cfg, &layout, &world, &corpus)?;
        Ok(Self::assemble(cfg, layout, world, corpus, base, pretrain))
    }

    /// Reuses the world, corpus and base model under `out` when they were
    /// produced from the same config sections; builds them otherwise.
    pub fn open(cfg: ExperimentConfig, out: &Path) -> RunResult<Self> {
        let layout = Layout::new(out);
        let cached = std::fs::read_to_string(layout.pretrain())
            .ok()
            .and_then(|t| serde_json::from_str::<PretrainReport>(&t).ok())
            .filter(|p| p.fingerprint == fingerprint(&cfg));
        let Some(pretrain) = cached else {
            return Self::build(cfg, out);
        };
        let world = World::load(layout.world()).map_err(RunError::stage(Stage::GenWorld, "loading world"))?;
        let corpus = editlab_core::factworld::Corpus::load_lines(layout.corpus())
            .map_err(RunError::stage(Stage::Corpus, "loading corpus"))?;
        let base: Model = checkpoint::load(layout.base()).map_err(RunError::stage(Stage::Pretrain, "loading base checkpoint"))?;
        if format!("{:016x}", base.checksum()) != pretrain.checksum {
            return Self::build(cfg, out);
        }
        progress(format_args!("reusing base model in {}", out.display()));
        Ok(Self::assemble(cfg, layout, world, corpus, base, pretrain))
    }

    fn assemble(cfg: ExperimentConfig, layout: Layout, world: World, corpus: Vec<String>, base: Model, pretrain: PretrainReport) -> Self {
        let base_checksum = base.checksum();
        Self { cfg, layout, world, corpus, base, base_checksum, pretrain, covariances: BTreeMap::new() }
    }

    pub fn edits(&self, seed: u64) -> RunResult<Vec<EditRequest>> {
        sample_edits(&self.world, self.cfg.n_edits, seed).map_err(RunError::stage(Stage::Edit, format!("sampling edits for seed {seed}")))
    }

    fn covariance(&mut self, positions: usize, ridge: f64) -> RunResult<&CovarianceSet> {
        let key = (positions, ridge.to_bits());
        if !self.covariances.contains_key(&key) {
            let tok = &self.base.tokenizer;
            let sample: Vec<TokenSeq> = self
                .corpus
                .iter()
                .map(|l| tok.tokenize(l))
                .collect::<editlab_core::Result<_>>()
                .map_err(RunError::stage(Stage::Covariance, "tokenizing corpus"))?;
            let cov = CovarianceSet::estimate(&self.base, &sample, 0..self.base.config.n_layers, positions, ridge)
                .map_err(RunError::stage(Stage::Covariance, "estimating key covariance"))?;
            self.covariances.insert(key, cov);
        }
        Ok(&self.covariances[&key])
    }

    fn check_base(&self, arm: &str) -> RunResult<()> {
        let found = self.base.checksum();
        if found != self.base_checksum {
            return Err(RunError::BaseChanged { arm: arm.into(), expected: self.base_checksum, found });
        }
        Ok(())
    }

    /// Applies `arm` to `edits` on a fresh copy of the base model.
    pub fn apply(&mut self, arm: &ArmConfig, edits: &[EditRequest], seed: u64) -> RunResult<EditOutcome<f32>> {
        self.check_base(&arm.name)?;
        let mut plan = arm.plan.clone();
        plan.seed = plan.seed.wrapping_add(seed);
        let mut edits = edits.to_vec();
        if arm.augment > 0 {
            for e in &mut edits {
                e.opt_prompts = augment(e, &self.world, arm.augment_kind, arm.augment)
                    .map_err(RunError::stage(Stage::Edit, format!("arm {} augmenting edit {}", arm.name, e.id)))?;
            }
        }
        let ids: Vec<usize> = edits.iter().map(|e| e.id).collect();
        let err = RunError::stage(Stage::Edit, format!("arm {} seed {seed} edits {ids:?}", arm.name));
        let lti = arm.lti.clone().map(Lti::new).transpose().map_err(RunError::stage(Stage::Edit, format!("arm {}", arm.name)))?;
        let model = self.base.clone();
        match (lti, plan.method) {
            (Some(lti), Method::Ft | Method::FtL) => ft_lti_edit(model, &edits, &plan, &lti).map_err(err),
            (None, Method::Ft | Method::FtL) => apply_plan(model, &edits, &plan, &CovarianceSet { stats: BTreeMap::new() }).map_err(err),
            (lti, _) => {
                let cov = self.covariance(plan.cov_positions, plan.cov_ridge)?;
                match lti {
                    Some(lti) => apply_plan_with(model, &edits, &plan, &lti, cov).map_err(err),
                    None => apply_plan(model, &edits, &plan, cov).map_err(err),
                }
            }
        }
    }

    fn score(&self, model: &Model, edit: &EditRequest) -> RunResult<Vec<CaseScores>> {
        let suite = gen_eval_suite(&self.world, edit, &self.cfg.suite)
            .map_err(RunError::stage(Stage::Eval, format!("building probe suite of edit {}", edit.id)))?;
        score_cases(model, &suite.cases).map_err(RunError::stage(Stage::Eval, format!("scoring edit {}", edit.id)))
    }

    /// Scores of the unedited model on the probe suites of `seed`.
    pub fn run_base(&self, seed: u64) -> RunResult<Vec<ResultRecord>> {
        let mut out = Vec::new();
        for e in self.edits(seed)? {
            for case in self.score(&self.base, &e)? {
                out.push(ResultRecord { arm: BASE_ARM.into(), axis: None, value: None, seed, case });
            }
        }
        Ok(out)
    }

    /// Edits every batch of `seed`'s edits on its own base copy and scores
    /// the probe suite of each edit on the model its batch produced.
    pub fn run_variant(&mut self, v: &ArmVariant, seed: u64) -> RunResult<(Vec<ResultRecord>, Vec<EditLog>)> {
        let edits = self.edits(seed)?;
        let mut records = Vec::new();
        let mut logs = Vec::new();
        for batch in edits.chunks(v.arm.batch_size) {
            let out = self.apply(&v.arm, batch, seed)?;
            for e in batch {
                for case in self.score(&out.model, e)? {
                    records.push(ResultRecord { arm: v.arm.name.clone(), axis: v.axis, value: v.value, seed, case });
                }
            }
            logs.push(EditLog { arm: v.arm.name.clone(), value: v.value, seed, record: out.record });
        }
        Ok((records, logs))
    }

    /// Runs the base model and every selected arm variant over every seed,
    /// then writes the results streams, the report and the artifact list.
    /// A failing arm is recorded and skipped.
    pub fn run(&mut self, arms: Option<&str>) -> RunResult<RunArtifacts> {
        let variants: Vec<ArmVariant> = self.cfg.variants().into_iter().filter(|v| arms.map_or(true, |a| a == v.arm.name)).collect();
        if let Some(a) = arms {
            if variants.is_empty() {
                return Err(RunError::Config(format!("no arm named {a:?}")));
            }
        }
        write_file(&self.layout.config(), self.cfg.to_toml()?)?;
        let seeds = self.cfg.seeds.clone();
        let mut records = Vec::new();
        let mut logs = Vec::new();
        let mut failed = Vec::new();
        for &seed in &seeds {
            progress(format_args!("seed {seed}: scoring base model"));
            records.extend(self.run_base(seed)?);
            for v in &variants {
                let label = variant_label(v);
                let t = std::time::Instant::now();
                match self.run_variant(v, seed) {
                    Ok((r, l)) => {
                        records.extend(r);
                        logs.extend(l);
                        progress(format_args!("seed {seed}: {label} done in {:.1}s", t.elapsed().as_secs_f64()));
                    }
                    Err(e) => {
                        progress(format_args!("seed {seed}: {label} failed: {e}"));
                        if !failed.contains(&v.arm.name) {
                            failed.push(v.arm.name.clone());
                        }
                    }
                }
            }
        }
        let results = self.layout.results();
        write_file(&results, jsonl(&records))?;
        write_file(&self.layout.edits(), jsonl(&logs))?;
        let ReportArtifacts { reports, plots } = write_report(&records, &self.layout.root)?;
        let artifacts = RunArtifacts {
            out_dir: self.layout.root.clone(),
            config: self.layout.config(),
            world: self.layout.world(),
            corpus: self.layout.corpus(),
            checkpoints: vec![self.layout.base()],
            results,
            edits: self.layout.edits(),
            reports,
            plots,
            seeds,
            base_checksum: format!("{:016x}", self.base_checksum),
            failed_arms: failed,
        };
        write_file(&self.layout.artifacts(), to_json(&artifacts))?;
        Ok(artifacts)
    }
}

pub fn variant_label(v: &ArmVariant) -> String {
    match (v.axis, v.value) {
        (Some(a), Some(x)) => format!("{}[{}={x}]", v.arm.name, a.name()),
        _ => v.arm.name.clone(),
    }
}

pub fn gen_world_stage(cfg: &ExperimentConfig, layout: &Layout) -> RunResult<(World, Vec<String>)> {
    write_file(&layout.config(), cfg.to_toml()?)?;
    let world = gen_world(&cfg.world, cfg.world_seed).map_err(RunError::stage(Stage::GenWorld, "generating world"))?;
    write_file(&layout.world(), world.to_json().map_err(RunError::stage(Stage::GenWorld, "serializing world"))?)?;
    let corpus = render_corpus(&world, &cfg.corpus).map_err(RunError::stage(Stage::Corpus, "rendering corpus"))?;
    corpus.save(layout.corpus()).map_err(RunError::stage(Stage::Corpus, "writing corpus"))?;
    progress(format_args!("world of {} facts, corpus of {} lines", world.facts.len(), corpus.len()));
    Ok((world, corpus.lines))
}

pub fn pretrain_stage(cfg: &ExperimentConfig, layout: &Layout, world: &World, corpus: &[String]) -> RunResult<(Model, PretrainReport)> {
    let err = |c: &str| RunError::stage(Stage::Pretrain, c.to_string());
    let mut model: Model = build_model(&cfg.model, world.vocabulary()).map_err(err("building model"))?;
    let t = std::time::Instant::now();
    let report = train(&mut model, corpus, &cfg.train).map_err(err("training"))?;
    progress(format_args!(
        "pretrained {} steps in {:.0}s, probe loss {:.3} -> {:.3}",
        cfg.train.steps,
        t.elapsed().as_secs_f64(),
        report.initial_probe_loss,
        report.final_probe_loss
    ));
    checkpoint::save(&model, layout.base()).map_err(err("writing base checkpoint"))?;
    let mut prompts = Vec::new();
    for &s in &cfg.seeds {
        prompts.extend(sample_edits(world, cfg.n_edits, s).map_err(err("sampling edits"))?);
    }
    let recall = fact_recall(&model, &prompts).map_err(err("measuring fact recall"))?;
    let pre = PretrainReport {
        initial_probe_loss: report.initial_probe_loss,
        final_probe_loss: report.final_probe_loss,
        fact_recall: recall,
        checksum: format!("{:016x}", model.checksum()),
        fingerprint: fingerprint(cfg),
    };
    write_file(&layout.pretrain(), to_json(&pre))?;
    Ok((model, pre))
}

/// Full pipeline from a fresh world to the report.
pub fn cmd_pipeline(cfg: ExperimentConfig, out: &Path) -> RunResult<RunArtifacts> {
    let mut lab = Lab::build(cfg, out)?;
    lab.run(None)
}
