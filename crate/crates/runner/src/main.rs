// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use editlab::pipeline::{gen_world_stage, jsonl, write_file, EditLog};
use editlab::{cmd_report, ExperimentConfig, Lab, Layout, ResultRecord, BASE_ARM};
use editlab_core::evalsuite::{score_cases, MetricReport};
use editlab_core::factworld::gen_eval_suite;
use editlab_core::tinylm::checkpoint;
use editlab_core::Model;

#[derive(Parser)]
#[command(name = "editlab", version, about = "Knowledge-editing overfit experiments on a desk-scale model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Restricts the command to one arm.
    #[arg(long)]
    arm: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and render the training corpus.
    GenWorld(Common),
    /// Generate the world and pretrain the base model.
    Pretrain(Common),
    /// Apply an arm to the first edit batch of a seed and save the edited checkpoint.
    Edit(Common),
    /// Score the base model, or with --arm the checkpoint saved by `edit`.
    Eval(Common),
    /// Run every arm over its sweep values and seeds on the existing base model.
    Sweep(Common),
    /// Build tables and plots from results streams.
    Report {
        #[command(flatten)]
        common: Common,
        /// Results streams; defaults to results.jsonl in --out.
        results: Vec<PathBuf>,
    },
    /// World, corpus, pretraining, every arm and the report, from scratch.
    Pipeline(Common),
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = &c.arm {
        cfg.arm(a)?;
    }
    Ok(cfg)
}

fn edit(c: &Common) -> anyhow::Result<()> {
    let Some(name) = &c.arm else { bail!("edit needs --arm") };
    let cfg = load_config(c)?;
    let arm = cfg.arm(name)?.clone();
    let seed = cfg.seeds[0];
    let mut lab = Lab::open(cfg, &c.out)?;
    let edits = lab.edits(seed)?;
    let batch = &edits[..arm.batch_size.min(edits.len())];
    let out = lab.apply(&arm, batch, seed)?;
    let path = lab.layout.edited(name, seed);
    std::fs::create_dir_all(path.parent().unwrap())?;
    checkpoint::save(&out.model, &path).with_context(|| format!("writing {}", path.display()))?;
    let log = EditLog { arm: name.clone(), value: None, seed, record: out.record };
    write_file(&path.with_extension("json"), serde_json::to_string_pretty(&log)? + "\n")?;
    for e in batch {
        println!("edit {}: {} -> {} (was {})", e.id, e.prompt, e.target, e.original);
    }
    println!("{}", path.display());
    Ok(())
}

fn eval(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let lab = Lab::open(cfg, &c.out)?;
    let mut records = Vec::new();
    let name = c.arm.as_deref().unwrap_or(BASE_ARM);
    for &seed in &lab.cfg.seeds {
        match &c.arm {
            None => records.extend(lab.run_base(seed)?),
            Some(arm) => {
                let path = lab.layout.edited(arm, seed);
                let model: Model = checkpoint::load(&path).with_context(|| format!("loading {}; run `edit` first", path.display()))?;
                let log: EditLog = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
                for e in lab.edits(seed)?.iter().filter(|e| log.record.edit_ids.contains(&e.id)) {
                    let suite = gen_eval_suite(&lab.world, e, &lab.cfg.suite)?;
                    for case in score_cases(&model, &suite.cases)? {
                        records.push(ResultRecord { arm: arm.clone(), axis: None, value: None, seed, case });
                    }
                }
            }
        }
    }
    let path = c.out.join("eval").join(format!("{}.jsonl", editlab::pipeline::file_stem(name)));
    write_file(&path, jsonl(&records))?;
    for seed in &lab.cfg.seeds {
        let cases: Vec<_> = records.iter().filter(|r| r.seed == *seed).map(|r| r.case.clone()).collect();
        print!("{}", MetricReport::from_scores(&cases, name, *seed)?.to_markdown());
    }
    println!("{}", path.display());
    Ok(())
}

fn report(c: &Common, results: &[PathBuf]) -> anyhow::Result<()> {
    let paths = if results.is_empty() { vec![Layout::new(&c.out).results()] } else { results.to_vec() };
    let art = cmd_report(&paths, &c.out)?;
    for p in art.reports.iter().chain(&art.plots) {
        println!("{}", p.display());
    }
    Ok(())
}

fn finish(art: editlab::RunArtifacts, out: &Path) -> anyhow::Result<()> {
    println!("{}", std::fs::read_to_string(out.join("report.md"))?);
    art.ensure_complete()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenWorld(c) => {
            let cfg = load_config(&c)?;
            gen_world_stage(&cfg, &Layout::new(&c.out))?;
        }
        Command::Pretrain(c) => {
            let lab = Lab::build(load_config(&c)?, &c.out)?;
            println!("{}", serde_json::to_string_pretty(&lab.pretrain)?);
        }
        Command::Edit(c) => edit(&c)?,
        Command::Eval(c) => eval(&c)?,
        Command::Sweep(c) => {
            let mut lab = Lab::open(load_config(&c)?, &c.out)?;
            let art = lab.run(c.arm.as_deref())?;
            finish(art, &c.out)?;
        }
        Command::Report { common, results } => report(&common, &results)?,
        Command::Pipeline(c) => {
            let mut lab = Lab::build(load_config(&c)?, &c.out)?;
            let art = lab.run(c.arm.as_deref())?;
            finish(art, &c.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("editlab: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
