//! The `dupn` command line. Every subcommand reads one config file; `--set`
//! overrides individual keys of that file.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{generate, read_records, write_dataset, DatasetRecord, Preparer, SyntheticWorld};
use crate::embedding::BehaviorIds;
use crate::error::{Error, Result};
use crate::experiments::{attention_relevance, dump_attention, run_transfer, type_time_matrix, write_text, TransferMode};
use crate::heads::TaskKind;
use crate::model::{Dupn, Example};
use crate::numeric::Checkpoint;
use crate::serving::{bench, serve_lines, serve_tcp, synthetic_requests, ServingEngine};
use crate::trainer::gradcheck::{gradcheck, randomize, GradcheckOptions, THRESHOLD};
use crate::trainer::{evaluate, load_model, Session};

#[derive(Debug, Parser)]
#[command(name = "dupn", version, about = "Multi-task user representations: data, training, transfer and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run config file; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Writes the synthetic dataset to `paths.data_dir`.
    GenData,
    /// Trains on the dataset; writes `model.ckpt` and `train_report.jsonl`.
    Train,
    /// Evaluates `model.ckpt` on the evaluation split.
    Eval,
    /// Checks analytic gradients against finite differences.
    Gradcheck,
    /// Runs the SPP transfer modes from `model.ckpt`.
    Transfer,
    /// Exports attention weights and the type-time matrix.
    AttnDump,
    /// Scores requests from standard input or a socket.
    Serve,
    /// Times split against monolithic scoring.
    Bench,
    /// Prints the effective config.
    ShowConfig,
}

/// Outcome of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Gradient check ran but some group exceeded the threshold.
    GradcheckFailed,
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.paths.out_dir)?;
    Ok(cfg.paths.out_dir.join(name))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("model.ckpt")
}

fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        e => e,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    in_file(path, Checkpoint::load(path))
}

fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    in_file(path, read_records(path))?.collect()
}

fn load_split(cfg: &RunConfig, model: &Dupn, name: &str) -> Result<Vec<Example>> {
    let records = load_records(&cfg.paths.data_dir.join(name))?;
    Preparer::new(model).prepare_all(&records)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let g = generate(&cfg.data.world, cfg.data.counts, cfg.data.seed);
    write_dataset(&cfg.paths.data_dir, &g)?;
    eprintln!(
        "wrote {} training and {} evaluation records to {}",
        g.train.len(),
        g.eval.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let tasks = &cfg.train.tasks;
    let mut session = if cfg.paths.init_checkpoint.is_empty() {
        Session::new(&cfg.model, cfg.train.clone())?
    } else {
        let ckpt = load_checkpoint(Path::new(&cfg.paths.init_checkpoint))?;
        let mut s = Session::from_checkpoint(&cfg.model, cfg.train.clone(), &ckpt)?;
        s.increments += 1;
        s
    };
    let keep = |e: &Example| tasks.contains(&e.task());
    let train: Vec<Example> = load_split(cfg, &session.model, "train.jsonl")?.into_iter().filter(keep).collect();
    let eval: Vec<Example> = load_split(cfg, &session.model, "eval.jsonl")?.into_iter().filter(keep).collect();
    let report = session.fit(&train, Some(&eval))?;
    session.checkpoint().save(out_path(cfg, "model.ckpt")?)?;
    report.write_jsonl(out_path(cfg, "train_report.jsonl")?)?;
    for t in tasks {
        if let Some(m) = report.final_metric(*t) {
            eprintln!("{t}: {m:.4}");
        }
    }
    eprintln!("trained {} records in {:.1}s", train.len(), report.wall_clock_secs);
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(&checkpoint_path(cfg))?;
    let (store, model) = load_model(&cfg.model, &ckpt)?;
    let examples = load_split(cfg, &model, "eval.jsonl")?;
    let metrics = evaluate(&model, &store, &examples)?;
    write_jsonl(&out_path(cfg, "eval.jsonl")?, metrics.values())?;
    for m in metrics.values() {
        eprintln!("{} {}: {:.4} over {} examples", m.task, m.name, m.value, m.examples);
    }
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let counts = crate::data::TaskCounts::uniform(cfg.gradcheck.records);
    let g = generate(&cfg.data.world, counts, cfg.data.seed);
    let (mut store, model) = Dupn::init(&cfg.model, cfg.gradcheck.seed)?;
    randomize(&mut store, cfg.gradcheck.seed);
    let examples = Preparer::new(&model).prepare_all(&g.train.records)?;
    let report = gradcheck(&model, &mut store, &examples, &GradcheckOptions::default())?;
    write_jsonl(&out_path(cfg, "gradcheck.jsonl")?, &report.groups)?;
    let worst = report.worst().ok_or_else(|| Error::Data("no parameter groups were checked".into()))?;
    eprintln!(
        "{} groups checked; worst {} on {}: relative error {:.2e}",
        report.groups.len(),
        worst.group,
        worst.task,
        worst.rel_err
    );
    if report.passed(THRESHOLD) {
        Ok(Outcome::Ok)
    } else {
        for g in report.groups.iter().filter(|g| g.rel_err >= THRESHOLD) {
            eprintln!("FAIL {} {}: {:.2e}", g.task, g.group, g.rel_err);
        }
        Ok(Outcome::GradcheckFailed)
    }
}

#[derive(Serialize)]
struct CurvePoint {
    mode: TransferMode,
    iteration: u64,
    auc: f64,
}

fn transfer(cfg: &RunConfig) -> Result<()> {
    let base = load_checkpoint(&checkpoint_path(cfg))?;
    let (_, model) = load_model(&cfg.model, &base)?;
    let train = load_split(cfg, &model, "train.jsonl")?;
    let eval = load_split(cfg, &model, "eval.jsonl")?;
    let (spp, joint): (Vec<Example>, Vec<Example>) = train.into_iter().partition(|e| e.task() == TaskKind::Spp);
    if spp.is_empty() {
        return Err(Error::Data("dataset has no spp records; set data.spp".into()));
    }
    let mut rows = Vec::new();
    for &mode in &cfg.transfer.modes {
        let run = run_transfer(&cfg.model, &cfg.train, Some(&base), &spp, &joint, &eval, mode)?;
        eprintln!("{mode}: early {:.4} final {:.4}", run.early_auc, run.final_auc);
        rows.extend(run.curve.iter().map(|&(iteration, auc)| CurvePoint { mode, iteration, auc }));
        run.checkpoint.save(out_path(cfg, &format!("transfer_{mode}.ckpt"))?)?;
    }
    write_jsonl(&out_path(cfg, "transfer.jsonl")?, rows)
}

fn attn_dump(cfg: &RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(&checkpoint_path(cfg))?;
    let (store, model) = load_model(&cfg.model, &ckpt)?;
    let examples = load_split(cfg, &model, "eval.jsonl")?;
    let matrix = type_time_matrix(&model, &store, &examples)?;
    write_text(out_path(cfg, "attention_type_time.tsv")?, &matrix.to_tsv())?;
    let world = SyntheticWorld::new(&cfg.data.world, cfg.data.seed)?;
    let queries: Vec<Vec<String>> = (0..cfg.data.world.categories).map(SyntheticWorld::category_query).collect();
    let mut cases = Vec::new();
    for u in world.eval_user_range().take(cfg.attention.cases) {
        let seq: Vec<BehaviorIds> = world.sequence(u).iter().map(|b| model.embedder.prepare_behavior(b)).collect();
        let profile = model.embedder.prepare_profile(world.profile(u));
        cases.push(dump_attention(&model, &store, &seq, &profile, &queries)?);
    }
    write_jsonl(&out_path(cfg, "attention_cases.jsonl")?, &cases)?;
    let rel = attention_relevance(&world, &model, &store, cfg.attention.probes, cfg.data.seed)?;
    write_json(&out_path(cfg, "attention_relevance.json")?, &rel)?;
    eprintln!(
        "attention on matching categories {:.4}, others {:.4}, ratio {:.2} over {} probes",
        rel.matching,
        rel.other,
        rel.ratio(),
        rel.probes
    );
    Ok(())
}

fn serve(cfg: &RunConfig) -> Result<()> {
    let engine = ServingEngine::new(&cfg.model, &load_checkpoint(&checkpoint_path(cfg))?, cfg.serve.cache)?;
    if cfg.serve.addr.is_empty() {
        let n = serve_lines(&engine, io::stdin().lock(), io::stdout().lock())?;
        eprintln!("answered {n} requests; {:?}", engine.stats());
        Ok(())
    } else {
        let listener = TcpListener::bind(&cfg.serve.addr)?;
        eprintln!("listening on {}", listener.local_addr()?);
        serve_tcp(Arc::new(engine), listener, None)
    }
}

fn run_bench(cfg: &RunConfig) -> Result<()> {
    let engine = ServingEngine::new(&cfg.model, &load_checkpoint(&checkpoint_path(cfg))?, cfg.serve.cache)?;
    let world = SyntheticWorld::new(&cfg.data.world, cfg.data.seed)?;
    let requests = synthetic_requests(&world, cfg.bench.requests, cfg.bench.candidates, cfg.data.seed);
    let report = bench(&engine, &requests)?;
    write_json(&out_path(cfg, "bench.json")?, &report)?;
    eprintln!(
        "split {:.0} items/s, monolithic {:.0} items/s, speedup {:.1}x, max diff {:.1e}",
        report.split_items_per_sec, report.monolithic_items_per_sec, report.speedup, report.max_abs_diff
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::GenData => gen_data(&cfg)?,
        Command::Train => train(&cfg)?,
        Command::Eval => eval(&cfg)?,
        Command::Gradcheck => return run_gradcheck(&cfg),
        Command::Transfer => transfer(&cfg)?,
        Command::AttnDump => attn_dump(&cfg)?,
        Command::Serve => serve(&cfg)?,
        Command::Bench => run_bench(&cfg)?,
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(Outcome::Ok)
}
