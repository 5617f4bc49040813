//! Comparative protocols: single- vs multi-task training, the four transfer
//! modes, and attention case studies.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::data::SyntheticWorld;
use crate::embedding::{BehaviorIds, EmbeddingConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadsConfig, TaskKind};
use crate::model::{Dupn, Example, ModelConfig};
use crate::numeric::{Checkpoint, ParameterStore, RngState};
use crate::record::{BehaviorType, TimeBucket};
use crate::trainer::{Session, TrainConfig, TrainReport};

/// Architecture used by the desk-scale experiments.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        embedding: EmbeddingConfig::default(),
        encoder: EncoderConfig {
            d_h: 16,
            d_att: 16,
            max_len: 100,
        },
        heads: HeadsConfig {
            width: 32,
            ..HeadsConfig::default()
        },
    }
}

/// Training settings used by the desk-scale experiments.
pub fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        seed,
        ..TrainConfig::default()
    }
}

/// Final metrics of one seed's single- and multi-task runs.
#[derive(Clone, Debug, Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub single: BTreeMap<TaskKind, f64>,
    pub multi: BTreeMap<TaskKind, f64>,
    #[serde(skip)]
    pub single_reports: BTreeMap<TaskKind, TrainReport>,
    #[serde(skip)]
    pub multi_report: TrainReport,
}

impl SeedComparison {
    pub fn gain(&self, task: TaskKind) -> f64 {
        self.multi[&task] - self.single[&task]
    }
}

/// Trains one single-task model per task and one joint model, each seeing
/// exactly the same records of its tasks.
pub fn run_single_vs_multi(model_cfg: &ModelConfig, cfg: &TrainConfig, train: &[Example], eval: &[Example]) -> Result<SeedComparison> {
    let tasks = TaskKind::JOINT;
    for t in tasks {
        if !train.iter().any(|e| e.task() == t) || !eval.iter().any(|e| e.task() == t) {
            return Err(Error::Data(format!("dataset has no {t} records")));
        }
    }
    let mut single = BTreeMap::new();
    let mut single_reports = BTreeMap::new();
    for t in tasks {
        let cfg = TrainConfig {
            tasks: vec![t],
            weights: vec![1.0],
            ..cfg.clone()
        };
        let own: Vec<Example> = train.iter().filter(|e| e.task() == t).cloned().collect();
        let own_eval: Vec<Example> = eval.iter().filter(|e| e.task() == t).cloned().collect();
        let mut s = Session::new(model_cfg, cfg)?;
        let report = s.fit(&own, Some(&own_eval))?;
        single.insert(t, report.final_metric(t).expect("final evaluation"));
        single_reports.insert(t, report);
    }
    let cfg = TrainConfig {
        tasks: tasks.to_vec(),
        weights: vec![1.0; tasks.len()],
        ..cfg.clone()
    };
    let mut s = Session::new(model_cfg, cfg.clone())?;
    let multi_report = s.fit(train, Some(eval))?;
    let multi = tasks.iter().map(|&t| (t, multi_report.final_metric(t).expect("final evaluation"))).collect();
    Ok(SeedComparison {
        seed: cfg.seed,
        single,
        multi,
        single_reports,
        multi_report,
    })
}

/// Per-task summary across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct TaskSummary {
    pub task: TaskKind,
    pub wins: usize,
    pub seeds: usize,
    pub mean_gain: f64,
    pub sd_gain: f64,
}

pub fn summarize(runs: &[SeedComparison]) -> Vec<TaskSummary> {
    TaskKind::JOINT
        .iter()
        .map(|&task| {
            let gains: Vec<f64> = runs.iter().map(|r| r.gain(task)).collect();
            let n = gains.len() as f64;
            let mean = gains.iter().sum::<f64>() / n;
            let var = if gains.len() > 1 {
                gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            TaskSummary {
                task,
                wins: gains.iter().filter(|&&g| g >= 0.0).count(),
                seeds: gains.len(),
                mean_gain: mean,
                sd_gain: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum TransferMode {
    /// SPP alone, from scratch.
    Rs,
    /// All five tasks jointly, from scratch.
    Ra,
    /// SPP head on the frozen base representation.
    Rt,
    /// SPP from the base checkpoint, everything trainable.
    Ft,
}

impl TransferMode {
    pub const ALL: [TransferMode; 4] = [Self::Rs, Self::Ra, Self::Rt, Self::Ft];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rs => "rs",
            Self::Ra => "ra",
            Self::Rt => "rt",
            Self::Ft => "ft",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown transfer mode {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferRun {
    pub mode: TransferMode,
    /// SPP AUC against iterations.
    pub curve: Vec<(u64, f64)>,
    pub early_auc: f64,
    pub final_auc: f64,
    #[serde(skip)]
    pub checkpoint: Checkpoint,
}

/// Trains SPP under `mode` and records its AUC every tenth of the budget.
///
/// `spp` holds the SPP training records; RA additionally trains on `joint`.
pub fn run_transfer(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    base: Option<&Checkpoint>,
    spp: &[Example],
    joint: &[Example],
    eval: &[Example],
    mode: TransferMode,
) -> Result<TransferRun> {
    let eval: Vec<Example> = eval.iter().filter(|e| e.task() == TaskKind::Spp).cloned().collect();
    let spp_only = TrainConfig {
        tasks: vec![TaskKind::Spp],
        weights: vec![1.0],
        transfer: true,
        ..cfg.clone()
    };
    let (mut session, data): (Session, Vec<Example>) = match mode {
        TransferMode::Rs => (Session::new(model_cfg, spp_only)?, spp.to_vec()),
        TransferMode::Ra => {
            let c = TrainConfig {
                tasks: TaskKind::ALL.to_vec(),
                weights: vec![1.0; 5],
                transfer: true,
                ..cfg.clone()
            };
            let mut data = joint.to_vec();
            data.extend_from_slice(spp);
            (Session::new(model_cfg, c)?, data)
        }
        TransferMode::Rt | TransferMode::Ft => {
            let base = base.ok_or_else(|| Error::config(format!("{mode} needs a base checkpoint")))?;
            let mut s = Session::from_checkpoint(model_cfg, spp_only, base)?;
            if mode == TransferMode::Rt {
                for id in s.model.trunk_param_ids() {
                    s.store.set_frozen(id, true);
                }
            }
            (s, spp.to_vec())
        }
    };
    let per_epoch = session.schedule(&data, 0)?.len() as u64;
    let total = per_epoch * session.cfg.epochs as u64;
    session.cfg.eval_every = (total / 10).max(1);
    let start = session.step;
    let report = session.fit(&data, Some(&eval))?;
    let curve: Vec<(u64, f64)> = report.metrics(TaskKind::Spp).into_iter().map(|(i, v)| (i - start, v)).collect();
    let early_auc = curve.first().map(|c| c.1).ok_or_else(|| Error::Metric("no SPP evaluation".into()))?;
    let final_auc = curve.last().unwrap().1;
    Ok(TransferRun {
        mode,
        curve,
        early_auc,
        final_auc,
        checkpoint: session.checkpoint(),
    })
}

/// Attention weights of one sequence under several queries.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionCase {
    pub sequence: Vec<(BehaviorType, TimeBucket)>,
    pub queries: Vec<String>,
    /// One row per query, one column per position.
    pub weights: Vec<Vec<f64>>,
}

/// Mean attention weight per (behavior type, time bucket) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TypeTimeMatrix {
    pub sum: Vec<Vec<f64>>,
    pub count: Vec<Vec<usize>>,
}

impl Default for TypeTimeMatrix {
    fn default() -> Self {
        TypeTimeMatrix {
            sum: vec![vec![0.0; TimeBucket::COUNT]; BehaviorType::ALL.len()],
            count: vec![vec![0; TimeBucket::COUNT]; BehaviorType::ALL.len()],
        }
    }
}

impl TypeTimeMatrix {
    pub fn add(&mut self, seq: &[BehaviorIds], weights: &[f64]) {
        for (b, &w) in seq.iter().zip(weights) {
            self.sum[b.btype as usize][b.time as usize] += w;
            self.count[b.btype as usize][b.time as usize] += 1;
        }
    }

    /// Cell means; `NaN` where no behavior fell.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(s, c)| s.iter().zip(c).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect())
            .collect()
    }

    /// Tab-separated grid: header row of time buckets, one row per type.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("btype");
        for tb in TimeBucket::all() {
            out.push('\t');
            out.push_str(&tb.to_string());
        }
        out.push('\n');
        for (bt, row) in BehaviorType::ALL.iter().zip(self.mean()) {
            out.push_str(bt.label());
            for v in row {
                out.push('\t');
                if v.is_nan() {
                    out.push_str("nan");
                } else {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Weight rows of `seq` under each query.
pub fn dump_attention(model: &Dupn, store: &ParameterStore, seq: &[BehaviorIds], profile: &[u32], queries: &[Vec<String>]) -> Result<AttentionCase> {
    let mut weights = Vec::new();
    for q in queries {
        let (_, w) = model.represent(store, seq, &model.embedder.prepare_query(q), profile)?;
        weights.push(w);
    }
    Ok(AttentionCase {
        sequence: seq.iter().map(|b| (b.btype(), b.time_bucket())).collect(),
        queries: queries.iter().map(|q| q.join(" ")).collect(),
        weights,
    })
}

/// Type-time matrix over the given evaluation examples, each encoded with
/// its own query.
pub fn type_time_matrix(model: &Dupn, store: &ParameterStore, examples: &[Example]) -> Result<TypeTimeMatrix> {
    let mut m = TypeTimeMatrix::default();
    for ex in examples {
        let (seq, _) = model.truncate(&ex.seq);
        let (_, w) = model.represent(store, seq, &ex.query, &ex.profile)?;
        m.add(seq, &w);
    }
    Ok(m)
}

/// Mean attention weight on positions whose category matches the probe
/// query, and on the other positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Relevance {
    pub probes: usize,
    pub matching: f64,
    pub other: f64,
}

impl Relevance {
    pub fn ratio(&self) -> f64 {
        self.matching / self.other
    }
}

/// Probes eval users of `world` with a category query drawn from their own
/// history; sequences covering a single category are skipped.
pub fn attention_relevance(world: &SyntheticWorld, model: &Dupn, store: &ParameterStore, probes: usize, seed: u64) -> Result<Relevance> {
    let users = world.eval_user_range();
    if users.is_empty() {
        return Err(Error::Data("world has no evaluation users".into()));
    }
    let mut rng = RngState::new(seed);
    let (mut matching, mut other, mut n) = (0.0, 0.0, 0);
    let mut attempts = 0;
    while n < probes {
        attempts += 1;
        if attempts > probes * 50 {
            return Err(Error::Data("too few multi-category sequences to probe".into()));
        }
        let u = rng.random_range(users.clone());
        let cats = world.sequence_categories(u);
        let c = cats[rng.random_range(0..cats.len())];
        if cats.iter().all(|&k| k == c) {
            continue;
        }
        let seq: Vec<BehaviorIds> = world.sequence(u).iter().map(|b| model.embedder.prepare_behavior(b)).collect();
        let profile = model.embedder.prepare_profile(world.profile(u));
        let query = model.embedder.prepare_query(&SyntheticWorld::category_query(c));
        let (seq, _) = model.truncate(&seq);
        let cats = &cats[cats.len() - seq.len()..];
        let (_, w) = model.represent(store, seq, &query, &profile)?;
        let (mut ms, mut mc, mut os, mut oc) = (0.0, 0, 0.0, 0);
        for (&k, &wt) in cats.iter().zip(&w) {
            if k == c {
                ms += wt;
                mc += 1;
            } else {
                os += wt;
                oc += 1;
            }
        }
        matching += ms / mc as f64;
        other += os / oc as f64;
        n += 1;
    }
    Ok(Relevance {
        probes: n,
        matching: matching / n as f64,
        other: other / n as f64,
    })
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Preparer, TaskCounts, WorldConfig};

    #[test]
    fn transfer_mode_parsing() {
        assert_eq!("RT".parse::<TransferMode>().unwrap(), TransferMode::Rt);
        assert!("xx".parse::<TransferMode>().is_err());
    }

    #[test]
    fn rt_without_base_is_an_error() {
        let cfg = desk_model();
        let r = run_transfer(&cfg, &desk_train(0), None, &[], &[], &[], TransferMode::Rt);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn type_time_grid_is_row_complete() {
        let g = generate(&WorldConfig::small(), TaskCounts { ctr: 300, ..Default::default() }, 3);
        let (store, model) = Dupn::init(&desk_model(), 1).unwrap();
        let ex = Preparer::new(&model).prepare_all(&g.train.records).unwrap();
        let m = type_time_matrix(&model, &store, &ex).unwrap();
        let tsv = m.to_tsv();
        let rows: Vec<&str> = tsv.lines().collect();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.split('\t').count() == 33));
        assert!(rows[1].starts_with("click\t"));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let g = generate(&WorldConfig::small(), TaskCounts::default(), 4);
        let (store, model) = Dupn::init(&desk_model(), 2).unwrap();
        let seq: Vec<BehaviorIds> = g.world.sequence(0).iter().map(|b| model.embedder.prepare_behavior(b)).collect();
        let queries: Vec<Vec<String>> = (0..4).map(SyntheticWorld::category_query).chain([vec![]]).collect();
        let case = dump_attention(&model, &store, &seq, &[], &queries).unwrap();
        for row in &case.weights {
            assert_eq!(row.len(), seq.len());
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_relevance_is_near_uniform() {
        let g = generate(&WorldConfig::small(), TaskCounts::default(), 5);
        let (store, model) = Dupn::init(&desk_model(), 3).unwrap();
        let r = attention_relevance(&g.world, &model, &store, 200, 1).unwrap();
        assert!((r.ratio() - 1.0).abs() < 0.2, "{r:?}");
    }
}
