//! Single- and multi-task training, evaluation, gradient checking and
//! incremental continuation from a checkpoint.

pub mod gradcheck;
pub mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::data::{make_batches, Batch, HasTask};
use crate::error::{Error, Result};
use crate::heads::{Dropout, TaskKind};
use crate::model::{Backprop, Dupn, Example, ModelConfig};
use crate::numeric::ops::check_keep_prob;
use crate::numeric::{adagrad_step, AdaGrad, Checkpoint, CheckpointMeta, GradBuffer, ParameterStore, RngState};

pub use metrics::{auc, auc_all_pairs, evaluate, precision, Metrics, TaskMetric};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    /// Probability of keeping a head hidden unit during training.
    pub keep_prob: f64,
    pub batch_size: usize,
    pub tasks: Vec<TaskKind>,
    /// Round-robin weight of each entry of `tasks`.
    pub weights: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Records shuffled together before batching.
    pub shuffle_window: usize,
    /// Data-parallel gradient workers per batch.
    pub workers: usize,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_every: u64,
    /// SPP is a transfer-only task; set for transfer runs.
    pub transfer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-6,
            keep_prob: 0.8,
            batch_size: 64,
            tasks: TaskKind::JOINT.to_vec(),
            weights: vec![1.0; 4],
            epochs: 1,
            seed: 0,
            clip_norm: 5.0,
            shuffle_window: 4096,
            workers: 1,
            eval_every: 0,
            transfer: false,
        }
    }
}

impl TrainConfig {
    pub fn single(task: TaskKind) -> Self {
        TrainConfig {
            tasks: vec![task],
            weights: vec![1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.l2 >= 0.0) {
            return Err(Error::config("learning_rate and l2 must be >= 0"));
        }
        check_keep_prob(self.keep_prob)?;
        if self.batch_size == 0 || self.workers == 0 || self.shuffle_window == 0 {
            return Err(Error::config("batch_size, workers and shuffle_window must be >= 1"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("task set is empty"));
        }
        if self.weights.len() != self.tasks.len() || !self.weights.iter().all(|&w| pos(w)) {
            return Err(Error::config("need one positive mixing weight per task"));
        }
        let mut seen = [false; 5];
        for t in &self.tasks {
            if std::mem::replace(&mut seen[t.index()], true) {
                return Err(Error::config(format!("task {t} listed twice")));
            }
        }
        if self.tasks.contains(&TaskKind::Spp) && !self.transfer {
            return Err(Error::config("spp is only trained in transfer runs"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm must be >= 0"));
        }
        Ok(())
    }

    fn dropout(&self) -> Dropout {
        Dropout {
            keep_prob: self.keep_prob,
            training: true,
        }
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRecord {
    pub iteration: u64,
    pub task: TaskKind,
    /// `"loss"`, `"auc"` or `"precision"`.
    pub kind: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<ReportRecord>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn losses(&self, task: TaskKind) -> Vec<f64> {
        self.records.iter().filter(|r| r.task == task && r.kind == "loss").map(|r| r.value).collect()
    }

    /// Metric values of `task` in iteration order.
    pub fn metrics(&self, task: TaskKind) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.task == task && r.kind != "loss")
            .map(|r| (r.iteration, r.value))
            .collect()
    }

    pub fn final_metric(&self, task: TaskKind) -> Option<f64> {
        self.metrics(task).last().map(|m| m.1)
    }

    fn push_metrics(&mut self, iteration: u64, m: &Metrics) {
        for tm in m.values() {
            self.records.push(ReportRecord {
                iteration,
                task: tm.task,
                kind: tm.name,
                value: tm.value,
            });
        }
    }

    /// Line-delimited JSON, one record per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of an example inside the training set, tagged with its task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub task: TaskKind,
    pub index: usize,
}

impl HasTask for Slot {
    fn task(&self) -> TaskKind {
        self.task
    }
}

/// Model, parameters and optimiser progress of one training run.
pub struct Session {
    pub model: Dupn,
    pub store: ParameterStore,
    pub cfg: TrainConfig,
    pub step: u64,
    pub increments: u32,
    buffers: Vec<GradBuffer>,
}

impl Session {
    /// Fresh parameters initialised from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (store, model) = Dupn::init(model_cfg, RngState::new(cfg.seed).fork(0).seed)?;
        Ok(Self::assemble(model, store, cfg, CheckpointMeta::default()))
    }

    /// Resumes parameters, accumulators and step count from a checkpoint.
    pub fn from_checkpoint(model_cfg: &ModelConfig, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ckpt.check_fingerprint(model_cfg.fingerprint())?;
        let mut store = ParameterStore::new();
        let model = Dupn::register(&mut store, model_cfg)?;
        ckpt.restore_into(&mut store)?;
        Ok(Self::assemble(model, store, cfg, ckpt.meta))
    }

    fn assemble(model: Dupn, store: ParameterStore, cfg: TrainConfig, meta: CheckpointMeta) -> Self {
        let buffers = (0..cfg.workers).map(|_| GradBuffer::for_store(&store)).collect();
        Session {
            model,
            store,
            cfg,
            step: meta.step,
            increments: meta.increments,
            buffers,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.store,
            self.model.fingerprint(),
            CheckpointMeta {
                step: self.step,
                increments: self.increments,
            },
        )
    }

    /// Batch order of one epoch: per-task shuffled batches, interleaved by
    /// smooth weighted round-robin.
    pub fn schedule(&self, examples: &[Example], epoch: u64) -> Result<Vec<Batch<Slot>>> {
        let cfg = &self.cfg;
        let mut per_task: Vec<std::collections::VecDeque<Batch<Slot>>> = Vec::new();
        for (k, &task) in cfg.tasks.iter().enumerate() {
            let slots = examples
                .iter()
                .enumerate()
                .filter(|(_, e)| e.task() == task)
                .map(|(index, _)| Slot { task, index });
            let rng = RngState::new(cfg.seed).fork(1 + epoch).fork(k as u64);
            per_task.push(make_batches(slots, cfg.batch_size, cfg.shuffle_window, rng).collect());
        }
        if let Some(t) = examples.iter().map(Example::task).find(|t| !cfg.tasks.contains(t)) {
            return Err(Error::config(format!("dataset contains {t} records but the task set excludes it")));
        }
        let mut credit = vec![0.0; per_task.len()];
        let mut out = Vec::new();
        loop {
            let live: Vec<usize> = (0..per_task.len()).filter(|&k| !per_task[k].is_empty()).collect();
            if live.is_empty() {
                return Ok(out);
            }
            let total: f64 = live.iter().map(|&k| cfg.weights[k]).sum();
            let mut best = live[0];
            for &k in &live {
                credit[k] += cfg.weights[k];
                if credit[k] > credit[best] {
                    best = k;
                }
            }
            credit[best] -= total;
            out.push(per_task[best].pop_front().unwrap());
        }
    }

    fn backprop(&self) -> Backprop {
        if self.model.trunk_param_ids().iter().all(|&id| self.store.is_frozen(id)) {
            Backprop::HeadOnly
        } else {
            Backprop::Full
        }
    }

    /// One optimiser step on a homogeneous batch; returns the batch loss.
    pub fn train_batch(&mut self, batch: &[&Example]) -> Result<f64> {
        let Some(first) = batch.first() else { return Ok(0.0) };
        let task = first.task();
        let iteration = self.step;
        let diverged = |msg: String| Error::Diverged {
            iteration,
            task: task.to_string(),
            msg,
        };
        let norm: f64 = if task == TaskKind::L2r {
            batch.iter().map(|e| e.target.weight()).sum()
        } else {
            batch.len() as f64
        };
        let scale = 1.0 / norm;
        let dropout = self.cfg.dropout();
        let backprop = self.backprop();
        let step_rng = RngState::new(self.cfg.seed).fork(u64::MAX).fork(self.step);
        let (model, store) = (&self.model, &self.store);
        let chunk = batch.len().div_ceil(self.buffers.len());
        let run = |offset: usize, part: &[&Example], buf: &mut GradBuffer| -> Result<f64> {
            let mut loss = 0.0;
            for (i, ex) in part.iter().enumerate() {
                let mut rng = step_rng.fork((offset + i) as u64);
                loss += model.loss(store, ex, scale, dropout, &mut rng, Some(buf), backprop)?;
            }
            Ok(loss)
        };
        let losses: Vec<Result<f64>> = if self.buffers.len() == 1 {
            vec![run(0, batch, &mut self.buffers[0])]
        } else {
            let run = &run;
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .zip(self.buffers.iter_mut())
                    .enumerate()
                    .map(|(k, (part, buf))| s.spawn(move || run(k * chunk, part, buf)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
            })
        };
        let mut loss = 0.0;
        for l in losses {
            loss += l.map_err(|e| diverged(e.to_string()))?;
        }
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        let (head, rest) = self.buffers.split_first_mut().unwrap();
        for b in rest.iter_mut() {
            head.merge(b);
            b.clear();
        }
        self.store.accumulate(head);
        head.clear();
        let gn = self.store.grad_norm();
        if !gn.is_finite() {
            self.store.zero_grads();
            return Err(diverged("non-finite gradient".into()));
        }
        if self.cfg.clip_norm > 0.0 && gn > self.cfg.clip_norm {
            self.store.scale_grads(self.cfg.clip_norm / gn);
        }
        let opt = AdaGrad::new(self.cfg.learning_rate, self.cfg.l2);
        adagrad_step(&mut self.store, opt.lr, opt.l2, opt.eps).map_err(|e| diverged(e.to_string()))?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs `batches` (indices into `examples`) in order.
    pub fn run(&mut self, examples: &[Example], batches: &[Batch<Slot>], eval: Option<&[Example]>, report: &mut TrainReport) -> Result<()> {
        let mut refs = Vec::with_capacity(self.cfg.batch_size);
        for b in batches {
            refs.clear();
            refs.extend(b.items.iter().map(|s| &examples[s.index]));
            let iteration = self.step;
            let loss = self.train_batch(&refs)?;
            report.records.push(ReportRecord {
                iteration,
                task: b.task,
                kind: "loss",
                value: loss,
            });
            if let Some(ev) = eval {
                if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 && !ev.is_empty() {
                    report.push_metrics(self.step, &evaluate(&self.model, &self.store, ev)?);
                }
            }
        }
        Ok(())
    }

    /// All epochs over `examples`, then a final evaluation.
    pub fn fit(&mut self, examples: &[Example], eval: Option<&[Example]>) -> Result<TrainReport> {
        let start = Instant::now();
        let mut report = TrainReport::default();
        for epoch in 0..self.cfg.epochs {
            let batches = self.schedule(examples, epoch as u64)?;
            self.run(examples, &batches, eval, &mut report)?;
        }
        if let Some(ev) = eval.filter(|e| !e.is_empty()) {
            let last = report.records.iter().rev().find(|r| r.kind != "loss").map(|r| r.iteration);
            if last != Some(self.step) {
                report.push_metrics(self.step, &evaluate(&self.model, &self.store, ev)?);
            }
        }
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(report)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<Metrics> {
        evaluate(&self.model, &self.store, examples)
    }
}

/// Trains from scratch on prepared examples.
pub fn train(model_cfg: &ModelConfig, cfg: TrainConfig, examples: &[Example], eval: Option<&[Example]>) -> Result<(Checkpoint, TrainReport)> {
    let mut s = Session::new(model_cfg, cfg)?;
    let report = s.fit(examples, eval)?;
    Ok((s.checkpoint(), report))
}

/// Fine-tunes a checkpoint on one new day of data, keeping its AdaGrad
/// state; refuses a checkpoint built for another architecture.
pub fn incremental_update(ckpt: &Checkpoint, model_cfg: &ModelConfig, day: &[Example], cfg: TrainConfig) -> Result<Checkpoint> {
    let mut s = Session::from_checkpoint(model_cfg, cfg, ckpt)?;
    s.fit(day, None)?;
    s.increments += 1;
    Ok(s.checkpoint())
}

/// Binds a model to a checkpoint for evaluation.
pub fn load_model(model_cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<(ParameterStore, Dupn)> {
    ckpt.check_fingerprint(model_cfg.fingerprint())?;
    let mut store = ParameterStore::new();
    let model = Dupn::register(&mut store, model_cfg)?;
    ckpt.restore_into(&mut store)?;
    Ok((store, model))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate, Preparer, TaskCounts, WorldConfig};
    use crate::embedding::EmbeddingConfig;
    use crate::encoder::EncoderConfig;
    use crate::heads::HeadsConfig;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            embedding: EmbeddingConfig::default(),
            encoder: EncoderConfig {
                d_h: 8,
                d_att: 8,
                max_len: 20,
            },
            heads: HeadsConfig {
                width: 8,
                ..HeadsConfig::default()
            },
        }
    }

    fn examples(counts: TaskCounts, seed: u64) -> Vec<Example> {
        let g = generate(&WorldConfig::small(), counts, seed);
        let (_, m) = Dupn::init(&tiny_model(), 0).unwrap();
        Preparer::new(&m).prepare_all(&g.train.records).unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ex = examples(TaskCounts::joint(64), 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut s = Session::new(&tiny_model(), cfg).unwrap();
        let before = s.checkpoint();
        s.fit(&ex, None).unwrap();
        assert_eq!(s.step, 16);
        assert_eq!(
            before.entries.iter().map(|e| &e.value).collect::<Vec<_>>(),
            s.checkpoint().entries.iter().map(|e| &e.value).collect::<Vec<_>>()
        );
    }

    #[test]
    fn round_robin_is_fair() {
        let ex = examples(TaskCounts { ctr: 640, l2r: 320, ppp: 320, fifp: 320, spp: 0 }, 2);
        let cfg = TrainConfig {
            batch_size: 32,
            weights: vec![2.0, 1.0, 1.0, 1.0],
            ..TrainConfig::default()
        };
        let s = Session::new(&tiny_model(), cfg).unwrap();
        let order = s.schedule(&ex, 0).unwrap();
        assert_eq!(order.len(), 50);
        // Every prefix matches the weights within one batch per task.
        let mut counts = [0f64; 5];
        for (n, b) in order.iter().enumerate() {
            counts[b.task.index()] += 1.0;
            let n = (n + 1) as f64;
            assert!((counts[0] - n * 0.4).abs() <= 1.0, "{counts:?}");
            assert!((counts[1] - n * 0.2).abs() <= 1.0, "{counts:?}");
        }
    }

    #[test]
    fn spp_needs_transfer_flag() {
        let mut cfg = TrainConfig::single(TaskKind::Spp);
        assert!(cfg.validate().is_err());
        cfg.transfer = true;
        assert!(cfg.validate().is_ok());
        let joint = TrainConfig {
            tasks: TaskKind::ALL.to_vec(),
            weights: vec![1.0; 5],
            ..TrainConfig::default()
        };
        assert!(matches!(joint.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tasks_outside_the_set_are_rejected() {
        let ex = examples(TaskCounts::joint(10), 3);
        let s = Session::new(&tiny_model(), TrainConfig::single(TaskKind::Ctr)).unwrap();
        assert!(s.schedule(&ex, 0).is_err());
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let ex = examples(TaskCounts::joint(96), 4);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let run = |cfg: TrainConfig| {
            let mut s = Session::new(&tiny_model(), cfg).unwrap();
            s.fit(&ex, None).unwrap();
            s.checkpoint().to_bytes()
        };
        let a = run(cfg.clone());
        assert_eq!(a, run(cfg.clone()));
        let two = run(TrainConfig { workers: 2, ..cfg.clone() });
        let ca = Checkpoint::from_bytes(&a).unwrap();
        let cb = Checkpoint::from_bytes(&two).unwrap();
        for (x, y) in ca.entries.iter().zip(&cb.entries) {
            for (p, q) in x.value.data().iter().zip(y.value.data()) {
                assert!((p - q).abs() < 1e-9, "{}", x.name);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration_and_task() {
        let ex = examples(TaskCounts { ctr: 8, ..Default::default() }, 5);
        let mut s = Session::new(&tiny_model(), TrainConfig::single(TaskKind::Ctr)).unwrap();
        let id = s.store.require("ctr.b2").unwrap();
        s.store.value_mut(id).data_mut()[0] = f64::INFINITY;
        let refs: Vec<&Example> = ex.iter().collect();
        match s.train_batch(&refs) {
            Err(Error::Diverged { iteration, task, .. }) => {
                assert_eq!(iteration, 0);
                assert_eq!(task, "ctr");
            }
            r => panic!("expected divergence, got {r:?}"),
        }
    }

    fn one_batch(task: TaskKind) -> Vec<Example> {
        examples(TaskCounts::joint(32), 6).into_iter().filter(|e| e.task() == task).collect()
    }

    fn overfit_cfg(task: TaskKind, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            l2: 0.0,
            keep_prob: 1.0,
            clip_norm: 0.0,
            ..TrainConfig::single(task)
        }
    }

    #[test]
    fn repeated_ctr_batch_loss_decreases() {
        let ex = one_batch(TaskKind::Ctr);
        let refs: Vec<&Example> = ex.iter().collect();
        let mut s = Session::new(&tiny_model(), overfit_cfg(TaskKind::Ctr, 0.005)).unwrap();
        let mut prev = s.train_batch(&refs).unwrap();
        for i in 1..50 {
            let l = s.train_batch(&refs).unwrap();
            assert!(l < prev, "step {i}: {l} >= {prev}");
            prev = l;
        }
    }

    #[test]
    fn overfits_one_batch_for_each_task() {
        for task in TaskKind::JOINT {
            let ex = one_batch(task);
            let refs: Vec<&Example> = ex.iter().collect();
            let mut s = Session::new(&tiny_model(), overfit_cfg(task, 0.05)).unwrap();
            let first = s.train_batch(&refs).unwrap();
            let mut last = first;
            for _ in 1..500 {
                last = s.train_batch(&refs).unwrap();
            }
            assert!(last < 0.1 * first, "{task}: {first} -> {last}");
        }
    }

    #[test]
    fn incremental_equals_continuous_run() {
        let day1 = examples(TaskCounts::joint(48), 7);
        let day2 = examples(TaskCounts::joint(48), 8);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut one = Session::new(&tiny_model(), cfg.clone()).unwrap();
        let (b1, b2) = (one.schedule(&day1, 0).unwrap(), one.schedule(&day2, 0).unwrap());
        let mut r = TrainReport::default();
        one.run(&day1, &b1, None, &mut r).unwrap();
        one.run(&day2, &b2, None, &mut r).unwrap();

        let mut first = Session::new(&tiny_model(), cfg.clone()).unwrap();
        first.run(&day1, &b1, None, &mut r).unwrap();
        let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let inc = incremental_update(&saved, &tiny_model(), &day2, cfg.clone()).unwrap();
        assert_eq!(inc.meta.increments, 1);
        let continuous = one.checkpoint();
        assert_eq!(inc.meta.step, continuous.meta.step);
        assert_eq!(inc.entries, continuous.entries);

        let mut other = tiny_model();
        other.encoder.d_h = 4;
        assert!(matches!(incremental_update(&saved, &other, &day2, cfg.clone()), Err(Error::Fingerprint { .. })));

        let empty = incremental_update(&saved, &tiny_model(), &[], cfg).unwrap();
        assert_eq!(empty.entries, saved.entries);
        assert_eq!(empty.meta.step, saved.meta.step);
    }
}
