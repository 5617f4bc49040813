//! Central finite differences against the analytic backward pass.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::heads::{Dropout, TaskKind};
use crate::model::{Backprop, Dupn, Example};
use crate::numeric::{GradBuffer, ParamId, ParameterStore, RngState};

pub const THRESHOLD: f64 = 1e-5;
pub const STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared in absolute terms.
pub const FLOOR: f64 = 1e-7;

/// Result for one parameter tensor under one task loss.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub task: TaskKind,
    pub group: String,
    pub coords: usize,
    pub max_abs_err: f64,
    pub max_grad: f64,
    /// `max_abs_err / max(max_grad, FLOOR)`.
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.groups.iter().all(|g| g.rel_err < threshold)
    }

    pub fn get(&self, task: TaskKind, group: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.task == task && g.group == group)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    /// Negates the analytic gradient of this group before comparing; a
    /// sanity check that the checker catches a broken backward pass.
    pub corrupt: Option<String>,
}

/// Moves every parameter to a generic point, `U(-0.5, 0.5)`. Freshly
/// initialised embeddings are so small that most gradients sit at the
/// finite-difference noise level.
pub fn randomize(store: &mut ParameterStore, seed: u64) {
    let mut rng = RngState::new(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn batch_loss(model: &Dupn, store: &ParameterStore, examples: &[&Example], scale: f64) -> Result<f64> {
    let mut rng = RngState::new(0);
    let mut total = 0.0;
    for ex in examples {
        total += model.loss(store, ex, scale, Dropout::OFF, &mut rng, None, Backprop::Full)?;
    }
    Ok(total)
}

/// Checks every parameter the task loss depends on. Embedding tables are
/// checked on the rows the examples touch; all other rows have zero
/// gradient on both sides.
pub fn check_task(model: &Dupn, store: &mut ParameterStore, examples: &[&Example], opts: &GradcheckOptions) -> Result<Vec<GroupCheck>> {
    let Some(first) = examples.first() else { return Ok(Vec::new()) };
    let task = first.task();
    let norm: f64 = if task == TaskKind::L2r {
        examples.iter().map(|e| e.target.weight()).sum()
    } else {
        examples.len() as f64
    };
    let scale = 1.0 / norm;
    let mut grads = GradBuffer::for_store(store);
    let mut rng = RngState::new(0);
    for ex in examples {
        model.loss(store, ex, scale, Dropout::OFF, &mut rng, Some(&mut grads), Backprop::Full)?;
    }
    let mut relevant: Vec<ParamId> = model.trunk_param_ids();
    relevant.extend(model.heads.task_param_ids(task));
    let mut out = Vec::new();
    for id in relevant {
        let entry = store.entry(id);
        let name = entry.name.clone();
        let sparse = entry.is_sparse();
        let (rows, cols) = (entry.value.rows(), entry.value.cols());
        let coords: Vec<usize> = if sparse {
            (0..rows).filter(|&r| grads.is_touched(id, r)).flat_map(|r| r * cols..(r + 1) * cols).collect()
        } else {
            (0..entry.value.len()).collect()
        };
        if coords.is_empty() {
            continue;
        }
        let sign = if opts.corrupt.as_deref() == Some(name.as_str()) { -1.0 } else { 1.0 };
        let (mut max_err, mut max_grad) = (0.0f64, 0.0f64);
        for &k in &coords {
            let analytic = sign * grads.get(id)[k];
            let w = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = w + STEP;
            let up = batch_loss(model, store, examples, scale)?;
            store.value_mut(id).data_mut()[k] = w - STEP;
            let down = batch_loss(model, store, examples, scale)?;
            store.value_mut(id).data_mut()[k] = w;
            let numeric = (up - down) / (2.0 * STEP);
            max_err = max_err.max((analytic - numeric).abs());
            max_grad = max_grad.max(analytic.abs()).max(numeric.abs());
        }
        out.push(GroupCheck {
            task,
            group: name,
            coords: coords.len(),
            max_abs_err: max_err,
            max_grad,
            rel_err: max_err / max_grad.max(FLOOR),
        });
    }
    Ok(out)
}

/// Runs [`check_task`] for each task present in `examples`.
pub fn gradcheck(model: &Dupn, store: &mut ParameterStore, examples: &[Example], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for task in TaskKind::ALL {
        let batch: Vec<&Example> = examples.iter().filter(|e| e.task() == task).collect();
        report.groups.extend(check_task(model, store, &batch, opts)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Preparer, TaskCounts, WorldConfig};
    use crate::trainer::tests::tiny_model;

    fn setup(task: TaskKind, n: usize) -> (Dupn, ParameterStore, Vec<Example>) {
        let world = WorldConfig {
            max_len: 6,
            ..WorldConfig::small()
        };
        let counts = TaskCounts { ctr: n, l2r: n, ppp: n, fifp: n, spp: n };
        let g = generate(&world, counts, 21);
        let (mut store, model) = Dupn::init(&tiny_model(), 5).unwrap();
        randomize(&mut store, 8);
        let ex = Preparer::new(&model).prepare_all(g.train.of_task(task).records.iter()).unwrap();
        (model, store, ex)
    }

    #[test]
    fn linear_head_is_exact() {
        let (model, mut store, ex) = setup(TaskKind::Ppp, 2);
        let refs: Vec<&Example> = ex.iter().collect();
        let r = check_task(&model, &mut store, &refs, &GradcheckOptions::default()).unwrap();
        for g in r.iter().filter(|g| g.group.starts_with("ppp.")) {
            assert!(g.rel_err < 1e-8, "{g:?}");
        }
    }

    #[test]
    fn spp_head_passes() {
        let (model, mut store, ex) = setup(TaskKind::Spp, 2);
        let refs: Vec<&Example> = ex.iter().collect();
        let r = check_task(&model, &mut store, &refs, &GradcheckOptions::default()).unwrap();
        assert!(r.iter().any(|g| g.group == "spp.shop"));
        for g in &r {
            assert!(g.rel_err < THRESHOLD, "{g:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let (model, mut store, ex) = setup(TaskKind::Ctr, 2);
        let refs: Vec<&Example> = ex.iter().collect();
        let opts = GradcheckOptions {
            corrupt: Some("lstm.w_ec".into()),
        };
        let r = check_task(&model, &mut store, &refs, &opts).unwrap();
        let g = r.iter().find(|g| g.group == "lstm.w_ec").unwrap();
        assert!(g.rel_err > 1e-1, "{g:?}");
    }
}
