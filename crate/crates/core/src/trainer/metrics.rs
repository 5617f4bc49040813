use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::TaskKind;
use crate::model::{Dupn, Example, Target};
use crate::numeric::ParameterStore;

/// Rank-statistic AUC (Mann-Whitney U); tied scores get half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative examples".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled to
    // stay in integers.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mean_rank = (i + 1 + j + 1) as u128;
        let p = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += p * twice_mean_rank;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Quadratic all-pairs AUC; the reference for [`auc`].
pub fn auc_all_pairs(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Metric("AUC needs both positive and negative examples".into()));
    }
    Ok(wins / pairs as f64)
}

/// Fraction of argmax predictions equal to the label.
pub fn precision(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Metric("precision needs equal, nonzero lengths".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Per-task evaluation result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaskMetric {
    pub task: TaskKind,
    pub examples: usize,
    /// `"auc"` for binary tasks, `"precision"` for PPP.
    pub name: &'static str,
    pub value: f64,
}

pub type Metrics = BTreeMap<TaskKind, TaskMetric>;

pub fn metric_name(task: TaskKind) -> &'static str {
    if task == TaskKind::Ppp {
        "precision"
    } else {
        "auc"
    }
}

/// AUC per binary task and PPP precision, over every task present.
pub fn evaluate(model: &Dupn, store: &ParameterStore, examples: &[Example]) -> Result<Metrics> {
    let mut scores: BTreeMap<TaskKind, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    let mut ppp: (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for ex in examples {
        let pred = model.predict(store, ex)?;
        match &ex.target {
            Target::Ppp { class } => {
                ppp.0.push(pred.argmax());
                ppp.1.push(*class);
            }
            t => {
                let e = scores.entry(ex.task()).or_default();
                e.0.push(pred.score());
                e.1.push(t.binary_label().unwrap());
            }
        }
    }
    let mut out = Metrics::new();
    for (task, (s, l)) in scores {
        let value = auc(&s, &l).map_err(|e| Error::Metric(format!("{task}: {e}")))?;
        out.insert(task, TaskMetric { task, examples: s.len(), name: "auc", value });
    }
    if !ppp.0.is_empty() {
        out.insert(
            TaskKind::Ppp,
            TaskMetric {
                task: TaskKind::Ppp,
                examples: ppp.0.len(),
                name: "precision",
                value: precision(&ppp.0, &ppp.1)?,
            },
        );
    }
    Ok(out)
}
