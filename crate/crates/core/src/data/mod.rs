//! Dataset records, the synthetic behavior-log generator, file I/O and
//! batching.

mod batch;
mod io;
mod synth;

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::BehaviorIds;
use crate::error::{Error, Result};
use crate::heads::{check_price_label, TaskKind};
use crate::model::{Dupn, Example, Target};
use crate::record::{BehaviorRecord, ItemFeatures, UserProfile};

pub use batch::{make_batches, Batch, Batcher, HasTask};
pub use io::{read_records, read_truth, write_records, write_truth, RecordReader};
pub use synth::{generate, write_dataset, Dataset, Generated, SyntheticWorld, TaskCounts, WorldConfig};

/// Task-specific part of a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    /// Candidate item (CTR).
    Item { item: ItemFeatures },
    /// Ranking feature vector (L2R).
    Features { features: Vec<f64> },
    /// Fashion icon to follow (FIFP).
    Icon { icon: String },
    /// Shop (SPP).
    Shop { shop: String },
    /// No payload (PPP).
    Empty {},
}

/// One task-tagged instance. Records of the same user share the sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub user: String,
    #[serde(default)]
    pub profile: UserProfile,
    pub seq: Arc<Vec<BehaviorRecord>>,
    #[serde(default)]
    pub query: Vec<String>,
    pub task: TaskKind,
    pub payload: Payload,
    pub label: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl DatasetRecord {
    /// Checks that the payload and label fit the task.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(msg));
        let binary = |l: f64| l == 0.0 || l == 1.0;
        match (self.task, &self.payload) {
            (TaskKind::Ctr, Payload::Item { .. }) if binary(self.label) => {}
            (TaskKind::Fifp, Payload::Icon { .. }) if binary(self.label) => {}
            (TaskKind::Spp, Payload::Shop { .. }) if binary(self.label) => {}
            (TaskKind::L2r, Payload::Features { .. }) if self.label == 1.0 || self.label == -1.0 => {}
            (TaskKind::Ppp, Payload::Empty {}) => {
                if self.label.fract() != 0.0 || self.label < 1.0 {
                    return bad(format!("price label {} is not a band", self.label));
                }
            }
            (t, p) => return bad(format!("{t} record with payload {p:?} and label {}", self.label)),
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return bad(format!("sample weight {} must be positive", self.weight));
        }
        Ok(())
    }
}

impl HasTask for DatasetRecord {
    fn task(&self) -> TaskKind {
        self.task
    }
}

impl HasTask for Example {
    fn task(&self) -> TaskKind {
        Example::task(self)
    }
}

/// Converts records into hashed examples, sharing one prepared sequence per
/// distinct (user, sequence content).
pub struct Preparer<'a> {
    model: &'a Dupn,
    seqs: HashMap<(String, u64), Arc<[BehaviorIds]>>,
}

impl<'a> Preparer<'a> {
    pub fn new(model: &'a Dupn) -> Self {
        Preparer {
            model,
            seqs: HashMap::new(),
        }
    }

    pub fn prepare(&mut self, rec: &DatasetRecord) -> Result<Example> {
        rec.validate()?;
        let model = self.model;
        let emb = &model.embedder;
        let key = (rec.user.clone(), content_hash(&rec.seq));
        let seq = self
            .seqs
            .entry(key)
            .or_insert_with(|| {
                let (s, _) = model.truncate(&rec.seq);
                s.iter().map(|b| emb.prepare_behavior(b)).collect()
            })
            .clone();
        let target = match &rec.payload {
            Payload::Item { item } => Target::Ctr {
                item: emb.prepare_item(item),
                label: rec.label,
            },
            Payload::Features { features } => {
                let m = model.heads.config().m();
                if features.len() != m {
                    return Err(Error::Data(format!("{} ranking features, expected {m}", features.len())));
                }
                Target::L2r {
                    features: features.clone(),
                    label: rec.label,
                    weight: rec.weight,
                }
            }
            Payload::Empty {} => {
                let band = rec.label as usize;
                check_price_label(band, model.heads.config().price_classes)?;
                Target::Ppp { class: band - 1 }
            }
            Payload::Icon { icon } => Target::Fifp {
                icon: model.heads.icon_row(icon),
                label: rec.label,
            },
            Payload::Shop { shop } => Target::Spp {
                shop: model.heads.shop_row(shop),
                label: rec.label,
            },
        };
        Ok(Example {
            seq,
            query: emb.prepare_query(&rec.query),
            profile: emb.prepare_profile(&rec.profile),
            target,
        })
    }

    pub fn prepare_all<'r>(&mut self, recs: impl IntoIterator<Item = &'r DatasetRecord>) -> Result<Vec<Example>> {
        recs.into_iter().map(|r| self.prepare(r)).collect()
    }
}

/// Stable-within-process hash of a behavior sequence.
pub fn content_hash(seq: &[BehaviorRecord]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    seq.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{BehaviorType, Scenario, TimeBucket};

    pub(crate) fn item(i: u32) -> ItemFeatures {
        ItemFeatures {
            item: format!("i{i}"),
            shop: "s1".into(),
            brand: "b1".into(),
            cat: "c1".into(),
            tags: vec![],
        }
    }

    fn rec(task: TaskKind, payload: Payload, label: f64) -> DatasetRecord {
        let tb = TimeBucket::from_index(3).unwrap();
        DatasetRecord {
            user: "u1".into(),
            profile: UserProfile::default(),
            seq: Arc::new(vec![BehaviorRecord::new(&item(1), BehaviorType::Click, Scenario::Search, tb)]),
            query: vec![],
            task,
            payload,
            label,
            weight: 1.0,
        }
    }

    #[test]
    fn payload_must_match_task() {
        assert!(rec(TaskKind::Ctr, Payload::Item { item: item(2) }, 1.0).validate().is_ok());
        assert!(rec(TaskKind::Ctr, Payload::Empty {}, 1.0).validate().is_err());
        assert!(rec(TaskKind::Ctr, Payload::Item { item: item(2) }, 0.5).validate().is_err());
        assert!(rec(TaskKind::L2r, Payload::Features { features: vec![0.0; 8] }, 0.0).validate().is_err());
        assert!(rec(TaskKind::Ppp, Payload::Empty {}, 3.0).validate().is_ok());
        assert!(rec(TaskKind::Ppp, Payload::Empty {}, 2.5).validate().is_err());
    }

    #[test]
    fn preparer_shares_sequences() {
        let (_, model) = Dupn::init(&Default::default(), 3).unwrap();
        let mut p = Preparer::new(&model);
        let a = p.prepare(&rec(TaskKind::Ctr, Payload::Item { item: item(2) }, 1.0)).unwrap();
        let b = p.prepare(&rec(TaskKind::Ppp, Payload::Empty {}, 7.0)).unwrap();
        assert!(Arc::ptr_eq(&a.seq, &b.seq));
        assert_eq!(b.target, Target::Ppp { class: 6 });
        assert!(p.prepare(&rec(TaskKind::Ppp, Payload::Empty {}, 8.0)).is_err());
    }
}
