use std::collections::HashMap;

use rand::Rng;

use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter; resolved once by name, used in hot loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Decides initialisation and whether updates are row-sparse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix `[fan_out, fan_in]`, Glorot-uniform.
    Dense,
    /// Zero-initialised.
    Bias,
    /// Lookup table `[rows, dim]`; only rows referenced in a batch are updated.
    Embedding,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub accum: Tensor,
    pub frozen: bool,
    touched: Vec<bool>,
}

impl ParamEntry {
    pub fn is_sparse(&self) -> bool {
        self.kind == ParamKind::Embedding
    }

    /// Rows with a pending gradient (embedding tables only).
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }
}

/// Named trainable tensors with their gradient and AdaGrad accumulator.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::config(format!("parameter {name} has empty shape {shape:?}")));
        }
        if kind == ParamKind::Dense && shape.len() != 2 {
            return Err(Error::config(format!("dense parameter {name} must be a matrix")));
        }
        let id = self.entries.len();
        let rows = if kind == ParamKind::Embedding { shape[0] } else { 0 };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            accum: Tensor::zeros(shape),
            frozen: false,
            touched: vec![false; rows],
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Initialises every value: Glorot-uniform for dense weights, zeros for
    /// biases, `U[-0.01, 0.01]` for embedding rows.
    pub fn init(&mut self, rng: &mut RngState) {
        for e in &mut self.entries {
            match e.kind {
                ParamKind::Bias => e.value.fill(0.0),
                ParamKind::Dense => {
                    let (out, inp) = (e.value.shape()[0], e.value.shape()[1]);
                    let s = (6.0 / (out + inp) as f64).sqrt();
                    e.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-s..=s));
                }
                ParamKind::Embedding => {
                    e.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.01..=0.01));
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::config(format!("unregistered parameter {name}")))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn accum(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].accum
    }

    pub(crate) fn accum_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].accum
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
            e.touched.iter_mut().for_each(|t| *t = false);
        }
    }

    /// Adds a merged gradient buffer into the stored gradients.
    pub fn accumulate(&mut self, buf: &GradBuffer) {
        for (e, slot) in self.entries.iter_mut().zip(&buf.slots) {
            match &slot.touched {
                Some(rows) => {
                    let dim = e.value.cols();
                    for (r, _) in rows.iter().enumerate().filter(|(_, &t)| t) {
                        e.touched[r] = true;
                        let g = &mut e.grad.data_mut()[r * dim..(r + 1) * dim];
                        for (a, b) in g.iter_mut().zip(&slot.data[r * dim..(r + 1) * dim]) {
                            *a += b;
                        }
                    }
                }
                None => {
                    for (a, b) in e.grad.data_mut().iter_mut().zip(&slot.data) {
                        *a += b;
                    }
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Shape-and-name signature, used to check two stores are compatible.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.shape().to_vec())).collect()
    }
}

#[derive(Clone, Debug)]
struct GradSlot {
    data: Vec<f64>,
    dim: usize,
    touched: Option<Vec<bool>>,
}

/// Gradient scratch space laid out like a [`ParameterStore`]. Each worker
/// fills its own buffer; buffers are merged before the optimiser step.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    slots: Vec<GradSlot>,
}

impl GradBuffer {
    pub fn for_store(store: &ParameterStore) -> Self {
        let slots = store
            .entries
            .iter()
            .map(|e| GradSlot {
                data: vec![0.0; e.value.len()],
                dim: e.value.cols(),
                touched: e.is_sparse().then(|| vec![false; e.value.rows()]),
            })
            .collect();
        GradBuffer { slots }
    }

    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0].data
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].data
    }

    /// Mutable gradient row of an embedding table; marks the row touched.
    pub fn row(&mut self, id: ParamId, r: usize) -> &mut [f64] {
        let s = &mut self.slots[id.0];
        if let Some(t) = s.touched.as_mut() {
            t[r] = true;
        }
        &mut s.data[r * s.dim..(r + 1) * s.dim]
    }

    pub fn is_touched(&self, id: ParamId, r: usize) -> bool {
        self.slots[id.0].touched.as_ref().is_some_and(|t| t[r])
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            match s.touched.as_mut() {
                Some(t) => {
                    for (r, flag) in t.iter_mut().enumerate() {
                        if *flag {
                            s.data[r * s.dim..(r + 1) * s.dim].fill(0.0);
                            *flag = false;
                        }
                    }
                }
                None => s.data.fill(0.0),
            }
        }
    }

    /// `self += other`, slot by slot in a fixed order.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.touched.as_mut(), b.touched.as_ref()) {
                (Some(ta), Some(tb)) => {
                    for (r, _) in tb.iter().enumerate().filter(|(_, &t)| t) {
                        ta[r] = true;
                        let (lo, hi) = (r * a.dim, (r + 1) * a.dim);
                        for (x, y) in a.data[lo..hi].iter_mut().zip(&b.data[lo..hi]) {
                            *x += y;
                        }
                    }
                }
                _ => {
                    for (x, y) in a.data.iter_mut().zip(&b.data) {
                        *x += y;
                    }
                }
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.slots.iter().map(|s| s.data.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.add("w", &[2, 3], ParamKind::Dense).unwrap();
        assert!(s.add("w", &[2, 3], ParamKind::Dense).is_err());
        assert!(s.add("v", &[3], ParamKind::Dense).is_err());
        assert!(s.require("missing").is_err());
    }

    #[test]
    fn init_respects_kinds() {
        let mut s = ParameterStore::new();
        let w = s.add("w", &[4, 2], ParamKind::Dense).unwrap();
        let b = s.add("b", &[4], ParamKind::Bias).unwrap();
        let e = s.add("e", &[10, 3], ParamKind::Embedding).unwrap();
        s.init(&mut RngState::new(1));
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(s.value(w).data().iter().all(|v| v.abs() <= bound));
        assert!(s.value(w).data().iter().any(|v| *v != 0.0));
        assert!(s.value(b).data().iter().all(|v| *v == 0.0));
        assert!(s.value(e).data().iter().all(|v| v.abs() <= 0.01));
    }

    #[test]
    fn sparse_rows_merge_and_clear() {
        let mut s = ParameterStore::new();
        let e = s.add("e", &[5, 2], ParamKind::Embedding).unwrap();
        let mut a = GradBuffer::for_store(&s);
        let mut b = GradBuffer::for_store(&s);
        a.row(e, 1).copy_from_slice(&[1.0, 2.0]);
        b.row(e, 3).copy_from_slice(&[3.0, 4.0]);
        a.merge(&b);
        assert!(a.is_touched(e, 1) && a.is_touched(e, 3) && !a.is_touched(e, 0));
        s.accumulate(&a);
        assert_eq!(s.entry(e).touched_rows().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(s.grad(e).row(3), &[3.0, 4.0]);
        a.clear();
        assert_eq!(a.norm_sq(), 0.0);
    }
}
