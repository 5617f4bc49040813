use super::params::ParameterStore;
use crate::error::{Error, Result};

/// AdaGrad hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaGrad {
    pub lr: f64,
    pub l2: f64,
    pub eps: f64,
}

impl AdaGrad {
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64, l2: f64) -> Self {
        AdaGrad {
            lr,
            l2,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn step(&self, store: &mut ParameterStore) -> Result<()> {
        adagrad_step(store, self.lr, self.l2, self.eps)
    }
}

#[inline]
fn update(w: &mut [f64], g: &mut [f64], acc: &mut [f64], lr: f64, l2: f64, eps: f64) {
    for ((w, g), a) in w.iter_mut().zip(g.iter_mut()).zip(acc.iter_mut()) {
        let gp = *g + l2 * *w;
        *a += gp * gp;
        *w -= lr * gp / (a.sqrt() + eps);
        *g = 0.0;
    }
}

/// One AdaGrad update over every unfrozen parameter, then zeroes gradients.
///
/// With `g' = g + l2 * w`: `accum += g'^2`, `w -= lr * g' / (sqrt(accum) + eps)`.
/// Embedding tables only update the rows that received a gradient this step,
/// L2 included. A non-finite gradient aborts before anything is modified.
pub fn adagrad_step(store: &mut ParameterStore, lr: f64, l2: f64, eps: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) || !(l2 >= 0.0 && l2.is_finite()) || !(eps > 0.0) {
        return Err(Error::config(format!("invalid AdaGrad settings lr={lr} l2={l2} eps={eps}")));
    }
    for e in store.entries() {
        if let Some(i) = e.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {} at entry {i}", e.name)));
        }
    }
    for e in store.entries_mut() {
        if e.frozen {
            e.grad.fill(0.0);
            continue;
        }
        if e.is_sparse() {
            let dim = e.value.cols();
            let rows: Vec<usize> = e.touched_rows().collect();
            for r in rows {
                let (lo, hi) = (r * dim, (r + 1) * dim);
                update(
                    &mut e.value.data_mut()[lo..hi],
                    &mut e.grad.data_mut()[lo..hi],
                    &mut e.accum.data_mut()[lo..hi],
                    lr,
                    l2,
                    eps,
                );
            }
        } else {
            update(
                e.value.data_mut(),
                e.grad.data_mut(),
                e.accum.data_mut(),
                lr,
                l2,
                eps,
            );
        }
    }
    // Clears the touched-row bookkeeping too.
    store.zero_grads();
    Ok(())
}
