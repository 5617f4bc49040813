use std::collections::VecDeque;

use rand::Rng;

use crate::heads::TaskKind;
use crate::numeric::RngState;

pub trait HasTask {
    fn task(&self) -> TaskKind;
}

/// A task-homogeneous batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub task: TaskKind,
    pub items: Vec<T>,
}

/// Iterator behind [`make_batches`].
pub struct Batcher<I: Iterator> {
    src: I,
    exhausted: bool,
    window: Vec<I::Item>,
    window_size: usize,
    pending: Vec<Vec<I::Item>>,
    ready: VecDeque<Batch<I::Item>>,
    batch_size: usize,
    rng: RngState,
}

/// Shuffles records inside a sliding window of `window` records and groups
/// them into single-task batches of `batch_size`; leftovers are emitted as
/// partial batches at the end, in task order.
pub fn make_batches<I>(src: I, batch_size: usize, window: usize, rng: RngState) -> Batcher<I::IntoIter>
where
    I: IntoIterator,
    I::Item: HasTask,
{
    assert!(batch_size >= 1, "batch_size must be >= 1");
    Batcher {
        src: src.into_iter(),
        exhausted: false,
        window: Vec::new(),
        window_size: window.max(1),
        pending: (0..TaskKind::ALL.len()).map(|_| Vec::new()).collect(),
        ready: VecDeque::new(),
        batch_size,
        rng,
    }
}

impl<I> Iterator for Batcher<I>
where
    I: Iterator,
    I::Item: HasTask,
{
    type Item = Batch<I::Item>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(b) = self.ready.pop_front() {
                return Some(b);
            }
            while !self.exhausted && self.window.len() < self.window_size {
                match self.src.next() {
                    Some(r) => self.window.push(r),
                    None => self.exhausted = true,
                }
            }
            if self.window.is_empty() {
                for (k, acc) in self.pending.iter_mut().enumerate() {
                    if !acc.is_empty() {
                        self.ready.push_back(Batch {
                            task: TaskKind::ALL[k],
                            items: std::mem::take(acc),
                        });
                    }
                }
                return self.ready.pop_front();
            }
            let j = self.rng.random_range(0..self.window.len());
            let rec = self.window.swap_remove(j);
            let task = rec.task();
            let acc = &mut self.pending[task.index()];
            acc.push(rec);
            if acc.len() == self.batch_size {
                self.ready.push_back(Batch {
                    task,
                    items: std::mem::take(acc),
                });
            }
        }
    }
}
