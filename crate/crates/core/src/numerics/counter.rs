//! Per-thread mul-add accounting for matrix products.
//!
//! Every matmul adds `2·m·n·k` to the bucket of its [`Component`]. The
//! counter is thread-local; work done on other threads has to be merged
//! explicitly with [`OpCounter::merge`].

use std::cell::Cell;
use std::ops::Sub;

use serde::{Deserialize, Serialize};

/// What a matrix product is computing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Projection,
    AttentionScore,
    AttentionValue,
    OutputProjection,
    FeedForward,
    /// Tied output head; outside the model-core scope.
    LmHead,
    Adapter,
    Backward,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Projection,
        Component::AttentionScore,
        Component::AttentionValue,
        Component::OutputProjection,
        Component::FeedForward,
        Component::LmHead,
        Component::Adapter,
        Component::Backward,
    ];

    /// Components counted by the analytical per-layer FLOPs model.
    pub const CORE: [Component; 5] = [
        Component::Projection,
        Component::AttentionScore,
        Component::AttentionValue,
        Component::OutputProjection,
        Component::FeedForward,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Projection => "projection",
            Component::AttentionScore => "attention-score",
            Component::AttentionValue => "attention-value",
            Component::OutputProjection => "output-projection",
            Component::FeedForward => "feed-forward",
            Component::LmHead => "lm-head",
            Component::Adapter => "adapter",
            Component::Backward => "backward",
        }
    }
}

const N: usize = Component::ALL.len();

/// Snapshot of cumulative mul-adds per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    counts: [u64; N],
}

impl OpCounter {
    pub fn get(&self, c: Component) -> u64 {
        self.counts[c.index()]
    }

    pub fn add(&mut self, c: Component, n: u64) {
        self.counts[c.index()] += n;
    }

    /// Projection + attention + feed-forward: the scope of the analytical model.
    pub fn core_total(&self) -> u64 {
        Component::CORE.iter().map(|&c| self.get(c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &OpCounter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

impl Sub for OpCounter {
    type Output = OpCounter;

    fn sub(self, rhs: OpCounter) -> OpCounter {
        let mut out = self;
        for (a, b) in out.counts.iter_mut().zip(rhs.counts) {
            *a -= b;
        }
        out
    }
}

thread_local! {
    static COUNTS: Cell<[u64; N]> = const { Cell::new([0; N]) };
}

pub(crate) fn record(c: Component, n: u64) {
    COUNTS.with(|cell| {
        let mut v = cell.get();
        v[c.index()] += n;
        cell.set(v);
    });
}

/// Current thread's cumulative counts.
pub fn snapshot() -> OpCounter {
    OpCounter { counts: COUNTS.with(Cell::get) }
}

pub fn reset() {
    COUNTS.with(|cell| cell.set([0; N]));
}

/// Runs `f` and returns its result with the mul-adds it performed on this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounter) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}
