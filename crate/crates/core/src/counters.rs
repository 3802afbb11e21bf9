//! Per-thread work counters read by the timing harness.
//!
//! Training and adaptation are single-threaded, so thread-local cells give
//! each concurrent run (e.g. each test) its own counters.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

thread_local! {
    static BACKWARD: Cell<u64> = const { Cell::new(0) };
    static UPDATES: Cell<u64> = const { Cell::new(0) };
    static FORWARDS: Cell<u64> = const { Cell::new(0) };
    static FITNESS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    /// Reverse sweeps over a gradient tape.
    pub backward_passes: u64,
    /// Parameter updates applied by an optimizer step.
    pub gradient_updates: u64,
    /// Single-signal forward passes through an extractor.
    pub forward_evaluations: u64,
    /// Objective evaluations requested by a derivative-free search.
    pub fitness_evaluations: u64,
}

impl CounterSnapshot {
    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            backward_passes: self.backward_passes - earlier.backward_passes,
            gradient_updates: self.gradient_updates - earlier.gradient_updates,
            forward_evaluations: self.forward_evaluations - earlier.forward_evaluations,
            fitness_evaluations: self.fitness_evaluations - earlier.fitness_evaluations,
        }
    }
}

fn bump(c: &'static std::thread::LocalKey<Cell<u64>>, n: u64) {
    c.with(|v| v.set(v.get() + n));
}

pub(crate) fn record_backward() {
    bump(&BACKWARD, 1);
}

pub(crate) fn record_update() {
    bump(&UPDATES, 1);
}

pub(crate) fn record_forward() {
    bump(&FORWARDS, 1);
}

pub(crate) fn record_fitness() {
    bump(&FITNESS, 1);
}

pub fn reset() {
    for c in [&BACKWARD, &UPDATES, &FORWARDS, &FITNESS] {
        c.with(|v| v.set(0));
    }
}

pub fn snapshot() -> CounterSnapshot {
    CounterSnapshot {
        backward_passes: BACKWARD.with(Cell::get),
        gradient_updates: UPDATES.with(Cell::get),
        forward_evaluations: FORWARDS.with(Cell::get),
        fitness_evaluations: FITNESS.with(Cell::get),
    }
}
