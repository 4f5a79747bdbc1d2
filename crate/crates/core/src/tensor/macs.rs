//! Multiply-accumulate instrumentation.
//!
//! Kernels report the multiply-accumulates they execute through [`record`].
//! Counting is off unless a caller is inside [`count_macs`].

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns its result along with the MACs executed on this thread.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = COUNTER.with(|c| c.replace(outer)).unwrap_or(0);
    if let Some(prev) = outer {
        COUNTER.with(|c| c.set(Some(prev + counted)));
    }
    (out, counted)
}

pub(crate) fn record(n: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}
