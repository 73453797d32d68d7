//! Per-thread accounting of tensor storage.
//!
//! Every tensor buffer reports its size here on creation and on drop. The
//! counters are thread-local so concurrent tests and evaluation threads do
//! not see each other's traffic. Figures are "allocated tensor bytes", not
//! process RSS.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the allocation counters for the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocStats {
    /// Bytes currently held by live tensor buffers.
    pub live: usize,
    /// High-water mark of `live` since the last [`reset_peak`].
    pub peak: usize,
    /// Largest single buffer (in bytes) created since the last [`reset_peak`].
    pub largest: usize,
    /// Number of buffers created since the last [`reset_peak`].
    pub allocations: u64,
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|p| p.set(p.get().max(now)));
    });
    LARGEST.with(|l| l.set(l.get().max(bytes)));
    COUNT.with(|c| c.set(c.get() + 1));
}

pub(crate) fn on_free(bytes: usize) {
    // A buffer freed on a different thread than it was created on can push
    // this below zero; saturate rather than wrap.
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Resets the peak to the current live figure and clears the largest-buffer
/// and allocation-count trackers.
pub fn reset_peak() {
    let live = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(live));
    LARGEST.with(|l| l.set(0));
    COUNT.with(|c| c.set(0));
}

pub fn stats() -> AllocStats {
    AllocStats {
        live: LIVE.with(Cell::get),
        peak: PEAK.with(Cell::get),
        largest: LARGEST.with(Cell::get),
        allocations: COUNT.with(Cell::get),
    }
}

/// Runs `f` and reports the allocation activity it caused, measured from
/// the live baseline at entry.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    reset_peak();
    let base = LIVE.with(Cell::get);
    let out = f();
    let s = stats();
    (
        out,
        AllocStats {
            live: s.live.saturating_sub(base),
            peak: s.peak.saturating_sub(base),
            largest: s.largest,
            allocations: s.allocations,
        },
    )
}
