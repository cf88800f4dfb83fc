//! Per-thread operation counters.
//!
//! Counters are thread-local so a caller can measure exactly the work done
//! on its own thread, even while other threads run encoders or searches.

use std::cell::Cell;

thread_local! {
    static ENCODER_CALLS: Cell<u64> = const { Cell::new(0) };
    static INDEX_SEARCHES: Cell<u64> = const { Cell::new(0) };
    static STORE_LOOKUPS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub encoder_calls: u64,
    pub index_searches: u64,
    pub store_lookups: u64,
}

impl Counters {
    /// Counts accumulated since `earlier`.
    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            encoder_calls: self.encoder_calls - earlier.encoder_calls,
            index_searches: self.index_searches - earlier.index_searches,
            store_lookups: self.store_lookups - earlier.store_lookups,
        }
    }
}

pub fn snapshot() -> Counters {
    Counters {
        encoder_calls: ENCODER_CALLS.with(Cell::get),
        index_searches: INDEX_SEARCHES.with(Cell::get),
        store_lookups: STORE_LOOKUPS.with(Cell::get),
    }
}

pub(crate) fn record_encoder_call() {
    ENCODER_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_index_search() {
    INDEX_SEARCHES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_store_lookup() {
    STORE_LOOKUPS.with(|c| c.set(c.get() + 1));
}
