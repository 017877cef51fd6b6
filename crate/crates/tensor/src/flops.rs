//! Thread-local multiply-add counter fed by the matrix primitives.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn count() -> u64 {
    MACS.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Multiply-adds recorded while running `f`.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = count();
    let out = f();
    (out, count() - before)
}
