//! Thread-local floating-point work counter.
//!
//! Counts fused multiply-add units: a real multiply-add is 1, a complex
//! multiply-add is 4, an FFT butterfly is 4. Pure additions and
//! permutations are not counted. The counter is always on; `add` is a
//! thread-local increment.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}

pub fn read() -> u64 {
    FLOPS.with(|c| c.get())
}

pub fn reset() {
    FLOPS.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the multiply-add count
/// it accumulated on this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
