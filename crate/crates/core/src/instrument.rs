//! Per-thread call counters for the encoders and the backward pass.
//!
//! Counters are thread-local so concurrently running tests do not observe
//! each other. Work fanned out to a thread pool is not counted on the
//! calling thread.

use std::cell::Cell;

thread_local! {
    static IMAGE_ENCODES: Cell<u64> = const { Cell::new(0) };
    static TEXT_ENCODES: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub image_encodes: u64,
    pub text_encodes: u64,
    pub backward_passes: u64,
}

impl std::ops::Sub for Counts {
    type Output = Counts;

    fn sub(self, rhs: Counts) -> Counts {
        Counts {
            image_encodes: self.image_encodes - rhs.image_encodes,
            text_encodes: self.text_encodes - rhs.text_encodes,
            backward_passes: self.backward_passes - rhs.backward_passes,
        }
    }
}

pub fn snapshot() -> Counts {
    Counts {
        image_encodes: IMAGE_ENCODES.with(Cell::get),
        text_encodes: TEXT_ENCODES.with(Cell::get),
        backward_passes: BACKWARD_PASSES.with(Cell::get),
    }
}

pub fn reset() {
    IMAGE_ENCODES.with(|c| c.set(0));
    TEXT_ENCODES.with(|c| c.set(0));
    BACKWARD_PASSES.with(|c| c.set(0));
}

pub(crate) fn image_encode() {
    IMAGE_ENCODES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn text_encode() {
    TEXT_ENCODES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn backward_pass() {
    BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
}
