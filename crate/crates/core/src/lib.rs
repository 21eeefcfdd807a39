//! Test-time loss landscape adaptation on a miniature dual-encoder
//! classifier.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`ndcore`]: dense tensors and a reverse-mode tape,
//! * [`clipette`]: the frozen image/text encoders with learnable prompt tokens,
//! * [`sapt`]: sharpness-aware prompt tuning,
//! * [`stss`]: forward-only sharpness scoring, selection and voting over
//!   augmented test views,
//! * [`landscape`]: 2D loss surfaces along filter-normalized directions,
//! * [`datagen`]: synthetic source/target domains and a domain-distance proxy,
//! * [`harness`]: the experiment runner and the `tlla` command line.

pub mod clipette;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod instrument;
pub mod io;
pub mod landscape;
pub mod ndcore;
pub mod sapt;
pub mod seed;
pub mod stss;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/sapt.md")]
    mod sapt {}
    #[doc = include_str!("../../../book/src/stss.md")]
    mod stss {}
    #[doc = include_str!("../../../book/src/landscape.md")]
    mod landscape {}
    #[doc = include_str!("../../../book/src/datagen.md")]
    mod datagen {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
