//! Expected value of information transfer (EVIT) for populations of monitored
//! structures.
//!
//! The crate covers the whole valuation chain:
//!
//! * [`population`] holds structure attributes and their `[0, 2]` encodings,
//! * [`surrogate`] generates seeded natural-frequency datasets per structure,
//! * [`transfer`] runs normal-condition alignment, kNN classification and
//!   scores the post-transfer prediction quality,
//! * [`similarity`] turns attribute encodings into weighted similarity scores
//!   and fits the weights,
//! * [`efficacy`] regresses Dirichlet concentrations on similarity with a small
//!   MLP,
//! * [`valuation`] converts predicted quality into expected utility, EVIT, and
//!   an optimal transfer strategy,
//! * [`pipeline`] wires the stages together behind a JSON config and writes
//!   CSV/JSON/SVG artifacts.

pub mod efficacy;
pub mod error;
pub mod pipeline;
pub mod population;
pub mod similarity;
pub mod surrogate;
pub mod transfer;
pub mod valuation;

mod plot;

pub use error::{Error, Result};
