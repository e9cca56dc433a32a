//! Offline multi-teacher distillation of masked language models.
//!
//! The pipeline has four stages:
//!
//! 1. [`vocab`]: merge every teacher vocabulary into one student vocabulary and
//!    build a teacher-id to student-id table per teacher.
//! 2. [`corpus`] + [`teacher`]: tokenize and mask the transfer corpus with each
//!    teacher's own vocabulary, query the teacher once, and keep the top-k logits
//!    per masked position in binary shards.
//! 3. [`trainer`]: train a small student MLM on the shards with a mix of the
//!    gold-label loss and the soft teacher loss ([`loss`]).
//! 4. [`metrics`]: MLM accuracy, KL to the teacher, and relative deviation from
//!    teachers (RDT) over externally produced score tables.
//!
//! [`pipeline`] wires the stages to a declarative manifest and backs the
//! `mergedistill` binary.

pub mod corpus;
pub mod error;
pub mod exec;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod student;
pub mod synth;
pub mod teacher;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
