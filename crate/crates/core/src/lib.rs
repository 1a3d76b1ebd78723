//! Collision-scenario generation, filtering and planner distillation for
//! closed-loop driving evaluation.
//!
//! The pipeline runs template prompts through [`structured`] scene specs and
//! [`synth`] rollouts, keeps the plausible colliding ones with [`filter`],
//! scores a clustered trajectory [`vocab`]ulary with the [`sim`]ulator and
//! trains a score head on those scores in [`distill`]. [`realism`] compares
//! generated corpora with reference ones. [`pipeline`] holds the file-level
//! stages behind the `collide` command-line tool.

pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod filter;
pub mod geom;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod realism;
pub mod render;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod structured;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
