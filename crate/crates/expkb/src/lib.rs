//! Experience knowledge base for LLM agents.
//!
//! The crate stores problem-solving experiences (problem pattern, goal,
//! solution steps, context, quality), retrieves them through a hybrid
//! lexical/semantic engine at two granularities (whole workflows for
//! planning, individual steps for execution-time refinement), runs a
//! two-round reason/retrieve/refine pipeline around a pluggable reasoner and
//! executor, builds new entries from raw execution logs, and evolves the
//! base over time (usage-decayed utility pruning, merging, quality updates).
//!
//! Modules, bottom up:
//!
//! * [`store`]: the experience schema and the single-writer in-memory base
//!   with immutable snapshots.
//! * [`records`]: JSON Lines persistence with a canonical, byte-stable
//!   encoding.
//! * [`text`]: TF-IDF lexical channel.
//! * [`semantic`]: dense embedding channel behind a provider contract, with
//!   a deterministic offline stub.
//! * [`retrieval`]: hybrid fusion, coarse/fine/adaptive scoring, and the
//!   student (workflow) and teacher (step) retrieval entry points.
//! * [`evolution`]: utility decay, pruning, merging, quality updates.
//! * [`pipeline`]: query parsing through guidance integration across two
//!   execution rounds.
//! * [`builder`]: raw execution logs to validated knowledge-base entries.

pub mod builder;
pub mod evolution;
pub mod pipeline;
pub mod records;
pub mod retrieval;
pub mod semantic;
pub mod store;
pub mod text;

pub use store::{Experience, ExperienceId, KnowledgeBase, Snapshot};
