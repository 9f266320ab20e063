//! Deterministic voice, intent, retrieval, gaze and task-dispatch pipeline
//! for AI glasses.
//!
//! The crate is split along the stages of the pipeline:
//!
//! - [`audio`]: sliding-window segmentation of PCM audio with energy/ZCR
//!   voice activity detection.
//! - [`intent`]: pattern, language-model and context scores fused into one
//!   confidence per intent.
//! - [`memory`]: hashed-trigram embeddings with cosine top-k retrieval and
//!   JSONL persistence.
//! - [`netpath`]: connection-method scoring, adaptive streaming rate and a
//!   replayable simulated link.
//! - [`gaze`]: binocular gaze fusion, world transform and a fixed-rate
//!   stream onto the bus.
//! - [`bus`]: an in-repo topic broker with acknowledgements, durable logs
//!   and a TCP binding.
//! - [`scheduler`]: priority-decay task scheduling under resource limits
//!   with effect-recording executors.
//! - [`harness`]: scenario runner wiring everything end to end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod bus;
pub mod clock;
pub mod gaze;
pub mod harness;
pub mod intent;
pub mod memory;
pub mod netpath;
pub mod scheduler;
pub mod text;
