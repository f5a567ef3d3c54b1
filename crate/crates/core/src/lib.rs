//! Weak-supervision entity labeling for media search queries.
//!
//! The crate covers the whole labeling-to-serving path:
//!
//! - [`taxonomy`]: the closed entity universe and label validation.
//! - [`data`]: query ingestion, deterministic splits and entity rebalancing.
//! - [`prompting`]: prompt construction (baseline, confidence, chain of thought,
//!   in-context examples) and tolerant response parsing.
//! - [`llm`]: annotator backends (HTTP endpoint, deterministic mock) with
//!   retries, rate limiting and a content-addressed response cache.
//! - [`personas`]: persona repository, confidence matrices and ensemble aggregation.
//! - [`router`]: the persona-selection network trained through entity prediction.
//! - [`classifier`]: the distilled multi-label classifier and threshold tuning.
//! - [`baseline`]: gazetteer-based lexical matching.
//! - [`evaluation`]: weighted and unweighted precision / recall / F1, relative
//!   gains and matched operating points.
//! - [`pipeline`] and [`serve`]: end-to-end orchestration and line-protocol serving.

// `!(x > 0.0)` guards reject NaN on purpose; dense layers index several buffers per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annotation;
pub mod baseline;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod llm;
pub mod optim;
pub mod personas;
pub mod pipeline;
pub mod prompting;
pub mod router;
pub mod serve;
pub mod synth;
pub mod taxonomy;
pub mod text;

pub use annotation::{Annotation, AnnotationStore, Confidence};
pub use error::{Error, Result};
pub use taxonomy::{EntityDef, EntityId, EntityRegistry, Label};
