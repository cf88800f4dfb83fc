//! Item-to-item retrieval with a three-output transformer encoder, precomputed
//! similarity lookup, and near real-time feed composition.

pub mod autodiff;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feed;
pub mod index;
pub mod io;
pub mod metrics;
pub mod mining;
pub mod store;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{Catalog, Event, EventType, Item, ItemId, Relation, Role};
