//! Reuse-aware load balancing for edge computing.
//!
//! Offloaded tasks are hashed with a locality-sensitive hash; the space of
//! hash values is sliced among edge servers so that similar inputs land on
//! the server that already holds reusable results. Slices are resized from
//! observed load, and cached results follow the hash ranges they belong to.

pub mod edge;
pub mod error;
pub mod latency;
pub mod lsh;
pub mod proxy;
pub mod ring;
pub mod slices;
pub mod stats;
pub mod wire;

pub use edge::{EdgeConfig, EdgeServer, ProducedBy, ResultValue, ReuseCacheEntry, ServiceDef};
pub use error::{Error, Result};
pub use lsh::{cosine_similarity, FeatureVector, Hasher, LshConfig, LshSignature};
pub use proxy::{DedupConfig, Deduplicator, RouteDecision, Strategy};
pub use slices::{LoadSample, MigrationDirective, ServerId, Slice, SliceConfig, SliceTable};
pub use stats::{PiggybackFields, StatsCollector, StatsReport};
pub use wire::{RegistrationMessage, TaskRequest, TaskResponse};
