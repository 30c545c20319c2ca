//! KV-cache compression with layer-tapered token eviction and
//! cosine-similarity codebooks.
//!
//! Deep layers concentrate attention on few tokens, so they keep only the
//! highest-scoring context tokens. Shallow layers keep most tokens, but
//! their keys and values are highly self-similar, so each token is stored
//! as a magnitude plus an index into a per-layer codebook of unit
//! directions. The per-layer budget tapers linearly from shallow to deep
//! layers while its mean stays at the requested ratio.
//!
//! The crate works on already-projected key/value/query tensors stored in
//! a little-endian dump format (see [`format`]).

pub mod allocator;
pub mod codebook;
pub mod config;
pub mod error;
pub mod eviction;
pub mod format;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod simulator;

pub use allocator::{BudgetOptions, BudgetPlan, EndpointRule};
pub use codebook::{build_codebook, compress_layer, CacheKind, Codebook, CompressedLayer, TokenRefs};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eviction::{evict_layer, unfold_gqa, GqaMode, RetentionSet};
pub use metrics::{CompressionReport, LayerRatios};
pub use model::{apply_rope, attention_weights, HeadCache, KvDump, LayerCache, ModelConfig, QueryWindow};
pub use pipeline::{compress, Archive};
