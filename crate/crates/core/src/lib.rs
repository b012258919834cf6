//! Weakly supervised referring expression grounding with an adaptive
//! reconstruction network.
//!
//! A query is split into subject, location and context embeddings by word
//! attention over a bidirectional LSTM, each matched against the
//! corresponding proposal features, and the three distributions are mixed
//! by query-dependent weights. Training never sees which proposal a query
//! refers to: the attended proposal features must instead reconstruct the
//! query.
//!
//! ```
//! use arn::geometry::{iou, BBox};
//!
//! let a = BBox::new(0.0, 0.0, 2.0, 2.0)?;
//! let b = BBox::new(1.0, 1.0, 3.0, 3.0)?;
//! assert!((iou(&a, &b)? - 1.0 / 7.0).abs() < 1e-15);
//! # Ok::<(), arn::Error>(())
//! ```

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod grounding;
pub mod model;
pub mod nn;
pub mod params;
pub mod proposal_encoder;
pub mod query_encoder;
pub mod reconstruction;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use model::{ArnModel, ModelConfig};
pub use params::ParamStore;
pub use query_encoder::{Modality, Vocabulary};
pub use reconstruction::{LossBreakdown, LossWeights};
pub use training::{Checkpoint, TrainConfig};

// Book chapters are compiled as doctests so their snippets stay runnable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/query_encoding.md")]
    mod query_encoding {}
    #[doc = include_str!("../../../book/src/grounding.md")]
    mod grounding {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
