//! Preference-to-feature retrieval.
//!
//! Queries (a user's Like or Dislike phrases) and answers (an item's Pros or
//! Cons) are embedded by a frozen [`Embedder`](crate::client::Embedder) and
//! passed through one shared trainable linear projection. The projection is
//! trained with InfoNCE over cosine similarity on sliding-window samples and
//! then used to index item features and retrieve the top-K matches for a
//! user.

pub mod adapter;
pub mod contrastive;
pub mod embed;
pub mod index;
pub mod loss;
pub mod train;
pub mod vector;

use thiserror::Error;

use crate::client::ClientError;

pub use adapter::ProjectionAdapter;
pub use contrastive::{build_contrastive_set, Branch, ContrastiveParams, ContrastiveSample, FeatureStore};
pub use embed::MockEmbedder;
pub use index::{encode_user, retrieve_topk, FeatureIndex, Retrieved};
pub use loss::{infonce_grad, infonce_loss, ContrastiveGroup};
pub use train::{train_adapter, TrainConfig, TrainOutcome};
pub use vector::cosine;

#[derive(Debug, Error)]
pub enum PrefragError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("training aborted at epoch {epoch}, step {step}: non-finite loss {loss}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
}
