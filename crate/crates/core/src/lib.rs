//! Review-driven retrieval-augmented recommendation.

pub mod client;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod extraction;
pub mod http;
pub mod pipeline;
pub mod prefrag;
pub mod ranker;
pub mod text;
