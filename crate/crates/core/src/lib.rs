//! Skeleton-based narrative story generation.
//!
//! A skeleton extractor compresses each gold sentence into its key phrases;
//! an input-to-skeleton component predicts the next skeleton from the story
//! so far; a skeleton-to-sentence component expands it into a full sentence.
//! The extractor is refined by policy gradient using the two generative
//! losses as its reward.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod fixtures;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vocab;
