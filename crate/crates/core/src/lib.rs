//! Image-aware click-through-rate modeling trained on an advanced model server.
//!
//! Workers hold the ranking network and the training samples; servers hold
//! the images, the sharded ID embeddings and a replica of a shared image
//! embedding model that they train jointly. Workers exchange compact image
//! embeddings and their gradients with servers instead of raw image features.

pub mod ams;
pub mod cli;
pub mod config;
pub mod data;
pub mod deployment;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
