//! Multimodal traffic-accident risk inference over a city grid.

pub mod attribution;
pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod geogrid;
pub mod heatmap;
pub mod ingest;
pub mod kmeans;
pub mod labeling;
pub mod models;
pub mod pipeline;
pub mod seed;
pub mod st_features;
pub mod synthcity;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
