//! Surrogate-model pipeline: turn STL repositories into multi-view synthetic
//! image sets, train a from-scratch CNN on them, and retrieve models from
//! query images by top-k classification.

pub mod dataset;
pub mod experiment;
pub mod geom;
pub mod image;
pub mod mesh;
pub mod nn;
pub mod render;
pub mod retrieval;
pub mod shapes;
