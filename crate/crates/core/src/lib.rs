//! Circuit instance embeddings learned from layout placements.
//!
//! The pipeline parses hierarchical netlists ([`netlist`]), builds a typed
//! instance graph ([`graph`]), derives device features ([`features`]) and
//! subword text embeddings ([`textembed`]), and trains a graph + attention
//! embedding network ([`model`], [`train`]) against relative layout
//! distances. The numeric substrate is a small reverse-mode engine
//! ([`autodiff`]).

pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod features;
pub mod graph;
pub mod model;
pub mod netlist;
pub mod textembed;
pub mod train;

pub use error::{Error, Result};
