//! Locate-then-edit model editing on a from-scratch toy transformer.

pub mod linalg;
pub mod checkpoint;
pub mod model;
pub mod corpus;
pub mod edit;
pub mod eval;
pub mod analysis;
