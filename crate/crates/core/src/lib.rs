//! FindRec core: a self-contained training and evaluation engine for a
//! multimodal sequential recommender.
//!
//! The pipeline runs three input streams (item IDs, text features, image
//! features) through selective state-space layers, aligns the modality
//! summaries with an RBF/Stein coordination loss, refines them with
//! multi-head cross-attention plus expert routing, and scores the catalog
//! against the fused representation. Everything is 64-bit, seeded, and
//! single-threaded for bit-reproducible runs.

pub mod checkpoint;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod encoders;
pub mod fusion;
pub mod iicm;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
