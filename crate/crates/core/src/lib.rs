//! Replaced-token-detection pre-training lab.

pub mod data;
pub mod discriminator;
pub mod emb_gen;
pub mod encoder;
pub mod error;
pub mod exit_controller;
pub mod generator;
pub mod masking;
pub mod numerics;
pub mod trainer;
