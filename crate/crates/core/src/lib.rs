//! Variational autoencoder over context-free grammar derivations.

pub mod bo;
pub mod cli;
pub mod grammar;
pub mod latent;
pub mod nn;
pub mod sampler;
pub mod tasks;
pub mod vae;

pub use grammar::{Grammar, ParseTree, RuleSequence};
