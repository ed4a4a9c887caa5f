//! Concept algebra over score-based generative models.
//!
//! Prompts are bound to distributions over categorical concepts, scores come
//! from analytic Gaussian-emission worlds (or a remote denoiser), concept
//! subspaces are estimated from score differences, and edits are applied
//! inside a DDPM sampling loop.

pub mod concept;
pub mod config;
pub mod digest;
pub mod edit;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod subspace;
pub mod world;

pub use concept::{ConceptDistribution, ConceptSpace, PromptTable, EMPTY_PROMPT};
pub use error::{Error, OracleError, Result};
pub use schedule::Schedule;
pub use world::World;
