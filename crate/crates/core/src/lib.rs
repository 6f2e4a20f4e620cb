//! Differentiable forest reflectance modeling and inversion.
//!
//! The crate couples a small reverse-mode automatic-differentiation engine
//! ([`ad`]) with a two-layer forest reflectance model ([`rtm`]) so that the
//! model can sit inside gradient-trained inversion pipelines. On top of the
//! forward model there are latent-range mappings ([`latent`]), MLP building
//! blocks ([`nets`]), training loops with a NaN-gradient stabilizer
//! ([`train`]), dataset generation and ingestion ([`data`]), and metric
//! reporting including Jeffreys-Matusita separability ([`eval`]).
//!
//! The `rtm-invert` binary wires everything into reproducible, seeded
//! command-line experiments.

pub mod ad;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod nets;
pub mod rtm;
pub mod train;
