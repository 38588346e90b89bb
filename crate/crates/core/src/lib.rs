//! Personalized Federated Cluster Models (PFCM) simulator.
//!
//! The crate simulates a two-step federated training procedure on a small
//! CNN and a personalized test procedure:
//!
//! 1. [`federation`]: plain FedAvg pre-training produces the global model `w_T`.
//! 2. [`cluster`]: every training client fine-tunes `w_T` once, the resulting
//!    weight deltas are clustered bottom-up, and each cluster is trained
//!    further with FedAvg restricted to its members.
//! 3. [`personalization`]: a new client fine-tunes `w_T`, is matched to the
//!    cluster whose update direction is most cosine-similar to its own, and is
//!    evaluated with that cluster's model.
//!
//! [`nn`] holds the hand-written CNN engine, [`dataset`] the preprocessing
//! pipeline and synthetic non-IID generator, and [`experiment`] ties
//! everything into reproducible runs driven by an [`ExperimentConfig`].

pub mod cluster;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod ledger;
pub mod nn;
pub mod personalization;
pub mod seeds;

pub use error::{Error, ErrorKind, Result};
pub use experiment::ExperimentConfig;
pub use ledger::{AccessLedger, Phase};
pub use nn::{CnnSpec, FlatWeights, Layout, OptimizerState, SgdConfig, Tensor};
