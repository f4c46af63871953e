//! SemExplainer: synergistic-effect explanations for multi-view graph
//! recommenders.
//!
//! Given a frozen multi-view GNN link predictor and one (user, item)
//! prediction, the pipeline optimizes soft edge masks to extract an
//! explanatory subgraph, disentangles its synergistic part from the
//! non-synergistic remainder with a conditional-entropy objective, and
//! searches the masked graph for top-k user-to-item path explanations.
//! An exact mutual-information oracle over enumerable joint distributions
//! backs the theory checks, and a planted-synergy generator provides
//! desk-scale ground truth.

pub mod autodiff;
pub mod cli;
pub mod explain;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod paths;
pub mod report;
