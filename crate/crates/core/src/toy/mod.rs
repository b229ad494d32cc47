//! Synthetic token models standing in for an image-token transformer.
//!
//! Order-1 Markov tables give analytic conditionals, so every kernel can be
//! checked against exact oracles. High-entropy rows model the "many tokens are
//! equally plausible" regime; low-entropy rows model repetitive, confident
//! regions. The embedding table plays the role of a VQ codebook.

mod embedding;
mod markov;

pub use embedding::{distance_matrix, make_embeddings, static_partition, DistanceMatrix, EmbeddingTable};
pub use markov::{
    background_token, high_entropy_cap, make_markov_model, make_perturbed_draft, EntropyClass, MarkovParams,
    MarkovTableModel, ModelFile, PerturbedDraftModel,
};
