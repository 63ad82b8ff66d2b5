//! Perturbation defenses for the transmitted head output.
//!
//! The ensembler trains `N` nets that each see their own fixed noise
//! (Stage 1), secretly activates `P` of them ([`choose_selector`]), and then
//! retrains the client head and tail against the frozen bodies while keeping
//! the new head dissimilar from every Stage-1 head ([`stage3_train`]).

mod ensembler;
mod noise;
mod selector;
mod strategy;
mod train;

pub use ensembler::{ensembler_infer, stage1_seeds, stage1_train, stage3_train, EnsembleModel, Stage3Config};
pub use noise::{DropoutSpec, NoiseSpec, DEFAULT_DROPOUT};
pub use selector::{batch_cosine, choose_selector, cosine_similarity, selector_combine, SelectorKey};
pub use strategy::{
    baseline_defense, train_ensembler, train_noise, train_undefended, DefenseKind, DefenseParams, DefenseStrategy,
    EnsemblerRun, Perturbation,
};
pub use train::{Objective, RegularizerScope, Routing, StageConfig};
