//! Misclassification detection for vision-language model predictions.
//!
//! The pipeline builds per-class visual prototypes in an auxiliary image
//! encoder space, verifies each zero-shot prediction against the prototype of
//! the predicted class, and evaluates the resulting confidence scores with
//! selective-prediction metrics (AURC, AUROC, FPR at 95% TPR).

pub mod cli;
pub mod embedstore;
pub mod error;
pub mod evalmetrics;
pub mod protobank;
pub mod scorers;
pub mod synthbench;

pub use embedstore::{
    l2_normalize, read_embeddings, validate_manifest, write_embeddings, Dataset, DatasetManifest,
    EmbeddingMatrix, EncoderSpace, NormState, SampleRecord, Split, TextClassEmbeddings, Violation,
};
pub use error::{Error, Result};
pub use evalmetrics::{
    accuracy, aurc, auroc, evaluate, fpr_at_tpr, risk_coverage_curve, EvalReport,
    RiskCoveragePoint, ScoreBlock, ScoreName,
};
pub use protobank::{
    build_prototypes, ensemble_ce_loss_and_grad, finetune_prototypes, FinetuneConfig,
    FinetuneTrace, PrototypeBank,
};
pub use scorers::{ScoredPrediction, ScoringConfig};
pub use synthbench::{generate_synthetic, SynthConfig, SyntheticDataset};
