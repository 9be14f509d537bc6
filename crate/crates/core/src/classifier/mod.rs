//! Patch classifiers shared by the candidate-refinement stage and the
//! atypical-mitosis task, plus soft-voting ensembles.

mod loss;
mod model;
mod train;

pub use loss::{
    bce_term, bce_term_grad, bce_with_logits, bce_with_logits_grad, bce_with_logits_grad_weighted,
    bce_with_logits_weighted, sigmoid, sigmoid_unchecked, softplus, LogitBatch,
};
pub use model::{
    classify_patch, ensemble_predict, mean_probability, reference_classifier_layers, ClassifierCache, ConstantScorer,
    EnsembleManifest, EnsembleSpec, PatchClassifier, PatchScorer, MEAN_PROB,
};
pub use train::{predict_patches, to_input, train_classifier, validation_balanced_accuracy, ClassifierTrainConfig};
