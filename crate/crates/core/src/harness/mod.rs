//! Training, tracking, evaluation and ablation drivers.

pub mod ablation;
pub mod gradcheck;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod track;
pub mod train;

pub use ablation::{parse_variants, run_ablation, AblationRow, Variant};
pub use gradcheck::model_gradcheck;
pub use inspect::inspect_sample;
pub use metrics::{evaluate_ope, evaluate_predictions, EvalReport};
pub use model::{compute_loss, Batch, LossParts, Model, ModelConfig};
pub use optim::{AdamW, GroupLr};
pub use track::{track_sequence, write_boxes};
pub use train::{build_vocab, load_model, TrainConfig, Trainer};
