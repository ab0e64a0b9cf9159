//! Run configuration, the training loop, checkpoints, evaluation, plots and
//! the protocol runner.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod plot;
pub mod protocol;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerState, CHECKPOINT_FORMAT};
pub use config::{
    parse_override_args, DataSource, EncoderConfig, EvalConfig, OptimConfig, ProtocolConfig,
    RunConfig,
};
pub use evaluate::{
    evaluate, read_scores, write_evaluation, write_scores, Evaluation, MaskEntry, ScoreRow,
};
pub use gradcheck::{require_gradcheck, run_gradcheck, GradCheckConfig, GradCheckResult};
pub use plot::{histogram, plot_score_distributions, ScoreHistogram, DEFAULT_BINS};
pub use protocol::{
    evaluate_checkpoint, load_dataset, load_encoder, protocol_cells, run_protocol, run_protocol_on,
    run_split, CellReport, ProtocolCell, ProtocolReport, SplitRun,
};
pub use trainer::{calibration_split, train_prompts, StepLog, TrainOutcome, TrainSinks};
