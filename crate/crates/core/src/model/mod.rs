//! C3D-BiLSTM assembly, training, evaluation and experiment protocols.

mod arch;
mod baseline;
mod metrics;
mod protocol;
mod train;

pub use arch::{ArchitectureConfig, C3dBiLstm, ConvBlockSpec};
pub use baseline::{LogisticConfig, LogisticRegression};
pub use metrics::{argmax, Metrics};
pub use protocol::{
    ablate_frontend, extract_corpus_mfcc, pool_frames, run_experiment, sgmm_features, small_sample_indices,
    small_sample_protocol, AblationRow, AblationTable, ExperimentConfig, ExperimentOutcome,
};
pub use train::{evaluate, train, EpochRecord, History, TrainConfig};
