//! Long-tail multi-label classifier training with pattern-level feature
//! decoupling and knowledge-level label correlation transfer, plus the
//! synthetic benchmark, metrics, and checkpointing around it.

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kdl;
pub mod metrics;
pub mod params;
pub mod pdl;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, ExperimentConfig, Mode};
pub use data::{SegmentRecord, SyntheticConfig, SyntheticData};
pub use error::{DllError, Result};
pub use metrics::{MetricsReport, RankedPrediction, TruthMap};
pub use kdl::{CorrelationMatrix, KDLConfig};
pub use params::{Bindings, OptimizerMode, ParameterSet};
pub use pdl::{MapMatrices, ModelDims, PDLConfig, PDLModel};
pub use tape::{GradScale, Tape, Var};
pub use tensor::Tensor;
pub use train::{
    compare, evaluate, model_from_checkpoint, train, CompareRun, JointDims, JointModel,
    LoadedData, RunLog, TrainOptions, TrainOutcome, TrainedModel,
};
pub use vocab::{Predicate, PredicateVocabulary};
