//! Small CNNs: definition, training, inference, datasets and weight files.

pub mod data;
pub mod fold;
pub mod model;
pub mod spec;
pub mod tensor;
pub mod train;
pub mod weights;

pub use data::{load_cifar10, load_idx, parse_cifar10, parse_idx_images, parse_idx_labels, Dataset, Split};
pub use fold::fold_batchnorm;
pub use model::{argmax, forward, logits};
pub use spec::{LayerSpec, NetworkSpec, Shape};
pub use tensor::Tensor;
pub use train::{evaluate_accuracy, train, train_with_report, EarlyStopping, TrainConfig, TrainReport};
pub use weights::{BatchNormParams, LayerParams, WeightStore, BN_EPSILON};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch at {context}: expected {expected}, found {found}")]
    ShapeMismatch { context: String, expected: String, found: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("training diverged (non-finite loss)")]
    Divergence,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        NnError::Io(e.to_string())
    }
}
