//! Matrix product state and tree tensor network classifiers for jet tagging,
//! with post-training fixed-point quantization, quantum mutual information
//! analysis and an FPGA latency/memory model of the inference schedules.

pub mod contractor;
pub mod embedding;
pub mod error;
pub mod hwmodel;
pub mod ingest;
pub mod interpret;
pub mod model;
pub mod mps;
pub mod network;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod ttn;

pub use contractor::{Contractor, Exact};
pub use embedding::{EmbeddedJet, Layout};
pub use error::{Error, Result};
pub use hwmodel::{Arch, CostModel, HardwareReport, Topology};
pub use ingest::{JetBatch, JetRecord, ScalerParams};
pub use interpret::{qmi_matrix, QmiMatrix, ReducedDensity};
pub use model::{Classifier, EmbeddingSpec, Network};
pub use mps::MpsModel;
pub use network::TensorNetwork;
pub use quant::{FxpFormat, OpMode, QuantizedModel};
pub use tensor::{contract, qr_split, ContractionSpec, Tensor};
pub use train::{LabeledJets, Loss, Metrics, TrainConfig};
pub use ttn::TtnModel;
