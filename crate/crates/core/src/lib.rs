pub mod checkpoint;
pub mod data;
pub mod error;
pub mod adversarial;
pub mod linalg;
pub mod nn;
pub mod regularizers;
pub mod septrans;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{kron, kron_chain, mode_contract, nmode_product, Matrix, Tensor};
pub use septrans::{compression_ratio, ParamCount, SeparableTransform, SparsityReport};
pub use regularizers::RegularizerConfig;
pub use nn::{Activation, AdamConfig, AdamState, GradientSet, LayerSpec, SepMlp};
pub use adversarial::{AttackConfig, AttackKind};
pub use data::{Dataset, Sample};
pub use train::{TrainConfig, TrainReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
