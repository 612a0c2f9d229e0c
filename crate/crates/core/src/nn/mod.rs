//! Minimal neural-network engine: tensors, a batch-normalized MLP classifier
//! with parameter and input gradients, losses and optimizers.

pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

pub use loss::{cross_entropy, cross_entropy_per_sample, distillation_kl, softmax, KlDirection};
pub use model::{
    argmax, column_moments, Architecture, BnStats, ClassifierModel, ForwardCache, Gradients,
    LayerSpec, Mode,
};
pub use optim::{sgd_step, Adam, Sgd};
pub use tensor::Tensor;
