pub mod autograd;
pub mod beam;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod powerlaw;
pub mod projector;
pub mod prompts;
pub mod reaction;
pub mod retrieval;
pub mod scalar;
pub mod seeds;
pub mod seq_encoder;
pub mod smiles;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Tape32<'s> = autograd::Tape<'s, f32>;
pub type Tape64<'s> = autograd::Tape<'s, f64>;
pub type Adam32 = optim::Adam<f32>;
pub type Adam64 = optim::Adam<f64>;
pub type Trained32 = train::Trained<f32>;
pub type Trained64 = train::Trained<f64>;
