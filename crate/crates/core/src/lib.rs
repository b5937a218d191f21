pub mod config;
pub mod deliberation;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transducer;

pub use error::{Error, Result};
pub use graph::{Gradients, GradMap, Graph, OpAttrs, OpKind, Var};
pub use params::{NamedTensors, ParamId, ParamStore, Precision};
pub use rng::SeededRng;
pub use tensor::Tensor;
