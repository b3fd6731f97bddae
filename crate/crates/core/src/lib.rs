//! Intent-embedding toolkit: a small f64 autodiff engine, a pre-LN
//! transformer encoder, supervised pre-training with a correlation
//! regularizer, teacher→student distillation over parallel text, N-shot
//! episodic evaluation and isotropy analysis.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod fewshot;
pub mod gradcheck;
pub mod isotropy;
pub mod optim;
pub mod pretrain;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Gradients, Graph, Var};
pub use encoder::{EncoderConfig, EncoderModel};
pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Tensor;
pub use tokenizer::Vocab;
