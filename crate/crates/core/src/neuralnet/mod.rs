//! Minimal dense numeric core shared by the fluency classifier and the caption generator.

pub mod gradcheck;
pub mod io;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod sequence;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use lstm::{lstm_step, LstmParams, LstmState};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, SgdSchedule};
pub use params::{clip_grad_norm, ParamSet, TensorRef};
pub use sequence::{
    cross_entropy, dropout_mask, log_probs, softmax, DropoutMasks, SequenceModelParams,
    SequenceOutput, StepInput, PROB_FLOOR,
};
pub use tensor::Matrix;
