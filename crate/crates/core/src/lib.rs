//! Turn sparse mobile-sensor event streams into compressed, weighted
//! sequences for a stateful recurrent classifier of notification
//! engagement.

pub mod compressor;
pub mod encoder;
pub mod eval;
pub mod event_model;
pub mod ground_truth;
pub mod matrix;
pub mod pipeline;
pub mod rnn;
pub mod sequencer;
pub mod synth;
pub mod weighting;
