//! TextShield: a detection-correction defense against word-level adversarial
//! text attacks.
//!
//! The crate is organized bottom-up:
//!
//! * [`grad`]: tape-based reverse-mode differentiation with a guided backward
//!   mode and epsilon-rule relevance propagation, generic over the scalar.
//! * [`text`]: tokenizer, vocabulary, embeddings, synonym lexicon, word
//!   frequencies, dataset loading.
//! * [`victim`]: trainable TextCNN and LSTM text classifiers.
//! * [`saliency`]: adaptive word importance (AWI) matrices computed with
//!   vanilla gradients, guided backpropagation, relevance propagation, and
//!   integrated gradients.
//! * [`detector`]: four LSTM sub-detectors over AWI matrices plus an MLP
//!   combiner, with the balanced leave-one-attack-out training protocol.
//! * [`corrector`]: suspect selection and synonym substitution, plus the
//!   full detect-then-correct pipeline.
//! * [`attack`]: PWWS-style, TextFooler-style, and genetic word-substitution
//!   attack generators.
//! * [`baseline`]: FGWS and WDR reference detectors.
//!
//! The numeric core is generic over the scalar type; the pipeline itself
//! runs at `f64` through the aliases below.

pub mod attack;
pub mod baseline;
pub mod checkpoint;
pub mod corrector;
pub mod detector;
pub mod grad;
pub mod metrics;
pub mod opt;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod text;
pub mod victim;

/// Scalar type used by the pipeline.
pub type Real = f64;
/// Dense tensor at pipeline precision.
pub type Tensor = grad::Tensor<Real>;
/// Recording tape at pipeline precision.
pub type Tape = grad::Tape<Real>;
/// Leaf-gradient map at pipeline precision.
pub type GradMap = grad::GradMap<Real>;

pub use grad::{BackwardMode, GradError, NodeId};
