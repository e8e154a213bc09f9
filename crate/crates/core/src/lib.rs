//! Diversity-aware channel pruning for style-based generators.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode autodiff graph.
//! * [`synthnet`]: a small mapping + synthesis generator, its checkpoint
//!   format and parameter/FLOP accounting.
//! * [`latentdir`]: principal latent directions and direction sampling.
//! * [`scorer`]: perturbation-induced gradients and per-channel importance.
//! * [`surgeon`]: pruning plans and the channel surgery that applies them.
//! * [`distiller`]: the procedural dataset, discriminator, losses and the
//!   teacher-training / student-distillation loops.
//! * [`evalkit`]: fidelity and diversity metrics.

pub mod tensor;
pub mod json;
pub mod rng;
pub mod synthnet;
pub mod latentdir;
pub mod scorer;
pub mod surgeon;
pub mod distiller;
pub mod evalkit;

pub use distiller::{DiscConfig, Discriminator, DistillConfig, TrainError, TrainOptions, TrainOutcome};
pub use evalkit::{DiversityStats, EvalError, EvalReport};
pub use latentdir::{DirectionMode, DirectionSet, LatentDirError};
pub use scorer::{LayerScores, ScoreError, ScoreReport, ScoringConfig};
pub use surgeon::{PruneMode, PruningPlan, SurgeryError};
pub use synthnet::{CheckpointError, GeneratorConfig, GeneratorWeights, LatentSpace, LatentVector, SynthError};
pub use tensor::{Tensor, TensorError};
