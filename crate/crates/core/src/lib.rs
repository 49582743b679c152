//! Latent collective preference optimization.
//!
//! Preference labels are treated as noisy observations of a latent
//! ground-truth preference. Each annotator carries a reliability `eta_k`;
//! an EM loop alternates between inferring the posterior probability that
//! each label is correct (the E-step) and a weighted policy update plus a
//! reliability update (the M-step). Any preference loss plugs in through
//! the Gibbs mapping `p(w > l) = sigmoid(L(l > w) - L(w > l))`.
//!
//! The policy here is a linear score model over response features, small
//! enough that the full-batch theory (fixed point of the reliability
//! operator, concavity of the per-annotator likelihood) can be checked
//! against brute-force oracles.

pub mod em;
pub mod experiments;
pub mod losses;
pub mod numeric;
pub mod oracle;
pub mod score_model;
pub mod synth;
pub mod theory;

pub use em::{
    run_lcpo, run_vanilla, AnnotatorTable, BatchWeights, EmConfig, EmError, EpochMetrics, TrainOutcome,
    UpdateMode,
};
pub use losses::{LossError, LossKind, LossSpec, ScorePair};
pub use score_model::{Features, LrSchedule, ModelError, OptimizerConfig, PolicyParams};
pub use synth::{GeneratorSpec, GroundTruth, PStarLaw, PreferencePair};
pub use theory::CalibratedBatch;
