//! Slide-level supervised heads: attention MIL, the linear probe and the
//! few-shot sampling protocol.

mod abmil;
mod fewshot;
pub mod lbfgs;
mod probe;
mod train;

pub use abmil::{bag_from_store, Abmil, AbmilConfig, AbmilOutput, Mode};
pub use fewshot::{
    build_fewshot_splits, median_by_shots, nearly_monotone, run_fewshot, FewShotPlan,
    FewShotRecord, FewShotSplit,
};
pub use probe::{linear_probe_fit, probe_objective, LinearProbe, LinearProbeConfig};
pub use train::{
    inverse_frequency_weights, predict_bags, sample_epoch, train_abmil, AbmilReport, LabeledBag,
    TrainingSchedule,
};
