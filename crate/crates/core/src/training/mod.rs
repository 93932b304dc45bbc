//! Three-phase training of the denoiser.

mod noise;
mod plan;
mod record;
mod run;
mod schedule;
mod steps;

pub use noise::{add_gaussian_noise, NoiseSpec};
pub use plan::{
    AdversarialSpec, GeneratorLoss, Phase, PhasePlan, ADVERSARIAL_DENOISER_LR, CLEAN_TO_CLEAN_DROPOUT,
    DISCRIMINATOR_LR, DISCRIMINATOR_PRETRAIN_EPOCHS, DISCRIMINATOR_UPDATES_PER_ITERATION, LOG_INTERVAL,
};
pub use record::{read_metrics, MetricsLog, MetricsRecord, MetricsWriter, METRICS_COLUMNS};
pub use run::{configure_model, run_phase, PhaseObserver, PhaseOutcome, TrainingData};
pub use schedule::{adversarial_weight, LossSchedule, DAMPING};
pub use steps::{
    discriminator_step, phase1_step, phase2_step, phase3_iteration, pretrain_discriminator, AdversarialOptimizers,
    Phase3Stats, StepStats,
};
