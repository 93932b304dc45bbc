//! `advdenoise train`: runs one or all phases and writes checkpoints and metrics.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use advdenoise_core::checkpoint::{load_denoiser, save_denoiser, save_discriminator};
use advdenoise_core::data::{list_images, DatasetSpec, Split};
use advdenoise_core::training::{
    read_metrics, run_phase, MetricsRecord, MetricsWriter, PhaseObserver, PhaseOutcome, TrainingData,
};
use advdenoise_core::{
    build_denoiser, build_discriminator, synthetic, CheckpointMeta, DenoiserModel, Discriminator, DiscriminatorConfig,
    Error, ImagePatch, Phase, VALIDATION_SIGMAS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const DISC_FILE: &str = "disc.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

pub fn phase_checkpoint(out: &Path, phase: u8) -> PathBuf {
    out.join(format!("phase{phase}.ckpt"))
}

pub fn latest_checkpoint(out: &Path, phase: u8) -> PathBuf {
    out.join(format!("phase{phase}_latest.ckpt"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseSelection {
    One(Phase),
    All,
}

impl std::str::FromStr for PhaseSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(PhaseSelection::All);
        }
        s.parse::<Phase>()
            .map(PhaseSelection::One)
            .map_err(|_| format!("expected 1, 2, 3 or all, found `{s}`"))
    }
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub phase: PhaseSelection,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
}

/// Seed of the discriminator initialization, kept apart from the denoiser's.
fn disc_seed(seed: u64) -> u64 {
    seed ^ 0xd15c_0000_0000_0001
}

fn meta(config: &RunConfig, completed_phase: u8) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: config.hash(),
        provenance: config.to_text(),
        completed_phase,
    }
}

fn ensure_images(dir: &Path) -> Result<(), CliError> {
    if list_images(dir)?.is_empty() {
        return Err(CliError::Config(format!("no .pgm or .png images in {}", dir.display())));
    }
    Ok(())
}

/// Training patches and validation images. Training images from a
/// directory are cut once into `crops_per_image` random crops; empty
/// directories fall back to the bundled synthetic sets.
pub fn load_data(config: &RunConfig) -> Result<(Vec<ImagePatch>, Vec<ImagePatch>), CliError> {
    let spec = DatasetSpec {
        train: config.train_dir().into_iter().collect(),
        validation: config.val_dir().into_iter().collect(),
        test: Vec::new(),
        patch_size: config.crop_size,
        crops_per_image: config.crops_per_image,
        seed: config.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = match config.train_dir() {
        Some(dir) => {
            ensure_images(&dir)?;
            spec.load(Split::Train, &mut rng)?
        }
        None => synthetic::training_set(config.synthetic_train_count, config.synthetic_size, config.seed),
    };
    let validation = match config.val_dir() {
        Some(dir) => {
            ensure_images(&dir)?;
            spec.load(Split::Validation, &mut rng)?
        }
        None => synthetic::validation_set(
            config.synthetic_val_count,
            config.synthetic_size,
            config.validation_seed,
        ),
    };
    Ok((train, validation))
}

/// Loads a denoiser checkpoint and refuses it if it was written under a
/// different configuration.
fn load_matching(path: &Path, config: &RunConfig) -> Result<(DenoiserModel<f32>, CheckpointMeta), CliError> {
    let (model, meta) = load_denoiser(path).map_err(|e| match e {
        Error::Io { .. } => CliError::Prerequisite(format!("cannot read checkpoint {}", path.display())),
        other => CliError::from(other),
    })?;
    if meta.config_hash != config.hash() {
        return Err(CliError::Config(format!(
            "checkpoint {} was written with config hash {}, the current config hashes to {}",
            path.display(),
            meta.config_hash,
            config.hash()
        )));
    }
    Ok((model, meta))
}

struct Observer<'a> {
    writer: MetricsWriter<BufWriter<File>>,
    out: &'a Path,
    config: &'a RunConfig,
    phase: u8,
}

impl PhaseObserver for Observer<'_> {
    fn on_record(&mut self, record: &MetricsRecord) -> advdenoise_core::Result<()> {
        self.writer.write(record)
    }

    fn on_iteration(
        &mut self,
        iter: u64,
        model: &DenoiserModel<f32>,
        _disc: Option<&Discriminator<f32>>,
    ) -> advdenoise_core::Result<()> {
        let every = self.config.checkpoint_every;
        if every > 0 && iter.is_multiple_of(every) {
            save_denoiser(
                latest_checkpoint(self.out, self.phase),
                model,
                &meta(self.config, self.phase - 1),
            )?;
        }
        Ok(())
    }
}

/// Opens the metrics file for `phase`: rows of earlier phases are kept,
/// rows of this and later phases are dropped.
fn open_metrics(path: &Path, config: &RunConfig, phase: u8) -> Result<MetricsWriter<BufWriter<File>>, CliError> {
    let mut kept = Vec::new();
    if phase > 1 && path.exists() {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let log = read_metrics(BufReader::new(file))?;
        if log.header_value("config_hash") != Some(config.hash().as_str()) {
            return Err(CliError::Config(format!(
                "{} belongs to a run with a different config hash",
                path.display()
            )));
        }
        kept = log.records.into_iter().filter(|r| r.phase.number() < phase).collect();
    }
    let mut header = vec![("config_hash".to_string(), config.hash())];
    header.extend(config.pairs());
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file), &header)?;
    for r in &kept {
        writer.write(r)?;
    }
    Ok(writer)
}

fn summarize(outcome: &PhaseOutcome) -> String {
    let mut line = format!(
        "phase {} done: {} denoiser updates, l_deno {:.6}",
        outcome.phase.number(),
        outcome.denoiser_updates,
        outcome.last_step.l_deno
    );
    if let Some(report) = &outcome.last_validation {
        for sigma in VALIDATION_SIGMAS {
            if let Some(p) = report.mean_denoised(sigma) {
                line.push_str(&format!(", psnr_s{sigma} {p:.2}"));
            }
        }
    }
    if let Some(acc) = outcome.disc_accuracy {
        line.push_str(&format!(", disc_accuracy {acc:.3}"));
    }
    line
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let config = &args.config;
    let plans = config.plans()?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let first = match args.phase {
        PhaseSelection::One(p) => p.number(),
        PhaseSelection::All => 1,
    };
    let (mut model, start) = match (&args.resume, first) {
        (Some(path), _) => {
            let (model, meta) = load_matching(path, config)?;
            let start = match args.phase {
                PhaseSelection::All => meta.completed_phase + 1,
                PhaseSelection::One(p) => {
                    if meta.completed_phase + 1 < p.number() {
                        return Err(CliError::Prerequisite(format!(
                            "{} has completed phase {}, phase {} needs phase {}",
                            path.display(),
                            meta.completed_phase,
                            p.number(),
                            p.number() - 1
                        )));
                    }
                    p.number()
                }
            };
            (model, start)
        }
        (None, 1) => (build_denoiser(config.model_config()?, config.seed)?, 1),
        (None, n) => {
            let path = phase_checkpoint(&args.out, n - 1);
            if !path.exists() {
                return Err(CliError::Prerequisite(format!(
                    "phase {n} needs {} (or --resume)",
                    path.display()
                )));
            }
            (load_matching(&path, config)?.0, n)
        }
    };
    let last = match args.phase {
        PhaseSelection::One(p) => p.number(),
        PhaseSelection::All => 3,
    };
    if start > last {
        eprintln!("nothing to do: phase {last} is already complete");
        return Ok(());
    }

    let (train, validation) = load_data(config)?;
    let data = TrainingData {
        train: &train,
        validation: &validation,
    };
    let metrics_path = args.out.join(METRICS_FILE);
    let mut disc = None;
    for n in start..=last {
        let plan = &plans[n as usize - 1];
        if plan.phase == Phase::Adversarial {
            disc = Some(build_discriminator::<f32>(
                DiscriminatorConfig::default(),
                disc_seed(config.seed),
            )?);
        }
        let mut observer = Observer {
            writer: open_metrics(&metrics_path, config, n)?,
            out: &args.out,
            config,
            phase: n,
        };
        let snapshot = model.clone();
        let result = run_phase(plan, &mut model, disc.as_mut(), data, &mut observer);
        let outcome = match result {
            Ok(outcome) => outcome,
            Err(Error::NonFinite(msg)) => {
                let path = args.out.join(LAST_GOOD_FILE);
                let good = if model_is_finite(&model) { &model } else { &snapshot };
                save_denoiser(&path, good, &meta(config, n - 1))?;
                return Err(CliError::Numeric(format!(
                    "phase {n}: {msg}; last finite weights saved to {}",
                    path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        save_denoiser(phase_checkpoint(&args.out, n), &model, &meta(config, n))?;
        if let Some(d) = &disc {
            save_discriminator(args.out.join(DISC_FILE), d, &meta(config, n))?;
        }
        eprintln!("{}", summarize(&outcome));
    }
    Ok(())
}

fn model_is_finite(model: &DenoiserModel<f32>) -> bool {
    model
        .params()
        .iter()
        .all(|p| p.value.data().iter().all(|v| v.is_finite()))
}
