//! `advdenoise denoise` and `advdenoise eval`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use advdenoise_core::checkpoint::load_denoiser;
use advdenoise_core::data::{load_grayscale, save_pgm};
use advdenoise_core::metrics::write_eval_csv;
use advdenoise_core::{
    evaluate_validation, psnr, CheckpointMeta, DenoiserModel, Error, ValidationReport, VALIDATION_SIGMAS,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::train::load_data;

pub fn load_model(path: &Path) -> Result<(DenoiserModel<f32>, CheckpointMeta), CliError> {
    load_denoiser(path).map_err(|e| match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::Prerequisite(format!("checkpoint {} does not exist", path.display()))
        }
        other => other.into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseSummary {
    pub height: usize,
    pub width: usize,
    /// PSNR of input and output against the reference, if one was given.
    pub psnr_input: Option<f64>,
    pub psnr_output: Option<f64>,
}

/// One forward pass over the whole image; the result is written as PGM.
pub fn denoise(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    reference: Option<&Path>,
) -> Result<DenoiseSummary, CliError> {
    let (model, _) = load_model(checkpoint)?;
    let image = load_grayscale(input)?;
    let output = model.denoise(&image.pixels)?;
    save_pgm(&output, out)?;
    let mut summary = DenoiseSummary {
        height: image.height(),
        width: image.width(),
        psnr_input: None,
        psnr_output: None,
    };
    if let Some(reference) = reference {
        let clean = load_grayscale(reference)?;
        summary.psnr_input = Some(psnr(&clean.pixels, &image.pixels)?);
        summary.psnr_output = Some(psnr(&clean.pixels, &output)?);
    }
    Ok(summary)
}

/// PSNR of the checkpoint on the configured validation set at every
/// validation sigma. Rows go to `out` as CSV under a config hash comment.
pub fn eval(checkpoint: &Path, config: &RunConfig, out: Option<&Path>) -> Result<ValidationReport, CliError> {
    let (model, meta) = load_model(checkpoint)?;
    let (_, validation) = load_data(config)?;
    let report = evaluate_validation(&model, &validation, &VALIDATION_SIGMAS, config.validation_seed)?;
    if let Some(path) = out {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# config_hash={}", meta.config_hash).map_err(|e| CliError::io(path, e))?;
        write_eval_csv(&report.rows, &mut w)?;
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    Ok(report)
}
