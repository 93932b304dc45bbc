//! `advdenoise report`: validation PSNR and adversarial loss charts from a
//! metrics CSV.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use advdenoise_core::training::{read_metrics, MetricsLog, LOG_INTERVAL};
use advdenoise_core::{Phase, VALIDATION_SIGMAS};

use crate::error::CliError;
use crate::svg::{Chart, Series};

pub const PSNR_SVG: &str = "psnr.svg";
pub const ADV_SVG: &str = "adversarial_loss.svg";

fn hash(log: &MetricsLog) -> String {
    log.header_value("config_hash").unwrap_or("unknown").to_string()
}

fn log_interval(log: &MetricsLog) -> f64 {
    log.header_value("log_every")
        .and_then(|v| v.parse::<u64>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(LOG_INTERVAL) as f64
}

/// Validation PSNR per sigma against the iteration count summed over phases.
pub fn psnr_chart(log: &MetricsLog) -> Chart {
    let mut offsets = Vec::new();
    let mut offset = 0;
    for phase in [Phase::CleanToClean, Phase::NoisyToClean, Phase::Adversarial] {
        let end = log.records.iter().filter(|r| r.phase == phase).map(|r| r.iter).max();
        if let Some(end) = end {
            offsets.push((phase, offset));
            offset += end;
        }
    }
    let offset_of = |p: Phase| offsets.iter().find(|o| o.0 == p).map_or(0, |o| o.1);
    let series = VALIDATION_SIGMAS
        .iter()
        .map(|&sigma| Series {
            name: format!("sigma {sigma}"),
            points: log
                .records
                .iter()
                .filter_map(|r| {
                    let p = r.psnr_at(sigma)?;
                    p.is_finite().then(|| ((r.iter + offset_of(r.phase)) as f64, p))
                })
                .collect(),
        })
        .collect();
    let markers = offsets
        .iter()
        .map(|&(p, o)| (o as f64, format!("phase {}", p.number())))
        .collect();
    Chart {
        title: "Validation PSNR".into(),
        x_label: "iteration".into(),
        y_label: "PSNR (dB)".into(),
        series,
        markers,
        x_unit: log_interval(log),
        config_hash: hash(log),
    }
}

/// Adversarial loss of the denoiser over the adversarial phase.
pub fn adversarial_chart(log: &MetricsLog) -> Chart {
    let points = log
        .records
        .iter()
        .filter(|r| r.phase == Phase::Adversarial && r.l_adv.is_finite())
        .map(|r| (r.iter as f64, r.l_adv))
        .collect();
    Chart {
        title: "Adversarial loss".into(),
        x_label: "iteration".into(),
        y_label: "l_adv".into(),
        series: vec![Series {
            name: "l_adv".into(),
            points,
        }],
        markers: Vec::new(),
        x_unit: log_interval(log),
        config_hash: hash(log),
    }
}

/// Renders both charts into `out`. Nothing is written if the log has no rows.
pub fn report(metrics: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let file = File::open(metrics).map_err(|e| CliError::io(metrics, e))?;
    let log = read_metrics(BufReader::new(file))?;
    if log.records.is_empty() {
        return Err(CliError::Data(format!("{} has no metrics rows", metrics.display())));
    }
    let charts = [(PSNR_SVG, psnr_chart(&log)), (ADV_SVG, adversarial_chart(&log))];
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut written = Vec::new();
    for (name, chart) in charts {
        let path = out.join(name);
        fs::write(&path, chart.render()).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
