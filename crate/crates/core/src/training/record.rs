//! Per-iteration metrics log in CSV form.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::metrics::VALIDATION_SIGMAS;
use crate::training::plan::Phase;

pub const METRICS_COLUMNS: [&str; 11] = [
    "iter",
    "phase",
    "l_deno",
    "l_adv",
    "weight",
    "total_loss",
    "disc_accuracy",
    "psnr_s10",
    "psnr_s15",
    "psnr_s20",
    "psnr_s25",
];

/// One row of the metrics log. `iter` counts within the phase, starting at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: u64,
    pub phase: Phase,
    pub l_deno: f64,
    pub l_adv: f64,
    pub weight: f64,
    pub total_loss: f64,
    pub disc_accuracy: Option<f64>,
    /// Mean denoised PSNR at sigma 10, 15, 20 and 25.
    pub psnr: [Option<f64>; 4],
}

impl MetricsRecord {
    pub fn psnr_at(&self, sigma: f64) -> Option<f64> {
        VALIDATION_SIGMAS
            .iter()
            .position(|&s| s == sigma)
            .and_then(|i| self.psnr[i])
    }

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = vec![
            self.iter.to_string(),
            self.phase.number().to_string(),
            self.l_deno.to_string(),
            self.l_adv.to_string(),
            self.weight.to_string(),
            self.total_loss.to_string(),
            opt(self.disc_accuracy),
        ];
        out.extend(self.psnr.iter().map(|&p| opt(p)));
        out
    }
}

/// Streams records to a CSV sink. The file starts with `# key=value`
/// comment lines followed by the column header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, header: &[(String, String)]) -> Result<Self> {
        for (k, v) in header {
            writeln!(out, "# {k}={v}").map_err(|e| Error::io("<metrics>", e))?;
        }
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRICS_COLUMNS)?;
        Ok(Self { inner })
    }

    /// Continues an existing log without repeating the header.
    pub fn append(out: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(out),
        }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.write_record(record.fields())?;
        self.inner.flush().map_err(|e| Error::io("<metrics>", e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::io("<metrics>", e.into_error()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub header: Vec<(String, String)>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn malformed(line: u64, message: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        message: message.into(),
    }
}

/// Parses a log written by [`MetricsWriter`].
pub fn read_metrics<R: BufRead>(input: R) -> Result<MetricsLog> {
    let mut header = Vec::new();
    let mut body = String::new();
    let mut header_lines = 0u64;
    let mut in_header = true;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<metrics>", e))?;
        if in_header {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| malformed(i as u64 + 1, "header comment is not key=value"))?;
                header.push((k.trim().to_string(), v.trim().to_string()));
                header_lines += 1;
                continue;
            }
            in_header = false;
        }
        body.push_str(&line);
        body.push('\n');
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let columns = reader.headers()?.clone();
    if columns.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(malformed(header_lines + 1, "unexpected metrics columns"));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = header_lines + row.position().map_or(0, |p| p.line());
        let num = |idx: usize| -> Result<f64> {
            row[idx].parse::<f64>().map_err(|_| {
                malformed(
                    line,
                    format!("{} is not a number: {:?}", METRICS_COLUMNS[idx], &row[idx]),
                )
            })
        };
        let opt = |idx: usize| -> Result<Option<f64>> {
            if row[idx].is_empty() {
                Ok(None)
            } else {
                num(idx).map(Some)
            }
        };
        let iter = row[0]
            .parse::<u64>()
            .map_err(|_| malformed(line, format!("bad iteration {:?}", &row[0])))?;
        let phase = row[1]
            .parse::<Phase>()
            .map_err(|_| malformed(line, format!("bad phase {:?}", &row[1])))?;
        records.push(MetricsRecord {
            iter,
            phase,
            l_deno: num(2)?,
            l_adv: num(3)?,
            weight: num(4)?,
            total_loss: num(5)?,
            disc_accuracy: opt(6)?,
            psnr: [opt(7)?, opt(8)?, opt(9)?, opt(10)?],
        });
    }
    Ok(MetricsLog { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: u64) -> MetricsRecord {
        MetricsRecord {
            iter,
            phase: Phase::Adversarial,
            l_deno: 0.0125,
            l_adv: 0.69,
            weight: 0.5,
            total_loss: 0.0125 + 0.5 * 0.69,
            disc_accuracy: Some(0.75),
            psnr: [Some(31.5), None, Some(27.25), None],
        }
    }

    #[test]
    fn round_trip() {
        let header = vec![("config_hash".to_string(), "abc123".to_string())];
        let mut w = MetricsWriter::new(Vec::new(), &header).unwrap();
        w.write(&record(10)).unwrap();
        w.write(&record(20)).unwrap();
        let bytes = w.into_inner().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# config_hash=abc123\niter,phase,l_deno"));
        let log = read_metrics(bytes.as_slice()).unwrap();
        assert_eq!(log.header_value("config_hash"), Some("abc123"));
        assert_eq!(log.records, vec![record(10), record(20)]);
        assert_eq!(log.records[0].psnr_at(20.0), Some(27.25));
        assert_eq!(log.records[0].psnr_at(15.0), None);
    }

    #[test]
    fn bad_cell_reports_line() {
        let text =
            "# a=b\niter,phase,l_deno,l_adv,weight,total_loss,disc_accuracy,psnr_s10,psnr_s15,psnr_s20,psnr_s25\n\
                    10,1,0.1,0,0,0.1,,,,,\n20,1,oops,0,0,0.1,,,,,\n";
        match read_metrics(text.as_bytes()) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
