//! Histogram files: a CSV table (`lag_ps,counts,g2,sigma`) and a JSON
//! sidecar with the normalization metadata.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlator::{CorrelationHistogram, Estimator};

#[derive(Debug, Error)]
pub enum HistIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Inconsistent { path: PathBuf, message: String },
}

/// Everything but the per-bin columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMeta {
    pub bin_width_ps: u64,
    pub lag_min_ps: i64,
    pub lag_max_ps: i64,
    pub n_bins: usize,
    pub rate_a_hz: f64,
    pub rate_b_hz: f64,
    pub duration_ps: u64,
    pub n_a: u64,
    pub n_b: u64,
    pub zero_lag: u64,
    pub estimator: Estimator,
    /// Coincidences expected per bin for uncorrelated streams.
    pub denominator: f64,
}

impl HistogramMeta {
    pub fn of(h: &CorrelationHistogram) -> Self {
        Self {
            bin_width_ps: h.bin_width,
            lag_min_ps: h.lag_min,
            lag_max_ps: h.lag_max,
            n_bins: h.n_bins(),
            rate_a_hz: h.rate_a,
            rate_b_hz: h.rate_b,
            duration_ps: h.duration,
            n_a: h.n_a,
            n_b: h.n_b,
            zero_lag: h.zero_lag,
            estimator: h.estimator,
            denominator: h.denominator(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    lag_ps: i64,
    counts: u64,
    g2: f64,
    sigma: f64,
}

/// `histogram.csv` → `histogram.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn to_csv_string(h: &CorrelationHistogram) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..h.n_bins() {
        w.serialize(Row {
            lag_ps: h.lag_ps(i),
            counts: h.counts[i],
            g2: h.g2[i],
            sigma: h.sigma[i],
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn to_sidecar_string(h: &CorrelationHistogram) -> String {
    let mut s = serde_json::to_string_pretty(&HistogramMeta::of(h)).expect("plain data");
    s.push('\n');
    s
}

/// Writes the CSV and its sidecar; returns the sidecar path.
pub fn write(h: &CorrelationHistogram, csv_path: &Path) -> Result<PathBuf, HistIoError> {
    let side = sidecar_path(csv_path);
    fs::write(csv_path, to_csv_string(h)).map_err(|source| HistIoError::Io {
        path: csv_path.into(),
        source,
    })?;
    fs::write(&side, to_sidecar_string(h)).map_err(|source| HistIoError::Io {
        path: side.clone(),
        source,
    })?;
    Ok(side)
}

pub fn read(csv_path: &Path) -> Result<CorrelationHistogram, HistIoError> {
    let side = sidecar_path(csv_path);
    let text = fs::read_to_string(&side).map_err(|source| HistIoError::Io {
        path: side.clone(),
        source,
    })?;
    let meta: HistogramMeta = serde_json::from_str(&text).map_err(|source| HistIoError::Json {
        path: side.clone(),
        source,
    })?;
    let mut reader = csv::Reader::from_path(csv_path).map_err(|source| HistIoError::Csv {
        path: csv_path.into(),
        source,
    })?;
    let (mut counts, mut g2, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
    let bad = |message: String| HistIoError::Inconsistent {
        path: csv_path.into(),
        message,
    };
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|source| HistIoError::Csv {
            path: csv_path.into(),
            source,
        })?;
        let expected = meta.lag_min_ps + i as i64 * meta.bin_width_ps as i64;
        if row.lag_ps != expected {
            return Err(bad(format!(
                "row {}: lag_ps {} but the sidecar implies {expected}",
                i + 1,
                row.lag_ps
            )));
        }
        counts.push(row.counts);
        g2.push(row.g2);
        sigma.push(row.sigma);
    }
    if counts.len() != meta.n_bins {
        return Err(bad(format!(
            "{} rows but the sidecar says {} bins",
            counts.len(),
            meta.n_bins
        )));
    }
    Ok(CorrelationHistogram {
        bin_width: meta.bin_width_ps,
        lag_min: meta.lag_min_ps,
        lag_max: meta.lag_max_ps,
        counts,
        g2,
        sigma,
        rate_a: meta.rate_a_hz,
        rate_b: meta.rate_b_hz,
        duration: meta.duration_ps,
        n_a: meta.n_a,
        n_b: meta.n_b,
        zero_lag: meta.zero_lag,
        estimator: meta.estimator,
    })
}
