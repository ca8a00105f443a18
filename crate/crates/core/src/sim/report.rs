//! Simulation results and their CSV/JSON forms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::cost::Breakdown;
use crate::error::Result;
use crate::numerics::Token;
use crate::scheduler::RequestId;

pub const CSV_COLUMNS: [&str; 7] = [
    "iteration",
    "gemm_tokens",
    "attn_bytes",
    "latency_ms",
    "device_util",
    "offloaded_pages",
    "stalled_requests",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRow {
    pub iteration: u64,
    pub gemm_tokens: usize,
    pub attn_bytes: u64,
    pub latency_ms: f64,
    pub device_util: f64,
    pub offloaded_pages: usize,
    pub stalled_requests: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub rows: Vec<IterationRow>,
    /// Pages owned by admitted requests on either tier, per iteration.
    pub live_pages: Vec<usize>,
    /// Requests in each batch, per iteration.
    pub batch_sizes: Vec<usize>,
    pub breakdown: Breakdown,
    /// Time with no admitted request, waiting for arrivals.
    pub idle_ms: f64,
    pub tokens_generated: u64,
    pub recomputed_tokens: u64,
    pub tokens_per_second: f64,
    pub eta: f64,
    pub mean_batch: f64,
    pub mean_kv_bytes: f64,
    pub realized_alpha: Option<f64>,
    pub alpha_histogram: Option<Vec<usize>>,
    pub outputs: Vec<(RequestId, Vec<Token>)>,
}

impl SimReport {
    /// Breakdown total; idle time is part of `other_ms`.
    pub fn total_ms(&self) -> f64 {
        self.breakdown.total_ms()
    }

    pub fn recomputation_ratio(&self) -> f64 {
        if self.tokens_generated == 0 {
            0.0
        } else {
            self.recomputed_tokens as f64 / self.tokens_generated as f64
        }
    }

    pub fn gemm_series(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.gemm_tokens).collect()
    }

    /// Mean device utilization over iterations where admitted requests own
    /// at least `capacity_pages` pages.
    pub fn saturated_utilization(&self, capacity_pages: usize) -> Option<f64> {
        let sat: Vec<f64> = self
            .rows
            .iter()
            .zip(&self.live_pages)
            .filter(|(_, &live)| live >= capacity_pages)
            .map(|(r, _)| r.device_util)
            .collect();
        (!sat.is_empty()).then(|| sat.iter().sum::<f64>() / sat.len() as f64)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            tokens_per_second: self.tokens_per_second,
            eta: self.eta,
            realized_alpha: self.realized_alpha,
            recomputation_ratio: self.recomputation_ratio(),
            breakdown: self.breakdown,
            total_ms: self.total_ms(),
            iterations: self.rows.len(),
            tokens_generated: self.tokens_generated,
            mean_batch: self.mean_batch,
            mean_kv_bytes: self.mean_kv_bytes,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.summary())?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?))?;
        let mut json = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
        self.write_json(&mut json)?;
        json.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub tokens_per_second: f64,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realized_alpha: Option<f64>,
    pub recomputation_ratio: f64,
    pub breakdown: Breakdown,
    pub total_ms: f64,
    pub iterations: usize,
    pub tokens_generated: u64,
    pub mean_batch: f64,
    pub mean_kv_bytes: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn empty() -> SimReport {
        SimReport {
            rows: Vec::new(),
            live_pages: Vec::new(),
            batch_sizes: Vec::new(),
            breakdown: Breakdown::default(),
            idle_ms: 0.0,
            tokens_generated: 0,
            recomputed_tokens: 0,
            tokens_per_second: 0.0,
            eta: 1.0,
            mean_batch: 0.0,
            mean_kv_bytes: 0.0,
            realized_alpha: None,
            alpha_histogram: None,
            outputs: Vec::new(),
        }
    }

    #[test]
    fn empty_series_is_header_only() {
        let mut buf = Vec::new();
        empty().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,gemm_tokens,attn_bytes,latency_ms,device_util,offloaded_pages,stalled_requests\n"
        );
    }

    #[test]
    fn json_keys() {
        let mut buf = Vec::new();
        empty().write_json(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        for key in ["tokens_per_second", "eta", "recomputation_ratio", "breakdown"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("realized_alpha").is_none());
        for key in ["cpu_ms", "attn_ms", "gemm_ms", "other_ms"] {
            assert!(v["breakdown"].get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn rows_follow_column_order() {
        let mut r = empty();
        r.rows.push(IterationRow {
            iteration: 3,
            gemm_tokens: 15,
            attn_bytes: 1024,
            latency_ms: 1.5,
            device_util: 0.25,
            offloaded_pages: 2,
            stalled_requests: 1,
        });
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().nth(1), Some("3,15,1024,1.5,0.25,2,1"));
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        empty().emit(dir.path(), "run").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        let json = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
        assert!(json.ends_with("}\n"));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = empty().emit(&dir.path().join("missing"), "run");
        assert!(matches!(r, Err(crate::error::Error::Io(_))));
    }
}
