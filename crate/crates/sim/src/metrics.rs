//! Time-series rows and run summary.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Column order of metrics.csv: one row per sample interval. Counters cover
/// the interval just ended; `satisfied_ratio` is cumulative.
pub const METRICS_COLUMNS: [&str; 16] = [
    "time_s",
    "requests",
    "grants",
    "refresh_grants",
    "race_conflicts",
    "fallbacks",
    "blocked",
    "failed",
    "satisfied_ratio",
    "demand_bps",
    "delivered_bps",
    "pool_fill_bytes",
    "link_utilization_mean",
    "link_utilization_max",
    "lambda",
    "relay_latency_ms",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub time_s: f64,
    pub requests: u64,
    pub grants: u64,
    pub refresh_grants: u64,
    pub race_conflicts: u64,
    pub fallbacks: u64,
    pub blocked: u64,
    pub failed: u64,
    pub satisfied_ratio: f64,
    /// Sum of the active continuous demands.
    pub demand_bps: f64,
    /// QNL key material handed to KMS pools, each pair counted once.
    pub delivered_bps: f64,
    /// Available pool bytes, each pair counted once.
    pub pool_fill_bytes: u64,
    pub link_utilization_mean: f64,
    pub link_utilization_max: f64,
    pub lambda: f64,
    /// Blank when no relay completed in the interval.
    pub relay_latency_ms: Option<f64>,
}

impl MetricsRow {
    fn fields(&self) -> [String; 16] {
        let real = |x: f64| format!("{x:.6}");
        [
            format!("{:.3}", self.time_s),
            self.requests.to_string(),
            self.grants.to_string(),
            self.refresh_grants.to_string(),
            self.race_conflicts.to_string(),
            self.fallbacks.to_string(),
            self.blocked.to_string(),
            self.failed.to_string(),
            real(self.satisfied_ratio),
            real(self.demand_bps),
            real(self.delivered_bps),
            self.pool_fill_bytes.to_string(),
            real(self.link_utilization_mean),
            real(self.link_utilization_max),
            real(self.lambda),
            self.relay_latency_ms.map(real).unwrap_or_default(),
        ]
    }
}

/// Writes the header even when there are no rows.
pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub events_processed: u64,
    /// Host requests, and those that got their first key.
    pub requests: u64,
    pub satisfied: u64,
    pub satisfied_ratio: f64,
    pub grants_by_class: [u64; 6],
    pub refresh_grants: u64,
    pub race_conflicts: u64,
    pub fallbacks: u64,
    pub blocked: u64,
    pub failed: u64,
    pub mac_invalid: u64,
    pub lambda_final: f64,
    pub lambda_mean: f64,
    pub mcfp_solves: u64,
    pub key_material_bytes: u64,
    pub relays_delivered: u64,
    pub mean_relay_latency_ms: f64,
    pub pool_bytes_by_class: [u64; 6],
    /// Link-stream bytes consumed twice, summed over every node.
    pub stream_reuses: u64,
    /// Pool bytes granted to two sessions.
    pub pool_overlaps: u64,
    pub invariant_checks: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub sites: BTreeMap<String, SiteSummary>,
}

/// Per-site totals; grants and conflicts count the site as originator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub requests: u64,
    pub grants: u64,
    pub race_conflicts: u64,
    pub blocked: u64,
    pub fallbacks: u64,
    pub pool_fill_bytes: u64,
}
