//! Key demand estimation from observed session traffic.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::ids::SiteId;

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_PEAK_WINDOW_S: f64 = 60.0;
pub const POOL_HORIZON_S: f64 = 120.0;
pub const POOL_ROUNDING_BYTES: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationMode {
    Continuous {
        rate_bps: f64,
    },
    OneTime {
        amount_bits: u64,
    },
    Hybrid {
        base_rate_bps: f64,
        reserve_bits: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandEstimate {
    pub remote_site: SiteId,
    pub rate_bps: f64,
    pub peak_rate_bps: f64,
    pub mode: GenerationMode,
}

/// Per remote site. Arrivals are binned per simulated second; each closed
/// bin updates the EWMAs, and the peak is the largest rate over the window.
#[derive(Debug, Clone)]
pub struct DemandEstimator {
    remote_site: SiteId,
    alpha: f64,
    window_s: f64,
    prior_bps: f64,
    bin_start: f64,
    bin_sessions: f64,
    bin_otp_bits: f64,
    ewma_sessions: Option<f64>,
    ewma_otp_bps: f64,
    key_bits_sum: f64,
    sessions: u64,
    samples: VecDeque<(f64, f64)>,
}

impl DemandEstimator {
    pub fn new(remote_site: SiteId, prior_bps: f64) -> Self {
        Self::with_params(remote_site, prior_bps, DEFAULT_ALPHA, DEFAULT_PEAK_WINDOW_S)
    }

    pub fn with_params(remote_site: SiteId, prior_bps: f64, alpha: f64, window_s: f64) -> Self {
        DemandEstimator {
            remote_site,
            alpha,
            window_s,
            prior_bps,
            bin_start: 0.0,
            bin_sessions: 0.0,
            bin_otp_bits: 0.0,
            ewma_sessions: None,
            ewma_otp_bps: 0.0,
            key_bits_sum: 0.0,
            sessions: 0,
            samples: VecDeque::new(),
        }
    }

    /// One session key request; `keys_per_session` counts the initial key
    /// plus its refreshes.
    pub fn record_session(&mut self, now: f64, key_bytes: u64, keys_per_session: f64) {
        self.advance(now);
        self.bin_sessions += 1.0;
        self.key_bits_sum += key_bytes as f64 * 8.0 * keys_per_session;
        self.sessions += 1;
    }

    /// One-time-pad traffic consumes one key bit per payload bit.
    pub fn record_otp(&mut self, now: f64, payload_bytes: u64) {
        self.advance(now);
        self.bin_otp_bits += payload_bytes as f64 * 8.0;
    }

    pub fn advance(&mut self, now: f64) {
        while now >= self.bin_start + 1.0 {
            let s = self.bin_sessions;
            let o = self.bin_otp_bits;
            let a = self.alpha;
            self.ewma_sessions = Some(self.ewma_sessions.map_or(s, |e| a * s + (1.0 - a) * e));
            self.ewma_otp_bps = if self.samples.is_empty() {
                o
            } else {
                a * o + (1.0 - a) * self.ewma_otp_bps
            };
            self.bin_start += 1.0;
            self.bin_sessions = 0.0;
            self.bin_otp_bits = 0.0;
            let rate = self.rate_bps();
            self.samples.push_back((self.bin_start, rate));
            while self
                .samples
                .front()
                .is_some_and(|(t, _)| *t <= self.bin_start - self.window_s)
            {
                self.samples.pop_front();
            }
        }
    }

    fn rate_bps(&self) -> f64 {
        let Some(sessions) = self.ewma_sessions else {
            return self.prior_bps;
        };
        let mean_key_bits = if self.sessions == 0 {
            0.0
        } else {
            self.key_bits_sum / self.sessions as f64
        };
        sessions * mean_key_bits + self.ewma_otp_bps
    }

    pub fn estimate(&mut self, now: f64) -> DemandEstimate {
        self.advance(now);
        let rate_bps = self.rate_bps();
        let peak_rate_bps = self
            .samples
            .iter()
            .map(|(_, r)| *r)
            .fold(rate_bps, f64::max);
        DemandEstimate {
            remote_site: self.remote_site,
            rate_bps,
            peak_rate_bps,
            mode: GenerationMode::Continuous { rate_bps },
        }
    }
}

/// Pool size that covers the peak rate over the planning horizon.
pub fn pool_capacity_for(peak_rate_bps: f64) -> u64 {
    let bytes = (peak_rate_bps.max(0.0) * POOL_HORIZON_S / 8.0).ceil() as u64;
    bytes.div_ceil(POOL_ROUNDING_BYTES).max(1) * POOL_ROUNDING_BYTES
}
