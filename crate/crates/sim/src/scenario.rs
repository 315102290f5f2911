//! Scenario files: parsing and validation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use qkdnet::ids::{HostId, LinkId, SiteId};
use qkdnet::kms::{NegotiationMode, SecurityPolicy};
use qkdnet::qnl::mcfp::Objective;

use crate::qll::QuantumLinkConfig;
use crate::transport::ChannelSpec;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "defaults::version")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "defaults::sample_interval")]
    pub sample_interval_s: f64,
    /// Link-layer and node housekeeping period.
    #[serde(default = "defaults::tick")]
    pub tick_s: f64,
    #[serde(default = "defaults::mode")]
    pub negotiation_mode: NegotiationMode,
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub hosts: Vec<HostSpec>,
    pub quantum_links: Vec<QuantumLinkConfig>,
    #[serde(default = "defaults::conventional")]
    pub conventional_channels: Vec<ChannelSpec>,
    #[serde(default = "defaults::data")]
    pub data_channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub policies: Vec<SecurityPolicy>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    /// Continuous demands issued at start, on top of the estimated ones.
    #[serde(default)]
    pub static_demands: Vec<StaticDemand>,
    #[serde(default)]
    pub qnl: QnlSpec,
    #[serde(default)]
    pub kms: KmsSpec,
    /// Run-time invariant assertions.
    #[serde(default = "defaults::yes")]
    pub checks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub id: SiteId,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub id: HostId,
    pub site: SiteId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    Poisson { rate_per_s: f64 },
    Schedule { times_s: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub name: String,
    /// Requesting hosts, picked uniformly per arrival; empty means all.
    #[serde(default)]
    pub hosts: Vec<HostId>,
    pub arrival: Arrival,
    /// Candidate peers; empty means every host at another site.
    #[serde(default)]
    pub remote_hosts: Vec<HostId>,
    #[serde(default = "defaults::key_length")]
    pub key_length_bytes: u64,
    #[serde(default = "defaults::session")]
    pub session_duration_s: f64,
    #[serde(default)]
    pub lifetime_s: Option<f64>,
    /// Uniform payload size range for one-time-pad sessions.
    #[serde(default)]
    pub payload_bytes: Option<[u64; 2]>,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default)]
    pub stop_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticDemand {
    pub src: SiteId,
    pub dst: SiteId,
    pub rate_bps: f64,
    #[serde(default)]
    pub max_hops: Option<u32>,
    #[serde(default = "defaults::one")]
    pub path_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QnlSpec {
    pub epsilon: f64,
    pub objective: Objective,
    pub quantum_bits: u64,
    pub fifo_first: bool,
    pub relay_unit_bytes: usize,
    pub hello_interval_s: f64,
    pub dead_after: u32,
    pub multipath_timeout_s: f64,
    /// How often sites turn their demand estimates into generation requests.
    pub demand_interval_s: f64,
    /// Estimated rates are scaled by this before being requested.
    pub demand_headroom: f64,
    pub estimated_demands: bool,
}

impl Default for QnlSpec {
    fn default() -> Self {
        QnlSpec {
            epsilon: 0.05,
            objective: Objective::MaxConcurrent,
            quantum_bits: 8192,
            fifo_first: true,
            relay_unit_bytes: 64,
            hello_interval_s: 1.0,
            dead_after: 3,
            multipath_timeout_s: 5.0,
            demand_interval_s: 5.0,
            demand_headroom: 1.25,
            estimated_demands: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmsSpec {
    pub pool_capacity_bytes: u64,
    pub negotiation_timeout_s: f64,
    pub max_attempts: u32,
    pub blocked_timeout_s: f64,
    pub token_ttl_s: f64,
    pub intersite_refresh_s: f64,
    pub demand_prior_bps: f64,
    /// Extra delay of a selection packet that travels host to host.
    pub host_delay_s: f64,
    /// A blocked request triggers an on-demand generation of the shortfall.
    pub on_demand: bool,
    pub bootstrap_secret: u64,
}

impl Default for KmsSpec {
    fn default() -> Self {
        KmsSpec {
            pool_capacity_bytes: 1 << 20,
            negotiation_timeout_s: 2.0,
            max_attempts: 6,
            blocked_timeout_s: 30.0,
            token_ttl_s: 10.0,
            intersite_refresh_s: 0.0,
            demand_prior_bps: 256.0,
            host_delay_s: 0.01,
            on_demand: true,
            bootstrap_secret: 0,
        }
    }
}

mod defaults {
    use super::*;

    pub fn version() -> u32 {
        SCENARIO_VERSION
    }
    pub fn sample_interval() -> f64 {
        1.0
    }
    pub fn tick() -> f64 {
        0.1
    }
    pub fn mode() -> NegotiationMode {
        NegotiationMode::Direct
    }
    pub fn conventional() -> Vec<ChannelSpec> {
        vec![ChannelSpec::new(0.005)]
    }
    pub fn data() -> Vec<ChannelSpec> {
        vec![ChannelSpec::new(0.002)]
    }
    pub fn yes() -> bool {
        true
    }
    pub fn key_length() -> u64 {
        32
    }
    pub fn session() -> f64 {
        30.0
    }
    pub fn one() -> u32 {
        1
    }
}

/// One problem, located by a JSON pointer into the scenario document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationError {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() {
            "/"
        } else {
            &self.pointer
        };
        write!(f, "{at}: {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("scenario invalid ({} problem(s)): {}", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    Invalid(Vec<ValidationError>),
}

impl ScenarioError {
    pub fn problems(&self) -> &[ValidationError] {
        match self {
            ScenarioError::Invalid(v) => v,
            ScenarioError::Io(_) => &[],
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            ScenarioError::Invalid(vec![ValidationError {
                pointer: pointer_of(e.path()),
                message: e.inner().to_string(),
            }])
        })?;
        let problems = scenario.validate();
        if problems.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.sites.iter().map(|s| s.id).collect()
    }

    pub fn hosts_at(&self, site: SiteId) -> Vec<HostId> {
        self.hosts
            .iter()
            .filter(|h| h.site == site)
            .map(|h| h.id)
            .collect()
    }

    pub fn site_of(&self, host: HostId) -> Option<SiteId> {
        self.hosts.iter().find(|h| h.id == host).map(|h| h.site)
    }

    /// Every link capacity multiplied by `factor`.
    pub fn scale_capacity(&mut self, factor: f64) {
        for l in &mut self.quantum_links {
            l.max_rate_bps *= factor;
            if let Some(r) = &mut l.current_rate_bps {
                *r *= factor;
            }
        }
    }

    /// Semantic checks beyond the document shape.
    pub fn validate(&self) -> Vec<ValidationError> {
        let mut errs = Vec::new();
        let mut err =
            |pointer: String, message: String| errs.push(ValidationError { pointer, message });
        let positive = |x: f64| x.is_finite() && x > 0.0;

        if self.version != SCENARIO_VERSION {
            err(
                "/version".into(),
                format!(
                    "unsupported version {}, expected {SCENARIO_VERSION}",
                    self.version
                ),
            );
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            err("/duration_s".into(), "must be a non-negative number".into());
        }
        if !positive(self.sample_interval_s) {
            err("/sample_interval_s".into(), "must be positive".into());
        }
        if !positive(self.tick_s) {
            err("/tick_s".into(), "must be positive".into());
        }

        let mut sites = BTreeSet::new();
        if self.sites.is_empty() {
            err("/sites".into(), "at least one site is required".into());
        }
        for (i, s) in self.sites.iter().enumerate() {
            if s.id.0 == 0 || s.id.0 > 99 {
                err(
                    format!("/sites/{i}/id"),
                    "site ids must be in 1..=99".into(),
                );
            }
            if !sites.insert(s.id) {
                err(
                    format!("/sites/{i}/id"),
                    format!("duplicate site id {}", s.id.0),
                );
            }
        }
        let mut hosts = BTreeSet::new();
        for (i, h) in self.hosts.iter().enumerate() {
            if !hosts.insert(h.id) {
                err(
                    format!("/hosts/{i}/id"),
                    format!("duplicate host id {}", h.id.0),
                );
            }
            if !sites.contains(&h.site) {
                err(
                    format!("/hosts/{i}/site"),
                    format!("unknown site {}", h.site.0),
                );
            }
        }

        let mut links = BTreeSet::new();
        for (i, l) in self.quantum_links.iter().enumerate() {
            let p = format!("/quantum_links/{i}");
            for (k, e) in l.endpoints.iter().enumerate() {
                if !sites.contains(e) {
                    err(
                        format!("{p}/endpoints/{k}"),
                        format!("unknown site {}", e.0),
                    );
                }
            }
            if l.endpoints[0] == l.endpoints[1] {
                err(
                    format!("{p}/endpoints"),
                    "a link needs two distinct sites".into(),
                );
            }
            if !links.insert(LinkId::new(l.endpoints[0], l.endpoints[1])) {
                err(format!("{p}/endpoints"), "duplicate link".into());
            }
            if !positive(l.max_rate_bps) {
                err(format!("{p}/max_rate_bps"), "rate must be positive".into());
            }
            if let Some(r) = l.current_rate_bps {
                if !(r.is_finite() && r >= 0.0 && r <= l.max_rate_bps) {
                    err(
                        format!("{p}/current_rate_bps"),
                        "must lie in [0, max_rate_bps]".into(),
                    );
                }
            }
            let mut prev_end = f64::NEG_INFINITY;
            for (k, [s, e]) in l.availability_windows.iter().enumerate() {
                if !(s.is_finite() && e.is_finite() && s < e && *s >= prev_end) {
                    err(
                        format!("{p}/availability_windows/{k}"),
                        "windows must be ordered, non-overlapping and non-empty".into(),
                    );
                }
                prev_end = *e;
            }
            for (k, f) in l.failures.iter().enumerate() {
                if !f.at_s.is_finite()
                    || f.at_s < 0.0
                    || f.restore_at_s.is_some_and(|r| r.is_nan() || r <= f.at_s)
                {
                    err(
                        format!("{p}/failures/{k}"),
                        "failure times must be non-negative with restore after failure".into(),
                    );
                }
            }
        }

        for (name, chans) in [
            ("conventional_channels", &self.conventional_channels),
            ("data_channels", &self.data_channels),
        ] {
            if !chans.iter().any(|c| c.between.is_none()) {
                err(
                    format!("/{name}"),
                    "a default entry without `between` is required".into(),
                );
            }
            for (i, c) in chans.iter().enumerate() {
                let p = format!("/{name}/{i}");
                if !positive(c.latency_s) {
                    err(format!("{p}/latency_s"), "latency must be positive".into());
                }
                if !(c.jitter_s.is_finite() && c.jitter_s >= 0.0) {
                    err(format!("{p}/jitter_s"), "must be non-negative".into());
                }
                if !(0.0..=1.0).contains(&c.drop) {
                    err(format!("{p}/drop"), "must lie in [0, 1]".into());
                }
                for (k, s) in c.between.iter().flatten().enumerate() {
                    if !sites.contains(s) {
                        err(format!("{p}/between/{k}"), format!("unknown site {}", s.0));
                    }
                }
            }
        }

        for (i, pol) in self.policies.iter().enumerate() {
            let p = format!("/policies/{i}");
            if pol.class > 5 {
                err(format!("{p}/class"), "class must be 0..=5".into());
            }
            if pol.min_key_length_bytes == 0 {
                err(
                    format!("{p}/min_key_length_bytes"),
                    "must be positive".into(),
                );
            }
            if !positive(pol.max_lifetime_s) {
                err(format!("{p}/max_lifetime_s"), "must be positive".into());
            }
            if pol.refresh_interval_s.is_some_and(|r| !positive(r)) {
                err(format!("{p}/refresh_interval_s"), "must be positive".into());
            }
            for (field, set) in [
                ("src_hosts", &pol.allowed_peers.src_hosts),
                ("dst_hosts", &pol.allowed_peers.dst_hosts),
            ] {
                for (k, h) in set.iter().flatten().enumerate() {
                    if !hosts.contains(h) {
                        err(
                            format!("{p}/allowed_peers/{field}/{k}"),
                            format!("unknown host {}", h.0),
                        );
                    }
                }
            }
        }

        for (i, w) in self.workloads.iter().enumerate() {
            let p = format!("/workloads/{i}");
            for (field, set) in [("hosts", &w.hosts), ("remote_hosts", &w.remote_hosts)] {
                for (k, h) in set.iter().enumerate() {
                    if !hosts.contains(h) {
                        err(format!("{p}/{field}/{k}"), format!("unknown host {}", h.0));
                    }
                }
            }
            if self.hosts.is_empty() {
                err(p.clone(), "workloads need hosts".into());
            }
            match &w.arrival {
                Arrival::Poisson { rate_per_s } if !positive(*rate_per_s) => err(
                    format!("{p}/arrival/rate_per_s"),
                    "rate must be positive".into(),
                ),
                Arrival::Schedule { times_s } => {
                    for (k, t) in times_s.iter().enumerate() {
                        if !(t.is_finite() && *t >= 0.0) {
                            err(
                                format!("{p}/arrival/times_s/{k}"),
                                "must be non-negative".into(),
                            );
                        }
                    }
                }
                _ => {}
            }
            if w.key_length_bytes == 0 {
                err(format!("{p}/key_length_bytes"), "must be positive".into());
            }
            if !positive(w.session_duration_s) {
                err(format!("{p}/session_duration_s"), "must be positive".into());
            }
            if w.lifetime_s.is_some_and(|l| !positive(l)) {
                err(format!("{p}/lifetime_s"), "must be positive".into());
            }
            if let Some([lo, hi]) = w.payload_bytes {
                if lo == 0 || lo > hi {
                    err(format!("{p}/payload_bytes"), "need 0 < min <= max".into());
                }
            }
        }

        for (i, d) in self.static_demands.iter().enumerate() {
            let p = format!("/static_demands/{i}");
            for (field, s) in [("src", d.src), ("dst", d.dst)] {
                if !sites.contains(&s) {
                    err(format!("{p}/{field}"), format!("unknown site {}", s.0));
                }
            }
            if d.src == d.dst {
                err(
                    format!("{p}/dst"),
                    "source and destination must differ".into(),
                );
            }
            if !positive(d.rate_bps) {
                err(format!("{p}/rate_bps"), "rate must be positive".into());
            }
            if d.path_count == 0 {
                err(format!("{p}/path_count"), "must be at least 1".into());
            }
        }

        let q = &self.qnl;
        if !(q.epsilon > 0.0 && q.epsilon < 1.0) {
            err("/qnl/epsilon".into(), "must lie in (0, 1)".into());
        }
        if q.quantum_bits < 8 {
            err("/qnl/quantum_bits".into(), "must be at least 8".into());
        }
        if q.relay_unit_bytes == 0 {
            err("/qnl/relay_unit_bytes".into(), "must be positive".into());
        }
        for (field, v) in [
            ("hello_interval_s", q.hello_interval_s),
            ("multipath_timeout_s", q.multipath_timeout_s),
            ("demand_interval_s", q.demand_interval_s),
            ("demand_headroom", q.demand_headroom),
        ] {
            if !positive(v) {
                err(format!("/qnl/{field}"), "must be positive".into());
            }
        }
        if q.dead_after == 0 {
            err("/qnl/dead_after".into(), "must be at least 1".into());
        }
        let k = &self.kms;
        if k.pool_capacity_bytes == 0 {
            err("/kms/pool_capacity_bytes".into(), "must be positive".into());
        }
        if k.max_attempts == 0 {
            err("/kms/max_attempts".into(), "must be at least 1".into());
        }
        for (field, v) in [
            ("negotiation_timeout_s", k.negotiation_timeout_s),
            ("blocked_timeout_s", k.blocked_timeout_s),
            ("token_ttl_s", k.token_ttl_s),
            ("host_delay_s", k.host_delay_s),
        ] {
            if !positive(v) {
                err(format!("/kms/{field}"), "must be positive".into());
            }
        }
        for (field, v) in [
            ("intersite_refresh_s", k.intersite_refresh_s),
            ("demand_prior_bps", k.demand_prior_bps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                err(format!("/kms/{field}"), "must be non-negative".into());
            }
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "duration_s": 10,
        "sites": [{"id": 1}, {"id": 2}],
        "hosts": [{"id": 1, "site": 1}, {"id": 2, "site": 2}],
        "quantum_links": [{"endpoints": [1, 2], "max_rate_bps": 8000}]
    }"#;

    #[test]
    fn minimal_file_is_valid() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.tick_s, 0.1);
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_site_is_named_with_pointer() {
        let text = MINIMAL.replace(r#"{"id": 2, "site": 2}"#, r#"{"id": 2, "site": 7}"#);
        let e = Scenario::from_json(&text).unwrap_err();
        assert_eq!(e.problems()[0].pointer, "/hosts/1/site");
        assert!(e.problems()[0].message.contains("unknown site 7"));
    }

    #[test]
    fn negative_rate_is_named() {
        let text = MINIMAL.replace("8000", "-5");
        let e = Scenario::from_json(&text).unwrap_err();
        assert_eq!(e.problems()[0].pointer, "/quantum_links/0/max_rate_bps");
    }

    #[test]
    fn shape_errors_carry_a_pointer() {
        let text = MINIMAL.replace(r#""max_rate_bps": 8000"#, r#""max_rate_bps": "fast""#);
        let e = Scenario::from_json(&text).unwrap_err();
        assert_eq!(e.problems()[0].pointer, "/quantum_links/0/max_rate_bps");
    }
}
