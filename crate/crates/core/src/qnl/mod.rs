//! QKD network layer: demand flooding, link-state routing, flow
//! optimisation and per-link scheduling (control plane), and hop-by-hop key
//! relay over trusted nodes (data plane).

pub mod control;
pub mod dataplane;
pub mod hello;
pub mod kgm;
pub mod lp;
pub mod mcfp;
pub mod relay;
pub mod routing;
pub mod schedule;
pub mod topology;
