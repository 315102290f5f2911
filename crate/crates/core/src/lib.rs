//! Multi-site QKD key-management stack: mirrored key pools, a key
//! management service, the key-generation network layer (control and data
//! planes) and a simulated quantum link layer.

pub mod ids;
pub mod keypool;
pub mod kms;
pub mod qnl;
