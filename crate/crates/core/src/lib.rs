//! Deterministic desk-scale simulator of the C-V2X Mode 4 sidelink.
//!
//! The crate models the sidelink resource grid and its channelization rules,
//! Sensing-Based Semi-Persistent Scheduling with the two-stage RSRP/RSSI CSR
//! filtering, MCS-dependent RB occupancy with PSD-capped transmit power, and
//! the CBR/CR-driven congestion-control policy that alternates between MCS 7
//! and MCS 11 during ongoing reservations.
//!
//! Modules:
//! - [`grid`]: channelization legality, MCS/TBS tables, packet footprints.
//! - [`phy`]: pathloss, shadowing, RSRP/RSSI/SINR and decode thresholds.
//! - [`mac`]: sensing window, grants and the CSR selection pipeline.
//! - [`dcc`]: CBR/CR measurement, CR limits and MCS adaptation.
//! - [`sim`]: highway topology and the subframe-stepped event loop.
//! - [`metrics`]: outcome classification and result-file export.
//!
//! Every run is fully determined by its `(config, seed)` pair.

pub mod dcc;
pub mod grid;
pub mod mac;
pub mod metrics;
pub mod phy;
pub mod sim;

pub use grid::{Allocation, Bandwidth, ChannelConfig, McsEntry};
pub use mac::{Grant, SensingWindow};
pub use metrics::RunMetrics;
pub use phy::RadioConfig;
pub use sim::{run, McsMode, ScenarioConfig, World};
