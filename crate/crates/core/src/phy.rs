//! Radio model: WINNER+ B1 LOS pathloss with lognormal shadowing,
//! PSD-constrained transmit power and the per-subchannel RSRP/RSSI/SINR
//! accounting that respects partial RB occupation.
//!
//! All functions are pure; the shadowing engine is an explicitly seeded RNG
//! owned by the caller.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{overlap, Allocation, ChannelConfig, McsEntry, RB_BANDWIDTH_MHZ, SUBCARRIERS_PER_RB};

/// Thermal noise density in dBm/Hz.
pub const THERMAL_NOISE_DBM_HZ: f64 = -174.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("no SINR threshold configured for MCS {0}")]
    MissingThreshold(u8),
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Propagation constants for the two-slope WINNER+ B1 LOS model.
/// Defaults follow the published deliverable with 1.5 m antennas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathlossModel {
    /// Antenna height of both ends in metres.
    pub antenna_height_m: f64,
    /// Slope before the breakpoint.
    pub near_slope: f64,
    /// Intercept before the breakpoint (at 1 m, plus 20 log10(f_GHz)).
    pub near_intercept: f64,
    /// Slope beyond the breakpoint.
    pub far_slope: f64,
    /// Frequency-independent part of the far intercept.
    pub far_intercept: f64,
}

impl Default for PathlossModel {
    fn default() -> Self {
        Self {
            antenna_height_m: 1.5,
            near_slope: 22.7,
            near_intercept: 27.0,
            far_slope: 40.0,
            far_intercept: 7.56,
        }
    }
}

impl PathlossModel {
    /// Breakpoint distance: 4 h' h' f / c with effective heights h - 1 m.
    pub fn breakpoint_m(&self, carrier_ghz: f64) -> f64 {
        let h_eff = self.antenna_height_m - 1.0;
        4.0 * h_eff * h_eff * carrier_ghz * 1e9 / 299_792_458.0
    }

    pub fn pathloss_db(&self, distance_m: f64, carrier_ghz: f64) -> f64 {
        let d = distance_m.max(1.0);
        let bp = self.breakpoint_m(carrier_ghz);
        if d <= bp {
            self.near_slope * d.log10() + self.near_intercept + 20.0 * carrier_ghz.log10()
        } else {
            let h_eff = self.antenna_height_m - 1.0;
            self.far_slope * d.log10() + self.far_intercept
                - 17.3 * h_eff.log10()
                - 17.3 * h_eff.log10()
                + 2.7 * carrier_ghz.log10()
        }
    }
}

/// Radio parameters of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub carrier_ghz: f64,
    /// Transmit PSD cap in dBm/MHz.
    pub psd_limit_dbm_mhz: f64,
    pub noise_figure_db: f64,
    pub shadow_sigma_los_db: f64,
    /// Omnidirectional vehicle antenna gain, applied at both link ends
    /// (3 dBi in the V2V evaluation profile).
    pub antenna_gain_dbi: f64,
    /// Minimum usable receive power; consumed by the loss classifier.
    pub rx_sensitivity_dbm: f64,
    /// Decode thresholds in dB, keyed by MCS index.
    #[serde(with = "mcs_keyed_map")]
    pub sinr_thresholds_db: BTreeMap<u8, f64>,
    pub pathloss: PathlossModel,
}

/// TOML map keys are strings; bridge them to MCS indexes.
mod mcs_keyed_map {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<u8, f64>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        let by_name: BTreeMap<String, f64> =
            map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        by_name.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<BTreeMap<u8, f64>, D::Error> {
        let by_name = BTreeMap::<String, f64>::deserialize(deserializer)?;
        by_name
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u8>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("invalid MCS index '{k}'")))
            })
            .collect()
    }
}

impl Default for RadioConfig {
    fn default() -> Self {
        let mut thresholds = BTreeMap::new();
        thresholds.insert(0, 2.5);
        thresholds.insert(7, 5.5);
        thresholds.insert(11, 8.5);
        let noise_figure_db = 9.0;
        // One 10-RB subchannel plus the SCI threshold.
        let rx_sensitivity_dbm =
            noise_floor_dbm(10, noise_figure_db) + thresholds[&0];
        Self {
            carrier_ghz: 5.9,
            psd_limit_dbm_mhz: 23.0,
            noise_figure_db,
            shadow_sigma_los_db: 3.0,
            antenna_gain_dbi: 3.0,
            rx_sensitivity_dbm,
            sinr_thresholds_db: thresholds,
            pathloss: PathlossModel::default(),
        }
    }
}

impl RadioConfig {
    pub fn threshold_db(&self, i_mcs: u8) -> Result<f64, PhyError> {
        self.sinr_thresholds_db
            .get(&i_mcs)
            .copied()
            .ok_or(PhyError::MissingThreshold(i_mcs))
    }

    pub fn noise_floor_dbm(&self, n_rbs: usize) -> f64 {
        noise_floor_dbm(n_rbs, self.noise_figure_db)
    }

    pub fn pathloss_db(&self, distance_m: f64) -> f64 {
        self.pathloss.pathloss_db(distance_m, self.carrier_ghz)
    }

    /// Combined transmit and receive antenna gain of one link.
    pub fn link_gain_db(&self) -> f64 {
        2.0 * self.antenna_gain_dbi
    }
}

/// Thermal noise over `n_rbs` resource blocks.
pub fn noise_floor_dbm(n_rbs: usize, noise_figure_db: f64) -> f64 {
    THERMAL_NOISE_DBM_HZ + 10.0 * (n_rbs as f64 * RB_BANDWIDTH_MHZ * 1e6).log10() + noise_figure_db
}

/// Total transmit power whose PSD exactly meets the limit for the given
/// occupied bandwidth.
pub fn tx_power_for_rbs(n_rbs_total: usize, psd_limit_dbm_mhz: f64) -> f64 {
    assert!(n_rbs_total >= 1);
    psd_limit_dbm_mhz + 10.0 * (n_rbs_total as f64 * RB_BANDWIDTH_MHZ).log10()
}

/// PSD of a transmission in dBm/MHz.
pub fn psd_dbm_mhz(tx_power_dbm: f64, n_rbs_total: usize) -> f64 {
    tx_power_dbm - 10.0 * (n_rbs_total as f64 * RB_BANDWIDTH_MHZ).log10()
}

/// Zero-mean lognormal shadowing draw in dB.
pub fn shadowing_sample<R: Rng + ?Sized>(rng: &mut R, sigma_db: f64) -> f64 {
    if sigma_db == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma_db)
        .expect("sigma must be finite and non-negative")
        .sample(rng)
}

/// Average per-RE power of a transmission spread uniformly over its RBs.
pub fn rsrp_per_re(rx_power_dbm: f64, n_rbs_total: usize) -> f64 {
    assert!(n_rbs_total >= 1);
    rx_power_dbm - 10.0 * (n_rbs_total as f64 * SUBCARRIERS_PER_RB as f64).log10()
}

/// Linear-domain sum of per-subchannel power contributions plus noise.
pub fn subchannel_rssi(contributions_dbm: &[f64], noise_dbm: f64) -> f64 {
    let sum_mw = contributions_dbm
        .iter()
        .fold(dbm_to_mw(noise_dbm), |acc, c| acc + dbm_to_mw(*c));
    mw_to_dbm(sum_mw)
}

pub fn sinr_db(signal_dbm: f64, interference_plus_noise_dbm: f64) -> f64 {
    signal_dbm - interference_plus_noise_dbm
}

/// TB decode: threshold test at the transmission's MCS.
pub fn decode_tb(sinr: f64, mcs: McsEntry, cfg: &RadioConfig) -> Result<bool, PhyError> {
    Ok(sinr.is_finite() && sinr >= cfg.threshold_db(mcs.i_mcs)?)
}

/// SCI decode: threshold test at MCS 0. A failed SCI discards the paired TB.
pub fn decode_sci(sinr: f64, cfg: &RadioConfig) -> Result<bool, PhyError> {
    decode_tb(sinr, McsEntry::sci(), cfg)
}

/// Power a transmission deposits in subchannel `s` at a receiver, assuming
/// uniform PSD across its occupied RBs.
pub fn power_in_subchannel_dbm(
    rx_power_dbm: f64,
    alloc: &Allocation,
    s: usize,
    cfg: &ChannelConfig,
) -> Option<f64> {
    let k = alloc.rbs_in_subchannel(s, cfg);
    if k == 0 {
        return None;
    }
    Some(rx_power_dbm + 10.0 * (k as f64 / alloc.n_rbs_total as f64).log10())
}

/// Per-RE RSRP recorded for subchannel `s`: the deposited power averaged over
/// the subchannel's full RE grid, so partially-occupied subchannels measure
/// lower than fully-occupied ones.
pub fn subchannel_rsrp_dbm(
    rx_power_dbm: f64,
    alloc: &Allocation,
    s: usize,
    cfg: &ChannelConfig,
) -> Option<f64> {
    let deposited = power_in_subchannel_dbm(rx_power_dbm, alloc, s, cfg)?;
    Some(deposited - 10.0 * (cfg.subchannel_size_rb as f64 * SUBCARRIERS_PER_RB as f64).log10())
}

/// Interference an interferer contributes onto a victim RB range.
pub fn interference_on_rbs_mw(
    interferer_rx_dbm: f64,
    interferer: &Allocation,
    victim_rbs: std::ops::Range<usize>,
    cfg: &ChannelConfig,
) -> f64 {
    let k = overlap(interferer.rb_range(cfg), victim_rbs);
    if k == 0 {
        return 0.0;
    }
    dbm_to_mw(interferer_rx_dbm) * k as f64 / interferer.n_rbs_total as f64
}

/// One sensed cell of the resource grid at a receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubchannelSample {
    pub subframe: u64,
    pub subchannel: usize,
    pub rssi_dbm: f64,
    pub latest_rsrp_dbm: Option<f64>,
    pub occupied_rbs: usize,
}
