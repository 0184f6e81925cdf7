//! Distributed congestion control: CBR/CR measurement, the CR-limit table
//! and the MCS 7 <-> 11 adaptation policy with PSD-matched transmit power.

use serde::{Deserialize, Serialize};

use crate::grid::{allocation_shape, ChannelConfig, GridError, McsEntry};
use crate::mac::{Grant, SensingWindow};
use crate::phy::tx_power_for_rbs;

/// CBR is measured over the last 100 subframes.
pub const CBR_WINDOW_SUBFRAMES: u64 = 100;
/// CR covers 1000 subframes, split half past and half future.
pub const CR_PAST_SUBFRAMES: u64 = 500;
pub const CR_FUTURE_SUBFRAMES: u64 = 500;

/// MCS used when no congestion is detected.
pub const DEFAULT_MCS: u8 = 7;
/// MCS used while the CR limit is exceeded.
pub const CONGESTED_MCS: u8 = 11;

/// CR limits per CBR range. The upper bounds are right-closed: a CBR equal
/// to a bound belongs to the row below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DccTable {
    /// No limit applies at or below this CBR.
    pub unlimited_below: f64,
    /// (upper CBR bound, CR limit) rows in ascending bound order.
    pub rows: Vec<(f64, f64)>,
}

impl Default for DccTable {
    fn default() -> Self {
        Self {
            unlimited_below: 0.3,
            rows: vec![(0.65, 0.03), (0.8, 0.06), (1.0, 0.003)],
        }
    }
}

impl DccTable {
    /// CR limit for a measured CBR; None means unlimited.
    pub fn cr_limit(&self, cbr: f64) -> Option<f64> {
        if cbr <= self.unlimited_below {
            return None;
        }
        for (bound, limit) in &self.rows {
            if cbr <= *bound {
                return Some(*limit);
            }
        }
        self.rows.last().map(|(_, limit)| *limit)
    }
}

/// Ratio of subchannel-subframe cells whose RSSI exceeded the threshold over
/// the last 100 sensed subframes (or the span available at startup).
pub fn measure_cbr(sensing: &SensingWindow, rssi_threshold_dbm: f64) -> f64 {
    let recorded = sensing.recorded_range();
    let span = (recorded.end - recorded.start).min(CBR_WINDOW_SUBFRAMES);
    if span == 0 {
        return 0.0;
    }
    let nsc = sensing.num_subchannels();
    let mut busy = 0u64;
    for s in recorded.end - span..recorded.end {
        for sc in 0..nsc {
            if let Some(rssi) = sensing.rssi_dbm(s, sc) {
                if rssi > rssi_threshold_dbm {
                    busy += 1;
                }
            }
        }
    }
    busy as f64 / (span * nsc as u64) as f64
}

/// This vehicle's own subchannel usage, recorded per transmission.
#[derive(Debug, Clone, Default)]
pub struct CrTracker {
    events: Vec<(u64, usize)>,
}

impl CrTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_tx(&mut self, subframe: u64, n_subchannels: usize) {
        self.events.push((subframe, n_subchannels));
    }

    /// Subchannels used in [now - 500, now); drops older events.
    pub fn used_in_past(&mut self, now: u64) -> usize {
        let start = now.saturating_sub(CR_PAST_SUBFRAMES);
        self.events.retain(|(sf, _)| *sf >= start);
        self.events
            .iter()
            .filter(|(sf, _)| *sf < now)
            .map(|(_, n)| n)
            .sum()
    }
}

/// Subchannels the active grant reserves in (now, now + 500].
fn reserved_in_future(grant: Option<&Grant>, now: u64) -> usize {
    let Some(grant) = grant else { return 0 };
    let mut occ = grant.next_tx_subframe.max(now + 1);
    // Align to the grant's periodic pattern.
    if occ > grant.next_tx_subframe {
        let delta = occ - grant.next_tx_subframe;
        let steps = delta.div_ceil(grant.rri_ms as u64);
        occ = grant.next_tx_subframe + steps * grant.rri_ms as u64;
    }
    let mut count = 0;
    while occ <= now + CR_FUTURE_SUBFRAMES {
        count += grant.n_subchannels;
        occ += grant.rri_ms as u64;
    }
    count
}

/// Channel occupancy ratio: own used plus reserved subchannels over all
/// subchannels of the 1-second window.
pub fn measure_cr(
    tracker: &mut CrTracker,
    grant: Option<&Grant>,
    now: u64,
    num_subchannels: usize,
) -> f64 {
    let used = tracker.used_in_past(now);
    let reserved = reserved_in_future(grant, now);
    (used + reserved) as f64
        / ((CR_PAST_SUBFRAMES + CR_FUTURE_SUBFRAMES) * num_subchannels as u64) as f64
}

/// Occupancy of the vehicle's own transmission opportunities: the same
/// used-plus-reserved count normalized by the subchannels available at its
/// periodic grant positions rather than the whole grid. This is the ratio
/// the congestion-control trigger compares against the CR limit, so that an
/// active 10 Hz reservation registers as significant occupancy.
pub fn measure_occupancy(
    tracker: &mut CrTracker,
    grant: Option<&Grant>,
    now: u64,
    num_subchannels: usize,
    rri_ms: u32,
) -> f64 {
    let used = tracker.used_in_past(now);
    let reserved = reserved_in_future(grant, now);
    let opportunities = ((CR_PAST_SUBFRAMES + CR_FUTURE_SUBFRAMES) / rri_ms as u64)
        * num_subchannels as u64;
    if opportunities == 0 {
        return 0.0;
    }
    ((used + reserved) as f64 / opportunities as f64).min(1.0)
}

/// Pure adaptation decision: MCS 11 while the ratio exceeds the CR limit for
/// the measured CBR, MCS 7 otherwise, with transmit power recomputed so the
/// PSD meets the limit for the new RB footprint.
pub fn adapt(
    cbr: f64,
    cr: f64,
    table: &DccTable,
    payload_bytes: usize,
    cfg: &ChannelConfig,
    psd_limit_dbm_mhz: f64,
) -> Result<(McsEntry, f64), GridError> {
    let congested = match table.cr_limit(cbr) {
        Some(limit) => cr > limit,
        None => false,
    };
    let i_mcs = if congested { CONGESTED_MCS } else { DEFAULT_MCS };
    let mcs = McsEntry::new(i_mcs)?;
    let (_, n_rbs_total) = allocation_shape(mcs, payload_bytes, cfg)?;
    Ok((mcs, tx_power_for_rbs(n_rbs_total, psd_limit_dbm_mhz)))
}

/// Per-vehicle congestion-control state: the latest measurements and the
/// currently selected (MCS, tx power) pair.
#[derive(Debug, Clone)]
pub struct DccState {
    pub cbr: f64,
    pub cr: f64,
    pub occupancy: f64,
    pub current_mcs: McsEntry,
    pub current_tx_power_dbm: f64,
    pub tracker: CrTracker,
}

impl DccState {
    pub fn new(
        initial_mcs: u8,
        payload_bytes: usize,
        cfg: &ChannelConfig,
        psd_limit_dbm_mhz: f64,
    ) -> Result<Self, GridError> {
        let mcs = McsEntry::new(initial_mcs)?;
        let (_, n_rbs_total) = allocation_shape(mcs, payload_bytes, cfg)?;
        Ok(Self {
            cbr: 0.0,
            cr: 0.0,
            occupancy: 0.0,
            current_mcs: mcs,
            current_tx_power_dbm: tx_power_for_rbs(n_rbs_total, psd_limit_dbm_mhz),
            tracker: CrTracker::new(),
        })
    }

    /// Refresh measurements at an epoch boundary.
    pub fn measure(
        &mut self,
        sensing: &SensingWindow,
        grant: Option<&Grant>,
        now: u64,
        rssi_threshold_dbm: f64,
        rri_ms: u32,
    ) {
        let nsc = sensing.num_subchannels();
        self.cbr = measure_cbr(sensing, rssi_threshold_dbm);
        self.cr = measure_cr(&mut self.tracker, grant, now, nsc);
        self.occupancy = measure_occupancy(&mut self.tracker, grant, now, nsc, rri_ms);
    }

    /// Apply the adaptation policy to the latest measurements.
    pub fn adapt(
        &mut self,
        table: &DccTable,
        payload_bytes: usize,
        cfg: &ChannelConfig,
        psd_limit_dbm_mhz: f64,
    ) -> Result<(), GridError> {
        let (mcs, power) = adapt(
            self.cbr,
            self.occupancy,
            table,
            payload_bytes,
            cfg,
            psd_limit_dbm_mhz,
        )?;
        self.current_mcs = mcs;
        self.current_tx_power_dbm = power;
        Ok(())
    }
}
