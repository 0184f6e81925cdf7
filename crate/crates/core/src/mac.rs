//! Sensing-Based Semi-Persistent Scheduling: sensing-window bookkeeping,
//! grant lifecycle (RRC countdown and keep probability) and the CSR pipeline
//! of enumeration, reservation/unsensed exclusion, the 3-dB RSRP threshold
//! loop and the lowest-RSSI shortlist.
//!
//! State is per vehicle; all cross-vehicle coupling flows through the
//! channel model.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::grid::ChannelConfig;
use crate::phy::{dbm_to_mw, mw_to_dbm, SubchannelSample};

/// Reselection intervals accepted by the scheduler, in milliseconds.
pub const SUPPORTED_RRIS: &[u32] = &[
    20, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000,
];

/// Length of the sensing history in subframes.
pub const SENSING_WINDOW_SUBFRAMES: usize = 1000;

/// Selection windows are capped at this many subframes.
pub const SELECTION_WINDOW_CAP: u64 = 100;

/// Fraction of the enumerated CSRs that must survive filtering and that the
/// RSSI ranking returns.
pub const CSR_QUOTA_FRACTION: f64 = 0.2;

/// Step applied to the RSRP threshold while too few CSRs survive.
pub const RSRP_STEP_DB: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum MacError {
    #[error("unsupported resource reselection interval {0} ms")]
    UnsupportedRri(u32),
    #[error("candidate needs {needed} subchannels but the pool has {available}")]
    TooManySubchannels { needed: usize, available: usize },
    #[error("keep probability {0} outside [0, 0.8]")]
    InvalidKeepProbability(f64),
    #[error("no candidate resources available")]
    EmptyShortlist,
}

/// A reservation learned from a decoded SCI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SciReservation {
    pub origin: u64,
    pub rri_ms: u32,
    pub first_subchannel: usize,
    pub n_subchannels: usize,
}

impl SciReservation {
    pub fn subchannel_range(&self) -> Range<usize> {
        self.first_subchannel..self.first_subchannel + self.n_subchannels
    }
}

/// Wire form of the sidelink control message: everything a receiver needs to
/// decode the TB and to project the reservation forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SciRecord {
    pub origin: u64,
    pub rri_ms: u32,
    pub first_subchannel: u8,
    pub n_subchannels: u8,
    pub i_mcs: u8,
}

impl SciRecord {
    pub const ENCODED_LEN: usize = 15;

    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[..8].copy_from_slice(&self.origin.to_le_bytes());
        out[8..12].copy_from_slice(&self.rri_ms.to_le_bytes());
        out[12] = self.first_subchannel;
        out[13] = self.n_subchannels;
        out[14] = self.i_mcs;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return None;
        }
        Some(Self {
            origin: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            rri_ms: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            first_subchannel: bytes[12],
            n_subchannels: bytes[13],
            i_mcs: bytes[14],
        })
    }

    pub fn reservation(&self) -> SciReservation {
        SciReservation {
            origin: self.origin,
            rri_ms: self.rri_ms,
            first_subchannel: self.first_subchannel as usize,
            n_subchannels: self.n_subchannels as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    rssi_dbm: f64,
    latest_rsrp_dbm: Option<f64>,
}

#[derive(Debug, Clone)]
struct Row {
    own_tx: bool,
    cells: Vec<Cell>,
    reservations: Vec<SciReservation>,
}

/// Ring of the last `capacity` subframes of per-subchannel RSSI, latest RSRP
/// and decoded reservations, spanning [t - capacity, t) for current time t.
#[derive(Debug, Clone)]
pub struct SensingWindow {
    num_subchannels: usize,
    capacity: usize,
    noise_floor_dbm: f64,
    next_subframe: Option<u64>,
    recorded: u64,
    rows: Vec<Row>,
}

impl SensingWindow {
    pub fn new(num_subchannels: usize, noise_floor_dbm: f64) -> Self {
        Self::with_capacity(num_subchannels, SENSING_WINDOW_SUBFRAMES, noise_floor_dbm)
    }

    pub fn with_capacity(num_subchannels: usize, capacity: usize, noise_floor_dbm: f64) -> Self {
        assert!(capacity > 0 && num_subchannels > 0);
        let row = Row {
            own_tx: false,
            cells: vec![
                Cell {
                    rssi_dbm: noise_floor_dbm,
                    latest_rsrp_dbm: None,
                };
                num_subchannels
            ],
            reservations: Vec::new(),
        };
        Self {
            num_subchannels,
            capacity,
            noise_floor_dbm,
            next_subframe: None,
            recorded: 0,
            rows: vec![row; capacity],
        }
    }

    pub fn num_subchannels(&self) -> usize {
        self.num_subchannels
    }

    pub fn noise_floor_dbm(&self) -> f64 {
        self.noise_floor_dbm
    }

    /// Subframes currently queryable: the last `capacity` recorded ones.
    pub fn recorded_range(&self) -> Range<u64> {
        match self.next_subframe {
            None => 0..0,
            Some(next) => next - self.recorded.min(self.capacity as u64)..next,
        }
    }

    fn row(&self, subframe: u64) -> Option<&Row> {
        if !self.recorded_range().contains(&subframe) {
            return None;
        }
        Some(&self.rows[(subframe % self.capacity as u64) as usize])
    }

    fn next_row_mut(&mut self, subframe: u64) -> &mut Row {
        if let Some(next) = self.next_subframe {
            assert_eq!(subframe, next, "sensing rows must be recorded in order");
        }
        self.next_subframe = Some(subframe + 1);
        self.recorded += 1;
        &mut self.rows[(subframe % self.capacity as u64) as usize]
    }

    /// Record one sensed subframe: a sample per subchannel plus any decoded
    /// reservations.
    pub fn record_sensed(
        &mut self,
        subframe: u64,
        samples: &[SubchannelSample],
        reservations: &[SciReservation],
    ) {
        assert_eq!(samples.len(), self.num_subchannels);
        let row = self.next_row_mut(subframe);
        row.own_tx = false;
        for (cell, sample) in row.cells.iter_mut().zip(samples) {
            cell.rssi_dbm = sample.rssi_dbm;
            cell.latest_rsrp_dbm = sample.latest_rsrp_dbm;
        }
        row.reservations.clear();
        row.reservations.extend_from_slice(reservations);
    }

    /// Mark a subframe in which this vehicle transmitted: nothing was sensed.
    pub fn record_own_tx(&mut self, subframe: u64) {
        let row = self.next_row_mut(subframe);
        row.own_tx = true;
        row.reservations.clear();
    }

    pub fn is_own_tx(&self, subframe: u64) -> bool {
        self.row(subframe).is_some_and(|r| r.own_tx)
    }

    /// RSSI for a sensed cell; None when the subframe is unsensed or outside
    /// the window.
    pub fn rssi_dbm(&self, subframe: u64, subchannel: usize) -> Option<f64> {
        let row = self.row(subframe)?;
        if row.own_tx {
            return None;
        }
        Some(row.cells[subchannel].rssi_dbm)
    }

    pub fn latest_rsrp_dbm(&self, subframe: u64, subchannel: usize) -> Option<f64> {
        let row = self.row(subframe)?;
        if row.own_tx {
            return None;
        }
        row.cells[subchannel].latest_rsrp_dbm
    }

    pub fn reservations_at(&self, subframe: u64) -> &[SciReservation] {
        static EMPTY: [SciReservation; 0] = [];
        match self.row(subframe) {
            Some(row) if !row.own_tx => &row.reservations,
            _ => &EMPTY,
        }
    }
}

/// An SB-SPS reservation: the chosen CSR repeated every RRI until the RRC
/// runs out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grant {
    pub rri_ms: u32,
    pub rrc: u32,
    pub first_subchannel: usize,
    pub n_subchannels: usize,
    pub next_tx_subframe: u64,
    pub keep_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrantState {
    Active,
    Expired,
}

impl Grant {
    pub fn new<R: Rng + ?Sized>(
        rri_ms: u32,
        csr: &CsrCandidate,
        keep_probability: f64,
        rng: &mut R,
    ) -> Result<Self, MacError> {
        if !(0.0..=0.8).contains(&keep_probability) {
            return Err(MacError::InvalidKeepProbability(keep_probability));
        }
        let (lo, hi) = rrc_range(rri_ms)?;
        Ok(Self {
            rri_ms,
            rrc: rng.random_range(lo..=hi),
            first_subchannel: csr.first_subchannel,
            n_subchannels: csr.n_subchannels,
            next_tx_subframe: csr.subframe,
            keep_probability,
        })
    }

    pub fn is_due(&self, subframe: u64) -> bool {
        self.next_tx_subframe == subframe
    }

    /// Count down the RRC after a transmission; at zero, keep the same CSR
    /// with the configured probability or expire for full reselection.
    pub fn on_transmission<R: Rng + ?Sized>(&mut self, rng: &mut R) -> GrantState {
        assert!(self.rrc >= 1, "transmission without remaining RRC");
        self.rrc -= 1;
        self.next_tx_subframe += self.rri_ms as u64;
        if self.rrc > 0 {
            return GrantState::Active;
        }
        if self.keep_probability > 0.0 && rng.random::<f64>() < self.keep_probability {
            let (lo, hi) = rrc_range(self.rri_ms).expect("rri validated at construction");
            self.rrc = rng.random_range(lo..=hi);
            GrantState::Active
        } else {
            GrantState::Expired
        }
    }
}

/// RRC draw range for a given RRI: [5, 15] at 100 ms and above, scaled
/// inversely below so the reservation lives 0.5 s to 1.5 s.
pub fn rrc_range(rri_ms: u32) -> Result<(u32, u32), MacError> {
    if !SUPPORTED_RRIS.contains(&rri_ms) {
        return Err(MacError::UnsupportedRri(rri_ms));
    }
    if rri_ms >= 100 {
        Ok((5, 15))
    } else {
        Ok((500 / rri_ms, 1500 / rri_ms))
    }
}

/// Selection window (t, t + min(rri, 100)] as a half-open subframe range.
pub fn selection_window(t: u64, rri_ms: u32) -> Result<Range<u64>, MacError> {
    selection_window_with_offset(t, rri_ms, 0)
}

/// Selection window opening `t1_offset` subframes after the packet arrival,
/// for radios that model a processing delay.
pub fn selection_window_with_offset(
    t: u64,
    rri_ms: u32,
    t1_offset: u64,
) -> Result<Range<u64>, MacError> {
    if !SUPPORTED_RRIS.contains(&rri_ms) {
        return Err(MacError::UnsupportedRri(rri_ms));
    }
    let span = (rri_ms as u64).min(SELECTION_WINDOW_CAP);
    Ok(t + 1 + t1_offset..t + 1 + t1_offset + span)
}

/// A candidate (subframe, subchannel range) slot in the selection window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsrCandidate {
    pub subframe: u64,
    pub first_subchannel: usize,
    pub n_subchannels: usize,
    pub avg_rssi_dbm: f64,
    pub worst_rsrp_dbm: Option<f64>,
}

/// Every contiguous group of `n_subchannels` per subframe of the window, in
/// (subframe, subchannel) order.
pub fn enumerate_csrs(
    window: &Range<u64>,
    n_subchannels: usize,
    cfg: &ChannelConfig,
) -> Result<Vec<CsrCandidate>, MacError> {
    if n_subchannels > cfg.num_subchannels || n_subchannels == 0 {
        return Err(MacError::TooManySubchannels {
            needed: n_subchannels,
            available: cfg.num_subchannels,
        });
    }
    let positions = cfg.num_subchannels - n_subchannels + 1;
    let mut out = Vec::with_capacity((window.end - window.start) as usize * positions);
    for subframe in window.clone() {
        for first_subchannel in 0..positions {
            out.push(CsrCandidate {
                subframe,
                first_subchannel,
                n_subchannels,
                avg_rssi_dbm: f64::NAN,
                worst_rsrp_dbm: None,
            });
        }
    }
    Ok(out)
}

/// Drop CSRs that collide with reservations announced via decoded SCIs and
/// CSRs whose periodic sensing history contains own-transmission subframes
/// (a reservation could hide behind half-duplex blindness there).
pub fn filter_unsensed_and_reserved(
    csrs: Vec<CsrCandidate>,
    sensing: &SensingWindow,
    window: &Range<u64>,
    period_ms: u32,
) -> Vec<CsrCandidate> {
    let len = (window.end - window.start) as usize;
    let nsc = sensing.num_subchannels();
    let mut reserved = vec![false; len * nsc];
    let mut shadowed_subframe = vec![false; len];
    for s in sensing.recorded_range() {
        if sensing.is_own_tx(s) {
            let step = period_ms as u64;
            let mut occ = s + step;
            while occ < window.end {
                if occ >= window.start {
                    shadowed_subframe[(occ - window.start) as usize] = true;
                }
                occ += step;
            }
        } else {
            for resv in sensing.reservations_at(s) {
                // The SCI announces one next occurrence, rri subframes later.
                let occ = s + resv.rri_ms as u64;
                if window.contains(&occ) {
                    let off = (occ - window.start) as usize;
                    for sc in resv.subchannel_range() {
                        reserved[off * nsc + sc] = true;
                    }
                }
            }
        }
    }
    csrs.into_iter()
        .filter(|csr| {
            let off = (csr.subframe - window.start) as usize;
            if shadowed_subframe[off] {
                return false;
            }
            !(csr.first_subchannel..csr.first_subchannel + csr.n_subchannels)
                .any(|sc| reserved[off * nsc + sc])
        })
        .collect()
}

/// Result of the RSRP threshold loop.
#[derive(Debug, Clone)]
pub struct RsrpFiltered {
    pub survivors: Vec<CsrCandidate>,
    pub final_threshold_dbm: f64,
    pub iterations: u32,
}

/// Drop CSRs whose latest associated RSRP exceeds the threshold, raising the
/// threshold 3 dB at a time until at least 20% of the originally enumerated
/// CSRs survive. The association projects each decoded reservation forward
/// at its own period.
pub fn filter_rsrp(
    mut csrs: Vec<CsrCandidate>,
    sensing: &SensingWindow,
    window: &Range<u64>,
    base_threshold_dbm: f64,
    original_count: usize,
) -> RsrpFiltered {
    let len = (window.end - window.start) as usize;
    let nsc = sensing.num_subchannels();
    let mut rsrp_map: Vec<Option<f64>> = vec![None; len * nsc];
    // Scan newest to oldest so the most recent mapped measurement wins.
    for s in sensing.recorded_range().rev() {
        for resv in sensing.reservations_at(s) {
            let step = resv.rri_ms as u64;
            let mut k = (window.start.saturating_sub(s)).div_ceil(step);
            if k == 0 {
                k = 1;
            }
            let mut occ = s + k * step;
            while occ < window.end {
                let off = (occ - window.start) as usize;
                for sc in resv.subchannel_range() {
                    let slot = off * nsc + sc;
                    if rsrp_map[slot].is_none() {
                        rsrp_map[slot] = sensing.latest_rsrp_dbm(s, sc);
                    }
                }
                occ += step;
            }
        }
    }
    for csr in &mut csrs {
        let off = (csr.subframe - window.start) as usize;
        csr.worst_rsrp_dbm = (csr.first_subchannel..csr.first_subchannel + csr.n_subchannels)
            .filter_map(|sc| rsrp_map[off * nsc + sc])
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    }
    let mut threshold = base_threshold_dbm;
    let mut iterations = 0;
    loop {
        let survivors: Vec<CsrCandidate> = csrs
            .iter()
            .filter(|c| c.worst_rsrp_dbm.is_none_or(|r| r <= threshold))
            .copied()
            .collect();
        // Stop at the quota, or once the threshold admits everything.
        if survivors.len() * 5 >= original_count || survivors.len() == csrs.len() {
            return RsrpFiltered {
                survivors,
                final_threshold_dbm: threshold,
                iterations,
            };
        }
        threshold += RSRP_STEP_DB;
        iterations += 1;
    }
}

/// Rank survivors by average sensed RSSI at the same periodic position and
/// return the quietest 20% of the original candidate count. Ties resolve in
/// (subframe, subchannel) order.
pub fn select_lowest_rssi(
    mut csrs: Vec<CsrCandidate>,
    sensing: &SensingWindow,
    period_ms: u32,
    original_count: usize,
) -> Vec<CsrCandidate> {
    let recorded = sensing.recorded_range();
    for csr in &mut csrs {
        let mut sum_mw = 0.0;
        let mut n = 0usize;
        for sc in csr.first_subchannel..csr.first_subchannel + csr.n_subchannels {
            let mut s = csr.subframe;
            while s >= recorded.start + period_ms as u64 {
                s -= period_ms as u64;
                if !recorded.contains(&s) {
                    continue;
                }
                if let Some(rssi) = sensing.rssi_dbm(s, sc) {
                    sum_mw += dbm_to_mw(rssi);
                    n += 1;
                }
            }
        }
        csr.avg_rssi_dbm = if n == 0 {
            sensing.noise_floor_dbm()
        } else {
            mw_to_dbm(sum_mw / n as f64)
        };
    }
    csrs.sort_by(|a, b| {
        a.avg_rssi_dbm
            .partial_cmp(&b.avg_rssi_dbm)
            .expect("RSSI averages are never NaN")
            .then(a.subframe.cmp(&b.subframe))
            .then(a.first_subchannel.cmp(&b.first_subchannel))
    });
    let quota = original_count.div_ceil(5);
    csrs.truncate(quota);
    csrs
}

/// Uniform random pick from the shortlist.
pub fn choose_csr<R: Rng + ?Sized>(
    shortlist: &[CsrCandidate],
    rng: &mut R,
) -> Result<CsrCandidate, MacError> {
    if shortlist.is_empty() {
        return Err(MacError::EmptyShortlist);
    }
    Ok(shortlist[rng.random_range(0..shortlist.len())])
}

/// Diagnostics from one end-to-end CSR selection.
#[derive(Debug, Clone, Copy)]
pub struct SelectionStats {
    pub enumerated: usize,
    pub after_exclusion: usize,
    pub shortlisted: usize,
    pub final_threshold_dbm: f64,
}

/// The full SB-SPS pipeline: enumerate, exclude, RSRP-loop, RSSI-rank, pick.
#[allow(clippy::too_many_arguments)]
pub fn select_csr<R: Rng + ?Sized>(
    now: u64,
    rri_ms: u32,
    n_subchannels: usize,
    cfg: &ChannelConfig,
    sensing: &SensingWindow,
    rsrp_threshold_dbm: f64,
    rng: &mut R,
) -> Result<(CsrCandidate, SelectionStats), MacError> {
    let window = selection_window(now, rri_ms)?;
    let all = enumerate_csrs(&window, n_subchannels, cfg)?;
    let original_count = all.len();
    let unreserved = filter_unsensed_and_reserved(all, sensing, &window, rri_ms);
    let after_exclusion = unreserved.len();
    let filtered = filter_rsrp(
        unreserved,
        sensing,
        &window,
        rsrp_threshold_dbm,
        original_count,
    );
    let shortlist = select_lowest_rssi(filtered.survivors, sensing, rri_ms, original_count);
    let chosen = choose_csr(&shortlist, rng)?;
    Ok((
        chosen,
        SelectionStats {
            enumerated: original_count,
            after_exclusion,
            shortlisted: shortlist.len(),
            final_threshold_dbm: filtered.final_threshold_dbm,
        },
    ))
}

/// Build the SCI that accompanies a transmission under `grant`.
pub fn sci_payload(grant: &Grant, origin: u64, i_mcs: u8) -> SciRecord {
    SciRecord {
        origin,
        rri_ms: grant.rri_ms,
        first_subchannel: grant.first_subchannel as u8,
        n_subchannels: grant.n_subchannels as u8,
        i_mcs,
    }
}
