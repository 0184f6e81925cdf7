//! Static resource-grid model: channelization legality, MCS/TBS tables and
//! the packet -> (RB, subchannel) occupancy mapping including the 2-RB SCI.
//!
//! Immutable after construction; safe to share read-only across threads.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Subcarriers per resource block (12 x 15 kHz).
pub const SUBCARRIERS_PER_RB: usize = 12;
/// Bandwidth of one resource block in MHz.
pub const RB_BANDWIDTH_MHZ: f64 = 0.18;
/// Resource blocks occupied by the sidelink control message (PSCCH).
pub const SCI_RBS: usize = 2;

/// Subchannel sizes allowed by the adjacent PSCCH+PSSCH scheme.
pub const LEGAL_SUBCHANNEL_SIZES: &[usize] = &[5, 6, 10, 15, 20, 25, 50, 75, 100];
/// Subchannel counts allowed by the adjacent PSCCH+PSSCH scheme.
pub const LEGAL_SUBCHANNEL_COUNTS: &[usize] = &[1, 3, 5, 8, 10, 15, 20];

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("subchannel size {0} RBs is not in the legal set {LEGAL_SUBCHANNEL_SIZES:?}")]
    IllegalSubchannelSize(usize),
    #[error("subchannel count {0} is not in the legal set {LEGAL_SUBCHANNEL_COUNTS:?}")]
    IllegalSubchannelCount(usize),
    #[error("{num_subchannels} x {subchannel_size_rb} RBs exceeds the {total} RBs available at {bandwidth_mhz} MHz")]
    PoolTooLarge {
        num_subchannels: usize,
        subchannel_size_rb: usize,
        total: usize,
        bandwidth_mhz: u32,
    },
    #[error("MCS index {0} outside the supported range 0..=11")]
    UnknownMcs(u8),
    #[error("TBS lookup out of range: i_tbs {i_tbs}, n_prb {n_prb}")]
    TbsOutOfRange { i_tbs: u8, n_prb: usize },
    #[error("payload of {payload_bytes} B does not fit in {max_data_rbs} data RBs at MCS {i_mcs}")]
    PayloadTooLarge {
        payload_bytes: usize,
        max_data_rbs: usize,
        i_mcs: u8,
    },
    #[error("allocation of {needed} subchannels does not fit a pool of {available}")]
    NotEnoughSubchannels { needed: usize, available: usize },
}

/// Channel bandwidth of the sidelink pool; serialized as 10 or 20.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Bandwidth {
    Mhz10,
    Mhz20,
}

impl Bandwidth {
    pub fn total_rbs(self) -> usize {
        match self {
            Bandwidth::Mhz10 => 50,
            Bandwidth::Mhz20 => 100,
        }
    }

    pub fn mhz(self) -> u32 {
        match self {
            Bandwidth::Mhz10 => 10,
            Bandwidth::Mhz20 => 20,
        }
    }
}

impl TryFrom<u32> for Bandwidth {
    type Error = String;

    fn try_from(mhz: u32) -> Result<Self, Self::Error> {
        match mhz {
            10 => Ok(Bandwidth::Mhz10),
            20 => Ok(Bandwidth::Mhz20),
            other => Err(format!("unsupported bandwidth {other} MHz (use 10 or 20)")),
        }
    }
}

impl From<Bandwidth> for u32 {
    fn from(b: Bandwidth) -> u32 {
        b.mhz()
    }
}

/// Validated channelization of the shared channel (adjacent scheme only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth: Bandwidth,
    pub num_subchannels: usize,
    pub subchannel_size_rb: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::default_10mhz()
    }
}

impl ChannelConfig {
    pub fn new(
        bandwidth: Bandwidth,
        num_subchannels: usize,
        subchannel_size_rb: usize,
    ) -> Result<Self, GridError> {
        if !LEGAL_SUBCHANNEL_SIZES.contains(&subchannel_size_rb) {
            return Err(GridError::IllegalSubchannelSize(subchannel_size_rb));
        }
        if !LEGAL_SUBCHANNEL_COUNTS.contains(&num_subchannels) {
            return Err(GridError::IllegalSubchannelCount(num_subchannels));
        }
        if num_subchannels * subchannel_size_rb > bandwidth.total_rbs() {
            return Err(GridError::PoolTooLarge {
                num_subchannels,
                subchannel_size_rb,
                total: bandwidth.total_rbs(),
                bandwidth_mhz: bandwidth.mhz(),
            });
        }
        Ok(Self {
            bandwidth,
            num_subchannels,
            subchannel_size_rb,
        })
    }

    /// The 5 x 10 RB pool at 10 MHz used throughout the evaluation profile.
    pub fn default_10mhz() -> Self {
        Self::new(Bandwidth::Mhz10, 5, 10).expect("valid static config")
    }

    /// Validate a deserialized config (serde cannot run `new`).
    pub fn validate(&self) -> Result<(), GridError> {
        Self::new(self.bandwidth, self.num_subchannels, self.subchannel_size_rb).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    Qpsk,
    Qam16,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
        }
    }
}

/// One row of the sidelink MCS table (TS 36.213 Table 8.6.1-1 subset):
/// TB transmissions use i_mcs 0..=11, the SCI always uses i_mcs 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McsEntry {
    pub i_mcs: u8,
    pub modulation: Modulation,
    /// Approximate effective code rate, informational only.
    pub coding_rate: f64,
    pub i_tbs: u8,
}

/// (modulation, nominal code rate, i_tbs) for i_mcs 0..=11.
const MCS_TABLE: [(Modulation, f64, u8); 12] = [
    (Modulation::Qpsk, 0.10, 0),
    (Modulation::Qpsk, 0.22, 1),
    (Modulation::Qpsk, 0.27, 2),
    (Modulation::Qpsk, 0.34, 3),
    (Modulation::Qpsk, 0.42, 4),
    (Modulation::Qpsk, 0.51, 5),
    (Modulation::Qpsk, 0.61, 6),
    (Modulation::Qpsk, 0.71, 7),
    (Modulation::Qpsk, 0.84, 8),
    (Modulation::Qpsk, 0.92, 9),
    (Modulation::Qpsk, 0.92, 10),
    (Modulation::Qam16, 0.51, 10),
];

impl McsEntry {
    pub fn new(i_mcs: u8) -> Result<Self, GridError> {
        let (modulation, coding_rate, i_tbs) = *MCS_TABLE
            .get(i_mcs as usize)
            .ok_or(GridError::UnknownMcs(i_mcs))?;
        Ok(Self {
            i_mcs,
            modulation,
            coding_rate,
            i_tbs,
        })
    }

    /// MCS used by every SCI.
    pub fn sci() -> Self {
        Self::new(0).expect("MCS 0 is always present")
    }
}

const TBS_ROWS: usize = 11;
const TBS_COLS: usize = 50;

/// TBS subset embedded from the bundled data file; row = i_tbs, col = n_prb - 1.
#[derive(Debug)]
pub struct TbsTable {
    values: [[u32; TBS_COLS]; TBS_ROWS],
}

static TBS_TABLE: OnceLock<TbsTable> = OnceLock::new();

impl TbsTable {
    /// Parse the bundled structured-text format: one line per (i_tbs, n_prb)
    /// pair holding three fields, `i_tbs n_prb tbs_bits`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = [[0u32; TBS_COLS]; TBS_ROWS];
        let mut seen = [[false; TBS_COLS]; TBS_ROWS];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(format!(
                    "line {}: expected 'i_tbs n_prb bits', got {} fields",
                    lineno + 1,
                    fields.len()
                ));
            }
            let parse = |what: &str, t: &str| -> Result<usize, String> {
                t.parse()
                    .map_err(|e| format!("line {}: bad {what}: {e}", lineno + 1))
            };
            let row = parse("i_tbs", fields[0])?;
            let n_prb = parse("n_prb", fields[1])?;
            let bits = parse("tbs value", fields[2])? as u32;
            if row >= TBS_ROWS || n_prb == 0 || n_prb > TBS_COLS {
                return Err(format!(
                    "line {}: ({row}, {n_prb}) outside i_tbs 0..{TBS_ROWS}, n_prb 1..={TBS_COLS}",
                    lineno + 1
                ));
            }
            if seen[row][n_prb - 1] {
                return Err(format!("line {}: duplicate entry ({row}, {n_prb})", lineno + 1));
            }
            values[row][n_prb - 1] = bits;
            seen[row][n_prb - 1] = true;
        }
        for (i, row) in seen.iter().enumerate() {
            if let Some(j) = row.iter().position(|s| !s) {
                return Err(format!("missing entry for i_tbs {i}, n_prb {}", j + 1));
            }
        }
        let table = Self { values };
        table.check_monotonic()?;
        Ok(table)
    }

    /// TBS must be non-decreasing in n_prb and in i_tbs.
    fn check_monotonic(&self) -> Result<(), String> {
        for (i, row) in self.values.iter().enumerate() {
            for j in 1..TBS_COLS {
                if row[j] < row[j - 1] {
                    return Err(format!("row {i} decreases at n_prb {}", j + 1));
                }
            }
        }
        for i in 1..TBS_ROWS {
            for j in 0..TBS_COLS {
                if self.values[i][j] < self.values[i - 1][j] {
                    return Err(format!("column {} decreases at i_tbs {i}", j + 1));
                }
            }
        }
        Ok(())
    }

    pub fn shared() -> &'static TbsTable {
        TBS_TABLE.get_or_init(|| {
            TbsTable::parse(include_str!("../data/tbs_table.txt"))
                .expect("bundled TBS table is well-formed")
        })
    }
}

/// Transport block size in bits for a given TBS row and PRB count.
pub fn tbs_lookup(i_tbs: u8, n_prb: usize) -> Result<u32, GridError> {
    if (i_tbs as usize) >= TBS_ROWS || n_prb == 0 || n_prb > TBS_COLS {
        return Err(GridError::TbsOutOfRange { i_tbs, n_prb });
    }
    Ok(TbsTable::shared().values[i_tbs as usize][n_prb - 1])
}

/// Smallest data-RB count whose TBS carries `payload_bytes`, excluding the SCI.
pub fn rbs_for_packet(mcs: McsEntry, payload_bytes: usize) -> Result<usize, GridError> {
    assert!(payload_bytes > 0, "payload must be non-empty");
    let needed_bits = 8 * payload_bytes as u32;
    let max_data_rbs = TBS_COLS - SCI_RBS;
    for n_prb in 1..=max_data_rbs {
        if tbs_lookup(mcs.i_tbs, n_prb)? >= needed_bits {
            return Ok(n_prb);
        }
    }
    Err(GridError::PayloadTooLarge {
        payload_bytes,
        max_data_rbs,
        i_mcs: mcs.i_mcs,
    })
}

/// Subchannel and total-RB footprint of one packet, SCI included.
pub fn allocation_shape(
    mcs: McsEntry,
    payload_bytes: usize,
    cfg: &ChannelConfig,
) -> Result<(usize, usize), GridError> {
    let n_rbs_total = rbs_for_packet(mcs, payload_bytes)? + SCI_RBS;
    let n_subchannels = n_rbs_total.div_ceil(cfg.subchannel_size_rb);
    if n_subchannels > cfg.num_subchannels {
        return Err(GridError::NotEnoughSubchannels {
            needed: n_subchannels,
            available: cfg.num_subchannels,
        });
    }
    Ok((n_subchannels, n_rbs_total))
}

/// A concrete (subframe, subchannel range, RB count) footprint for one
/// transmission. RBs fill the subchannel range from its first RB; the SCI
/// sits in the first two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub subframe: u64,
    pub first_subchannel: usize,
    pub n_subchannels: usize,
    pub n_rbs_total: usize,
    pub i_mcs: u8,
}

impl Allocation {
    pub fn for_packet(
        mcs: McsEntry,
        payload_bytes: usize,
        cfg: &ChannelConfig,
        subframe: u64,
        first_subchannel: usize,
    ) -> Result<Self, GridError> {
        let (n_subchannels, n_rbs_total) = allocation_shape(mcs, payload_bytes, cfg)?;
        if first_subchannel + n_subchannels > cfg.num_subchannels {
            return Err(GridError::NotEnoughSubchannels {
                needed: first_subchannel + n_subchannels,
                available: cfg.num_subchannels,
            });
        }
        Ok(Self {
            subframe,
            first_subchannel,
            n_subchannels,
            n_rbs_total,
            i_mcs: mcs.i_mcs,
        })
    }

    fn first_rb(&self, cfg: &ChannelConfig) -> usize {
        self.first_subchannel * cfg.subchannel_size_rb
    }

    /// All occupied RBs (SCI + data), as a half-open range.
    pub fn rb_range(&self, cfg: &ChannelConfig) -> std::ops::Range<usize> {
        let start = self.first_rb(cfg);
        start..start + self.n_rbs_total
    }

    /// The two control RBs.
    pub fn sci_rb_range(&self, cfg: &ChannelConfig) -> std::ops::Range<usize> {
        let start = self.first_rb(cfg);
        start..start + SCI_RBS
    }

    /// The data RBs that carry the transport block.
    pub fn data_rb_range(&self, cfg: &ChannelConfig) -> std::ops::Range<usize> {
        let start = self.first_rb(cfg);
        start + SCI_RBS..start + self.n_rbs_total
    }

    pub fn data_rbs(&self) -> usize {
        self.n_rbs_total - SCI_RBS
    }

    /// Occupied RBs falling inside subchannel `s`.
    pub fn rbs_in_subchannel(&self, s: usize, cfg: &ChannelConfig) -> usize {
        let sub = s * cfg.subchannel_size_rb..(s + 1) * cfg.subchannel_size_rb;
        overlap(self.rb_range(cfg), sub)
    }

    pub fn subchannel_range(&self) -> std::ops::Range<usize> {
        self.first_subchannel..self.first_subchannel + self.n_subchannels
    }

    pub fn overlaps_subchannels(&self, first: usize, n: usize) -> bool {
        overlap(self.subchannel_range(), first..first + n) > 0
    }
}

pub(crate) fn overlap(a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> usize {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    hi.saturating_sub(lo)
}
