//! Outcome recording, loss-cause classification and the result products:
//! PDR by distance, error-cause breakdown, CBR, MCS usage and average
//! subchannel RSSI, exported as delimited text with a run manifest.
//!
//! Owned by a single run; aggregation across runs happens in the batch
//! runner and is a plain mean, so merge order never matters.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::sim::ScenarioConfig;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to serialize the run manifest: {0}")]
    Manifest(#[from] toml::ser::Error),
}

/// Outcome of one (transmission, receiver) pair within evaluation range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxResult {
    Delivered,
    HalfDuplex,
    UndecodedSci,
    Sensing,
    Interference,
}

impl TxResult {
    pub const ALL: [TxResult; 5] = [
        TxResult::Delivered,
        TxResult::HalfDuplex,
        TxResult::UndecodedSci,
        TxResult::Sensing,
        TxResult::Interference,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TxResult::Delivered => "delivered",
            TxResult::HalfDuplex => "half_duplex",
            TxResult::UndecodedSci => "undecoded_sci",
            TxResult::Sensing => "sensing",
            TxResult::Interference => "interference",
        }
    }

    fn index(self) -> usize {
        match self {
            TxResult::Delivered => 0,
            TxResult::HalfDuplex => 1,
            TxResult::UndecodedSci => 2,
            TxResult::Sensing => 3,
            TxResult::Interference => 4,
        }
    }
}

/// One recorded (transmission, receiver) pair.
#[derive(Debug, Clone, Copy)]
pub struct TxOutcome {
    pub origin: u64,
    pub receiver: u64,
    pub subframe: u64,
    pub distance_m: f64,
    pub i_mcs: u8,
    pub result: TxResult,
}

/// Decode context of one receiver for one transmission, as seen after
/// channel resolution.
#[derive(Debug, Clone, Copy)]
pub struct RxContext {
    pub receiver_transmitting: bool,
    pub sci_decoded: bool,
    /// TB SINR with interference included.
    pub tb_sinr_db: f64,
    /// TB SNR with the interference term removed.
    pub tb_snr_db: f64,
    pub rx_power_dbm: f64,
    /// Decode threshold at the transmission's MCS.
    pub tb_threshold_db: f64,
    pub rx_sensitivity_dbm: f64,
}

/// Classify one pair. Priority: half-duplex, then SCI loss, then
/// power-limited (sensing) loss, then interference; anything else delivered.
pub fn classify(ctx: &RxContext) -> TxResult {
    if ctx.receiver_transmitting {
        return TxResult::HalfDuplex;
    }
    if !ctx.sci_decoded {
        return TxResult::UndecodedSci;
    }
    if ctx.tb_snr_db < ctx.tb_threshold_db || ctx.rx_power_dbm < ctx.rx_sensitivity_dbm {
        return TxResult::Sensing;
    }
    if ctx.tb_sinr_db < ctx.tb_threshold_db {
        return TxResult::Interference;
    }
    TxResult::Delivered
}

/// PDR table over distance bins; bins without receivers are omitted.
pub fn pdr_by_distance(outcomes: &[TxOutcome], bin_width_m: f64) -> Vec<(f64, f64, u64, u64)> {
    assert!(bin_width_m > 0.0);
    let mut bins: Vec<(u64, u64)> = Vec::new();
    for o in outcomes {
        let idx = (o.distance_m / bin_width_m) as usize;
        if bins.len() <= idx {
            bins.resize(idx + 1, (0, 0));
        }
        bins[idx].1 += 1;
        if o.result == TxResult::Delivered {
            bins[idx].0 += 1;
        }
    }
    bins.iter()
        .enumerate()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(i, &(delivered, total))| {
            (
                i as f64 * bin_width_m,
                (i + 1) as f64 * bin_width_m,
                delivered,
                total,
            )
        })
        .collect()
}

/// Fraction of vehicles currently on MCS 11.
pub fn mcs11_fraction(current_mcs: &[u8]) -> f64 {
    if current_mcs.is_empty() {
        return 0.0;
    }
    current_mcs.iter().filter(|&&m| m == 11).count() as f64 / current_mcs.len() as f64
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub bin_width_m: f64,
    pub eval_range_m: f64,
    /// (delivered, total) per distance bin.
    pub pdr_bins: Vec<(u64, u64)>,
    /// Pair counts per `TxResult`, index via `TxResult::index`.
    outcome_counts: [u64; 5],
    /// Per recorded epoch: one CBR sample per vehicle.
    pub cbr_epochs: Vec<Vec<f64>>,
    /// Per recorded epoch: fraction of vehicles on MCS 11.
    pub mcs11_fraction: Vec<f64>,
    /// Per recorded epoch: average RSSI per subchannel in dBm.
    pub rssi_epochs: Vec<Vec<f64>>,
    pub transmissions: u64,
    pub pairs_in_range: u64,
    pub dropped_packets: u64,
    pub scheduling_failures: u64,
    /// Highest transmit PSD observed across the run.
    pub max_psd_dbm_mhz: f64,
}

impl RunMetrics {
    pub fn new(bin_width_m: f64, eval_range_m: f64) -> Self {
        let n_bins = (eval_range_m / bin_width_m).ceil() as usize;
        Self {
            bin_width_m,
            eval_range_m,
            pdr_bins: vec![(0, 0); n_bins.max(1)],
            outcome_counts: [0; 5],
            cbr_epochs: Vec::new(),
            mcs11_fraction: Vec::new(),
            rssi_epochs: Vec::new(),
            transmissions: 0,
            pairs_in_range: 0,
            dropped_packets: 0,
            scheduling_failures: 0,
            max_psd_dbm_mhz: f64::NEG_INFINITY,
        }
    }

    pub fn record_outcome(&mut self, outcome: &TxOutcome) {
        debug_assert!(outcome.distance_m <= self.eval_range_m);
        self.pairs_in_range += 1;
        self.outcome_counts[outcome.result.index()] += 1;
        let idx = ((outcome.distance_m / self.bin_width_m) as usize).min(self.pdr_bins.len() - 1);
        self.pdr_bins[idx].1 += 1;
        if outcome.result == TxResult::Delivered {
            self.pdr_bins[idx].0 += 1;
        }
    }

    pub fn count(&self, result: TxResult) -> u64 {
        self.outcome_counts[result.index()]
    }

    /// Fraction of all recorded pairs with the given result.
    pub fn fraction_of_pairs(&self, result: TxResult) -> f64 {
        if self.pairs_in_range == 0 {
            return 0.0;
        }
        self.count(result) as f64 / self.pairs_in_range as f64
    }

    pub fn losses(&self) -> u64 {
        self.pairs_in_range - self.count(TxResult::Delivered)
    }

    /// Delivered/total ratio per populated bin.
    pub fn pdr_table(&self) -> Vec<(f64, f64, u64, u64)> {
        self.pdr_bins
            .iter()
            .enumerate()
            .filter(|(_, (_, total))| *total > 0)
            .map(|(i, &(delivered, total))| {
                (
                    i as f64 * self.bin_width_m,
                    (i + 1) as f64 * self.bin_width_m,
                    delivered,
                    total,
                )
            })
            .collect()
    }

    /// PDR of one distance bin, if populated.
    pub fn pdr_in_bin(&self, bin: usize) -> Option<f64> {
        let (delivered, total) = *self.pdr_bins.get(bin)?;
        (total > 0).then(|| delivered as f64 / total as f64)
    }

    pub fn mean_cbr(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for epoch in &self.cbr_epochs {
            sum += epoch.iter().sum::<f64>();
            n += epoch.len();
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Mean over epochs and subchannels of the per-epoch dB-domain averages.
    pub fn mean_subchannel_rssi_dbm(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for epoch in &self.rssi_epochs {
            for &dbm in epoch {
                sum += dbm;
                n += 1;
            }
        }
        if n == 0 {
            f64::NEG_INFINITY
        } else {
            sum / n as f64
        }
    }

    pub fn mean_mcs11_usage(&self) -> f64 {
        if self.mcs11_fraction.is_empty() {
            return 0.0;
        }
        self.mcs11_fraction.iter().sum::<f64>() / self.mcs11_fraction.len() as f64
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    seed: u64,
    version: &'a str,
    transmissions: u64,
    pairs_in_range: u64,
    dropped_packets: u64,
    scheduling_failures: u64,
    max_psd_dbm_mhz: f64,
    config: &'a ScenarioConfig,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), ExportError> {
    let path = dir.join(name);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|source| ExportError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Write one delimited-text file per result product plus the run manifest.
///
/// Column orders are stable:
///   pdr.csv        bin_lo_m,bin_hi_m,delivered,total,pdr
///   errors.csv     outcome,count,fraction_of_pairs
///   cbr.csv        epoch,mean_cbr,samples
///   mcs_usage.csv  epoch,fraction_mcs11
///   rssi.csv       epoch,subchannel,avg_rssi_dbm
///   manifest.toml  seed, version, totals and the full config echo
pub fn export(metrics: &RunMetrics, cfg: &ScenarioConfig, dir: &Path) -> Result<(), ExportError> {
    fs::create_dir_all(dir).map_err(|source| ExportError::Io {
        path: dir.display().to_string(),
        source,
    })?;

    let mut pdr = String::from("bin_lo_m,bin_hi_m,delivered,total,pdr\n");
    for (lo, hi, delivered, total) in metrics.pdr_table() {
        let ratio = delivered as f64 / total as f64;
        pdr.push_str(&format!(
            "{lo:.1},{hi:.1},{delivered},{total},{ratio:.6}\n"
        ));
    }
    write_file(dir, "pdr.csv", &pdr)?;

    let mut errors = String::from("outcome,count,fraction_of_pairs\n");
    for result in TxResult::ALL {
        errors.push_str(&format!(
            "{},{},{:.6}\n",
            result.label(),
            metrics.count(result),
            metrics.fraction_of_pairs(result)
        ));
    }
    write_file(dir, "errors.csv", &errors)?;

    let mut cbr = String::from("epoch,mean_cbr,samples\n");
    for (epoch, samples) in metrics.cbr_epochs.iter().enumerate() {
        let mean = if samples.is_empty() {
            0.0
        } else {
            samples.iter().sum::<f64>() / samples.len() as f64
        };
        cbr.push_str(&format!("{epoch},{mean:.6},{}\n", samples.len()));
    }
    write_file(dir, "cbr.csv", &cbr)?;

    let mut usage = String::from("epoch,fraction_mcs11\n");
    for (epoch, fraction) in metrics.mcs11_fraction.iter().enumerate() {
        usage.push_str(&format!("{epoch},{fraction:.6}\n"));
    }
    write_file(dir, "mcs_usage.csv", &usage)?;

    let mut rssi = String::from("epoch,subchannel,avg_rssi_dbm\n");
    for (epoch, per_subchannel) in metrics.rssi_epochs.iter().enumerate() {
        for (subchannel, dbm) in per_subchannel.iter().enumerate() {
            rssi.push_str(&format!("{epoch},{subchannel},{dbm:.6}\n"));
        }
    }
    write_file(dir, "rssi.csv", &rssi)?;

    let manifest = RunManifest {
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        transmissions: metrics.transmissions,
        pairs_in_range: metrics.pairs_in_range,
        dropped_packets: metrics.dropped_packets,
        scheduling_failures: metrics.scheduling_failures,
        max_psd_dbm_mhz: metrics.max_psd_dbm_mhz,
        config: cfg,
    };
    write_file(dir, "manifest.toml", &toml::to_string_pretty(&manifest)?)?;
    Ok(())
}
