//! Subframe-stepped event loop: highway topology on a wrap-around road,
//! periodic application traffic, SB-SPS grant handling, channel resolution
//! and congestion-control updates.
//!
//! One run is strictly single-threaded and fully determined by
//! (config, seed). Multi-run batches parallelize across independent worlds.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcc::{self, DccState, DccTable};
use crate::grid::{allocation_shape, Allocation, ChannelConfig, GridError, McsEntry};
use crate::mac::{
    sci_payload, select_csr, Grant, GrantState, MacError, SciReservation, SensingWindow,
    SUPPORTED_RRIS,
};
use crate::metrics::{self, mcs11_fraction, RunMetrics, RxContext, TxOutcome};
use crate::phy::{
    self, dbm_to_mw, mw_to_dbm, psd_dbm_mhz, shadowing_sample, PhyError, RadioConfig,
    SubchannelSample,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse scenario file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Which MCS policy the vehicles run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McsMode {
    Fixed7,
    Fixed11,
    Adaptive,
}

impl McsMode {
    pub fn initial_mcs(self) -> u8 {
        match self {
            McsMode::Fixed7 | McsMode::Adaptive => 7,
            McsMode::Fixed11 => 11,
        }
    }
}

impl std::str::FromStr for McsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed7" => Ok(McsMode::Fixed7),
            "fixed11" => Ok(McsMode::Fixed11),
            "adaptive" => Ok(McsMode::Adaptive),
            other => Err(format!(
                "unknown mcs_mode '{other}' (expected fixed7, fixed11 or adaptive)"
            )),
        }
    }
}

/// Full scenario description. Defaults reproduce the evaluation profile:
/// a 2 km six-lane highway, 5 x 10 RB channelization at 10 MHz, 190-byte
/// packets at 10 Hz, keep probability 0 and the -126 / -90 dBm thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub road_length_m: f64,
    pub lanes: usize,
    pub lane_width_m: f64,
    pub density_veh_per_m: f64,
    /// Constant speed per direction; not part of the published profile.
    pub speed_kmh: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Subframes simulated before metrics recording starts.
    pub warmup_subframes: u64,
    pub mcs_mode: McsMode,
    pub packet_size_bytes: usize,
    pub app_period_ms: u32,
    pub rri_ms: u32,
    pub keep_probability: f64,
    pub rsrp_threshold_dbm: f64,
    pub cbr_rssi_threshold_dbm: f64,
    pub eval_range_m: f64,
    pub pdr_bin_width_m: f64,
    pub channel: ChannelConfig,
    pub radio: RadioConfig,
    pub dcc: DccTable,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road_length_m: 2000.0,
            lanes: 6,
            lane_width_m: 4.0,
            density_veh_per_m: 0.06,
            speed_kmh: 70.0,
            duration_s: 20.0,
            seed: 1,
            warmup_subframes: 1000,
            mcs_mode: McsMode::Fixed7,
            packet_size_bytes: 190,
            app_period_ms: 100,
            rri_ms: 100,
            keep_probability: 0.0,
            rsrp_threshold_dbm: -126.0,
            cbr_rssi_threshold_dbm: -90.0,
            eval_range_m: 500.0,
            pdr_bin_width_m: 25.0,
            channel: ChannelConfig::default_10mhz(),
            radio: RadioConfig::default(),
            dcc: DccTable::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.channel.validate()?;
        if !SUPPORTED_RRIS.contains(&self.rri_ms) {
            return Err(SimError::Config(format!(
                "rri_ms {} not in the supported set {SUPPORTED_RRIS:?}",
                self.rri_ms
            )));
        }
        if !(0.0..=0.8).contains(&self.keep_probability) {
            return Err(SimError::Config(format!(
                "keep_probability {} outside [0, 0.8]",
                self.keep_probability
            )));
        }
        if self.road_length_m <= 0.0 {
            return Err(SimError::Config("road_length_m must be positive".into()));
        }
        if self.lanes == 0 {
            return Err(SimError::Config("lanes must be at least 1".into()));
        }
        if self.density_veh_per_m < 0.0 {
            return Err(SimError::Config("density_veh_per_m must be >= 0".into()));
        }
        if self.duration_s < 0.0 {
            return Err(SimError::Config("duration_s must be >= 0".into()));
        }
        if self.speed_kmh < 0.0 {
            return Err(SimError::Config("speed_kmh must be >= 0".into()));
        }
        if self.packet_size_bytes == 0 {
            return Err(SimError::Config("packet_size_bytes must be positive".into()));
        }
        if self.app_period_ms == 0 {
            return Err(SimError::Config("app_period_ms must be positive".into()));
        }
        if self.eval_range_m <= 0.0 || self.pdr_bin_width_m <= 0.0 {
            return Err(SimError::Config(
                "eval_range_m and pdr_bin_width_m must be positive".into(),
            ));
        }
        // Both policy endpoints must fit the pool and have decode thresholds.
        for i_mcs in [dcc::DEFAULT_MCS, dcc::CONGESTED_MCS, self.mcs_mode.initial_mcs()] {
            let mcs = McsEntry::new(i_mcs)?;
            allocation_shape(mcs, self.packet_size_bytes, &self.channel)?;
            self.radio.threshold_db(i_mcs)?;
        }
        self.radio.threshold_db(0)?;
        Ok(())
    }

    pub fn duration_subframes(&self) -> u64 {
        (self.duration_s * 1000.0).round() as u64
    }

    fn speed_m_per_ms(&self) -> f64 {
        self.speed_kmh / 3600.0
    }
}

/// One vehicle: kinematics plus its MAC and DCC state.
#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u64,
    pub lane: usize,
    pub position_m: f64,
    /// +1 or -1 along the road axis.
    pub direction: f64,
    pub sensing: SensingWindow,
    pub grant: Option<Grant>,
    pub pending_packet: bool,
    pub next_arrival: u64,
    pub dcc: DccState,
    rng: ChaCha8Rng,
}

fn derive_seed(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DOMAIN_TOPOLOGY: u64 = 1;
const DOMAIN_CHANNEL: u64 = 2;
const DOMAIN_VEHICLE_BASE: u64 = 1000;

/// Poisson placement: exponential inter-vehicle gaps per lane at an intensity
/// of density / lanes, with a uniform application phase per vehicle.
pub fn build_topology(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vehicle>, SimError> {
    let mut vehicles = Vec::new();
    if cfg.density_veh_per_m == 0.0 {
        return Ok(vehicles);
    }
    let lane_intensity = cfg.density_veh_per_m / cfg.lanes as f64;
    let gap = Exp::new(lane_intensity)
        .map_err(|e| SimError::Config(format!("invalid density: {e}")))?;
    let noise = cfg.radio.noise_floor_dbm(cfg.channel.subchannel_size_rb);
    let mut id = 0u64;
    for lane in 0..cfg.lanes {
        let direction = if lane * 2 < cfg.lanes { 1.0 } else { -1.0 };
        let mut x: f64 = gap.sample(rng);
        while x < cfg.road_length_m {
            let phase = rng.random_range(0..cfg.app_period_ms as u64);
            vehicles.push(Vehicle {
                id,
                lane,
                position_m: x,
                direction,
                sensing: SensingWindow::new(cfg.channel.num_subchannels, noise),
                grant: None,
                pending_packet: false,
                next_arrival: phase,
                dcc: DccState::new(
                    cfg.mcs_mode.initial_mcs(),
                    cfg.packet_size_bytes,
                    &cfg.channel,
                    cfg.radio.psd_limit_dbm_mhz,
                )?,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    DOMAIN_VEHICLE_BASE + id,
                )),
            });
            id += 1;
            x += gap.sample(rng);
        }
    }
    Ok(vehicles)
}

/// Shortest separation on the wrap-around road, including the lane offset.
pub fn torus_distance(a: &Vehicle, b: &Vehicle, road_length_m: f64, lane_width_m: f64) -> f64 {
    let raw = (a.position_m - b.position_m).abs();
    let dx = raw.min(road_length_m - raw);
    let dy = (a.lane as f64 - b.lane as f64) * lane_width_m;
    (dx * dx + dy * dy).sqrt()
}

struct TxEvent {
    origin_idx: usize,
    alloc: Allocation,
    tx_power_dbm: f64,
    sci: crate::mac::SciRecord,
}

/// The simulated world; step it one subframe at a time.
pub struct World {
    pub cfg: ScenarioConfig,
    vehicles: Vec<Vehicle>,
    now: u64,
    channel_rng: ChaCha8Rng,
    metrics: RunMetrics,
    subchannel_noise_dbm: f64,
    // Scratch buffers reused every subframe.
    links: Vec<(f64, f64)>,
    sample_buf: Vec<SubchannelSample>,
    resv_buf: Vec<SciReservation>,
    sci_ok_buf: Vec<bool>,
    epoch_rssi_sum_dbm: Vec<f64>,
    epoch_rssi_rows: u64,
}

impl World {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut topo_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DOMAIN_TOPOLOGY));
        let vehicles = build_topology(&cfg, &mut topo_rng)?;
        let nsc = cfg.channel.num_subchannels;
        let metrics = RunMetrics::new(cfg.pdr_bin_width_m, cfg.eval_range_m);
        Ok(Self {
            channel_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DOMAIN_CHANNEL)),
            subchannel_noise_dbm: cfg.radio.noise_floor_dbm(cfg.channel.subchannel_size_rb),
            vehicles,
            now: 0,
            metrics,
            links: Vec::new(),
            sample_buf: Vec::with_capacity(nsc),
            resv_buf: Vec::new(),
            sci_ok_buf: Vec::new(),
            epoch_rssi_sum_dbm: vec![0.0; nsc],
            epoch_rssi_rows: 0,
            cfg,
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    fn recording(&self) -> bool {
        self.now >= self.cfg.warmup_subframes
    }

    /// Advance the world by one subframe.
    pub fn step(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let recording = self.recording();

        self.move_vehicles();
        self.handle_arrivals(now)?;
        let txs = self.collect_transmissions(now, recording)?;
        self.resolve_channel(now, recording, &txs)?;
        self.dcc_epoch(now, recording)?;

        self.now += 1;
        Ok(())
    }

    fn move_vehicles(&mut self) {
        let dx = self.cfg.speed_m_per_ms();
        let road = self.cfg.road_length_m;
        for v in &mut self.vehicles {
            v.position_m = (v.position_m + v.direction * dx).rem_euclid(road);
        }
    }

    fn handle_arrivals(&mut self, now: u64) -> Result<(), SimError> {
        let cfg = &self.cfg;
        for i in 0..self.vehicles.len() {
            if self.vehicles[i].next_arrival != now {
                continue;
            }
            let v = &mut self.vehicles[i];
            v.next_arrival += cfg.app_period_ms as u64;
            if v.pending_packet {
                // The previous packet never found a transmission opportunity.
                self.metrics.dropped_packets += 1;
            }
            v.pending_packet = true;
            if v.grant.is_some() {
                continue;
            }
            let mcs = v.dcc.current_mcs;
            let (n_subchannels, _) = allocation_shape(mcs, cfg.packet_size_bytes, &cfg.channel)?;
            let Vehicle { sensing, rng, .. } = v;
            match select_csr(
                now,
                cfg.rri_ms,
                n_subchannels,
                &cfg.channel,
                sensing,
                cfg.rsrp_threshold_dbm,
                rng,
            ) {
                Ok((csr, _stats)) => {
                    v.grant = Some(Grant::new(cfg.rri_ms, &csr, cfg.keep_probability, rng)?);
                }
                Err(MacError::EmptyShortlist) => {
                    v.pending_packet = false;
                    self.metrics.scheduling_failures += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn collect_transmissions(&mut self, now: u64, recording: bool) -> Result<Vec<TxEvent>, SimError> {
        let cfg = &self.cfg;
        let mut txs = Vec::new();
        for (i, v) in self.vehicles.iter_mut().enumerate() {
            let Some(grant) = v.grant.as_mut() else {
                continue;
            };
            if !grant.is_due(now) {
                continue;
            }
            if !v.pending_packet {
                // Reserved opportunity with nothing to send; the reservation
                // pattern continues.
                grant.next_tx_subframe += grant.rri_ms as u64;
                continue;
            }
            let mcs = v.dcc.current_mcs;
            let (n_subchannels, _) = allocation_shape(mcs, cfg.packet_size_bytes, &cfg.channel)?;
            if n_subchannels != grant.n_subchannels {
                // The adapted footprint no longer fits the reservation; force
                // reselection on the next arrival. Cannot happen for 190 B.
                v.grant = None;
                v.pending_packet = false;
                self.metrics.dropped_packets += 1;
                continue;
            }
            let alloc = Allocation::for_packet(
                mcs,
                cfg.packet_size_bytes,
                &cfg.channel,
                now,
                grant.first_subchannel,
            )?;
            let tx_power_dbm = v.dcc.current_tx_power_dbm;
            let psd = psd_dbm_mhz(tx_power_dbm, alloc.n_rbs_total);
            if psd > self.metrics.max_psd_dbm_mhz {
                self.metrics.max_psd_dbm_mhz = psd;
            }
            txs.push(TxEvent {
                origin_idx: i,
                alloc,
                tx_power_dbm,
                sci: sci_payload(grant, v.id, mcs.i_mcs),
            });
            v.pending_packet = false;
            v.dcc.tracker.record_tx(now, alloc.n_subchannels);
            if grant.on_transmission(&mut v.rng) == GrantState::Expired {
                v.grant = None;
            }
            if recording {
                self.metrics.transmissions += 1;
            }
        }
        Ok(txs)
    }

    fn resolve_channel(&mut self, now: u64, recording: bool, txs: &[TxEvent]) -> Result<(), SimError> {
        let n = self.vehicles.len();
        let nsc = self.cfg.channel.num_subchannels;
        let mut is_tx = vec![false; n];
        for tx in txs {
            is_tx[tx.origin_idx] = true;
        }

        // Link budgets for every (transmission, other vehicle) pair, drawn in
        // deterministic order.
        let link_gain = self.cfg.radio.link_gain_db();
        self.links.clear();
        self.links.resize(txs.len() * n, (f64::NEG_INFINITY, 0.0));
        for (ti, tx) in txs.iter().enumerate() {
            for vi in 0..n {
                if vi == tx.origin_idx {
                    continue;
                }
                let dist = torus_distance(
                    &self.vehicles[tx.origin_idx],
                    &self.vehicles[vi],
                    self.cfg.road_length_m,
                    self.cfg.lane_width_m,
                );
                let pl = self.cfg.radio.pathloss_db(dist);
                let shadow =
                    shadowing_sample(&mut self.channel_rng, self.cfg.radio.shadow_sigma_los_db);
                self.links[ti * n + vi] = (tx.tx_power_dbm + link_gain - pl - shadow, dist);
            }
        }

        let channel = self.cfg.channel;
        let radio = self.cfg.radio.clone();
        let mut outcomes_this_subframe = 0u64;
        let mut expected_pairs = 0u64;

        for (vi, _) in is_tx.iter().enumerate().filter(|(_, &t)| !t) {
            // Decode each transmission at this receiver.
            self.sci_ok_buf.clear();
            self.resv_buf.clear();
            let mut pair_results: Vec<(usize, TxOutcome)> = Vec::new();
            for (ti, tx) in txs.iter().enumerate() {
                let (rx_dbm, dist) = self.links[ti * n + vi];
                let sci_rbs = tx.alloc.sci_rb_range(&channel);
                let data_rbs = tx.alloc.data_rb_range(&channel);
                let n_total = tx.alloc.n_rbs_total as f64;
                let sci_sig = rx_dbm + 10.0 * (sci_rbs.len() as f64 / n_total).log10();
                let data_sig = rx_dbm + 10.0 * (data_rbs.len() as f64 / n_total).log10();
                let mut sci_int_mw = 0.0;
                let mut data_int_mw = 0.0;
                for (tj, other) in txs.iter().enumerate() {
                    if tj == ti || other.origin_idx == vi {
                        continue;
                    }
                    let other_rx = self.links[tj * n + vi].0;
                    sci_int_mw += phy::interference_on_rbs_mw(
                        other_rx,
                        &other.alloc,
                        sci_rbs.clone(),
                        &channel,
                    );
                    data_int_mw += phy::interference_on_rbs_mw(
                        other_rx,
                        &other.alloc,
                        data_rbs.clone(),
                        &channel,
                    );
                }
                let sci_noise_dbm = radio.noise_floor_dbm(sci_rbs.len());
                let data_noise_dbm = radio.noise_floor_dbm(data_rbs.len());
                let sci_sinr =
                    sci_sig - mw_to_dbm(sci_int_mw + dbm_to_mw(sci_noise_dbm));
                let tb_sinr =
                    data_sig - mw_to_dbm(data_int_mw + dbm_to_mw(data_noise_dbm));
                let tb_snr = data_sig - data_noise_dbm;
                let sci_ok = phy::decode_sci(sci_sinr, &radio)?;
                self.sci_ok_buf.push(sci_ok);
                if sci_ok {
                    self.resv_buf.push(tx.sci.reservation());
                }
                if recording && dist <= self.cfg.eval_range_m {
                    let ctx = RxContext {
                        receiver_transmitting: false,
                        sci_decoded: sci_ok,
                        tb_sinr_db: tb_sinr,
                        tb_snr_db: tb_snr,
                        rx_power_dbm: rx_dbm,
                        tb_threshold_db: radio.threshold_db(tx.alloc.i_mcs)?,
                        rx_sensitivity_dbm: radio.rx_sensitivity_dbm,
                    };
                    pair_results.push((
                        ti,
                        TxOutcome {
                            origin: self.vehicles[tx.origin_idx].id,
                            receiver: self.vehicles[vi].id,
                            subframe: now,
                            distance_m: dist,
                            i_mcs: tx.alloc.i_mcs,
                            result: metrics::classify(&ctx),
                        },
                    ));
                }
            }

            // Sensing row: RSSI always, RSRP only where an SCI decoded.
            self.sample_buf.clear();
            for sc in 0..nsc {
                let mut sum_mw = dbm_to_mw(self.subchannel_noise_dbm);
                let mut rsrp: Option<f64> = None;
                let mut occupied = 0usize;
                for (ti, tx) in txs.iter().enumerate() {
                    let rx_dbm = self.links[ti * n + vi].0;
                    if let Some(p) = phy::power_in_subchannel_dbm(rx_dbm, &tx.alloc, sc, &channel)
                    {
                        sum_mw += dbm_to_mw(p);
                        occupied = occupied.max(tx.alloc.rbs_in_subchannel(sc, &channel));
                        if self.sci_ok_buf[ti] {
                            let r = phy::subchannel_rsrp_dbm(rx_dbm, &tx.alloc, sc, &channel)
                                .expect("occupied subchannel has RSRP");
                            rsrp = Some(rsrp.map_or(r, |prev: f64| prev.max(r)));
                        }
                    }
                }
                let rssi_dbm = mw_to_dbm(sum_mw);
                self.sample_buf.push(SubchannelSample {
                    subframe: now,
                    subchannel: sc,
                    rssi_dbm,
                    latest_rsrp_dbm: rsrp,
                    occupied_rbs: occupied,
                });
                if recording {
                    self.epoch_rssi_sum_dbm[sc] += rssi_dbm;
                }
            }
            if recording {
                self.epoch_rssi_rows += 1;
            }
            let v = &mut self.vehicles[vi];
            v.sensing.record_sensed(now, &self.sample_buf, &self.resv_buf);
            for (_, outcome) in &pair_results {
                self.metrics.record_outcome(outcome);
                outcomes_this_subframe += 1;
            }
        }

        // Transmitting vehicles sense nothing and lose every concurrent
        // transmission to half-duplex.
        for (vi, _) in is_tx.iter().enumerate().filter(|(_, &t)| t) {
            self.vehicles[vi].sensing.record_own_tx(now);
            if !recording {
                continue;
            }
            for (ti, tx) in txs.iter().enumerate() {
                if tx.origin_idx == vi {
                    continue;
                }
                let (_, dist) = self.links[ti * n + vi];
                if dist <= self.cfg.eval_range_m {
                    self.metrics.record_outcome(&TxOutcome {
                        origin: self.vehicles[tx.origin_idx].id,
                        receiver: self.vehicles[vi].id,
                        subframe: now,
                        distance_m: dist,
                        i_mcs: tx.alloc.i_mcs,
                        result: metrics::TxResult::HalfDuplex,
                    });
                    outcomes_this_subframe += 1;
                }
            }
        }

        if recording {
            for (ti, tx) in txs.iter().enumerate() {
                for vi in 0..n {
                    if vi == tx.origin_idx {
                        continue;
                    }
                    if self.links[ti * n + vi].1 <= self.cfg.eval_range_m {
                        expected_pairs += 1;
                    }
                }
            }
            debug_assert_eq!(
                expected_pairs, outcomes_this_subframe,
                "every in-range pair must be classified exactly once"
            );
        }
        Ok(())
    }

    fn dcc_epoch(&mut self, now: u64, recording: bool) -> Result<(), SimError> {
        if !(now + 1).is_multiple_of(dcc::CBR_WINDOW_SUBFRAMES) {
            return Ok(());
        }
        let cfg = &self.cfg;
        let boundary = now + 1;
        let mut cbr_samples = Vec::new();
        let mut currents = Vec::new();
        for v in &mut self.vehicles {
            v.dcc.measure(
                &v.sensing,
                v.grant.as_ref(),
                boundary,
                cfg.cbr_rssi_threshold_dbm,
                cfg.rri_ms,
            );
            if cfg.mcs_mode == McsMode::Adaptive {
                v.dcc.adapt(
                    &cfg.dcc,
                    cfg.packet_size_bytes,
                    &cfg.channel,
                    cfg.radio.psd_limit_dbm_mhz,
                )?;
            }
            if recording {
                cbr_samples.push(v.dcc.cbr);
                currents.push(v.dcc.current_mcs.i_mcs);
            }
        }
        if recording {
            self.metrics.cbr_epochs.push(cbr_samples);
            self.metrics.mcs11_fraction.push(mcs11_fraction(&currents));
            let rows = self.epoch_rssi_rows.max(1);
            let per_subchannel: Vec<f64> = self
                .epoch_rssi_sum_dbm
                .iter()
                .map(|&sum| {
                    if self.epoch_rssi_rows == 0 {
                        self.subchannel_noise_dbm
                    } else {
                        sum / rows as f64
                    }
                })
                .collect();
            self.metrics.rssi_epochs.push(per_subchannel);
            self.epoch_rssi_sum_dbm.fill(0.0);
            self.epoch_rssi_rows = 0;
        }
        Ok(())
    }

    pub fn into_metrics(self) -> RunMetrics {
        self.metrics
    }
}

/// Execute a full run: 1 s of sensing warm-up plus the configured duration.
pub fn run(cfg: &ScenarioConfig) -> Result<RunMetrics, SimError> {
    let mut world = World::new(cfg.clone())?;
    let total = cfg.warmup_subframes + cfg.duration_subframes();
    for _ in 0..total {
        world.step()?;
    }
    Ok(world.into_metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            road_length_m: 500.0,
            density_veh_per_m: 0.02,
            duration_s: 2.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn defaults_match_evaluation_profile() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.road_length_m, 2000.0);
        assert_eq!(cfg.lanes, 6);
        assert_eq!(cfg.lane_width_m, 4.0);
        assert_eq!(cfg.channel.num_subchannels, 5);
        assert_eq!(cfg.channel.subchannel_size_rb, 10);
        assert_eq!(cfg.radio.carrier_ghz, 5.9);
        assert_eq!(cfg.radio.noise_figure_db, 9.0);
        assert_eq!(cfg.radio.shadow_sigma_los_db, 3.0);
        assert_eq!(cfg.radio.antenna_gain_dbi, 3.0);
        assert_eq!(cfg.keep_probability, 0.0);
        assert_eq!(cfg.rsrp_threshold_dbm, -126.0);
        assert_eq!(cfg.cbr_rssi_threshold_dbm, -90.0);
        assert_eq!(cfg.packet_size_bytes, 190);
        assert_eq!(cfg.app_period_ms, 100);
        cfg.validate().unwrap();
    }

    #[test]
    fn shipped_scenario_equals_defaults() {
        let text = include_str!("../../../scenarios/highway-2km.toml");
        let cfg = ScenarioConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ScenarioConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Missing keys fall back to defaults.
        let sparse = ScenarioConfig::from_toml_str("density_veh_per_m = 0.2\n").unwrap();
        assert_eq!(sparse.density_veh_per_m, 0.2);
        assert_eq!(sparse.road_length_m, 2000.0);
        // Unknown keys are rejected by name.
        let err = ScenarioConfig::from_toml_str("no_such_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
        // Illegal channelization is rejected.
        let bad = "channel = { bandwidth = 10, num_subchannels = 7, subchannel_size_rb = 10 }\n";
        assert!(ScenarioConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn topology_density_and_determinism() {
        let mut cfg = ScenarioConfig {
            density_veh_per_m: 0.06,
            ..ScenarioConfig::default()
        };
        // Expected count: 0.06 * 2000 = 120; mean over 100 seeds within 5%.
        let mut total = 0usize;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DOMAIN_TOPOLOGY));
            total += build_topology(&cfg, &mut rng).unwrap().len();
        }
        let mean = total as f64 / 100.0;
        assert!((mean - 120.0).abs() < 6.0, "mean count {mean}");

        // Zero density yields an empty scenario.
        cfg.density_veh_per_m = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_topology(&cfg, &mut rng).unwrap().is_empty());

        // Fixed seed, identical placement.
        cfg.density_veh_per_m = 0.06;
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = build_topology(&cfg, &mut r1).unwrap();
        let b = build_topology(&cfg, &mut r2).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position_m, y.position_m);
            assert_eq!(x.lane, y.lane);
            assert_eq!(x.next_arrival, y.next_arrival);
        }
    }

    #[test]
    fn torus_distance_wraps() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vehicles = build_topology(&cfg, &mut rng).unwrap();
        assert!(vehicles.len() >= 2);
        vehicles[0].position_m = 10.0;
        vehicles[1].position_m = 490.0;
        let mut a = vehicles[0].clone();
        let mut b = vehicles[1].clone();
        a.lane = 0;
        b.lane = 0;
        assert!((torus_distance(&a, &b, 500.0, 4.0) - 20.0).abs() < 1e-9);
        b.lane = 3;
        let expect = (20.0f64 * 20.0 + 12.0 * 12.0).sqrt();
        assert!((torus_distance(&a, &b, 500.0, 4.0) - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_duration_run_is_empty() {
        let mut cfg = small_cfg();
        cfg.duration_s = 0.0;
        let m = run(&cfg).unwrap();
        assert_eq!(m.pairs_in_range, 0);
        assert_eq!(m.transmissions, 0);
        assert!(m.cbr_epochs.is_empty());
    }

    #[test]
    fn short_run_produces_consistent_metrics() {
        let cfg = small_cfg();
        let m = run(&cfg).unwrap();
        assert!(m.transmissions > 0);
        assert!(m.pairs_in_range > 0);
        // Partition of outcomes over pairs.
        let sum: u64 = metrics::TxResult::ALL.iter().map(|&r| m.count(r)).sum();
        assert_eq!(sum, m.pairs_in_range);
        // 2 s at 100-subframe epochs.
        assert_eq!(m.cbr_epochs.len(), 20);
        assert_eq!(m.mcs11_fraction.len(), 20);
        assert_eq!(m.rssi_epochs.len(), 20);
        // Every transmission met the PSD cap.
        assert!(m.max_psd_dbm_mhz <= 23.0 + 1e-6);
    }

    #[test]
    fn identical_seeds_reproduce_metrics_exactly() {
        let cfg = small_cfg();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.pdr_bins, b.pdr_bins);
        assert_eq!(a.transmissions, b.transmissions);
        assert_eq!(a.cbr_epochs, b.cbr_epochs);
        assert_eq!(a.rssi_epochs, b.rssi_epochs);
        assert_eq!(a.mcs11_fraction, b.mcs11_fraction);
        let mut c = cfg.clone();
        c.seed = 99;
        let d = run(&c).unwrap();
        assert_ne!(a.cbr_epochs, d.cbr_epochs);
    }

    #[test]
    fn fixed_modes_pin_mcs_usage() {
        let mut cfg = small_cfg();
        cfg.duration_s = 1.0;
        cfg.mcs_mode = McsMode::Fixed7;
        let m7 = run(&cfg).unwrap();
        assert!(m7.mcs11_fraction.iter().all(|&f| f == 0.0));
        cfg.mcs_mode = McsMode::Fixed11;
        let m11 = run(&cfg).unwrap();
        assert!(m11.mcs11_fraction.iter().all(|&f| f == 1.0));
    }
}
