//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `-- --nocapture` to see them). The trend criteria share a batch
//! of desk-scale runs computed once.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sidelink_core::dcc::DccTable;
use sidelink_core::grid::{allocation_shape, ChannelConfig, McsEntry};
use sidelink_core::mac::{
    enumerate_csrs, filter_rsrp, filter_unsensed_and_reserved, select_lowest_rssi,
    SciReservation, SensingWindow,
};
use sidelink_core::metrics::{export, RunMetrics, TxResult};
use sidelink_core::phy::{psd_dbm_mhz, tx_power_for_rbs, SubchannelSample};
use sidelink_core::sim::{run, McsMode, ScenarioConfig};

fn report(id: &str, pass: bool, detail: &str) -> bool {
    println!(
        "ACCEPTANCE {id} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---------------------------------------------------------------------------
// Criterion 1: occupancy table for the 190-B packet on 5 x 10 RB, exact.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_occupancy_table() {
    let cfg = ChannelConfig::default_10mhz();
    let expected_subchannels = [5usize, 4, 3, 3, 2, 2, 2, 2, 2, 2, 2];
    let mut ok = true;
    let mut totals = Vec::new();
    for (i, want) in expected_subchannels.iter().enumerate() {
        let mcs = McsEntry::new((i + 1) as u8).unwrap();
        let (n_sub, n_total) = allocation_shape(mcs, 190, &cfg).unwrap();
        totals.push(n_total);
        ok &= n_sub == *want;
    }
    ok &= totals[6] == 15 && totals[10] == 11 && totals[4] == 20;
    assert!(report(
        "1",
        ok,
        &format!("subchannel counts {expected_subchannels:?}, totals {totals:?}")
    ));
}

// ---------------------------------------------------------------------------
// Criterion 2: PSD-limited power, exact to 0.01 dB, plus the run-long cap.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_power_and_psd() {
    let p15 = tx_power_for_rbs(15, 23.0);
    let p11 = tx_power_for_rbs(11, 23.0);
    let mut ok = (p15 - 27.32).abs() < 0.01 && (p11 - 25.97).abs() < 0.01;
    let mut worst = f64::NEG_INFINITY;
    for metrics in batch().runs.values() {
        worst = worst.max(metrics.max_psd_dbm_mhz);
    }
    ok &= worst <= 23.0 + 1e-6;
    assert!(report(
        "2",
        ok,
        &format!("tx(15 RB) {p15:.4} dBm, tx(11 RB) {p11:.4} dBm, max simulated PSD {worst:.6} dBm/MHz")
    ));
}

// ---------------------------------------------------------------------------
// Criterion 3: SB-SPS pipeline equals a brute-force reference on 100
// randomized small grids, exactly.
// ---------------------------------------------------------------------------

struct FillRow {
    own_tx: bool,
    rssi: Vec<f64>,
    rsrp: Vec<Option<f64>>,
    /// (first_subchannel, n_subchannels, rri)
    resv: Vec<(usize, usize, u32)>,
}

struct Fill {
    start: u64,
    rows: Vec<FillRow>,
}

fn random_fill(rng: &mut ChaCha8Rng, nsc: usize, len: usize, start: u64) -> Fill {
    let rows = (0..len)
        .map(|_| {
            let own_tx = rng.random::<f64>() < 0.1;
            let rssi = (0..nsc).map(|_| rng.random_range(-105.0..-60.0)).collect();
            let rsrp = (0..nsc)
                .map(|_| {
                    (rng.random::<f64>() < 0.4).then(|| rng.random_range(-130.0..-70.0))
                })
                .collect();
            let n_resv = rng.random_range(0..=2);
            let resv = (0..n_resv)
                .map(|_| {
                    let first = rng.random_range(0..nsc);
                    let n = rng.random_range(1..=nsc - first);
                    let rri = *[7u32, 10, 20].get(rng.random_range(0..3)).unwrap();
                    (first, n, rri)
                })
                .collect();
            FillRow {
                own_tx,
                rssi,
                rsrp,
                resv,
            }
        })
        .collect();
    Fill { start, rows }
}

fn fill_to_sensing(fill: &Fill, nsc: usize, noise: f64) -> SensingWindow {
    let mut w = SensingWindow::with_capacity(nsc, fill.rows.len(), noise);
    for (i, row) in fill.rows.iter().enumerate() {
        let sf = fill.start + i as u64;
        if row.own_tx {
            w.record_own_tx(sf);
            continue;
        }
        let samples: Vec<SubchannelSample> = (0..nsc)
            .map(|sc| SubchannelSample {
                subframe: sf,
                subchannel: sc,
                rssi_dbm: row.rssi[sc],
                latest_rsrp_dbm: row.rsrp[sc],
                occupied_rbs: 0,
            })
            .collect();
        let resv: Vec<SciReservation> = row
            .resv
            .iter()
            .map(|&(first, n, rri)| SciReservation {
                origin: 0,
                rri_ms: rri,
                first_subchannel: first,
                n_subchannels: n,
            })
            .collect();
        w.record_sensed(sf, &samples, &resv);
    }
    w
}

/// Literal-rule reference implementation of the whole selection pipeline.
#[allow(clippy::too_many_arguments)]
fn oracle_pipeline(
    fill: &Fill,
    nsc: usize,
    n_sub: usize,
    window: Range<u64>,
    period: u64,
    base_thr: f64,
    noise: f64,
) -> Vec<(u64, usize)> {
    let recorded = fill.start..fill.start + fill.rows.len() as u64;
    let row = |s: u64| &fill.rows[(s - fill.start) as usize];

    let mut cands: Vec<(u64, usize)> = Vec::new();
    for sf in window.clone() {
        for f in 0..=(nsc - n_sub) {
            cands.push((sf, f));
        }
    }
    let original = cands.len();

    // Stage 1: drop own-tx shadows and single-hop announced reservations.
    cands.retain(|&(sf, f)| {
        let mut j = 1u64;
        while let Some(s) = sf.checked_sub(j * period) {
            if s < recorded.start {
                break;
            }
            if s < recorded.end && row(s).own_tx {
                return false;
            }
            j += 1;
        }
        for s in recorded.clone() {
            if row(s).own_tx {
                continue;
            }
            for &(rf, rn, rri) in &row(s).resv {
                if s + rri as u64 == sf && f < rf + rn && rf < f + n_sub {
                    return false;
                }
            }
        }
        true
    });

    // Stage 2: RSRP filter with the 3 dB loop against 20% of the original.
    let worst_rsrp = |sf: u64, f: usize| -> Option<f64> {
        let mut worst: Option<f64> = None;
        for sc in f..f + n_sub {
            let mut s = recorded.end;
            'scan: while s > recorded.start {
                s -= 1;
                if row(s).own_tx {
                    continue;
                }
                for &(rf, rn, rri) in &row(s).resv {
                    if sc >= rf && sc < rf + rn && (sf - s).is_multiple_of(rri as u64) {
                        if let Some(r) = row(s).rsrp[sc] {
                            worst = Some(worst.map_or(r, |w: f64| w.max(r)));
                            break 'scan;
                        }
                    }
                }
            }
        }
        worst
    };
    let mut thr = base_thr;
    loop {
        let survivors: Vec<(u64, usize)> = cands
            .iter()
            .filter(|&&(sf, f)| worst_rsrp(sf, f).is_none_or(|r| r <= thr))
            .copied()
            .collect();
        if survivors.len() * 5 >= original || survivors.len() == cands.len() {
            cands = survivors;
            break;
        }
        thr += 3.0;
    }

    // Stage 3: lowest average RSSI over the periodic history, 20% quota.
    let avg = |sf: u64, f: usize| -> f64 {
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for sc in f..f + n_sub {
            let mut j = 1u64;
            while let Some(s) = sf.checked_sub(j * period) {
                if s < recorded.start {
                    break;
                }
                if s < recorded.end && !row(s).own_tx {
                    sum += 10f64.powf(row(s).rssi[sc] / 10.0);
                    cnt += 1;
                }
                j += 1;
            }
        }
        if cnt == 0 {
            noise
        } else {
            10.0 * (sum / cnt as f64).log10()
        }
    };
    let mut keyed: Vec<(f64, u64, usize)> = cands.iter().map(|&(sf, f)| (avg(sf, f), sf, f)).collect();
    keyed.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    keyed.truncate(original.div_ceil(5));
    keyed.into_iter().map(|(_, sf, f)| (sf, f)).collect()
}

#[test]
fn criterion_3_pipeline_matches_bruteforce() {
    let nsc = 3;
    let cfg = ChannelConfig::new(sidelink_core::Bandwidth::Mhz10, 3, 10).unwrap();
    let noise = -102.45;
    let period = 10u64;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let mut checked = 0;
    for case in 0..100 {
        let len = rng.random_range(20..=40);
        let start = 1000 + case as u64;
        let now = start + len as u64;
        let n_sub = rng.random_range(1..=nsc);
        let fill = random_fill(&mut rng, nsc, len, start);
        let sensing = fill_to_sensing(&fill, nsc, noise);

        let window = now + 1..now + 1 + period;
        let all = enumerate_csrs(&window, n_sub, &cfg).unwrap();
        let original = all.len();
        let stage1 = filter_unsensed_and_reserved(all, &sensing, &window, period as u32);
        let stage2 = filter_rsrp(stage1, &sensing, &window, -126.0, original);
        let shortlist = select_lowest_rssi(stage2.survivors, &sensing, period as u32, original);
        let got: Vec<(u64, usize)> = shortlist
            .iter()
            .map(|c| (c.subframe, c.first_subchannel))
            .collect();

        let want = oracle_pipeline(&fill, nsc, n_sub, window, period, -126.0, noise);
        assert_eq!(got, want, "case {case} (n_sub {n_sub}, len {len})");
        checked += 1;
    }
    assert!(report(
        "3",
        checked == 100,
        &format!("{checked}/100 randomized grids matched the brute-force reference exactly")
    ));
}

// ---------------------------------------------------------------------------
// Criterion 4: CR-limit table lookups with boundary behavior, exact.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_cr_limit_table() {
    let t = DccTable::default();
    let ok = t.cr_limit(0.2).is_none()
        && t.cr_limit(0.3).is_none()
        && t.cr_limit(0.300001) == Some(0.03)
        && t.cr_limit(0.5) == Some(0.03)
        && t.cr_limit(0.65) == Some(0.03)
        && t.cr_limit(0.7) == Some(0.06)
        && t.cr_limit(0.8) == Some(0.06)
        && t.cr_limit(0.9) == Some(0.003)
        && t.cr_limit(1.0) == Some(0.003);
    assert!(report(
        "4",
        ok,
        "CBR ranges map to (unlimited, 0.03, 0.06, 0.003) with right-closed bounds"
    ));
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale trend reproduction on the shared batch.
// ---------------------------------------------------------------------------

struct Batch {
    /// (mode label, density in milli-veh/m, seed) -> metrics
    runs: BTreeMap<(&'static str, u32, u64), RunMetrics>,
}

fn scenario(mode: McsMode, density: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        road_length_m: 1000.0,
        density_veh_per_m: density,
        duration_s: 20.0,
        mcs_mode: mode,
        seed,
        ..ScenarioConfig::default()
    }
}

fn mode_label(mode: McsMode) -> &'static str {
    match mode {
        McsMode::Fixed7 => "fixed7",
        McsMode::Fixed11 => "fixed11",
        McsMode::Adaptive => "adaptive",
    }
}

fn batch() -> &'static Batch {
    static BATCH: OnceLock<Batch> = OnceLock::new();
    BATCH.get_or_init(|| {
        let t0 = std::time::Instant::now();
        let mut runs = BTreeMap::new();
        for mode in [McsMode::Fixed7, McsMode::Fixed11, McsMode::Adaptive] {
            for density in [0.06, 0.20] {
                for seed in [1u64, 2] {
                    let cfg = scenario(mode, density, seed);
                    let metrics = run(&cfg).expect("batch run");
                    runs.insert(
                        (mode_label(mode), (density * 1000.0) as u32, seed),
                        metrics,
                    );
                }
            }
        }
        // One informational run at the middle density.
        let cfg = scenario(McsMode::Adaptive, 0.09, 1);
        runs.insert(("adaptive", 90, 1), run(&cfg).expect("batch run"));
        println!("acceptance batch: 13 runs in {:?}", t0.elapsed());
        Batch { runs }
    })
}

fn pooled_pdr_bins(mode: &'static str, density_milli: u32) -> Vec<(u64, u64)> {
    let b = batch();
    let mut bins: Vec<(u64, u64)> = Vec::new();
    for seed in [1u64, 2] {
        let m = &b.runs[&(mode, density_milli, seed)];
        if bins.len() < m.pdr_bins.len() {
            bins.resize(m.pdr_bins.len(), (0, 0));
        }
        for (i, (d, t)) in m.pdr_bins.iter().enumerate() {
            bins[i].0 += d;
            bins[i].1 += t;
        }
    }
    bins
}

#[test]
fn criterion_5a_pdr_ordering_at_high_density() {
    let b7 = pooled_pdr_bins("fixed7", 200);
    let b11 = pooled_pdr_bins("fixed11", 200);
    let first_bin = (100.0 / 25.0) as usize;
    let mut violations = Vec::new();
    let mut compared = 0;
    for i in first_bin..b7.len().min(b11.len()) {
        let (d7, t7) = b7[i];
        let (d11, t11) = b11[i];
        if t7 == 0 || t11 == 0 {
            continue;
        }
        compared += 1;
        let p7 = d7 as f64 / t7 as f64;
        let p11 = d11 as f64 / t11 as f64;
        if p7 < p11 {
            violations.push((i, p7, p11));
        }
    }
    let ok = compared >= 10 && violations.len() <= 1;
    assert!(report(
        "5a",
        ok,
        &format!(
            "{compared} bins beyond 100 m at 0.20 veh/m, {} violation(s) of PDR(MCS7) >= PDR(MCS11): {violations:?}",
            violations.len()
        )
    ));
}

fn mean_cbr(mode: &'static str, density_milli: u32) -> f64 {
    let b = batch();
    let vals: Vec<f64> = [1u64, 2]
        .iter()
        .map(|&s| b.runs[&(mode, density_milli, s)].mean_cbr())
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_5b_cbr_ordering_at_high_density() {
    let c7 = mean_cbr("fixed7", 200);
    let c11 = mean_cbr("fixed11", 200);
    assert!(report(
        "5b",
        c11 < c7,
        &format!("mean CBR at 0.20 veh/m: MCS 11 {c11:.4} < MCS 7 {c7:.4}")
    ));
}

fn mean_rssi(mode: &'static str, density_milli: u32) -> f64 {
    let b = batch();
    let vals: Vec<f64> = [1u64, 2]
        .iter()
        .map(|&s| b.runs[&(mode, density_milli, s)].mean_subchannel_rssi_dbm())
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_5c_rssi_ordering_at_every_density() {
    let mut ok = true;
    let mut detail = String::new();
    for density in [60u32, 200] {
        let r7 = mean_rssi("fixed7", density);
        let r11 = mean_rssi("fixed11", density);
        ok &= r11 < r7;
        detail.push_str(&format!(
            "at {:.2} veh/m: MCS 11 {r11:.2} dBm vs MCS 7 {r7:.2} dBm; ",
            density as f64 / 1000.0
        ));
    }
    assert!(report("5c", ok, detail.trim_end_matches("; ")));
}

fn mean_usage(density_milli: u32) -> f64 {
    let b = batch();
    let vals: Vec<f64> = [1u64, 2]
        .iter()
        .map(|&s| b.runs[&("adaptive", density_milli, s)].mean_mcs11_usage())
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_5d_adaptive_usage_low_density() {
    let usage = mean_usage(60);
    assert!(report(
        "5d-low",
        usage < 0.10,
        &format!("MCS 11 usage at 0.06 veh/m: {usage:.4} (< 0.10 required)")
    ));
}

#[test]
fn criterion_5d_adaptive_usage_high_density() {
    let b = batch();
    let info = b.runs[&("adaptive", 90, 1)].mean_mcs11_usage();
    println!("informational: adaptive MCS 11 usage at 0.09 veh/m = {info:.4} (mid-density split, not gated)");
    let usage = mean_usage(200);
    assert!(report(
        "5d-high",
        usage > 0.90,
        &format!("MCS 11 usage at 0.20 veh/m: {usage:.4} (> 0.90 required)")
    ));
}

#[test]
fn criterion_5e_half_duplex_invariance() {
    let b = batch();
    let mut ok = true;
    let mut detail = String::new();
    for density in [60u32, 200] {
        let fracs: Vec<f64> = ["fixed7", "fixed11", "adaptive"]
            .iter()
            .map(|&m| b.runs[&(m, density, 1)].fraction_of_pairs(TxResult::HalfDuplex))
            .collect();
        let spread = fracs
            .iter()
            .fold(f64::NEG_INFINITY, |a, &x| a.max(x))
            - fracs.iter().fold(f64::INFINITY, |a, &x| a.min(x));
        ok &= spread <= 0.01;
        detail.push_str(&format!(
            "at {:.2} veh/m fractions {:?} spread {spread:.5}; ",
            density as f64 / 1000.0,
            fracs.iter().map(|f| (f * 1e4).round() / 1e4).collect::<Vec<_>>()
        ));
    }
    assert!(report("5e", ok, detail.trim_end_matches("; ")));
}

// ---------------------------------------------------------------------------
// Criterion 6: byte-identical outputs for identical config and seed.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_byte_identical_outputs() {
    let cfg = ScenarioConfig {
        road_length_m: 500.0,
        density_veh_per_m: 0.02,
        duration_s: 3.0,
        seed: 7,
        ..ScenarioConfig::default()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    export(&run(&cfg).unwrap(), &cfg, dir_a.path()).unwrap();
    export(&run(&cfg).unwrap(), &cfg, dir_b.path()).unwrap();
    let mut ok = true;
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir_a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir_a.path().join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join(&name)).unwrap();
        ok &= a == b;
        names.push(name.to_string_lossy().into_owned());
    }
    names.sort();
    assert!(report(
        "6",
        ok && names.len() == 6,
        &format!("two identical runs produced byte-identical {names:?}")
    ));
}

// ---------------------------------------------------------------------------
// Criterion 7: randomized cross-module invariants; the per-module property
// suites (grid/phy/mac/dcc proptests and statistical tests) run in the
// library test target.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_cross_module_invariants() {
    // Outcome partition and PSD cap over every batch run.
    let mut ok = true;
    for ((mode, density, seed), m) in &batch().runs {
        let sum: u64 = TxResult::ALL.iter().map(|&r| m.count(r)).sum();
        ok &= sum == m.pairs_in_range;
        ok &= m.max_psd_dbm_mhz <= 23.0 + 1e-6;
        if !ok {
            println!("partition/PSD violation in ({mode}, {density}, {seed})");
            break;
        }
    }
    // Randomized adaptation invariants, 1000 cases.
    let cfg = ChannelConfig::default_10mhz();
    let table = DccTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let cbr: f64 = rng.random();
        let cr: f64 = rng.random();
        let (mcs_a, p_a) = sidelink_core::dcc::adapt(cbr, cr, &table, 190, &cfg, 23.0).unwrap();
        let (mcs_b, p_b) = sidelink_core::dcc::adapt(cbr, cr, &table, 190, &cfg, 23.0).unwrap();
        ok &= mcs_a.i_mcs == mcs_b.i_mcs && p_a == p_b;
        let (_, n_rbs) = allocation_shape(mcs_a, 190, &cfg).unwrap();
        ok &= (psd_dbm_mhz(p_a, n_rbs) - 23.0).abs() < 1e-6;
        ok &= mcs_a.i_mcs == 7 || mcs_a.i_mcs == 11;
    }
    assert!(report(
        "7",
        ok,
        "outcome partition and PSD cap hold on all batch runs; 1000 randomized adapt cases pure and PSD-exact (module property suites run in the library target)"
    ));
}
