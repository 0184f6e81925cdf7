//! Sweep of the desk-scale trends: CBR, RSSI, MCS usage and PDR per
//! mode and density.

use sidelink_core::metrics::TxResult;
use sidelink_core::sim::{run, McsMode, ScenarioConfig};

fn main() {
    let t0 = std::time::Instant::now();
    for density in [0.06, 0.09, 0.20] {
        for mode in [McsMode::Fixed7, McsMode::Fixed11, McsMode::Adaptive] {
            let cfg = ScenarioConfig {
                road_length_m: 1000.0,
                density_veh_per_m: density,
                duration_s: 20.0,
                mcs_mode: mode,
                seed: 1,
                ..ScenarioConfig::default()
            };
            let m = run(&cfg).unwrap();
            let pdr_100_200 = m.pdr_in_bin(5).unwrap_or(f64::NAN);
            let pdr_200_300 = m.pdr_in_bin(9).unwrap_or(f64::NAN);
            let pdr_300_400 = m.pdr_in_bin(13).unwrap_or(f64::NAN);
            let pdr_400_500 = m.pdr_in_bin(17).unwrap_or(f64::NAN);
            println!(
                "density {density:.2} mode {mode:?}: cbr {:.3} rssi {:.2} dBm usage {:.3} tx {} pairs {} hd {:.4} sci {:.4} sens {:.4} int {:.4} pdr@[125/225/325/425] {:.3}/{:.3}/{:.3}/{:.3} maxpsd {:.4}",
                m.mean_cbr(),
                m.mean_subchannel_rssi_dbm(),
                m.mean_mcs11_usage(),
                m.transmissions,
                m.pairs_in_range,
                m.fraction_of_pairs(TxResult::HalfDuplex),
                m.fraction_of_pairs(TxResult::UndecodedSci),
                m.fraction_of_pairs(TxResult::Sensing),
                m.fraction_of_pairs(TxResult::Interference),
                pdr_100_200,
                pdr_200_300,
                pdr_300_400,
                pdr_400_500,
                m.max_psd_dbm_mhz,
            );
        }
    }
    println!("total wall time {:?}", t0.elapsed());
}
