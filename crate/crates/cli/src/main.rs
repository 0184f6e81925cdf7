//! Batch runner: parse a scenario, execute one run per seed (optionally in
//! parallel), write per-run result products plus a mean aggregate and a
//! batch manifest.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Parser;
use serde::Serialize;

use sidelink_core::metrics::{export, RunMetrics, TxResult};
use sidelink_core::sim::{run, McsMode, ScenarioConfig};

#[derive(Parser, Debug)]
#[command(
    name = "sidelink-sim",
    version,
    about = "Deterministic C-V2X Mode 4 sidelink simulator: seed batches with aggregated result products"
)]
struct Args {
    /// Scenario file (TOML). Defaults describe the 2 km highway profile.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory; receives `run_seed<k>/` directories, `aggregate/` and
    /// `manifest.toml`.
    #[arg(long, default_value = "results")]
    out: PathBuf,

    /// Comma-separated seed list; when given it fixes the number of runs.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Number of runs with seeds 1..=N when --seeds is absent.
    #[arg(long, default_value_t = 5)]
    runs: usize,

    /// Worker threads for the seed batch; results never depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,

    /// Scenario override, KEY=VALUE; repeatable. Overrides win over the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let args = Args::parse();
    let cfg = match build_config(&args) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("configuration error: {msg}");
            return 1;
        }
    };
    let seeds: Vec<u64> = match &args.seeds {
        Some(seeds) if seeds.is_empty() => {
            eprintln!("configuration error: --seeds was given without any seed");
            return 1;
        }
        Some(seeds) => seeds.clone(),
        None => (1..=args.runs as u64).collect(),
    };
    match run_batch(&args, &cfg, &seeds) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("runtime error: {msg}");
            2
        }
    }
}

fn build_config(args: &Args) -> Result<ScenarioConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => ScenarioConfig::load(path).map_err(|e| e.to_string())?,
        None => ScenarioConfig::default(),
    };
    for entry in &args.overrides {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| format!("override '{entry}' is not KEY=VALUE"))?;
        apply_override(&mut cfg, key.trim(), value.trim())?;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value '{value}' for {key}: {e}"))
}

fn apply_override(cfg: &mut ScenarioConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "density" => cfg.density_veh_per_m = parse(key, value)?,
        "mcs_mode" => cfg.mcs_mode = parse::<McsMode>(key, value)?,
        "duration" => cfg.duration_s = parse(key, value)?,
        "road_length" => cfg.road_length_m = parse(key, value)?,
        "lanes" => cfg.lanes = parse(key, value)?,
        "lane_width" => cfg.lane_width_m = parse(key, value)?,
        "speed" => cfg.speed_kmh = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "packet_size" => cfg.packet_size_bytes = parse(key, value)?,
        "app_period" => cfg.app_period_ms = parse(key, value)?,
        "rri" => cfg.rri_ms = parse(key, value)?,
        "keep_probability" => cfg.keep_probability = parse(key, value)?,
        "rsrp_threshold" => cfg.rsrp_threshold_dbm = parse(key, value)?,
        "cbr_rssi_threshold" => cfg.cbr_rssi_threshold_dbm = parse(key, value)?,
        "eval_range" => cfg.eval_range_m = parse(key, value)?,
        "pdr_bin_width" => cfg.pdr_bin_width_m = parse(key, value)?,
        "warmup_subframes" => cfg.warmup_subframes = parse(key, value)?,
        "num_subchannels" => cfg.channel.num_subchannels = parse(key, value)?,
        "subchannel_size_rb" => cfg.channel.subchannel_size_rb = parse(key, value)?,
        "tx_antenna_gain" => cfg.radio.antenna_gain_dbi = parse(key, value)?,
        other => {
            return Err(format!(
                "unknown override key '{other}' (known: density, mcs_mode, duration, road_length, \
                 lanes, lane_width, speed, seed, packet_size, app_period, rri, keep_probability, \
                 rsrp_threshold, cbr_rssi_threshold, eval_range, pdr_bin_width, warmup_subframes, \
                 num_subchannels, subchannel_size_rb, tx_antenna_gain)"
            ))
        }
    }
    Ok(())
}

struct RunSlot {
    seed: u64,
    dir: PathBuf,
    outcome: Result<RunMetrics, String>,
}

#[derive(Serialize)]
struct RunStatus<'a> {
    seed: u64,
    dir: String,
    status: &'a str,
}

#[derive(Serialize)]
struct BatchManifest<'a> {
    version: &'a str,
    seeds: &'a [u64],
    workers: usize,
    runs: Vec<RunStatus<'a>>,
    config: &'a ScenarioConfig,
}

fn run_batch(args: &Args, cfg: &ScenarioConfig, seeds: &[u64]) -> Result<(), String> {
    fs::create_dir_all(&args.out).map_err(|e| format!("cannot create {:?}: {e}", args.out))?;

    let slots: Vec<Mutex<Option<RunSlot>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = args.workers.clamp(1, seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let seed = seeds[i];
                let mut run_cfg = cfg.clone();
                run_cfg.seed = seed;
                let dir = args.out.join(format!("run_seed{seed}"));
                let outcome = run(&run_cfg)
                    .map_err(|e| e.to_string())
                    .and_then(|metrics| {
                        export(&metrics, &run_cfg, &dir)
                            .map_err(|e| e.to_string())
                            .map(|()| metrics)
                    });
                *slots[i].lock().unwrap() = Some(RunSlot { seed, dir, outcome });
            });
        }
    });
    let slots: Vec<RunSlot> = slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("worker filled every slot"))
        .collect();

    let completed: Vec<(u64, &RunMetrics)> = slots
        .iter()
        .filter_map(|s| s.outcome.as_ref().ok().map(|m| (s.seed, m)))
        .collect();
    let mut aggregate_error = None;
    if !completed.is_empty() {
        if let Err(e) = write_aggregate(&args.out.join("aggregate"), &completed) {
            aggregate_error = Some(format!("aggregate export failed: {e}"));
        }
    }

    let statuses: Vec<RunStatus> = slots
        .iter()
        .map(|s| RunStatus {
            seed: s.seed,
            dir: s.dir.display().to_string(),
            status: match &s.outcome {
                Ok(_) => "ok",
                Err(_) => "failed",
            },
        })
        .collect();
    let manifest = BatchManifest {
        version: env!("CARGO_PKG_VERSION"),
        seeds,
        workers: args.workers,
        runs: statuses,
        config: cfg,
    };
    let manifest_text =
        toml::to_string_pretty(&manifest).map_err(|e| format!("manifest serialization: {e}"))?;
    fs::write(args.out.join("manifest.toml"), manifest_text)
        .map_err(|e| format!("cannot write manifest: {e}"))?;

    for slot in &slots {
        if let Err(e) = &slot.outcome {
            return Err(format!("run for seed {} failed: {e}", slot.seed));
        }
    }
    if let Some(e) = aggregate_error {
        return Err(e);
    }
    println!(
        "{} run(s) completed into {}",
        seeds.len(),
        args.out.display()
    );
    Ok(())
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    let path = dir.join(name);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Equal-weight means across runs, mirroring the per-run file schemas.
fn write_aggregate(dir: &Path, runs: &[(u64, &RunMetrics)]) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let n_bins = runs.iter().map(|(_, m)| m.pdr_bins.len()).max().unwrap_or(0);
    let mut pdr = String::from("bin_lo_m,bin_hi_m,mean_pdr,runs\n");
    let width = runs.first().map(|(_, m)| m.bin_width_m).unwrap_or(25.0);
    for bin in 0..n_bins {
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|(_, m)| m.pdr_in_bin(bin))
            .collect();
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        pdr.push_str(&format!(
            "{:.1},{:.1},{mean:.6},{}\n",
            bin as f64 * width,
            (bin + 1) as f64 * width,
            values.len()
        ));
    }
    write_file(dir, "pdr.csv", &pdr)?;

    let mut errors = String::from("outcome,mean_fraction_of_pairs\n");
    for result in TxResult::ALL {
        let mean = runs
            .iter()
            .map(|(_, m)| m.fraction_of_pairs(result))
            .sum::<f64>()
            / runs.len() as f64;
        errors.push_str(&format!("{},{mean:.6}\n", result.label()));
    }
    write_file(dir, "errors.csv", &errors)?;

    let max_epochs = runs
        .iter()
        .map(|(_, m)| m.cbr_epochs.len())
        .max()
        .unwrap_or(0);
    let mut cbr = String::from("epoch,mean_cbr,runs\n");
    for epoch in 0..max_epochs {
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|(_, m)| {
                m.cbr_epochs.get(epoch).map(|samples| {
                    if samples.is_empty() {
                        0.0
                    } else {
                        samples.iter().sum::<f64>() / samples.len() as f64
                    }
                })
            })
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        cbr.push_str(&format!("{epoch},{mean:.6},{}\n", values.len()));
    }
    write_file(dir, "cbr.csv", &cbr)?;

    let mut usage = String::from("epoch,mean_fraction_mcs11,runs\n");
    for epoch in 0..max_epochs {
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|(_, m)| m.mcs11_fraction.get(epoch).copied())
            .collect();
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        usage.push_str(&format!("{epoch},{mean:.6},{}\n", values.len()));
    }
    write_file(dir, "mcs_usage.csv", &usage)?;

    let mut rssi = String::from("epoch,subchannel,mean_avg_rssi_dbm,runs\n");
    for epoch in 0..max_epochs {
        let per_run: Vec<&Vec<f64>> = runs
            .iter()
            .filter_map(|(_, m)| m.rssi_epochs.get(epoch))
            .collect();
        if per_run.is_empty() {
            continue;
        }
        let nsc = per_run[0].len();
        for sc in 0..nsc {
            let mean = per_run.iter().map(|e| e[sc]).sum::<f64>() / per_run.len() as f64;
            rssi.push_str(&format!("{epoch},{sc},{mean:.6},{}\n", per_run.len()));
        }
    }
    write_file(dir, "rssi.csv", &rssi)?;
    Ok(())
}
