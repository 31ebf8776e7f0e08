mod config;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ihb_core::inference::{
    analyze_trace, expected_arrival_rate, expected_interprobe_hits, localize_fault, median_interprobe_hits,
    silence_consistency, silence_consistency_poisson, Analysis, CpeView, OutageTarget, Report, ReportRecord,
    ReportSelector,
};
use ihb_core::observer::{
    load_pcap, observe_ipv4, read_records, write_records, write_snapshot, LiveCapture, PacketOutcome, StateStore,
    StoreConfig,
};
use ihb_core::schedule::{all_pairs_total, coverage_estimate};
use ihb_core::sender::{
    run_sender, Emitter, FileEmitter, IcmpEmitter, SendSummary, SystemClock, UdpEmitter, VirtualClock,
};
use ihb_core::simulator::{evaluate, write_truth, Scenario};
use ihb_core::wire::{ObservedHeartbeat, OrderKind};
use ipnet::Ipv4Net;
use serde_json::json;

use config::Config;

const RECORDS_FILE: &str = "records.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const MODEL_SCHEMA: &str = "ihb.model.v1";
const NS: u64 = 1_000_000_000;

#[derive(Debug, Parser)]
#[command(name = "ihb", version, about = "Internet heartbeat sender, observer and analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Emit heartbeats per the [sender] section until interrupted.
    Send(SendArgs),
    /// Ingest heartbeats into a state directory.
    Observe(ObserveArgs),
    /// Emit report records from a state directory.
    Analyze(AnalyzeArgs),
    /// Run a scenario and write trace, truth, reports and metrics.
    Simulate(SimulateArgs),
    /// Closed-form calculators.
    #[command(subcommand)]
    Model(ModelCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmitterKind {
    /// JSON lines, one emission each.
    File,
    Udp,
    Icmp,
}

#[derive(Debug, clap::Args)]
struct SendArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "file")]
    emitter: EmitterKind,
    /// Output for the file emitter; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    duration_s: Option<u64>,
    /// Run on virtual time from this Unix time (ns) instead of the wall clock. Needs --duration-s.
    #[arg(long)]
    virtual_start_ns: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct ObserveArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lens: Option<Ipv4Net>,
    #[arg(long, conflicts_with_all = ["records", "live"])]
    pcap: Option<PathBuf>,
    /// JSON lines of observed heartbeats, e.g. a simulator trace.
    #[arg(long, conflicts_with = "live")]
    records: Option<PathBuf>,
    /// Capture on raw sockets. Needs CAP_NET_RAW.
    #[arg(long)]
    live: bool,
    #[arg(long)]
    state: Option<PathBuf>,
    /// Stop live capture after this long.
    #[arg(long)]
    duration_s: Option<u64>,
    /// Seconds between snapshot writes during live capture.
    #[arg(long, default_value_t = 10)]
    snapshot_every_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportKind {
    Outage,
    Paths,
    Spoof,
    Alias,
    Nat,
    Integrity,
    Localize,
}

#[derive(Debug, clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeat or comma-separate; all but localize by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    report: Vec<ReportKind>,
    /// Analysis end time (Unix ns); defaults to the last arrival.
    #[arg(long)]
    end_ns: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gateway view for localize, as TOML.
    #[arg(long)]
    cpe: Option<PathBuf>,
    /// Remote prefix whose reachability localize should judge.
    #[arg(long)]
    target_prefix: Option<Ipv4Net>,
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "sim-out")]
    out: PathBuf,
    /// Analysis settings ([inference] and [observer] sections).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    Permutation,
    Random,
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Probability that a silence is consistent with the sources being up.
    Outage {
        /// Per-source rate in heartbeats per second.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        lens_mask: u8,
        #[arg(long)]
        silence: f64,
        /// Independent silent sources; the probabilities multiply.
        #[arg(long, default_value_t = 1)]
        hosts: u32,
        #[arg(long)]
        poisson: bool,
        #[arg(long)]
        plain: bool,
    },
    /// Expected heartbeat arrival rate at a lens.
    Rate {
        #[arg(long)]
        participants: f64,
        #[arg(long)]
        pps: f64,
        #[arg(long)]
        lens_mask: u8,
        #[arg(long)]
        plain: bool,
    },
    /// Messages per sender to cover a pool.
    Coverage {
        #[arg(long, default_value_t = 1 << 32)]
        pool_size: u64,
        #[arg(long)]
        senders: u64,
        #[arg(long, value_enum, default_value = "permutation")]
        order: OrderArg,
        #[arg(long)]
        plain: bool,
    },
    /// Heartbeats between hits on a lens of mask m.
    Interprobe {
        #[arg(long)]
        lens_mask: u8,
        #[arg(long)]
        plain: bool,
    },
}

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.store(true, Ordering::Relaxed)) {
        log::warn!("no signal handler: {e}");
    }
    stop
}

fn create_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(Stdout { closed: false })),
    })
}

/// Stdout that turns a closed pipe into a no-op, so `| head` does not abort a run.
struct Stdout {
    closed: bool,
}

impl Write for Stdout {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.closed {
            return Ok(buf.len());
        }
        match io::stdout().lock().write(buf) {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {
                self.closed = true;
                Ok(buf.len())
            }
            r => r,
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match io::stdout().lock().flush() {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
            r => r,
        }
    }
}

fn cmd_send(args: SendArgs) -> Result<()> {
    let config = Config::load(Some(&args.config))?;
    let Some(sender) = config.sender else { bail!("config has no [sender] section") };
    let stop = stop_flag();
    let mut emitter: Box<dyn Emitter> = match args.emitter {
        EmitterKind::File => Box::new(FileEmitter::from_writer(create_out(args.out.as_deref())?)),
        EmitterKind::Udp => Box::new(UdpEmitter::default()),
        EmitterKind::Icmp => Box::new(IcmpEmitter::default()),
    };
    let summary: SendSummary = match args.virtual_start_ns {
        Some(start) => {
            let Some(d) = args.duration_s else { bail!("--virtual-start-ns needs --duration-s") };
            run_sender(&sender, &mut VirtualClock::new(start, d * NS), emitter.as_mut(), &stop)?
        }
        None => {
            let mut clock = match args.duration_s {
                Some(d) => SystemClock::with_duration(Duration::from_secs(d)),
                None => SystemClock::new(),
            };
            run_sender(&sender, &mut clock, emitter.as_mut(), &stop)?
        }
    };
    eprintln!("sent {} heartbeats, {} failed", summary.emitted, summary.failed);
    Ok(())
}

fn state_dir(flag: Option<PathBuf>, config: &Config) -> Result<PathBuf> {
    flag.or_else(|| config.paths.state_dir.clone()).context("no state directory: pass --state or set paths.state_dir")
}

fn read_record_file(path: &Path) -> Result<Vec<ObservedHeartbeat>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_records(BufReader::new(f)).collect::<Result<Vec<_>, _>>().with_context(|| format!("reading {}", path.display()))
}

fn save_state(dir: &Path, records: &[ObservedHeartbeat], store: &StateStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!("{RECORDS_FILE}.tmp"));
    write_records(BufWriter::new(File::create(&tmp)?), records)?;
    fs::rename(&tmp, dir.join(RECORDS_FILE))?;
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    write_snapshot(BufWriter::new(File::create(&tmp)?), &store.snapshot())?;
    fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
    Ok(())
}

fn emit_anomalies(out: &mut dyn Write, store: &mut StateStore, obs: &ObservedHeartbeat) -> Result<bool> {
    match store.ingest(obs) {
        Ok(anomalies) => {
            for a in anomalies {
                serde_json::to_writer(&mut *out, &a)?;
                out.write_all(b"\n")?;
            }
            Ok(true)
        }
        Err(_) => Ok(false),
    }
}

fn cmd_observe(args: ObserveArgs) -> Result<()> {
    let config = Config::load(args.config.as_deref())?;
    let dir = state_dir(args.state, &config)?;
    let store_config = config.observer.store_config(args.lens)?;
    let udp_port = config.observer.udp_port();

    let existing = dir.join(RECORDS_FILE);
    let mut records = if existing.exists() { read_record_file(&existing)? } else { Vec::new() };
    let mut store = StateStore::new(store_config.clone());
    for r in &records {
        let _ = store.ingest(r);
    }
    let previous = records.len();
    let mut out = create_out(None)?;

    if let Some(pcap) = &args.pcap {
        let load = load_pcap(pcap, &store_config.lens, udp_port)?;
        for _ in 0..load.stats.malformed {
            store.note_malformed();
        }
        for r in load.records {
            if emit_anomalies(out.as_mut(), &mut store, &r)? {
                records.push(r);
            }
        }
        eprintln!(
            "pcap: {} packets, {} not heartbeats, {} out of lens, {} malformed",
            load.stats.packets, load.stats.not_heartbeat, load.stats.out_of_lens, load.stats.malformed
        );
    } else if let Some(path) = &args.records {
        let mut new = read_record_file(path)?;
        new.sort_by_key(|r| r.recv_time_ns);
        for r in new {
            if emit_anomalies(out.as_mut(), &mut store, &r)? {
                records.push(r);
            }
        }
    } else if args.live {
        let capture = LiveCapture::open(true, true).context("opening raw sockets (needs CAP_NET_RAW)")?;
        let stop = stop_flag();
        let started = Instant::now();
        let mut last_save = Instant::now();
        while !stop.load(Ordering::Relaxed) && args.duration_s.is_none_or(|d| started.elapsed().as_secs() < d) {
            if let Some((t, bytes)) = capture.next_packet(Duration::from_millis(200)) {
                match observe_ipv4(&bytes, t, &store_config.lens, udp_port) {
                    PacketOutcome::Heartbeat(obs) => {
                        if emit_anomalies(out.as_mut(), &mut store, &obs)? {
                            records.push(obs);
                        }
                    }
                    PacketOutcome::Malformed => store.note_malformed(),
                    PacketOutcome::NotHeartbeat | PacketOutcome::OutOfLens => {}
                }
            }
            if last_save.elapsed().as_secs() >= args.snapshot_every_s {
                out.flush()?;
                save_state(&dir, &records, &store)?;
                last_save = Instant::now();
            }
        }
    } else {
        bail!("choose an input: --pcap, --records or --live");
    }
    out.flush()?;
    save_state(&dir, &records, &store)?;
    eprintln!(
        "state {}: {} new heartbeats, {} total, {} sources",
        dir.display(),
        records.len() - previous,
        records.len(),
        store.len()
    );
    Ok(())
}

fn load_state(dir: &Path) -> Result<(StoreConfig, Vec<ObservedHeartbeat>)> {
    let snap = File::open(dir.join(SNAPSHOT_FILE)).with_context(|| format!("no snapshot in {}", dir.display()))?;
    let snapshot = ihb_core::observer::read_snapshot(BufReader::new(snap))?;
    let records = read_record_file(&dir.join(RECORDS_FILE))?;
    Ok((snapshot.config, records))
}

fn localize(analysis: &Analysis, args: &AnalyzeArgs, threshold: f64) -> Result<Report> {
    let Some(path) = &args.cpe else { bail!("localize needs --cpe") };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut view: CpeView = toml::from_str(&text).with_context(|| format!("cpe view {}", path.display()))?;
    let latest = analysis.outage_transitions();
    let mut last_by_target = std::collections::BTreeMap::new();
    for a in &latest {
        let id = match &a.target {
            OutageTarget::Source { key } => Ipv4Net::new(key.src_addr, 24)?.trunc(),
            OutageTarget::Prefix { prefix } => *prefix,
        };
        last_by_target.insert(id, a.p_consistent);
    }
    if view.inbound_global_p_consistent.is_none() {
        view.inbound_global_p_consistent = last_by_target.values().copied().reduce(f64::max);
    }
    if view.inbound_target_prefix_p_consistent.is_none() {
        if let Some(prefix) = args.target_prefix {
            let key = Ipv4Net::new(prefix.network(), 24)?.trunc();
            view.inbound_target_prefix_p_consistent = last_by_target.get(&key).copied();
        }
    }
    Ok(Report::Fault(localize_fault(&view, threshold)?))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let config = Config::load(args.config.as_deref())?;
    let dir = state_dir(args.state.clone(), &config)?;
    let (store_config, mut records) = load_state(&dir)?;
    if let Some(end) = args.end_ns {
        records.retain(|r| r.recv_time_ns <= end);
    }
    let end = args.end_ns.or_else(|| records.iter().map(|r| r.recv_time_ns).max()).unwrap_or(0);
    let analysis = analyze_trace(&records, store_config, &config.inference, end);
    let kinds = if args.report.is_empty() {
        vec![ReportKind::Outage, ReportKind::Paths, ReportKind::Spoof, ReportKind::Alias, ReportKind::Nat, ReportKind::Integrity]
    } else {
        args.report.clone()
    };
    let mut reports = Vec::new();
    for kind in kinds {
        let selector = match kind {
            ReportKind::Outage => ReportSelector::Outage,
            ReportKind::Paths => ReportSelector::Paths,
            ReportKind::Spoof => ReportSelector::Spoof,
            ReportKind::Alias => ReportSelector::Alias,
            ReportKind::Nat => ReportSelector::Nat,
            ReportKind::Integrity => ReportSelector::Integrity,
            ReportKind::Localize => {
                reports.push(localize(&analysis, &args, config.inference.outage_threshold)?);
                continue;
            }
        };
        reports.extend(analysis.reports(selector));
    }
    let out = args.out.clone().or(config.paths.report.clone());
    let n = reports.len();
    ReportRecord::write_all(create_out(out.as_deref())?, reports)?;
    eprintln!("{n} report records from {} heartbeats ({} sources)", records.len(), analysis.snapshot.states.len());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario: Scenario = toml::from_str(&text).with_context(|| format!("scenario {}", args.scenario.display()))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let sim = ihb_core::simulator::run(&scenario)?;
    let config = Config::load(args.config.as_deref())?;
    let store_config = config.observer.store_config(Some(config.observer.lens.unwrap_or(scenario.lens)))?;
    let analysis = analyze_trace(&sim.trace, store_config, &config.inference, scenario.end_ns());
    let metrics = evaluate(&sim.trace, &sim.truth, &analysis)?;

    fs::create_dir_all(&args.out)?;
    write_records(BufWriter::new(File::create(args.out.join("trace.jsonl"))?), &sim.trace)?;
    write_truth(BufWriter::new(File::create(args.out.join("truth.jsonl"))?), &sim.truth)?;
    let reports = [
        ReportSelector::Outage,
        ReportSelector::Paths,
        ReportSelector::Spoof,
        ReportSelector::Alias,
        ReportSelector::Nat,
        ReportSelector::Integrity,
    ]
    .into_iter()
    .flat_map(|s| analysis.reports(s));
    ReportRecord::write_all(BufWriter::new(File::create(args.out.join("reports.jsonl"))?), reports)?;
    let mut m = BufWriter::new(File::create(args.out.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut m, &metrics)?;
    m.write_all(b"\n")?;
    m.flush()?;
    eprintln!(
        "run {}: {} arrivals, detection rate {:?}, median latency {:?} s, spoof precision {:?} recall {:?}",
        metrics.run_id,
        sim.trace.len(),
        metrics.detection_rate,
        metrics.median_latency_s,
        metrics.spoof.precision,
        metrics.spoof.recall
    );
    Ok(())
}

fn print_model(value: f64, record: serde_json::Value, plain: bool) -> Result<()> {
    let mut out = io::stdout().lock();
    if plain {
        writeln!(out, "{value}")?;
    } else {
        let mut record = record;
        record["schema"] = json!(MODEL_SCHEMA);
        writeln!(out, "{record}")?;
    }
    Ok(())
}

fn rate_uhz(pps: f64) -> Result<u32> {
    let uhz = (pps * 1e6).round();
    if !(uhz >= 1.0 && uhz <= f64::from(u32::MAX)) {
        bail!("rate {pps} pps not representable in micro-heartbeats per second");
    }
    Ok(uhz as u32)
}

fn cmd_model(cmd: ModelCommand) -> Result<()> {
    match cmd {
        ModelCommand::Outage { rate, lens_mask, silence, hosts, poisson, plain } => {
            let uhz = rate_uhz(rate)?;
            let single = if poisson {
                silence_consistency_poisson(uhz, lens_mask, silence)?
            } else {
                silence_consistency(uhz, lens_mask, silence)?
            };
            let p = single.powi(hosts as i32);
            print_model(
                p,
                json!({"model": "outage", "rate_pps": rate, "lens_mask": lens_mask, "silence_s": silence,
                       "hosts": hosts, "poisson": poisson, "p_consistent": p}),
                plain,
            )
        }
        ModelCommand::Rate { participants, pps, lens_mask, plain } => {
            if lens_mask > 32 {
                bail!("lens mask {lens_mask} exceeds 32");
            }
            let r = expected_arrival_rate(participants, pps, lens_mask);
            print_model(
                r,
                json!({"model": "rate", "participants": participants, "pps": pps, "lens_mask": lens_mask, "arrival_pps": r}),
                plain,
            )
        }
        ModelCommand::Coverage { pool_size, senders, order, plain } => {
            let order = match order {
                OrderArg::Permutation => OrderKind::Permutation,
                OrderArg::Random => OrderKind::Random,
            };
            let per_sender = coverage_estimate(pool_size, senders, order)?;
            let all_pairs = all_pairs_total(senders, pool_size);
            print_model(
                per_sender,
                json!({"model": "coverage", "pool_size": pool_size, "senders": senders, "order": order,
                       "per_sender": per_sender, "all_pairs_total": all_pairs.to_string()}),
                plain,
            )
        }
        ModelCommand::Interprobe { lens_mask, plain } => {
            let mean = expected_interprobe_hits(lens_mask)?;
            let median = median_interprobe_hits(lens_mask)?;
            print_model(
                mean,
                json!({"model": "interprobe", "lens_mask": lens_mask, "expected": mean, "geometric_median": median}),
                plain,
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Send(a) => cmd_send(a),
        Command::Observe(a) => cmd_observe(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Model(m) => cmd_model(m),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ihb: {e:#}");
            ExitCode::from(1)
        }
    }
}
