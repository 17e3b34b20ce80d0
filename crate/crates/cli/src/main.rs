//! `mudwatch`: device behavioral profiles from packet traces.
//!
//! Exit codes: 0 ok, 1 syntax or usage error, 2 I/O error, 3 semantic
//! findings, 4 identification did not converge.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use mudwatch_core::compliance::{check_zone, safe_zones, ComplianceError, ComplianceReport, ZonePolicy};
use mudwatch_core::flow::{track, write_flow_dump, TrackerConfig};
use mudwatch_core::metagraph::{redundancy_report, Finding, FindingKind};
use mudwatch_core::mudgen::{emit_flow_report, translate};
use mudwatch_core::mudjson::{emit_mud_json, parse_mud};
use mudwatch_core::pcap::{open_trace, PacketEvent, TraceError};
use mudwatch_core::runtime::{diff, ConfusionMatrix, EpochReport, TreeNode};
use mudwatch_core::{Identifier, MacAddr, MudProfile, Thresholds};
use serde::Serialize;

use config::{Config, ConfigError};

#[derive(Parser)]
#[command(name = "mudwatch", version, about = "Behavioral profiles for IoT devices")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a profile from a device's packet trace.
    Generate {
        #[arg(long)]
        pcap: PathBuf,
        /// Device MAC; guessed from the trace when omitted.
        #[arg(long)]
        mac: Option<String>,
        /// Gateway MAC; guessed from the trace when omitted.
        #[arg(long)]
        gateway: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a profile for syntax errors, redundant rules and zone fit.
    Verify {
        #[arg(long)]
        mud: PathBuf,
        /// Directory of zone policy files.
        #[arg(long)]
        zones: Option<PathBuf>,
    },
    /// Identify devices by replaying traces against a profile library.
    Identify {
        /// A trace, or a directory of `<label>.pcap` traces.
        #[arg(long)]
        pcap: PathBuf,
        #[arg(long)]
        mac: Option<String>,
        #[arg(long)]
        gateway: Option<String>,
        /// Directory of `<label>.json` profiles.
        #[arg(long)]
        mud_dir: Option<PathBuf>,
        #[arg(long)]
        epoch_mins: Option<f64>,
        /// dyn_internet,dyn_local,static_internet
        #[arg(long)]
        thresholds: Option<String>,
        /// Compact endpoint names when identification stalls.
        #[arg(long)]
        compact: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the observed behavior a profile does not allow.
    Diff {
        #[arg(long)]
        pcap: PathBuf,
        #[arg(long)]
        mud: PathBuf,
        #[arg(long)]
        mac: Option<String>,
        #[arg(long)]
        gateway: Option<String>,
        #[arg(long)]
        compact: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Code {
    Ok = 0,
    Syntax = 1,
    Io = 2,
    Findings = 3,
    NoConvergence = 4,
}

#[derive(Debug)]
struct Fail {
    code: Code,
    msg: String,
}

impl Fail {
    fn syntax(msg: impl fmt::Display) -> Fail {
        Fail { code: Code::Syntax, msg: msg.to_string() }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Fail {
        Fail { code: Code::Io, msg: format!("{}: {e}", path.display()) }
    }
}

type Outcome = Result<Code, Fail>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Code::Syntax as u8 } else { 0 });
        }
    };
    let code = match run(cli) {
        Ok(c) => c,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    };
    ExitCode::from(code as u8)
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| match e {
            ConfigError::Io(e) => Fail::io(p, e),
            ConfigError::Syntax(e) => Fail::syntax(format!("{}: {e}", p.display())),
        })?,
        None => Config::default(),
    };
    let json = cli.json;
    match cli.cmd {
        Cmd::Generate { pcap, mac, gateway, out } => generate(&cfg, json, &pcap, mac, gateway, out),
        Cmd::Verify { mud, zones } => verify(&cfg, json, &mud, zones),
        Cmd::Identify { pcap, mac, gateway, mud_dir, epoch_mins, thresholds, compact, out } => {
            let opts = IdentifyOpts { mac, gateway, mud_dir, epoch_mins, thresholds, compact, out };
            identify(&cfg, json, &pcap, opts)
        }
        Cmd::Diff { pcap, mud, mac, gateway, compact } => diff_cmd(&cfg, json, &pcap, &mud, mac, gateway, compact),
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable output"));
}

fn read_events(path: &Path) -> Result<Vec<PacketEvent>, Fail> {
    let meta = std::fs::metadata(path).map_err(|e| Fail::io(path, e))?;
    if meta.len() == 0 {
        warn!("{} is empty", path.display());
        return Ok(Vec::new());
    }
    let mut reader = open_trace(path).map_err(|e| match e {
        TraceError::Open { source, .. } => Fail::io(path, source),
        other => Fail::syntax(format!("{}: {other}", path.display())),
    })?;
    let events: Vec<PacketEvent> = reader.by_ref().collect();
    let stats = reader.stats();
    if stats.skipped() > 0 {
        info!("{}: skipped {} undecodable frames", path.display(), stats.skipped());
    }
    if events.is_empty() {
        warn!("{} holds no IPv4 packets", path.display());
    }
    Ok(events)
}

fn parse_mac(s: &str) -> Result<MacAddr, Fail> {
    s.parse().map_err(|e| Fail::syntax(format!("bad MAC address {s:?}: {e}")))
}

/// The MAC that faces the most packets to or from non-local addresses.
fn guess_gateway(events: &[PacketEvent]) -> Option<MacAddr> {
    let lan = TrackerConfig::new(MacAddr([0; 6]), MacAddr([0; 6]));
    let local = |ip| lan.in_subnets(ip);
    let mut counts: BTreeMap<MacAddr, u64> = BTreeMap::new();
    for e in events {
        if !local(e.src_ip) {
            *counts.entry(e.src_mac).or_default() += 1;
        }
        if !local(e.dst_ip) {
            *counts.entry(e.dst_mac).or_default() += 1;
        }
    }
    busiest(counts)
}

/// The unicast, non-gateway MAC sending the most packets.
fn guess_device(events: &[PacketEvent], gateway: MacAddr) -> Option<MacAddr> {
    let mut counts: BTreeMap<MacAddr, u64> = BTreeMap::new();
    for e in events.iter().filter(|e| e.src_mac != gateway && !e.src_mac.is_multicast()) {
        *counts.entry(e.src_mac).or_default() += 1;
    }
    busiest(counts)
}

fn busiest(counts: BTreeMap<MacAddr, u64>) -> Option<MacAddr> {
    // ties go to the lowest address so the guess is deterministic
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(m, _)| m)
}

fn addresses(
    events: &[PacketEvent],
    mac: Option<&str>,
    gateway: Option<&str>,
    cfg: &Config,
) -> Result<(MacAddr, MacAddr), Fail> {
    let gateway = match gateway.or(cfg.gateway.as_deref()) {
        Some(g) => parse_mac(g)?,
        None => guess_gateway(events).unwrap_or(MacAddr([0; 6])),
    };
    let device = match mac {
        Some(m) => parse_mac(m)?,
        None => guess_device(events, gateway).unwrap_or(MacAddr([0; 6])),
    };
    Ok((device, gateway))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "device".to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Fail> {
    std::fs::write(path, bytes).map_err(|e| Fail::io(path, e))
}

fn out_dir(flag: Option<PathBuf>, cfg: &Config) -> Result<PathBuf, Fail> {
    let dir = flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Fail::io(&dir, e))?;
    Ok(dir)
}

#[derive(Serialize)]
struct GenerateSummary {
    device: String,
    gateway: String,
    aces: usize,
    mud: PathBuf,
    report: PathBuf,
    flows: PathBuf,
    warnings: Vec<String>,
}

fn generate(cfg: &Config, json: bool, pcap: &Path, mac: Option<String>, gateway: Option<String>, out: Option<PathBuf>) -> Outcome {
    let events = read_events(pcap)?;
    let (device, gw) = addresses(&events, mac.as_deref(), gateway.as_deref(), cfg)?;
    let tracker = track(TrackerConfig::new(device, gw), events);
    let flows = tracker.finalize();
    let mut opts = cfg.generate.options();
    if cfg.generate.systeminfo.is_none() {
        opts.systeminfo = stem(pcap);
    }
    let mut g = translate(&flows, tracker.dns_cache(), &opts).map_err(Fail::syntax)?;
    if flows.is_empty() {
        g.warnings.push(format!("no traffic for device {device}; the profile is empty"));
    }
    for w in &g.warnings {
        warn!("{w}");
    }

    let dir = out_dir(out, cfg)?;
    let name = stem(pcap);
    let mud = dir.join(format!("{name}.json"));
    let report = dir.join(format!("{name}.report.json"));
    let flows_csv = dir.join(format!("{name}.flows.csv"));
    write_file(&mud, &emit_mud_json(&g.profile))?;
    let report_json = serde_json::to_vec_pretty(&emit_flow_report(&g.profile)).expect("serializable report");
    write_file(&report, &report_json)?;
    let mut csv = Vec::new();
    write_flow_dump(&flows, &mut csv).map_err(|e| Fail::io(&flows_csv, e))?;
    write_file(&flows_csv, &csv)?;

    let summary = GenerateSummary {
        device: device.to_string(),
        gateway: gw.to_string(),
        aces: g.profile.ace_count(),
        mud,
        report,
        flows: flows_csv,
        warnings: g.warnings,
    };
    if json {
        print_json(&summary);
    } else {
        println!("device {} via gateway {}: {} ACEs", summary.device, summary.gateway, summary.aces);
        println!("wrote {}", summary.mud.display());
        println!("wrote {}", summary.report.display());
        println!("wrote {}", summary.flows.display());
    }
    Ok(Code::Ok)
}

fn load_profile(path: &Path) -> Result<MudProfile, Fail> {
    let bytes = std::fs::read(path).map_err(|e| Fail::io(path, e))?;
    parse_mud(&bytes).map_err(|errs| {
        let lines: Vec<String> = errs.iter().map(|e| format!("  {e}")).collect();
        Fail::syntax(format!("{}: invalid profile\n{}", path.display(), lines.join("\n")))
    })
}

fn load_zones(dir: &Path) -> Result<Vec<ZonePolicy>, Fail> {
    ZonePolicy::load_dir(dir).map_err(|e| match e {
        ComplianceError::Io { .. } => Fail { code: Code::Io, msg: e.to_string() },
        other => Fail::syntax(other),
    })
}

#[derive(Serialize)]
struct VerifyReport {
    systeminfo: String,
    rules: usize,
    redundant: usize,
    findings: Vec<Finding>,
    compliance: Vec<ComplianceReport>,
    safe: Vec<String>,
}

fn verify(cfg: &Config, json: bool, mud: &Path, zones: Option<PathBuf>) -> Outcome {
    let profile = load_profile(mud)?;
    let red = redundancy_report(&profile);
    let zones = match zones.or_else(|| cfg.zones.clone()) {
        Some(dir) => load_zones(&dir)?,
        None => Vec::new(),
    };
    let (compliance, safe) = if profile.has_drop() {
        if !zones.is_empty() {
            warn!("profile has drop ACEs; zone compliance skipped");
        }
        (Vec::new(), Vec::new())
    } else {
        let reports = zones.iter().map(|z| check_zone(&profile, z)).collect::<Result<Vec<_>, _>>().map_err(Fail::syntax)?;
        (reports, safe_zones(&profile, &zones).map_err(Fail::syntax)?)
    };
    let report = VerifyReport {
        systeminfo: profile.systeminfo.clone(),
        rules: red.rule_count,
        redundant: red.redundant_count,
        findings: red.findings,
        compliance,
        safe,
    };
    if json {
        print_json(&report);
    } else {
        println!("{}: {} rules, syntax ok", report.systeminfo, report.rules);
        if report.findings.is_empty() {
            println!("no redundant or ambiguous rules");
        }
        for f in &report.findings {
            let what = match f.kind {
                FindingKind::Redundant => "redundant",
                FindingKind::Ambiguous => "ambiguous",
            };
            println!("{what}: {} (witness: {})", f.ace_name, f.witness_aces.join(", "));
        }
        for c in &report.compliance {
            println!("{}", c.text_row());
        }
        if !zones.is_empty() {
            let list = if report.safe.is_empty() { "none".to_string() } else { report.safe.join(", ") };
            println!("safe: {list}");
        }
    }
    Ok(if report.findings.is_empty() { Code::Ok } else { Code::Findings })
}

struct IdentifyOpts {
    mac: Option<String>,
    gateway: Option<String>,
    mud_dir: Option<PathBuf>,
    epoch_mins: Option<f64>,
    thresholds: Option<String>,
    compact: bool,
    out: Option<PathBuf>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, Fail> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Fail::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn load_library(dir: &Path) -> Result<Vec<MudProfile>, Fail> {
    let mut lib = Vec::new();
    for path in sorted_files(dir, "json")? {
        let mut p = load_profile(&path)?;
        // library entries are known by file name so results line up with
        // trace labels
        p.systeminfo = stem(&path);
        lib.push(p);
    }
    Ok(lib)
}

fn thresholds(cfg: &Config, flag: Option<&str>, epoch_mins: Option<f64>, compact: bool) -> Result<Thresholds, Fail> {
    let mut th = match flag.or(cfg.thresholds.as_deref()) {
        Some(s) => Thresholds::parse(s).map_err(Fail::syntax)?,
        None => Thresholds::default(),
    };
    if let Some(m) = epoch_mins.or(cfg.epoch_mins) {
        if !(m.is_finite() && m > 0.0) {
            return Err(Fail::syntax(format!("epoch length must be positive, got {m}")));
        }
        th.epoch_secs = m * 60.0;
    }
    if let Some(n) = cfg.convergence_epochs {
        th.convergence_epochs = n;
    }
    if compact {
        th.compaction_after = Some(cfg.compact_after.unwrap_or(4));
    }
    Ok(th)
}

#[derive(Serialize)]
struct Closest {
    mud: String,
    sim_d: f64,
    sim_s: f64,
}

#[derive(Serialize)]
struct DeviceResult {
    label: String,
    device: String,
    winners: Vec<String>,
    state: String,
    converged_at: Option<u32>,
    compacted: bool,
    disagreement: bool,
    closest: Option<Closest>,
    /// Profile the diff was taken against.
    diff_against: Option<String>,
    diff_branches: usize,
    diff: Option<TreeNode>,
    #[serde(skip)]
    diff_text: String,
    reports: Vec<EpochReport>,
}

#[derive(Serialize)]
struct IdentifySummary {
    devices: Vec<DeviceResult>,
    confusion_csv: String,
}

fn identify(cfg: &Config, json: bool, pcap: &Path, o: IdentifyOpts) -> Outcome {
    let mud_dir = o
        .mud_dir
        .or_else(|| cfg.mud_dir.clone())
        .ok_or_else(|| Fail::syntax("identify needs a profile library (--mud-dir)"))?;
    let th = thresholds(cfg, o.thresholds.as_deref(), o.epoch_mins, o.compact)?;
    let library = load_library(&mud_dir)?;
    if library.is_empty() {
        warn!("{} holds no profiles", mud_dir.display());
    }
    let traces = if pcap.is_dir() { sorted_files(pcap, "pcap")? } else { vec![pcap.to_path_buf()] };
    if o.mac.is_some() && traces.len() > 1 {
        return Err(Fail::syntax("--mac applies to a single trace; use [devices] in the config for a directory"));
    }

    let mut results = Vec::new();
    let mut matrix = ConfusionMatrix::default();
    for path in &traces {
        let label = stem(path);
        let events = read_events(path)?;
        let mac = o.mac.clone().or_else(|| cfg.devices.get(&label).cloned());
        let (device, gw) = addresses(&events, mac.as_deref(), o.gateway.as_deref(), cfg)?;
        let mut id = Identifier::new(label.clone(), TrackerConfig::new(device, gw), library.clone(), th);
        for ev in &events {
            id.feed(ev);
        }
        id.finish();
        let st = id.state();
        matrix.add(&label, &st.winners);
        let closest = st.closest.as_ref().map(|(n, s)| Closest {
            mud: n.clone(),
            sim_d: s.aggregate.sim_d,
            sim_s: s.aggregate.sim_s,
        });
        let against = st.sole_winner().map(str::to_string).or_else(|| closest.as_ref().map(|c| c.mud.clone()));
        let d = against
            .as_ref()
            .and_then(|n| id.signatures().iter().find(|s| &s.name == n))
            .map(|sig| diff(id.tree(), sig));
        results.push(DeviceResult {
            label,
            device: device.to_string(),
            winners: st.winners.iter().cloned().collect(),
            state: st.state.to_string(),
            converged_at: st.converged_at,
            compacted: st.compacted,
            disagreement: st.disagreement,
            closest,
            diff_against: against,
            diff_branches: d.as_ref().map_or(0, |t| t.len()),
            diff_text: d.as_ref().filter(|t| !t.is_empty()).map(|t| t.render_text()).unwrap_or_default(),
            diff: d.filter(|t| !t.is_empty()).map(|t| t.to_json()),
            reports: id.reports().to_vec(),
        });
    }

    let mut csv = Vec::new();
    matrix.write_csv(&mut csv).map_err(|e| Fail { code: Code::Io, msg: e.to_string() })?;
    let confusion_csv = String::from_utf8(csv).expect("csv is utf-8");

    if let Some(dir) = o.out.or_else(|| cfg.out.clone()) {
        std::fs::create_dir_all(&dir).map_err(|e| Fail::io(&dir, e))?;
        let mut lines = Vec::new();
        for r in results.iter().flat_map(|d| &d.reports) {
            serde_json::to_writer(&mut lines, r).expect("serializable report");
            lines.push(b'\n');
        }
        write_file(&dir.join("reports.jsonl"), &lines)?;
        write_file(&dir.join("confusion.csv"), confusion_csv.as_bytes())?;
    }

    let all_converged = results.iter().all(|r| r.winners.len() == 1);
    if json {
        print_json(&IdentifySummary { devices: results, confusion_csv });
    } else {
        let mut out = std::io::stdout().lock();
        for r in &results {
            let _ = writeln!(out, "== {} ({})", r.label, r.device);
            for e in &r.reports {
                let _ = writeln!(out, "epoch {:>3}: winners [{}] state {} branches {}", e.epoch, e.winners.join(", "), e.state, e.branches);
            }
            match (r.winners.len(), &r.closest) {
                (1, _) => {
                    let at = r.converged_at.map_or_else(String::new, |e| format!(" at epoch {e}"));
                    let _ = writeln!(out, "identified as {}{at}, state {}", r.winners[0], r.state);
                }
                (0, Some(c)) => {
                    let _ = writeln!(out, "no winner (closest {} sim_d {:.3} sim_s {:.3}), state {}", c.mud, c.sim_d, c.sim_s, r.state);
                }
                (0, None) => {
                    let _ = writeln!(out, "no winner, state {}", r.state);
                }
                _ => {
                    let _ = writeln!(out, "several winners: {}, state {}", r.winners.join(", "), r.state);
                }
            }
            if let Some(m) = &r.diff_against {
                let _ = writeln!(out, "diff against {m}: {} branches", r.diff_branches);
                let _ = write!(out, "{}", r.diff_text);
            }
        }
        let _ = writeln!(out, "confusion matrix:");
        let _ = write!(out, "{confusion_csv}");
    }
    Ok(if all_converged { Code::Ok } else { Code::NoConvergence })
}

#[derive(Serialize)]
struct DiffOutput {
    mud: String,
    branches: usize,
    tree: TreeNode,
}

fn diff_cmd(
    cfg: &Config,
    json: bool,
    pcap: &Path,
    mud: &Path,
    mac: Option<String>,
    gateway: Option<String>,
    compact: bool,
) -> Outcome {
    let profile = load_profile(mud)?;
    let events = read_events(pcap)?;
    let (device, gw) = addresses(&events, mac.as_deref(), gateway.as_deref(), cfg)?;
    let th = thresholds(cfg, None, None, false)?;
    let name = profile.systeminfo.clone();
    let mut id = Identifier::new(stem(pcap), TrackerConfig::new(device, gw), vec![profile], th);
    for ev in &events {
        id.feed(ev);
    }
    id.finish();
    if compact {
        id.compact();
    }
    let d = diff(id.tree(), &id.signatures()[0]);
    if json {
        print_json(&DiffOutput { mud: name, branches: d.len(), tree: d.to_json() });
    } else {
        println!("{} branches not allowed by {name}", d.len());
        print!("{}", d.render_text());
    }
    Ok(Code::Ok)
}
