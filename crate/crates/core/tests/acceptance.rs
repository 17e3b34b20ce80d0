//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances are pinned in the constants below.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use common::metagraph::{oracle_edge_dominant, oracle_input_dominant, queries, random_metagraph};
use common::replay::{conformant, conformant_renamed, thresholds, tracker_config, EPOCH, START};
use common::{accept_set, random_ace, random_profile, universe};
use mudwatch_core::compliance::{canonicalize, check_zone, equivalent, includes, ZonePolicy};
use mudwatch_core::flow::{track, TrackerConfig};
use mudwatch_core::metagraph::{find_redundancies, from_mud, FindingKind};
use mudwatch_core::model::{Direction, Endpoint, MudAce, MudProfile, PROTO_TCP};
use mudwatch_core::mudgen::{translate, GenOptions};
use mudwatch_core::pcap::TraceReader;
use mudwatch_core::ports::PortMatch;
use mudwatch_core::runtime::{diff, score, Branch, MudSignature, ProfileTree, SimState};
use mudwatch_core::synth::{blipcare_profile, blipcare_trace, device_catalog, SyntheticNet, TcpFlags, TraceBuilder};
use mudwatch_core::{Exact, ExactIdentifier};
use rand::{Rng, SeedableRng};

const BLIPCARE_MAX: Duration = Duration::from_secs(1);
const WILDCARD_THRESHOLD: usize = 5;
const DOMINANCE_GRAPHS: usize = 200;
const DOMINANCE_MAX_EDGES: usize = 8;
const DOMINANCE_MAX: Duration = Duration::from_secs(60);
const REDUNDANCY_PROFILES: usize = 100;
const ALGEBRA_PAIRS: usize = 500;
const DEVICES: usize = 10;
const CONVERGENCE_EPOCHS: u32 = 12;
const SCAN_BRANCHES: u8 = 50;
const SCAN_MAX_SIM_D: (u64, u64) = (1, 4);
const SCAN_MIN_SIM_S: (u64, u64) = (9, 10);
const COMPLEXITY_SIZES: [usize; 3] = [100, 200, 400];
const COMPLEXITY_MAX_RATIO: f64 = 3.0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn blipcare_pipeline() -> Outcome {
    let started = Instant::now();
    let mut net = SyntheticNet::new(1);
    let bytes = blipcare_trace(&mut net).to_pcap_bytes();
    let events: Vec<_> = TraceReader::new(&bytes[..]).map_err(|e| e.to_string())?.collect();
    let t = track(TrackerConfig::new(net.device.mac, net.gateway.mac), events);
    let g = translate(&t.finalize(), t.dns_cache(), &GenOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let got = canonicalize(&g.profile).tuples();
    let want = canonicalize(&blipcare_profile()).tuples();
    check(
        got == want && want.len() == 4 && elapsed < BLIPCARE_MAX,
        format!("{} of 4 canonical tuples, exact match {}, {:?} (limit {:?})", got.len(), got == want, elapsed, BLIPCARE_MAX),
    )
}

fn fanout(n: u8) -> MudProfile {
    let net = SyntheticNet::new(5);
    let mut t = TraceBuilder::new(START);
    for i in 0..n {
        t.tcp_session(net.device, net.internet_host(Ipv4Addr::new(203, 0, 113, 20 + i)), 50000 + i as u16, 443, 100, 100);
    }
    let tr = track(tracker_config(&net), t.events());
    let opts = GenOptions { wildcard_endpoint_threshold: WILDCARD_THRESHOLD, ..GenOptions::default() };
    translate(&tr.finalize(), tr.dns_cache(), &opts).expect("valid threshold").profile
}

fn wildcarding() -> Outcome {
    let wild = |p: &MudProfile, d: Direction| {
        p.aces().filter(|a| a.direction == d && a.endpoint == Endpoint::Any && a.remote_port() == PortMatch::Eq(443)).count()
    };
    let six = fanout(WILDCARD_THRESHOLD as u8 + 1);
    let five = fanout(WILDCARD_THRESHOLD as u8);
    let six_ok = six.ace_count() == 2 && Direction::ALL.iter().all(|&d| wild(&six, d) == 1);
    let five_ok = five.aces().all(|a| a.endpoint != Endpoint::Any) && five.ace_count() == 10;
    check(
        six_ok && five_ok,
        format!("6 IPs -> {} ACEs (1 wildcard per direction: {six_ok}); 5 IPs -> {} literal ACEs", six.ace_count(), five.ace_count()),
    )
}

fn dominance() -> Outcome {
    let started = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xD0);
    let (mut paths, mut agree) = (0usize, 0usize);
    for _ in 0..DOMINANCE_GRAPHS {
        let g = random_metagraph(&mut rng, DOMINANCE_MAX_EDGES);
        for (b, c) in queries(&g, &mut rng) {
            let found = g.metapaths(&b, &c);
            if found.truncated {
                return Err("enumeration truncated below the exhaustive limit".into());
            }
            for m in &found.paths {
                paths += 1;
                if g.is_edge_dominant(m) == oracle_edge_dominant(&g, m) && g.is_input_dominant(m) == oracle_input_dominant(&g, m)
                {
                    agree += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    check(
        agree == paths && paths > 0 && elapsed < DOMINANCE_MAX,
        format!("{agree}/{paths} metapaths agree over {DOMINANCE_GRAPHS} graphs, {:?} (limit {:?})", elapsed, DOMINANCE_MAX),
    )
}

/// A narrowed copy of `ace` that `ace` fully covers.
fn covered_variant(ace: &MudAce, name: String, rng: &mut impl Rng) -> MudAce {
    let mut v = ace.clone();
    v.name = name;
    if v.endpoint == Endpoint::Any && rng.gen_bool(0.5) {
        v.endpoint = Endpoint::domain("a.example.com");
    } else if v.has_ports() {
        let narrow = |p: PortMatch| match p {
            PortMatch::Any => PortMatch::Eq(443),
            PortMatch::Range(lo, _) => PortMatch::Eq(lo),
            eq => eq,
        };
        v = v.clone().with_ports(narrow(v.device_port()), narrow(v.remote_port()));
    }
    v
}

fn redundancy() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xEE);
    let (mut preserved, mut enough) = (0usize, 0usize);
    let mut exact_cases = 0usize;
    for i in 0..REDUNDANCY_PROFILES {
        let n = rng.gen_range(2..7);
        let base = random_profile(&mut rng, n);
        let k = rng.gen_range(1..=5);
        let exact = i % 2 == 0;
        let mut p = base.clone();
        let aces: Vec<MudAce> = base.aces().cloned().collect();
        for j in 0..k {
            let src = &aces[rng.gen_range(0..aces.len())];
            let mut dup = if exact { src.clone() } else { covered_variant(src, String::new(), &mut rng) };
            dup.name = format!("injected-{j}");
            p.push(dup);
        }
        let findings = find_redundancies(&from_mud(&p));
        let names: BTreeSet<String> = findings.iter().filter(|f| f.kind == FindingKind::Redundant).map(|f| f.ace_name.clone()).collect();
        let u = universe(&[&p]);
        if accept_set(&p.without(&names), &u) == accept_set(&p, &u) {
            preserved += 1;
        }
        if exact {
            exact_cases += 1;
            if names.len() >= k {
                enough += 1;
            }
        }
    }
    check(
        preserved == REDUNDANCY_PROFILES && enough == exact_cases,
        format!("accept set preserved {preserved}/{REDUNDANCY_PROFILES}; >= k findings {enough}/{exact_cases} exact-copy cases"),
    )
}

fn algebra() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xA1);
    let mut agree = 0usize;
    let mut reflexive = true;
    let mut transitive = true;
    let mut related = 0usize;
    for i in 0..ALGEBRA_PAIRS {
        let na = rng.gen_range(0..5);
        let a = random_profile(&mut rng, na);
        // half the pairs are built to be related so inclusion and
        // equivalence hold often enough to be tested both ways
        let b = match i % 4 {
            0 | 1 => {
                let nb = rng.gen_range(0..5);
                random_profile(&mut rng, nb)
            }
            2 => {
                let mut b = a.clone();
                let extra = random_ace(&mut rng, "extra".into());
                b.push(extra);
                b
            }
            _ => {
                let mut b = a.clone();
                if let Some(src) = a.aces().next().cloned() {
                    b.push(covered_variant(&src, "covered".into(), &mut rng));
                }
                b
            }
        };
        let mut c = b.clone();
        c.push(random_ace(&mut rng, "chain".into()));
        let u = universe(&[&a, &b, &c]);
        let (sa, sb) = (accept_set(&a, &u), accept_set(&b, &u));
        let ok = equivalent(&a, &b) == (sa == sb) && includes(&a, &b) == sa.is_subset(&sb) && includes(&b, &a) == sb.is_subset(&sa);
        agree += ok as usize;
        related += (sa.is_subset(&sb)) as usize;
        reflexive &= includes(&a, &a) && includes(&b, &b) && equivalent(&a, &a);
        for (x, y, z) in [(&a, &b, &c), (&b, &a, &c), (&a, &c, &b)] {
            if includes(x, y) && includes(y, z) && !includes(x, z) {
                transitive = false;
            }
        }
    }
    check(
        agree == ALGEBRA_PAIRS && reflexive && transitive,
        format!("{agree}/{ALGEBRA_PAIRS} pairs agree ({related} with inclusion), reflexive {reflexive}, transitive {transitive}"),
    )
}

fn zones() -> Outcome {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/zones");
    let zones = ZonePolicy::load_dir(&dir).map_err(|e| e.to_string())?;
    let get = |n: &str| zones.iter().find(|z| z.name == n).ok_or(format!("zone {n} missing"));
    let p = blipcare_profile();
    let scada = check_zone(&p, get("SCADA")?).map_err(|e| e.to_string())?;
    let ent = check_zone(&p, get("Enterprise")?).map_err(|e| e.to_string())?;
    check(
        scada.fraction::<Exact>() == Exact::new(1, 2) && ent.violating == 0,
        format!("SCADA {}% ({}/{}), Enterprise {}% (exact)", scada.percent_violating, scada.violating, scada.total, ent.percent_violating),
    )
}

fn identify(library: Vec<MudProfile>, device: usize, replay: &common::replay::Replay) -> ExactIdentifier {
    let mut id = ExactIdentifier::new(format!("dev{device}"), tracker_config(&replay.net), library, thresholds());
    for ev in &replay.events {
        id.feed(ev);
    }
    id.finish();
    id
}

fn identification() -> Outcome {
    let lib = device_catalog(DEVICES);
    let (mut correct, mut monotone) = (0usize, 0usize);
    let mut slowest = 0;
    for (i, p) in lib.iter().enumerate() {
        let replay = conformant(p, i as u8, CONVERGENCE_EPOCHS, 0.5, 7000 + i as u64);
        let id = identify(lib.clone(), i, &replay);
        let st = id.state();
        if st.sole_winner() == Some(p.systeminfo.as_str()) && st.converged_at.is_some_and(|e| e <= CONVERGENCE_EPOCHS) {
            correct += 1;
            slowest = slowest.max(st.converged_at.unwrap_or(0));
        }
        let h = id.static_history();
        if (1..h.len()).all(|e| (0..lib.len()).all(|m| h[e][m] >= h[e - 1][m])) {
            monotone += 1;
        }
    }
    check(
        correct == DEVICES && monotone == DEVICES,
        format!("sole correct winner {correct}/{DEVICES} (latest at epoch {slowest}, limit {CONVERGENCE_EPOCHS}); sim_s monotone {monotone}/{DEVICES}"),
    )
}

fn unknown_mud() -> Outcome {
    let lib = device_catalog(DEVICES);
    let mut empty = 0usize;
    for (i, p) in lib.iter().enumerate() {
        let replay = conformant(p, i as u8, CONVERGENCE_EPOCHS, 0.5, 8000 + i as u64);
        let others: Vec<MudProfile> = lib.iter().filter(|q| q.systeminfo != p.systeminfo).cloned().collect();
        let id = identify(others, i, &replay);
        empty += id.state().winners.is_empty() as usize;
    }
    check(empty == DEVICES, format!("zero winners {empty}/{DEVICES}"))
}

fn compaction() -> Outcome {
    let lib = device_catalog(DEVICES);
    let th = thresholds::<Exact>();
    let (mut below, mut recovered) = (0usize, 0usize);
    for (i, p) in lib.iter().enumerate() {
        let rename: BTreeMap<String, String> = p
            .aces()
            .filter_map(|a| match &a.endpoint {
                Endpoint::Domain(d) => Some((d.clone(), format!("eu-west.{d}"))),
                _ => None,
            })
            .collect();
        let replay = conformant_renamed(p, i as u8, 2, 1.0, 9000 + i as u64, rename);
        let mut id = identify(lib.clone(), i, &replay);
        let pre = score::<Exact>(id.tree(), &id.signatures()[i]);
        if pre.internet.sim_d < th.dyn_internet && pre.internet.sim_s < th.static_internet && id.state().winners.is_empty() {
            below += 1;
        }
        id.compact();
        let post = score::<Exact>(id.tree(), &id.signatures()[i]);
        let one = Exact::new(1, 1);
        if post.aggregate.sim_d == one && post.aggregate.sim_s == one {
            recovered += 1;
        }
    }
    check(
        below == DEVICES && recovered == DEVICES,
        format!("below thresholds before {below}/{DEVICES}; sim_d = sim_s = 1 after {recovered}/{DEVICES}"),
    )
}

fn scan() -> Outcome {
    let lib = device_catalog(DEVICES);
    let device = 0;
    let mut replay = conformant(&lib[device], device as u8, 3, 1.0, 4242);
    let mut t = TraceBuilder::new(START + 2.0 * EPOCH + 300.0);
    for i in 0..SCAN_BRANCHES {
        let target = replay.net.internet_host(Ipv4Addr::new(203, 0, 113, 100 + i));
        t.tcp(replay.net.device, target, 41000 + i as u16, 23, TcpFlags::SYN, &[]);
    }
    replay.events.extend(t.events());
    replay.events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let id = identify(lib.clone(), device, &replay);
    let m = &id.signatures()[device];
    let s = score::<Exact>(id.tree(), m).aggregate;
    let d = diff(id.tree(), m);
    let endpoints: BTreeSet<&Endpoint> = d.branches().map(|b| &b.endpoint).collect();
    let scan_shaped = d.branches().all(|b| b.proto == PROTO_TCP && b.remote_port == PortMatch::Eq(23));
    let max_d = Exact::new(SCAN_MAX_SIM_D.0, SCAN_MAX_SIM_D.1);
    let min_s = Exact::new(SCAN_MIN_SIM_S.0, SCAN_MIN_SIM_S.1);
    check(
        s.sim_d < max_d
            && s.sim_s > min_s
            && d.len() == SCAN_BRANCHES as usize
            && endpoints.len() == SCAN_BRANCHES as usize
            && scan_shaped
            && id.state().state == SimState::S3,
        format!(
            "sim_d {} < {max_d}, sim_s {} > {min_s}, diff {} branches / {} endpoints, state {}",
            s.sim_d,
            s.sim_s,
            d.len(),
            endpoints.len(),
            id.state().state
        ),
    )
}

fn complexity() -> Outcome {
    let sigs: Vec<MudSignature> = device_catalog(10).iter().map(MudSignature::new).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xC0);
    let mut medians = Vec::new();
    for &n in &COMPLEXITY_SIZES {
        let mut tree = ProfileTree::with_cap(usize::MAX);
        while tree.len() < n {
            let dir = if rng.gen_bool(0.5) { Direction::FromDevice } else { Direction::ToDevice };
            let host = format!("h{}.vendor{}.com", rng.gen_range(0..n), rng.gen_range(0..10));
            tree.insert(Branch::new(dir, Endpoint::domain(&host), PROTO_TCP, PortMatch::Any, PortMatch::Eq(rng.gen_range(1..1024))), 0.0);
        }
        let mut samples: Vec<Duration> = (0..15)
            .map(|_| {
                let t0 = Instant::now();
                for _ in 0..10 {
                    for m in &sigs {
                        std::hint::black_box(score::<Exact>(&tree, m));
                    }
                }
                t0.elapsed()
            })
            .collect();
        samples.sort();
        medians.push(samples[samples.len() / 2]);
    }
    let ratios: Vec<f64> = medians.windows(2).map(|w| w[1].as_secs_f64() / w[0].as_secs_f64()).collect();
    check(
        ratios.iter().all(|&r| r < COMPLEXITY_MAX_RATIO),
        format!("medians {:?}, successive ratios {:.2?} (limit {COMPLEXITY_MAX_RATIO})", medians, ratios),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("blipcare-pipeline", blipcare_pipeline),
        ("wildcard-threshold", wildcarding),
        ("dominance-oracle", dominance),
        ("redundancy-soundness", redundancy),
        ("canonical-algebra", algebra),
        ("zone-mechanism", zones),
        ("identification-convergence", identification),
        ("unknown-mud-safety", unknown_mud),
        ("compaction-recovery", compaction),
        ("scan-deviation", scan),
        ("scoring-complexity", complexity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
