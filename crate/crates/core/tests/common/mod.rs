//! Helpers shared by the integration tests: random profiles and a brute-force
//! packet-universe model of what a profile accepts.

#![allow(dead_code)]

pub mod metagraph;
pub mod replay;

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use mudwatch_core::model::{Action, Direction, Endpoint, MudAce, MudProfile, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use mudwatch_core::ports::PortMatch;
use proptest::prelude::*;
use rand::Rng;

pub fn endpoint_pool() -> Vec<Endpoint> {
    vec![
        Endpoint::Any,
        Endpoint::LocalNetworks,
        Endpoint::gateway(),
        Endpoint::SameManufacturer,
        Endpoint::domain("a.example.com"),
        Endpoint::domain("b.example.com"),
        Endpoint::Ipv4(Ipv4Addr::new(198, 18, 0, 7)),
        Endpoint::Ipv4(Ipv4Addr::new(192, 168, 1, 9)),
    ]
}

const PORTS: [u16; 6] = [53, 80, 443, 1000, 1010, 8080];

fn port_match(choice: u8, a: u16, b: u16) -> PortMatch {
    match choice % 3 {
        0 => PortMatch::Any,
        1 => PortMatch::Eq(a),
        _ => PortMatch::range(a.min(b), a.max(b)),
    }
}

/// An accept ACE drawn with `rng`.
pub fn random_ace(rng: &mut impl Rng, name: String) -> MudAce {
    let pool = endpoint_pool();
    let endpoint = pool[rng.gen_range(0..pool.len())].clone();
    let direction = if rng.gen_bool(0.5) { Direction::FromDevice } else { Direction::ToDevice };
    let proto = [PROTO_TCP, PROTO_UDP, PROTO_ICMP][rng.gen_range(0..3)];
    let ace = MudAce::accept(name, direction, endpoint, proto);
    if proto == PROTO_ICMP {
        let t = [None, Some(0u8), Some(8)][rng.gen_range(0..3)];
        let c = [None, Some(0u8)][rng.gen_range(0..2)];
        return ace.with_icmp(t, c);
    }
    let mut pick = || port_match(rng.gen(), PORTS[rng.gen_range(0..PORTS.len())], PORTS[rng.gen_range(0..PORTS.len())]);
    let (d, r) = (pick(), pick());
    ace.with_ports(d, r)
}

pub fn random_profile(rng: &mut impl Rng, n: usize) -> MudProfile {
    let mut p = MudProfile::new("https://mud.example.com/r.json", "random");
    for i in 0..n {
        p.push(random_ace(rng, format!("ace-{i}")));
    }
    p.renumber("r-");
    p
}

pub fn arb_profile(max: usize) -> impl Strategy<Value = MudProfile> {
    (0..=max, any::<u64>()).prop_map(|(n, seed)| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        random_profile(&mut rng, n)
    })
}

/// A concrete packet seen from the device.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Probe {
    pub endpoint: Endpoint,
    pub direction: Direction,
    pub proto: u8,
    pub a: u32,
    pub b: u32,
}

/// Direct accept semantics, written independently of the library's region
/// encoding: ports for TCP/UDP, (type, code) for ICMP.
pub fn ace_accepts(ace: &MudAce, p: &Probe) -> bool {
    if ace.action != Action::Accept || ace.direction != p.direction || ace.protocol != p.proto {
        return false;
    }
    let covers = match &ace.endpoint {
        Endpoint::Any => true,
        Endpoint::LocalNetworks => matches!(
            p.endpoint,
            Endpoint::LocalNetworks | Endpoint::Controller(_) | Endpoint::SameManufacturer
        ) || matches!(p.endpoint, Endpoint::Ipv4(ip) if ip.is_private()),
        e => *e == p.endpoint,
    };
    if !covers {
        return false;
    }
    match p.proto {
        PROTO_TCP | PROTO_UDP => {
            let ok = |m: PortMatch, v: u32| match m {
                PortMatch::Any => true,
                PortMatch::Eq(x) => x as u32 == v,
                PortMatch::Range(lo, hi) => lo as u32 <= v && v <= hi as u32,
            };
            ok(ace.device_port(), p.a) && ok(ace.remote_port(), p.b)
        }
        PROTO_ICMP => {
            let (ty, code) = (p.b, p.a);
            match ace.icmp {
                None => ty <= 255 && code <= 255,
                Some(m) => {
                    m.icmp_type.is_none_or(|t| t as u32 == ty)
                        && m.code.is_none_or(|c| c as u32 == code)
                        && ty <= 255
                        && code <= 255
                }
            }
        }
        _ => p.a == 0 && p.b == 0,
    }
}

pub fn profile_accepts(profile: &MudProfile, p: &Probe) -> bool {
    profile.aces().any(|a| ace_accepts(a, p))
}

fn port_points(profiles: &[&MudProfile]) -> Vec<u32> {
    let mut pts: BTreeSet<u32> = [0u32, 1, 65534, 65535].into_iter().collect();
    for pr in profiles {
        for a in pr.aces() {
            for m in [a.device_port(), a.remote_port()] {
                if let PortMatch::Eq(x) | PortMatch::Range(x, _) = m {
                    let x = x as u32;
                    pts.extend([x.saturating_sub(1), x, x + 1]);
                }
                if let PortMatch::Eq(x) | PortMatch::Range(_, x) = m {
                    let x = x as u32;
                    pts.extend([x.saturating_sub(1), x, (x + 1).min(65535)]);
                }
            }
        }
    }
    pts.into_iter().collect()
}

/// Every probe over the endpoints mentioned in `profiles` plus fresh local
/// and Internet hosts, with ports at interval boundaries and one step away.
pub fn universe(profiles: &[&MudProfile]) -> Vec<Probe> {
    let mut endpoints: BTreeSet<Endpoint> = profiles.iter().flat_map(|p| p.aces().map(|a| a.endpoint.clone())).collect();
    endpoints.insert(Endpoint::domain("fresh.example.org"));
    endpoints.insert(Endpoint::Ipv4(Ipv4Addr::new(192, 168, 77, 77)));
    endpoints.insert(Endpoint::Controller("urn:fresh:controller".into()));
    endpoints.remove(&Endpoint::Any);
    let pts = port_points(profiles);
    let icmp_pts = [0u32, 1, 7, 8, 9, 255];
    let mut out = Vec::new();
    for e in &endpoints {
        for d in Direction::ALL {
            for proto in [PROTO_TCP, PROTO_UDP] {
                for &a in &pts {
                    for &b in &pts {
                        out.push(Probe { endpoint: e.clone(), direction: d, proto, a, b });
                    }
                }
            }
            for &a in &icmp_pts {
                for &b in &icmp_pts {
                    out.push(Probe { endpoint: e.clone(), direction: d, proto: PROTO_ICMP, a, b });
                }
            }
        }
    }
    out
}

/// Accept set of `p` over `universe`.
pub fn accept_set(p: &MudProfile, universe: &[Probe]) -> BTreeSet<Probe> {
    universe.iter().filter(|q| profile_accepts(p, q)).cloned().collect()
}
