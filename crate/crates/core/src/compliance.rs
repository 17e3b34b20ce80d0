//! Canonical policy form, equivalence and inclusion, and zone checks.
//!
//! A packet is described by (remote endpoint, direction, protocol, device
//! port, remote port). For ICMP the two port axes carry the ICMP code and
//! type; other non-port protocols use the single point (0, 0).
//!
//! The canonical form stores one region per (endpoint key, direction,
//! protocol). Two residual keys stand for every endpoint not listed
//! explicitly: `*` for Internet hosts and `local-networks` for local ones.
//! A specific endpoint is listed only when its region differs from the
//! residual that would otherwise apply, which makes the form unique.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Direction, Endpoint, MudAce, MudProfile, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::ports::{Interval, PortMatch, PortRegion};
use crate::scalar::Scalar;

const ICMP_AXIS: Interval = Interval { lo: 0, hi: 255 };

type Key = (Endpoint, Direction, u8);

/// The (device-side, remote-side) region an ACE admits for its protocol.
pub fn ace_region(ace: &MudAce) -> PortRegion {
    match ace.protocol {
        PROTO_TCP | PROTO_UDP => PortRegion::from_box(ace.device_port().interval(), ace.remote_port().interval()),
        PROTO_ICMP => {
            let (t, c) = ace.icmp.map_or((None, None), |m| (m.icmp_type, m.code));
            let axis = |v: Option<u8>| v.map_or(ICMP_AXIS, |v| Interval::point(v as u32));
            PortRegion::from_box(axis(c), axis(t))
        }
        _ => PortRegion::from_box(Interval::point(0), Interval::point(0)),
    }
}

/// Endpoints standing for "any host not listed".
fn residual_keys() -> [Endpoint; 2] {
    [Endpoint::Any, Endpoint::LocalNetworks]
}

/// Which residual key describes an unlisted endpoint.
fn residual_of(e: &Endpoint) -> Endpoint {
    if Endpoint::LocalNetworks.covers(e) {
        Endpoint::LocalNetworks
    } else {
        Endpoint::Any
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CanonicalPolicy {
    regions: BTreeMap<Key, PortRegion>,
}

/// One disjoint permit tuple of a canonical policy.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct CanonicalTuple {
    pub endpoint: Endpoint,
    pub direction: Direction,
    pub ip_proto: u8,
    pub device_port: PortMatch,
    pub remote_port: PortMatch,
}

impl fmt::Display for CanonicalTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} proto={} device={} remote={}",
            self.direction, self.endpoint, self.ip_proto, self.device_port, self.remote_port
        )
    }
}

impl CanonicalPolicy {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Region admitted for endpoint `e`, whether or not it is listed.
    pub fn region_for(&self, e: &Endpoint, direction: Direction, proto: u8) -> PortRegion {
        let key = (e.clone(), direction, proto);
        if let Some(r) = self.regions.get(&key) {
            return r.clone();
        }
        let residual = residual_of(e);
        if residual == *e {
            // an unlisted residual key: local hosts still get what `*` grants
            if residual == Endpoint::LocalNetworks {
                return self.region_for(&Endpoint::Any, direction, proto);
            }
            return PortRegion::empty();
        }
        self.region_for(&residual, direction, proto)
    }

    pub fn accepts(&self, e: &Endpoint, direction: Direction, proto: u8, device: u32, remote: u32) -> bool {
        self.region_for(e, direction, proto).contains(device, remote)
    }

    fn keys(&self) -> impl Iterator<Item = &Key> {
        self.regions.keys()
    }

    pub fn tuples(&self) -> Vec<CanonicalTuple> {
        let mut out = Vec::new();
        for ((endpoint, direction, proto), region) in &self.regions {
            for (x, y) in region.boxes() {
                out.push(CanonicalTuple {
                    endpoint: endpoint.clone(),
                    direction: *direction,
                    ip_proto: *proto,
                    device_port: PortMatch::from_interval(x),
                    remote_port: PortMatch::from_interval(y),
                });
            }
        }
        out
    }
}

fn canonical_from(entries: &[(Endpoint, Direction, u8, PortRegion)]) -> CanonicalPolicy {
    // raw union per stated endpoint
    let mut raw: BTreeMap<Key, PortRegion> = BTreeMap::new();
    for (e, d, p, r) in entries {
        let slot = raw.entry((e.clone(), *d, *p)).or_default();
        *slot = slot.union(r);
    }
    let mut endpoints: BTreeSet<Endpoint> = raw.keys().map(|(e, _, _)| e.clone()).collect();
    endpoints.extend(residual_keys());
    let channels: BTreeSet<(Direction, u8)> = raw.keys().map(|(_, d, p)| (*d, *p)).collect();

    let effective = |e: &Endpoint, d: Direction, p: u8| -> PortRegion {
        raw.iter()
            .filter(|((ae, ad, ap), _)| *ad == d && *ap == p && ae.covers(e))
            .fold(PortRegion::empty(), |acc, (_, r)| acc.union(r))
    };

    let mut regions = BTreeMap::new();
    for &(d, p) in &channels {
        let any = effective(&Endpoint::Any, d, p);
        let local = effective(&Endpoint::LocalNetworks, d, p);
        if !any.is_empty() {
            regions.insert((Endpoint::Any, d, p), any.clone());
        }
        if local != any {
            regions.insert((Endpoint::LocalNetworks, d, p), local.clone());
        }
        for e in &endpoints {
            if residual_keys().contains(e) {
                continue;
            }
            let r = effective(e, d, p);
            let fallback = if residual_of(e) == Endpoint::LocalNetworks { &local } else { &any };
            if r != *fallback {
                regions.insert((e.clone(), d, p), r);
            }
        }
    }
    CanonicalPolicy { regions }
}

/// Unique disjoint decomposition of the accept set of a whitelist profile.
/// Drop ACEs are ignored.
pub fn canonicalize(profile: &MudProfile) -> CanonicalPolicy {
    let entries: Vec<_> = profile
        .aces()
        .filter(|a| a.action == crate::model::Action::Accept)
        .map(|a| (a.endpoint.clone(), a.direction, a.protocol, ace_region(a)))
        .collect();
    canonical_from(&entries)
}

/// `a` and `b` accept exactly the same packets.
pub fn equivalent(a: &MudProfile, b: &MudProfile) -> bool {
    canonicalize(a) == canonicalize(b)
}

/// Canonical-level inclusion: every packet `a` accepts, `b` accepts.
pub fn canonical_includes(a: &CanonicalPolicy, b: &CanonicalPolicy) -> bool {
    let mut probes: BTreeSet<&Key> = a.keys().collect();
    probes.extend(b.keys());
    let mut checks: BTreeSet<Key> = BTreeSet::new();
    for (e, d, p) in probes {
        checks.insert((e.clone(), *d, *p));
        for r in residual_keys() {
            checks.insert((r, *d, *p));
        }
    }
    checks
        .iter()
        .all(|(e, d, p)| a.region_for(e, *d, *p).is_subset(&b.region_for(e, *d, *p)))
}

/// `a` is included in `b`.
pub fn includes(a: &MudProfile, b: &MudProfile) -> bool {
    canonical_includes(&canonicalize(a), &canonicalize(b))
}

/// One permitted pattern in a zone policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneRule {
    pub endpoint: Endpoint,
    /// Absent means both directions.
    #[serde(default)]
    pub direction: Option<Direction>,
    /// Absent means every protocol number.
    #[serde(default)]
    pub protocols: Option<Vec<u8>>,
    #[serde(default = "any_port")]
    pub device_port: PortMatch,
    #[serde(default = "any_port")]
    pub remote_port: PortMatch,
}

fn any_port() -> PortMatch {
    PortMatch::Any
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZonePolicy {
    pub name: String,
    /// Lower is more restrictive.
    pub rank: u32,
    #[serde(default)]
    pub notes: String,
    pub permit: Vec<ZoneRule>,
}

#[derive(Debug, thiserror::Error)]
pub enum ComplianceError {
    #[error("profile contains drop ACEs; only whitelists can be checked")]
    DropAce,
    #[error("cannot read zone file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid zone file {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

impl ZonePolicy {
    pub fn from_json(bytes: &[u8]) -> Result<ZonePolicy, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn load(path: &Path) -> Result<ZonePolicy, ComplianceError> {
        let bytes = std::fs::read(path).map_err(|source| ComplianceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ZonePolicy::from_json(&bytes).map_err(|source| ComplianceError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load every `*.json` in a directory, most restrictive first.
    pub fn load_dir(dir: &Path) -> Result<Vec<ZonePolicy>, ComplianceError> {
        let io = |source| ComplianceError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut zones = paths.iter().map(|p| ZonePolicy::load(p)).collect::<Result<Vec<_>, _>>()?;
        zones.sort_by(|a, b| (a.rank, &a.name).cmp(&(b.rank, &b.name)));
        Ok(zones)
    }

    pub fn canonical(&self) -> CanonicalPolicy {
        let mut entries = Vec::new();
        for rule in &self.permit {
            let directions: Vec<Direction> = rule.direction.map_or(Direction::ALL.to_vec(), |d| vec![d]);
            let protocols: Vec<u8> = rule.protocols.clone().unwrap_or_else(|| (0..=255).collect());
            let region = PortRegion::from_box(rule.device_port.interval(), rule.remote_port.interval());
            for &d in &directions {
                for &p in &protocols {
                    entries.push((rule.endpoint.clone(), d, p, region.clone()));
                }
            }
        }
        canonical_from(&entries)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AceVerdict {
    pub ace: String,
    pub compliant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplianceReport {
    pub zone: String,
    pub total: usize,
    pub violating: usize,
    pub percent_violating: f64,
    pub safe: bool,
    pub aces: Vec<AceVerdict>,
}

impl ComplianceReport {
    /// Violating share as an arbitrary scalar; zero for an empty profile.
    pub fn fraction<T: Scalar>(&self) -> T {
        if self.total == 0 {
            T::zero()
        } else {
            T::ratio(self.violating as u64, self.total as u64)
        }
    }

    pub fn text_row(&self) -> String {
        format!(
            "{:<12} {:>4}/{:<4} {:>6.1}%  {}",
            self.zone,
            self.violating,
            self.total,
            self.percent_violating,
            if self.safe { "safe" } else { "unsafe" }
        )
    }
}

/// Per-ACE inclusion of `profile` in `zone`.
pub fn check_zone(profile: &MudProfile, zone: &ZonePolicy) -> Result<ComplianceReport, ComplianceError> {
    if profile.has_drop() {
        return Err(ComplianceError::DropAce);
    }
    let permitted = zone.canonical();
    let aces: Vec<AceVerdict> = profile
        .aces()
        .map(|ace| {
            let single = canonical_from(&[(ace.endpoint.clone(), ace.direction, ace.protocol, ace_region(ace))]);
            AceVerdict {
                ace: ace.name.clone(),
                compliant: canonical_includes(&single, &permitted),
            }
        })
        .collect();
    let total = aces.len();
    let violating = aces.iter().filter(|v| !v.compliant).count();
    Ok(ComplianceReport {
        zone: zone.name.clone(),
        total,
        violating,
        percent_violating: if total == 0 { 0.0 } else { 100.0 * violating as f64 / total as f64 },
        safe: violating == 0,
        aces,
    })
}

/// Zones the profile can be installed in, most restrictive first.
pub fn safe_zones(profile: &MudProfile, zones: &[ZonePolicy]) -> Result<Vec<String>, ComplianceError> {
    let mut ordered: Vec<&ZonePolicy> = zones.iter().collect();
    ordered.sort_by(|a, b| (a.rank, &a.name).cmp(&(b.rank, &b.name)));
    let mut out = Vec::new();
    for z in ordered {
        if check_zone(profile, z)?.safe {
            out.push(z.name.clone());
        }
    }
    Ok(out)
}
