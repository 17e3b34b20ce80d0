//! Flow records to MUD profile translation, and report data for Sankey-style
//! rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::Serialize;

use crate::flow::{DnsCache, FlowRecord, RemoteEndpoint};
use crate::model::{
    is_local_scope, Channel, Direction, Endpoint, MudAce, MudProfile, GATEWAY_URN, PROTO_ICMP, PROTO_UDP,
};
use crate::ports::PortMatch;

#[derive(Clone, Debug)]
pub struct GenOptions {
    /// Collapse unnamed endpoints sharing a port once there are strictly
    /// more than this many distinct addresses.
    pub wildcard_endpoint_threshold: usize,
    pub stun_detection: bool,
    pub gateway_namespace: String,
    pub mud_url: String,
    pub systeminfo: String,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            wildcard_endpoint_threshold: 5,
            stun_detection: true,
            gateway_namespace: GATEWAY_URN.to_string(),
            mud_url: "https://mud.example.com/device.json".to_string(),
            systeminfo: "device".to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GenError {
    #[error("wildcard endpoint threshold must be at least 2, got {0}")]
    Threshold(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub profile: MudProfile,
    pub warnings: Vec<String>,
}

type WildcardKey = (Direction, u8, PortMatch, Option<u8>);

/// Candidate ACE before naming.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    direction: Direction,
    channel: Channel,
    endpoint: Endpoint,
    proto: u8,
    device_port: PortMatch,
    remote_port: PortMatch,
    icmp_type: Option<u8>,
}

impl Candidate {
    fn into_ace(self) -> MudAce {
        let ace = MudAce::accept(String::new(), self.direction, self.endpoint, self.proto)
            .with_ports(self.device_port, self.remote_port);
        if self.proto == PROTO_ICMP {
            ace.with_icmp(self.icmp_type, None)
        } else {
            ace
        }
    }
}

fn is_stun_name(name: &str) -> bool {
    name.split('.').any(|label| {
        label
            .strip_prefix("stun")
            .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()))
    })
}

/// Whether a flow counts as STUN traffic.
pub fn is_stun_flow(flow: &FlowRecord) -> bool {
    flow.ip_proto == PROTO_UDP
        && (flow.stun || matches!(&flow.remote, RemoteEndpoint::Domain(d) if is_stun_name(d)))
}

/// RFC 3339 UTC rendering of a capture timestamp.
pub fn format_timestamp(t: f64) -> String {
    let secs = t.floor();
    let nanos = ((t - secs) * 1e9).round().min(999_999_999.0) as u32;
    chrono::DateTime::from_timestamp(secs as i64, nanos)
        .unwrap_or_default()
        .format("%Y-%m-%dT%H:%M:%S%:z")
        .to_string()
}

/// Translate one device's flows into a whitelist profile.
pub fn translate(flows: &[FlowRecord], dns: &DnsCache, opts: &GenOptions) -> Result<Generated, GenError> {
    if opts.wildcard_endpoint_threshold < 2 {
        return Err(GenError::Threshold(opts.wildcard_endpoint_threshold));
    }
    let mut warnings = Vec::new();
    let stun = opts.stun_detection && flows.iter().any(is_stun_flow);

    let mut candidates: BTreeSet<Candidate> = BTreeSet::new();
    // (direction, proto, remote port, icmp type) -> unnamed addresses and
    // their device ports
    let mut unnamed: BTreeMap<WildcardKey, BTreeMap<Ipv4Addr, BTreeSet<PortMatch>>> = BTreeMap::new();

    for f in flows {
        let endpoint = match &f.remote {
            RemoteEndpoint::Gateway => Endpoint::Controller(opts.gateway_namespace.clone()),
            RemoteEndpoint::LocalNetwork => Endpoint::LocalNetworks,
            RemoteEndpoint::Domain(d) => Endpoint::domain(d),
            RemoteEndpoint::Ip(ip) => match dns.lookup_at(*ip, f.first_seen) {
                Some(name) => Endpoint::domain(name),
                None => Endpoint::Ipv4(*ip),
            },
        };
        if stun && f.ip_proto == PROTO_UDP && endpoint.channel() == Channel::Internet {
            continue;
        }
        if let Endpoint::Ipv4(ip) = endpoint {
            if is_local_scope(ip) {
                warnings.push(format!(
                    "{} flow to unresolved local-scope address {ip} emitted as a literal",
                    f.direction
                ));
            } else {
                unnamed
                    .entry((f.direction, f.ip_proto, f.remote_port, f.icmp_type))
                    .or_default()
                    .entry(ip)
                    .or_default()
                    .insert(f.device_port);
                continue;
            }
        }
        candidates.insert(Candidate {
            direction: f.direction,
            channel: endpoint.channel(),
            endpoint,
            proto: f.ip_proto,
            device_port: f.device_port,
            remote_port: f.remote_port,
            icmp_type: f.icmp_type,
        });
    }

    for ((direction, proto, remote_port, icmp_type), addrs) in unnamed {
        if addrs.len() > opts.wildcard_endpoint_threshold {
            let device_ports: BTreeSet<PortMatch> = addrs.values().flatten().copied().collect();
            let device_port = if device_ports.len() == 1 {
                *device_ports.iter().next().expect("one element")
            } else {
                PortMatch::Any
            };
            candidates.insert(Candidate {
                direction,
                channel: Channel::Internet,
                endpoint: Endpoint::Any,
                proto,
                device_port,
                remote_port,
                icmp_type,
            });
        } else {
            for (ip, device_ports) in addrs {
                for device_port in device_ports {
                    candidates.insert(Candidate {
                        direction,
                        channel: Channel::Internet,
                        endpoint: Endpoint::Ipv4(ip),
                        proto,
                        device_port,
                        remote_port,
                        icmp_type,
                    });
                }
            }
        }
    }

    if stun {
        for direction in Direction::ALL {
            candidates.insert(Candidate {
                direction,
                channel: Channel::Internet,
                endpoint: Endpoint::Any,
                proto: PROTO_UDP,
                device_port: PortMatch::Any,
                remote_port: PortMatch::Any,
                icmp_type: None,
            });
        }
    }

    let mut profile = MudProfile::new(opts.mud_url.clone(), opts.systeminfo.clone());
    profile.last_update = format_timestamp(flows.iter().map(|f| f.last_seen).fold(0.0, f64::max));
    for c in candidates {
        profile.push(c.into_ace());
    }
    profile.renumber("");
    warnings.sort();
    warnings.dedup();
    Ok(Generated { profile, warnings })
}

/// Extension point for rules a manufacturer wants in the profile although
/// the capture never showed them. No implementation ships.
pub trait AceSource {
    fn extra_aces(&self, profile: &MudProfile) -> Vec<MudAce>;
}

/// Append the ACEs from `source` and renumber.
pub fn with_extra_aces(mut profile: MudProfile, source: &dyn AceSource) -> MudProfile {
    for ace in source.extra_aces(&profile) {
        profile.push(ace);
    }
    profile.renumber("");
    profile
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReportNode {
    pub id: usize,
    pub label: String,
    pub kind: &'static str,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReportLink {
    pub source: usize,
    pub target: usize,
    pub ace: String,
    pub direction: Direction,
    pub channel: Channel,
    pub endpoint: String,
    pub proto: u8,
    /// Remote port, or ICMP type for ICMP.
    pub port: String,
}

/// Node/link listing of a profile: the device, its endpoints, and one link
/// per ACE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlowReport {
    pub device: String,
    pub nodes: Vec<ReportNode>,
    pub links: Vec<ReportLink>,
}

pub fn emit_flow_report(profile: &MudProfile) -> FlowReport {
    let mut nodes = vec![ReportNode {
        id: 0,
        label: profile.systeminfo.clone(),
        kind: "device",
    }];
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut aces: Vec<&MudAce> = profile.aces().collect();
    aces.sort_by(|a, b| {
        (a.channel(), &a.endpoint, a.direction, a.protocol, a.remote_port(), a.device_port(), &a.name)
            .cmp(&(b.channel(), &b.endpoint, b.direction, b.protocol, b.remote_port(), b.device_port(), &b.name))
    });
    let mut links = Vec::with_capacity(aces.len());
    for ace in aces {
        let label = ace.endpoint.label();
        let id = *index.entry(label.clone()).or_insert_with(|| {
            let id = nodes.len();
            nodes.push(ReportNode {
                id,
                label: label.clone(),
                kind: match ace.channel() {
                    Channel::Local => "local-endpoint",
                    Channel::Internet => "internet-endpoint",
                },
            });
            id
        });
        let (source, target) = match ace.direction {
            Direction::FromDevice => (0, id),
            Direction::ToDevice => (id, 0),
        };
        let port = if ace.protocol == PROTO_ICMP {
            ace.icmp
                .and_then(|m| m.icmp_type)
                .map_or("*".to_string(), |t| format!("type {t}"))
        } else {
            ace.remote_port().to_string()
        };
        links.push(ReportLink {
            source,
            target,
            ace: ace.name.clone(),
            direction: ace.direction,
            channel: ace.channel(),
            endpoint: label,
            proto: ace.protocol,
            port,
        });
    }
    FlowReport {
        device: profile.systeminfo.clone(),
        nodes,
        links,
    }
}
