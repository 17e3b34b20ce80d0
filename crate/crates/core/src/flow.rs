//! Per-device flow capture: a simulated priority rule table whose mirror
//! rules trigger header inspection and reactive rule insertion, a passive
//! DNS cache, and attribution of every packet to a directional flow.
//!
//! Priority layout (higher wins, ties go to the earlier rule):
//!
//! | priority | rule |
//! |---------:|------|
//! | 1090 | mirror UDP from port 53 (DNS responses) |
//! | 1080 | mirror UDP to port 53 (DNS queries) |
//! | 1070 | mirror TCP from port 53 |
//! | 1060 | mirror TCP to port 53 |
//! | 1050 | mirror UDP to port 1900 (SSDP) |
//! | 1040 | mirror UDP from port 1900 |
//! | 500-899 | reactive rules: group base + kind offset |
//! | 190 | mirror TCP SYN |
//! | 180 | mirror ICMP |
//! | 170 | mirror UDP not matched by a reactive rule |
//! | 160 | mirror TCP not matched by a reactive rule |
//! | 1 | forward everything |
//!
//! Group bases are from-local 800, to-local 700, from-internet 600 and
//! to-internet 500; kind offsets are +90 DNS/SSDP, +50 TCP, +20 ICMP and
//! +0 UDP. DNS and SSDP mirrors sit above the reactive band because every
//! response has to be read to keep the name cache current. The discovery
//! mirrors sit below it so they only see the first packet of a flow that no
//! reactive rule covers yet.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::Serialize;

use crate::model::{Channel, Direction, MacAddr, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::pcap::{try_extract_dns_answers, DnsAnswer, PacketEvent, DNS_PORT, SSDP_PORT};
use crate::ports::PortMatch;

pub const DEFAULT_TTL_FLOOR: f64 = 60.0;

/// Passive DNS cache with per-IP answer history, so a name can be looked up
/// as it was at any earlier instant.
#[derive(Clone, Debug)]
pub struct DnsCache {
    ttl_floor: f64,
    history: BTreeMap<Ipv4Addr, Vec<CacheEntry>>,
}

#[derive(Clone, Debug, PartialEq)]
struct CacheEntry {
    name: String,
    inserted: f64,
    expires: f64,
}

impl Default for DnsCache {
    fn default() -> Self {
        DnsCache::new(DEFAULT_TTL_FLOOR)
    }
}

impl DnsCache {
    /// `ttl_floor` is the minimum lifetime granted to any answer, in seconds.
    pub fn new(ttl_floor: f64) -> Self {
        DnsCache {
            ttl_floor: ttl_floor.max(0.0),
            history: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, answer: &DnsAnswer) {
        let lifetime = (answer.ttl as f64).max(self.ttl_floor);
        let entries = self.history.entry(answer.answer_ip).or_default();
        let entry = CacheEntry {
            name: answer.query_name.clone(),
            inserted: answer.observed_at,
            expires: answer.observed_at + lifetime,
        };
        let at = entries.partition_point(|e| e.inserted <= entry.inserted);
        entries.insert(at, entry);
    }

    /// Name bound to `ip` at time `t`: the latest answer observed at or
    /// before `t`, provided it has not expired.
    pub fn lookup_at(&self, ip: Ipv4Addr, t: f64) -> Option<&str> {
        let entries = self.history.get(&ip)?;
        let idx = entries.partition_point(|e| e.inserted <= t);
        let latest = entries.get(idx.checked_sub(1)?)?;
        (t < latest.expires).then_some(latest.name.as_str())
    }

    /// Every name ever bound to `ip`, in observation order without repeats.
    pub fn names_of(&self, ip: Ipv4Addr) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.history
            .get(&ip)
            .into_iter()
            .flatten()
            .filter(|e| seen.insert(e.name.as_str()))
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Addresses some answer ever bound to `name`.
    pub fn addresses_of(&self, name: &str) -> Vec<Ipv4Addr> {
        self.history
            .iter()
            .filter(|(_, es)| es.iter().any(|e| e.name == name))
            .map(|(ip, _)| *ip)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }
}

/// Address constraint of a rule side.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AddrMatch {
    Any,
    /// The tracked device (by MAC).
    Device,
    Ip(Ipv4Addr),
    /// Matches any address the cache currently maps to this name.
    Domain(String),
    /// The local gateway: gateway MAC with an address inside a local subnet.
    Gateway,
    /// Any address inside the configured local subnets.
    LocalNetwork,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchSpec {
    pub src: AddrMatch,
    pub dst: AddrMatch,
    pub ip_proto: Option<u8>,
    pub src_port: PortMatch,
    pub dst_port: PortMatch,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
    /// `Some(true)` matches only packets with SYN set.
    pub tcp_syn: Option<bool>,
}

impl MatchSpec {
    pub fn any() -> Self {
        MatchSpec {
            src: AddrMatch::Any,
            dst: AddrMatch::Any,
            ip_proto: None,
            src_port: PortMatch::Any,
            dst_port: PortMatch::Any,
            icmp_type: None,
            icmp_code: None,
            tcp_syn: None,
        }
    }

    fn proto(proto: u8) -> Self {
        MatchSpec {
            ip_proto: Some(proto),
            ..MatchSpec::any()
        }
    }

    pub fn matches(&self, ev: &PacketEvent, ctx: &MatchCtx<'_>) -> bool {
        if let Some(p) = self.ip_proto {
            if ev.ip_proto != p {
                return false;
            }
        }
        if matches!(ev.ip_proto, PROTO_TCP | PROTO_UDP) {
            if !self.src_port.matches(ev.src_port) || !self.dst_port.matches(ev.dst_port) {
                return false;
            }
        } else if !self.src_port.is_any() || !self.dst_port.is_any() {
            return false;
        }
        if self.icmp_type.is_some_and(|t| ev.icmp_type != Some(t)) {
            return false;
        }
        if self.icmp_code.is_some_and(|c| ev.icmp_code != Some(c)) {
            return false;
        }
        if let Some(syn) = self.tcp_syn {
            if ev.ip_proto != PROTO_TCP || ev.tcp_syn != syn {
                return false;
            }
        }
        ctx.addr_matches(&self.src, ev.src_mac, ev.src_ip, ev.timestamp)
            && ctx.addr_matches(&self.dst, ev.dst_mac, ev.dst_ip, ev.timestamp)
    }
}

/// Environment needed to evaluate address constraints.
pub struct MatchCtx<'a> {
    pub device_mac: MacAddr,
    pub gateway_mac: MacAddr,
    pub subnets: &'a [Ipv4Net],
    pub dns: &'a DnsCache,
}

impl MatchCtx<'_> {
    pub fn in_subnets(&self, ip: Ipv4Addr) -> bool {
        self.subnets.iter().any(|n| n.contains(&ip))
    }

    fn addr_matches(&self, m: &AddrMatch, mac: MacAddr, ip: Ipv4Addr, t: f64) -> bool {
        match m {
            AddrMatch::Any => true,
            AddrMatch::Device => mac == self.device_mac,
            AddrMatch::Ip(a) => *a == ip,
            AddrMatch::Domain(d) => self.dns.lookup_at(ip, t) == Some(d.as_str()),
            AddrMatch::Gateway => mac == self.gateway_mac && self.in_subnets(ip),
            AddrMatch::LocalNetwork => self.in_subnets(ip),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleAction {
    Forward,
    Mirror,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleOrigin {
    Proactive,
    Reactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleGroup {
    FromLocal,
    ToLocal,
    FromInternet,
    ToInternet,
}

impl RuleGroup {
    pub fn of(direction: Direction, channel: Channel) -> RuleGroup {
        match (direction, channel) {
            (Direction::FromDevice, Channel::Local) => RuleGroup::FromLocal,
            (Direction::ToDevice, Channel::Local) => RuleGroup::ToLocal,
            (Direction::FromDevice, Channel::Internet) => RuleGroup::FromInternet,
            (Direction::ToDevice, Channel::Internet) => RuleGroup::ToInternet,
        }
    }

    pub fn base_priority(&self) -> u32 {
        match self {
            RuleGroup::FromLocal => 800,
            RuleGroup::ToLocal => 700,
            RuleGroup::FromInternet => 600,
            RuleGroup::ToInternet => 500,
        }
    }
}

/// What caused a reactive rule; selects the offset inside the group band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FlowKind {
    Service,
    Tcp,
    Icmp,
    Udp,
}

impl FlowKind {
    fn offset(self) -> u32 {
        match self {
            FlowKind::Service => 90,
            FlowKind::Tcp => 50,
            FlowKind::Icmp => 20,
            FlowKind::Udp => 0,
        }
    }
}

pub const PRIO_DNS_RESPONSE: u32 = 1090;
pub const PRIO_DNS_QUERY: u32 = 1080;
pub const PRIO_DNS_TCP_RESPONSE: u32 = 1070;
pub const PRIO_DNS_TCP_QUERY: u32 = 1060;
pub const PRIO_SSDP_TO: u32 = 1050;
pub const PRIO_SSDP_FROM: u32 = 1040;
pub const PRIO_TCP_SYN: u32 = 190;
pub const PRIO_ICMP: u32 = 180;
pub const PRIO_UNKNOWN_UDP: u32 = 170;
pub const PRIO_UNKNOWN_TCP: u32 = 160;
pub const PRIO_DEFAULT: u32 = 1;

#[derive(Clone, Debug)]
pub struct Rule {
    pub spec: MatchSpec,
    pub priority: u32,
    pub action: RuleAction,
    pub origin: RuleOrigin,
    pub group: Option<RuleGroup>,
    pub packets: u64,
    pub bytes: u64,
}

pub type RuleId = usize;

/// Rules in insertion order plus a priority index. Lookup returns the first
/// match in (priority desc, insertion asc) order.
#[derive(Clone, Debug, Default)]
pub struct RuleTable {
    rules: Vec<Rule>,
    order: Vec<RuleId>,
}

impl RuleTable {
    pub fn insert(&mut self, rule: Rule) -> RuleId {
        let id = self.rules.len();
        let prio = rule.priority;
        self.rules.push(rule);
        let at = self.order.partition_point(|&r| self.rules[r].priority >= prio);
        self.order.insert(at, id);
        id
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> &Rule {
        &self.rules[id]
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rule ids from highest to lowest precedence.
    pub fn by_precedence(&self) -> &[RuleId] {
        &self.order
    }

    pub fn lookup(&self, ev: &PacketEvent, ctx: &MatchCtx<'_>) -> Option<RuleId> {
        self.lookup_where(ev, ctx, |_| true)
    }

    pub fn lookup_where(
        &self,
        ev: &PacketEvent,
        ctx: &MatchCtx<'_>,
        filter: impl Fn(&Rule) -> bool,
    ) -> Option<RuleId> {
        self.order
            .iter()
            .copied()
            .find(|&id| filter(&self.rules[id]) && self.rules[id].spec.matches(ev, ctx))
    }

    fn count(&mut self, id: RuleId, bytes: u64) {
        let r = &mut self.rules[id];
        r.packets += 1;
        r.bytes += bytes;
    }
}

fn proactive(spec: MatchSpec, priority: u32, action: RuleAction) -> Rule {
    Rule {
        spec,
        priority,
        action,
        origin: RuleOrigin::Proactive,
        group: None,
        packets: 0,
        bytes: 0,
    }
}

/// Fresh table with the fixed proactive rules. The MACs and subnets are
/// resolved at match time through [`MatchCtx`], so the table itself depends
/// only on the layout above.
pub fn init_rule_table() -> RuleTable {
    let mut t = RuleTable::default();
    let udp = MatchSpec::proto(PROTO_UDP);
    let tcp = MatchSpec::proto(PROTO_TCP);
    let m = RuleAction::Mirror;
    t.insert(proactive(MatchSpec { src_port: PortMatch::Eq(DNS_PORT), ..udp.clone() }, PRIO_DNS_RESPONSE, m));
    t.insert(proactive(MatchSpec { dst_port: PortMatch::Eq(DNS_PORT), ..udp.clone() }, PRIO_DNS_QUERY, m));
    t.insert(proactive(MatchSpec { src_port: PortMatch::Eq(DNS_PORT), ..tcp.clone() }, PRIO_DNS_TCP_RESPONSE, m));
    t.insert(proactive(MatchSpec { dst_port: PortMatch::Eq(DNS_PORT), ..tcp.clone() }, PRIO_DNS_TCP_QUERY, m));
    t.insert(proactive(MatchSpec { dst_port: PortMatch::Eq(SSDP_PORT), ..udp.clone() }, PRIO_SSDP_TO, m));
    t.insert(proactive(MatchSpec { src_port: PortMatch::Eq(SSDP_PORT), ..udp.clone() }, PRIO_SSDP_FROM, m));
    t.insert(proactive(MatchSpec { tcp_syn: Some(true), ..tcp.clone() }, PRIO_TCP_SYN, m));
    t.insert(proactive(MatchSpec::proto(PROTO_ICMP), PRIO_ICMP, m));
    t.insert(proactive(udp, PRIO_UNKNOWN_UDP, m));
    t.insert(proactive(tcp, PRIO_UNKNOWN_TCP, m));
    t.insert(proactive(MatchSpec::any(), PRIO_DEFAULT, RuleAction::Forward));
    t
}

/// The remote side of a flow as recorded.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RemoteEndpoint {
    Gateway,
    LocalNetwork,
    Domain(String),
    Ip(Ipv4Addr),
}

impl RemoteEndpoint {
    pub fn channel(&self) -> Channel {
        match self {
            RemoteEndpoint::Gateway | RemoteEndpoint::LocalNetwork => Channel::Local,
            RemoteEndpoint::Domain(_) | RemoteEndpoint::Ip(_) => Channel::Internet,
        }
    }

    pub fn label(&self) -> String {
        match self {
            RemoteEndpoint::Gateway => "gateway".to_string(),
            RemoteEndpoint::LocalNetwork => "local-network".to_string(),
            RemoteEndpoint::Domain(d) => d.clone(),
            RemoteEndpoint::Ip(ip) => ip.to_string(),
        }
    }
}

impl Serialize for RemoteEndpoint {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Initiator {
    Device,
    Remote,
    Unknown,
}

/// One direction of a device conversation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowRecord {
    pub device_mac: MacAddr,
    pub channel: Channel,
    pub direction: Direction,
    pub remote: RemoteEndpoint,
    /// Address behind `remote` when it is a single host.
    pub remote_ip: Option<Ipv4Addr>,
    pub ip_proto: u8,
    pub device_port: PortMatch,
    pub remote_port: PortMatch,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
    pub initiated_by: Initiator,
    pub packets: u64,
    pub bytes: u64,
    pub first_seen: f64,
    pub last_seen: f64,
    /// Some packet carried the STUN magic cookie.
    pub stun: bool,
}

impl FlowRecord {
    /// Identity used for merging and ordering; counters excluded.
    pub fn key(&self) -> FlowKey {
        FlowKey {
            direction: self.direction,
            channel: self.channel,
            remote: self.remote.clone(),
            ip_proto: self.ip_proto,
            device_port: self.device_port,
            remote_port: self.remote_port,
            icmp_type: self.icmp_type,
            icmp_code: self.icmp_code,
        }
    }

    /// Whether this record describes the packet `ev` (seen from `device`).
    pub fn covers_packet(&self, ev: &PacketEvent, device: MacAddr) -> bool {
        let (direction, dev_port, rem_port, rem_ip) = if ev.src_mac == device {
            (Direction::FromDevice, ev.src_port, ev.dst_port, ev.dst_ip)
        } else {
            (Direction::ToDevice, ev.dst_port, ev.src_port, ev.src_ip)
        };
        direction == self.direction
            && ev.ip_proto == self.ip_proto
            && self.remote_ip.is_none_or(|ip| ip == rem_ip)
            && if matches!(ev.ip_proto, PROTO_TCP | PROTO_UDP) {
                self.device_port.matches(dev_port) && self.remote_port.matches(rem_port)
            } else {
                self.icmp_type.is_none_or(|t| ev.icmp_type == Some(t))
            }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub direction: Direction,
    pub channel: Channel,
    pub remote: RemoteEndpoint,
    pub ip_proto: u8,
    pub device_port: PortMatch,
    pub remote_port: PortMatch,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
}

#[derive(Clone, Debug)]
pub struct TrackerConfig {
    pub device_mac: MacAddr,
    pub gateway_mac: MacAddr,
    pub local_subnets: Vec<Ipv4Net>,
    pub dns_ttl_floor: f64,
}

impl TrackerConfig {
    pub fn new(device_mac: MacAddr, gateway_mac: MacAddr) -> Self {
        TrackerConfig {
            device_mac,
            gateway_mac,
            local_subnets: default_subnets(),
            dns_ttl_floor: DEFAULT_TTL_FLOOR,
        }
    }
}

impl TrackerConfig {
    pub fn in_subnets(&self, ip: Ipv4Addr) -> bool {
        self.local_subnets.iter().any(|n| n.contains(&ip))
    }

    /// `None` unless exactly one side of the packet is the device.
    pub fn orient(&self, ev: &PacketEvent) -> Option<Oriented> {
        let dev = self.device_mac;
        if ev.src_mac == dev && ev.dst_mac != dev {
            Some(Oriented {
                direction: Direction::FromDevice,
                device_port: ev.src_port,
                remote_port: ev.dst_port,
                remote_ip: ev.dst_ip,
                remote_mac: ev.dst_mac,
            })
        } else if ev.dst_mac == dev && ev.src_mac != dev {
            Some(Oriented {
                direction: Direction::ToDevice,
                device_port: ev.dst_port,
                remote_port: ev.src_port,
                remote_ip: ev.src_ip,
                remote_mac: ev.src_mac,
            })
        } else {
            None
        }
    }

    /// Multicast, broadcast, link-local and configured subnets.
    pub fn is_local_address(&self, ip: Ipv4Addr) -> bool {
        ip.is_multicast() || ip.is_broadcast() || ip.is_link_local() || self.in_subnets(ip)
    }

    /// Name the remote side, using the cache entry valid at `t`.
    pub fn classify_remote(&self, o: &Oriented, dns: &DnsCache, t: f64) -> (RemoteEndpoint, AddrMatch) {
        if o.remote_mac == self.gateway_mac && self.in_subnets(o.remote_ip) {
            (RemoteEndpoint::Gateway, AddrMatch::Gateway)
        } else if self.is_local_address(o.remote_ip) {
            (RemoteEndpoint::LocalNetwork, AddrMatch::Ip(o.remote_ip))
        } else {
            let remote = match dns.lookup_at(o.remote_ip, t) {
                Some(name) => RemoteEndpoint::Domain(name.to_string()),
                None => RemoteEndpoint::Ip(o.remote_ip),
            };
            (remote, AddrMatch::Ip(o.remote_ip))
        }
    }
}

/// RFC 1918 space.
pub fn default_subnets() -> Vec<Ipv4Net> {
    ["10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16"]
        .iter()
        .map(|s| s.parse().expect("static subnet"))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TrackerStats {
    pub packets: u64,
    pub foreign: u64,
    pub dns_answers: u64,
    pub dns_errors: u64,
    pub rules_inserted: u64,
}

/// Flow metadata attached to a reactive rule.
#[derive(Clone, Debug)]
struct ReactiveFlow {
    direction: Direction,
    remote: RemoteEndpoint,
    remote_ip: Option<Ipv4Addr>,
    channel: Channel,
    ip_proto: u8,
    device_port: PortMatch,
    remote_port: PortMatch,
    icmp_type: Option<u8>,
    initiated_by: Initiator,
    /// Index into the provisional UDP groups.
    pair: Option<usize>,
    /// Orientation inside a provisional group: remote port is the server.
    remote_serves: bool,
    first_seen: Option<f64>,
    last_seen: f64,
    stun: bool,
}

/// Both orientations of an unresolved UDP conversation.
#[derive(Clone, Debug, Default)]
struct ProvisionalUdp {
    stun: bool,
    device_bytes: u64,
    remote_bytes: u64,
    packets: u64,
}

/// Outcome of feeding one packet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Processed {
    /// Rule selected by the table lookup.
    pub fired: RuleId,
    /// Reactive rule the packet was accounted to.
    pub accounted: RuleId,
    /// Reactive rules inserted because of this packet.
    pub inserted: Vec<RuleId>,
}

/// Replays one device's packets through the simulated switch.
#[derive(Clone, Debug)]
pub struct FlowTracker {
    cfg: TrackerConfig,
    table: RuleTable,
    dns: DnsCache,
    flows: BTreeMap<RuleId, ReactiveFlow>,
    pairs: Vec<ProvisionalUdp>,
    stats: TrackerStats,
    first_ts: Option<f64>,
    last_ts: Option<f64>,
}

/// A packet seen from the device's point of view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Oriented {
    pub direction: Direction,
    pub device_port: u16,
    pub remote_port: u16,
    pub remote_ip: Ipv4Addr,
    pub remote_mac: MacAddr,
}

impl FlowTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        let dns = DnsCache::new(cfg.dns_ttl_floor);
        FlowTracker {
            cfg,
            table: init_rule_table(),
            dns,
            flows: BTreeMap::new(),
            pairs: Vec::new(),
            stats: TrackerStats::default(),
            first_ts: None,
            last_ts: None,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    pub fn dns_cache(&self) -> &DnsCache {
        &self.dns
    }

    pub fn stats(&self) -> TrackerStats {
        self.stats
    }

    /// Timestamp of the last device packet seen.
    pub fn trace_end(&self) -> Option<f64> {
        self.last_ts
    }

    pub fn trace_start(&self) -> Option<f64> {
        self.first_ts
    }

    pub fn match_ctx(&self) -> MatchCtx<'_> {
        MatchCtx {
            device_mac: self.cfg.device_mac,
            gateway_mac: self.cfg.gateway_mac,
            subnets: &self.cfg.local_subnets,
            dns: &self.dns,
        }
    }

    fn orient(&self, ev: &PacketEvent) -> Option<Oriented> {
        self.cfg.orient(ev)
    }

    fn classify_remote(&self, o: &Oriented, t: f64) -> (RemoteEndpoint, AddrMatch) {
        self.cfg.classify_remote(o, &self.dns, t)
    }

    /// Feed one packet. Packets not involving the device are ignored.
    pub fn process_packet(&mut self, ev: &PacketEvent) -> Option<Processed> {
        let Some(o) = self.orient(ev) else {
            self.stats.foreign += 1;
            return None;
        };
        self.stats.packets += 1;
        self.first_ts.get_or_insert(ev.timestamp);
        self.last_ts = Some(self.last_ts.map_or(ev.timestamp, |t| t.max(ev.timestamp)));

        let fired = self.table.lookup(ev, &self.match_ctx()).expect("default rule matches everything");
        self.table.count(fired, ev.length as u64);
        let rule = self.table.rule(fired);
        let mut inserted = Vec::new();

        let accounted = if rule.origin == RuleOrigin::Reactive {
            fired
        } else {
            let priority = rule.priority;
            let is_service_mirror = priority >= 1000;
            if matches!(priority, PRIO_DNS_RESPONSE | PRIO_DNS_TCP_RESPONSE | PRIO_DNS_QUERY | PRIO_DNS_TCP_QUERY) {
                self.inspect_dns(ev);
            }
            let existing = self
                .table
                .lookup_where(ev, &self.match_ctx(), |r| r.origin == RuleOrigin::Reactive);
            match existing {
                Some(id) => id,
                None => {
                    inserted = if is_service_mirror {
                        self.insert_service_flow(ev, &o)
                    } else {
                        match ev.ip_proto {
                            PROTO_TCP => self.insert_tcp_flow(ev, &o),
                            PROTO_ICMP => self.insert_icmp_flow(ev, &o),
                            _ => self.insert_udp_flow(ev, &o),
                        }
                    };
                    self.stats.rules_inserted += inserted.len() as u64;
                    self.table
                        .lookup_where(ev, &self.match_ctx(), |r| r.origin == RuleOrigin::Reactive)
                        .expect("freshly inserted rule matches its packet")
                }
            }
        };
        if accounted != fired {
            self.table.count(accounted, ev.length as u64);
        }
        self.account(accounted, ev, &o);
        Some(Processed {
            fired,
            accounted,
            inserted,
        })
    }

    fn inspect_dns(&mut self, ev: &PacketEvent) {
        match try_extract_dns_answers(ev) {
            Ok(answers) => {
                for a in &answers {
                    self.dns.insert(a);
                }
                self.stats.dns_answers += answers.len() as u64;
            }
            Err(e) => {
                log::debug!("DNS payload at {} not usable: {e}", ev.timestamp);
                self.stats.dns_errors += 1;
            }
        }
    }

    fn account(&mut self, id: RuleId, ev: &PacketEvent, o: &Oriented) {
        let flow = self.flows.get_mut(&id).expect("reactive rule has flow metadata");
        flow.first_seen.get_or_insert(ev.timestamp);
        flow.last_seen = flow.last_seen.max(ev.timestamp);
        flow.stun |= ev.stun;
        if let Some(pair) = flow.pair {
            let p = &mut self.pairs[pair];
            p.packets += 1;
            p.stun |= ev.stun;
            match o.direction {
                Direction::FromDevice => p.device_bytes += ev.length as u64,
                Direction::ToDevice => p.remote_bytes += ev.length as u64,
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add_rule(
        &mut self,
        direction: Direction,
        remote: &RemoteEndpoint,
        remote_match: &AddrMatch,
        remote_ip: Ipv4Addr,
        ip_proto: u8,
        device_port: PortMatch,
        remote_port: PortMatch,
        icmp_type: Option<u8>,
        kind: FlowKind,
        initiated_by: Initiator,
        pair: Option<usize>,
        remote_serves: bool,
        t: f64,
    ) -> RuleId {
        let channel = if matches!(remote, RemoteEndpoint::Gateway | RemoteEndpoint::LocalNetwork) {
            Channel::Local
        } else {
            Channel::Internet
        };
        let group = RuleGroup::of(direction, channel);
        let (src, dst, src_port, dst_port) = match direction {
            Direction::FromDevice => (AddrMatch::Device, remote_match.clone(), device_port, remote_port),
            Direction::ToDevice => (remote_match.clone(), AddrMatch::Device, remote_port, device_port),
        };
        let spec = MatchSpec {
            src,
            dst,
            ip_proto: Some(ip_proto),
            src_port,
            dst_port,
            icmp_type,
            icmp_code: None,
            tcp_syn: None,
        };
        let id = self.table.insert(Rule {
            spec,
            priority: group.base_priority() + kind.offset(),
            action: RuleAction::Forward,
            origin: RuleOrigin::Reactive,
            group: Some(group),
            packets: 0,
            bytes: 0,
        });
        let remote_ip = match remote {
            RemoteEndpoint::Gateway => None,
            _ => Some(remote_ip),
        };
        self.flows.insert(
            id,
            ReactiveFlow {
                direction,
                remote: remote.clone(),
                remote_ip,
                channel,
                ip_proto,
                device_port,
                remote_port,
                icmp_type,
                initiated_by,
                pair,
                remote_serves,
                first_seen: None,
                last_seen: t,
                stun: false,
            },
        );
        id
    }

    /// Both directions of a conversation whose server side is known.
    fn add_bidirectional(
        &mut self,
        ev: &PacketEvent,
        o: &Oriented,
        remote_serves: bool,
        kind: FlowKind,
        initiated_by: Initiator,
    ) -> Vec<RuleId> {
        let (remote, remote_match) = self.classify_remote(o, ev.timestamp);
        let (device_port, remote_port) = if remote_serves {
            (PortMatch::Any, PortMatch::Eq(o.remote_port))
        } else {
            (PortMatch::Eq(o.device_port), PortMatch::Any)
        };
        Direction::ALL
            .iter()
            .map(|&d| {
                self.add_rule(
                    d,
                    &remote,
                    &remote_match,
                    o.remote_ip,
                    ev.ip_proto,
                    device_port,
                    remote_port,
                    None,
                    kind,
                    initiated_by,
                    None,
                    remote_serves,
                    ev.timestamp,
                )
            })
            .collect()
    }

    fn insert_service_flow(&mut self, ev: &PacketEvent, o: &Oriented) -> Vec<RuleId> {
        let service = if ev.involves_port(DNS_PORT) { DNS_PORT } else { SSDP_PORT };
        let remote_serves = o.remote_port == service;
        let initiated_by = if remote_serves { Initiator::Device } else { Initiator::Remote };
        self.add_bidirectional(ev, o, remote_serves, FlowKind::Service, initiated_by)
    }

    fn insert_tcp_flow(&mut self, ev: &PacketEvent, o: &Oriented) -> Vec<RuleId> {
        let sender_is_device = o.direction == Direction::FromDevice;
        let (remote_serves, initiated_by) = if ev.tcp_syn && !ev.tcp_ack {
            // SYN: the receiver is the server and the sender initiated.
            (sender_is_device, if sender_is_device { Initiator::Device } else { Initiator::Remote })
        } else if ev.tcp_syn {
            // SYN-ACK: the sender is the server; the opening SYN was not seen.
            (!sender_is_device, Initiator::Unknown)
        } else {
            // Mid-stream: assume the lower port is the service port.
            (o.remote_port <= o.device_port, Initiator::Unknown)
        };
        self.add_bidirectional(ev, o, remote_serves, FlowKind::Tcp, initiated_by)
    }

    fn insert_icmp_flow(&mut self, ev: &PacketEvent, o: &Oriented) -> Vec<RuleId> {
        let (remote, remote_match) = self.classify_remote(o, ev.timestamp);
        // Echo, timestamp, information and address-mask requests.
        let is_request = matches!(ev.icmp_type, Some(8 | 13 | 15 | 17));
        let initiated_by = match (is_request, o.direction) {
            (true, Direction::FromDevice) => Initiator::Device,
            (true, Direction::ToDevice) => Initiator::Remote,
            (false, _) => Initiator::Unknown,
        };
        vec![self.add_rule(
            o.direction,
            &remote,
            &remote_match,
            o.remote_ip,
            PROTO_ICMP,
            PortMatch::Any,
            PortMatch::Any,
            ev.icmp_type,
            FlowKind::Icmp,
            initiated_by,
            None,
            false,
            ev.timestamp,
        )]
    }

    /// Provisional rules for both port orientations. The remote-serves pair
    /// is inserted first, so at equal priority it takes the packets that
    /// match both; finalization decides which orientation survives.
    fn insert_udp_flow(&mut self, ev: &PacketEvent, o: &Oriented) -> Vec<RuleId> {
        let (remote, remote_match) = self.classify_remote(o, ev.timestamp);
        let pair = self.pairs.len();
        self.pairs.push(ProvisionalUdp::default());
        let mut ids = Vec::with_capacity(4);
        for remote_serves in [true, false] {
            let (device_port, remote_port) = if remote_serves {
                (PortMatch::Any, PortMatch::Eq(o.remote_port))
            } else {
                (PortMatch::Eq(o.device_port), PortMatch::Any)
            };
            for d in Direction::ALL {
                ids.push(self.add_rule(
                    d,
                    &remote,
                    &remote_match,
                    o.remote_ip,
                    PROTO_UDP,
                    device_port,
                    remote_port,
                    None,
                    FlowKind::Udp,
                    Initiator::Unknown,
                    Some(pair),
                    remote_serves,
                    ev.timestamp,
                ));
            }
        }
        ids
    }

    /// Collapse the table into flow records.
    ///
    /// Provisional UDP orientations are resolved by byte asymmetry: after at
    /// least three packets, a side sending at least twice the bytes of the
    /// other is the responder. Unresolved conversations keep both
    /// orientations with an unknown initiator. Rules that never matched are
    /// dropped, except the retained half of an unresolved pair.
    pub fn finalize(&self) -> Vec<FlowRecord> {
        let mut resolved: Vec<Option<bool>> = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let two_sided = p.packets >= 3 && p.device_bytes > 0 && p.remote_bytes > 0;
            let decided = if two_sided && p.remote_bytes >= 2 * p.device_bytes {
                Some(true)
            } else if two_sided && p.device_bytes >= 2 * p.remote_bytes {
                Some(false)
            } else {
                None
            };
            resolved.push(decided);
        }
        // Lookup precedence decides which half of a pair counted a packet, so
        // resolved pairs pool their counters per direction.
        let mut pooled: BTreeMap<(usize, Direction), (u64, u64, f64, f64)> = BTreeMap::new();
        for (&id, flow) in &self.flows {
            if let (Some(pair), Some(first)) = (flow.pair, flow.first_seen) {
                let rule = self.table.rule(id);
                let e = pooled.entry((pair, flow.direction)).or_insert((0, 0, first, flow.last_seen));
                e.0 += rule.packets;
                e.1 += rule.bytes;
                e.2 = e.2.min(first);
                e.3 = e.3.max(flow.last_seen);
            }
        }
        let mut merged: BTreeMap<FlowKey, FlowRecord> = BTreeMap::new();
        for (&id, flow) in &self.flows {
            let rule = self.table.rule(id);
            let mut initiated_by = flow.initiated_by;
            let (mut packets, mut bytes) = (rule.packets, rule.bytes);
            let (mut first_seen, mut last_seen) = (flow.first_seen.unwrap_or(flow.last_seen), flow.last_seen);
            if let Some(pair) = flow.pair {
                match resolved[pair] {
                    Some(remote_serves) => {
                        if flow.remote_serves != remote_serves {
                            continue;
                        }
                        let Some(&(p, b, f, l)) = pooled.get(&(pair, flow.direction)) else {
                            continue;
                        };
                        (packets, bytes, first_seen, last_seen) = (p, b, f, l);
                        if packets == 0 {
                            continue;
                        }
                        initiated_by = if remote_serves { Initiator::Device } else { Initiator::Remote };
                    }
                    None => {
                        if self.pairs[pair].packets == 0 {
                            continue;
                        }
                    }
                }
            } else if rule.packets == 0 {
                continue;
            }
            let record = FlowRecord {
                device_mac: self.cfg.device_mac,
                channel: flow.channel,
                direction: flow.direction,
                remote: flow.remote.clone(),
                remote_ip: flow.remote_ip,
                ip_proto: flow.ip_proto,
                device_port: flow.device_port,
                remote_port: flow.remote_port,
                icmp_type: flow.icmp_type,
                icmp_code: None,
                initiated_by,
                packets,
                bytes,
                first_seen,
                last_seen,
                stun: flow.stun || flow.pair.is_some_and(|p| self.pairs[p].stun),
            };
            match merged.get_mut(&record.key()) {
                Some(existing) => {
                    existing.packets += record.packets;
                    existing.bytes += record.bytes;
                    existing.first_seen = existing.first_seen.min(record.first_seen);
                    existing.last_seen = existing.last_seen.max(record.last_seen);
                    existing.stun |= record.stun;
                    if existing.initiated_by != record.initiated_by {
                        existing.initiated_by = Initiator::Unknown;
                    }
                    if existing.remote_ip != record.remote_ip {
                        existing.remote_ip = None;
                    }
                }
                None => {
                    merged.insert(record.key(), record);
                }
            }
        }
        merged.into_values().collect()
    }
}

/// Replay a packet stream for one device and return its flows and tracker.
pub fn track<I: IntoIterator<Item = PacketEvent>>(cfg: TrackerConfig, events: I) -> FlowTracker {
    let mut tracker = FlowTracker::new(cfg);
    for ev in events {
        tracker.process_packet(&ev);
    }
    tracker
}

#[derive(Serialize)]
struct DumpRow<'a> {
    device_mac: String,
    direction: &'static str,
    channel: &'static str,
    remote: String,
    ip_proto: u8,
    device_port: String,
    remote_port: String,
    icmp_type: Option<u8>,
    icmp_code: Option<u8>,
    initiated_by: &'a Initiator,
    packets: u64,
    bytes: u64,
    first_seen: f64,
    last_seen: f64,
    stun: bool,
}

/// CSV columns, in order, written by [`write_flow_dump`].
pub const FLOW_DUMP_COLUMNS: [&str; 15] = [
    "device_mac",
    "direction",
    "channel",
    "remote",
    "ip_proto",
    "device_port",
    "remote_port",
    "icmp_type",
    "icmp_code",
    "initiated_by",
    "packets",
    "bytes",
    "first_seen",
    "last_seen",
    "stun",
];

/// One CSV line per record, with a header row.
pub fn write_flow_dump<W: Write>(flows: &[FlowRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for f in flows {
        w.serialize(DumpRow {
            device_mac: f.device_mac.to_string(),
            direction: f.direction.as_str(),
            channel: f.channel.as_str(),
            remote: f.remote.label(),
            ip_proto: f.ip_proto,
            device_port: f.device_port.to_string(),
            remote_port: f.remote_port.to_string(),
            icmp_type: f.icmp_type,
            icmp_code: f.icmp_code,
            initiated_by: &f.initiated_by,
            packets: f.packets,
            bytes: f.bytes,
            first_seen: f.first_seen,
            last_seen: f.last_seen,
            stun: f.stun,
        })?;
    }
    if flows.is_empty() {
        w.write_record(FLOW_DUMP_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}
