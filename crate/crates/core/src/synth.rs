//! Synthetic traffic: a frame-level trace builder, a minimal DNS encoder,
//! a generator of traffic that conforms to a given profile, and a small
//! catalog of device profiles used by demos, tests and benchmarks.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::Ipv4Addr;
use std::time::Duration;

use etherparse::PacketBuilder;
use pcap_file::pcap::{PcapPacket, PcapWriter};
use rand::Rng;

use crate::model::{
    Direction, Endpoint, MacAddr, MudAce, MudProfile, PROTO_ICMP, PROTO_TCP, PROTO_UDP,
};
use crate::pcap::{decode_frame, PacketEvent};
use crate::ports::PortMatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Host {
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
}

impl Host {
    pub fn new(mac: [u8; 6], ip: [u8; 4]) -> Host {
        Host {
            mac: MacAddr(mac),
            ip: Ipv4Addr::from(ip),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TcpFlags {
    pub syn: bool,
    pub ack: bool,
    pub fin: bool,
    pub rst: bool,
}

impl TcpFlags {
    pub const SYN: TcpFlags = TcpFlags { syn: true, ack: false, fin: false, rst: false };
    pub const SYN_ACK: TcpFlags = TcpFlags { syn: true, ack: true, fin: false, rst: false };
    pub const ACK: TcpFlags = TcpFlags { syn: false, ack: true, fin: false, rst: false };
}

/// Accumulates Ethernet frames with timestamps.
#[derive(Clone, Debug, Default)]
pub struct TraceBuilder {
    frames: Vec<(f64, Vec<u8>)>,
    now: f64,
    dns_id: u16,
}

impl TraceBuilder {
    pub fn new(start: f64) -> Self {
        TraceBuilder {
            frames: Vec::new(),
            now: start,
            dns_id: 1,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn at(&mut self, t: f64) -> &mut Self {
        self.now = t;
        self
    }

    pub fn advance(&mut self, dt: f64) -> &mut Self {
        self.now += dt;
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn raw(&mut self, frame: Vec<u8>) -> &mut Self {
        self.frames.push((self.now, frame));
        self.now += 0.001;
        self
    }

    pub fn udp(&mut self, src: Host, dst: Host, sport: u16, dport: u16, payload: &[u8]) -> &mut Self {
        let b = PacketBuilder::ethernet2(src.mac.0, dst.mac.0)
            .ipv4(src.ip.octets(), dst.ip.octets(), 64)
            .udp(sport, dport);
        let mut out = Vec::with_capacity(b.size(payload.len()));
        b.write(&mut out, payload).expect("write to Vec");
        self.raw(out)
    }

    pub fn tcp(&mut self, src: Host, dst: Host, sport: u16, dport: u16, flags: TcpFlags, payload: &[u8]) -> &mut Self {
        let mut b = PacketBuilder::ethernet2(src.mac.0, dst.mac.0)
            .ipv4(src.ip.octets(), dst.ip.octets(), 64)
            .tcp(sport, dport, 1000, 65000);
        if flags.syn {
            b = b.syn();
        }
        if flags.ack {
            b = b.ack(1);
        }
        if flags.fin {
            b = b.fin();
        }
        if flags.rst {
            b = b.rst();
        }
        let mut out = Vec::with_capacity(b.size(payload.len()));
        b.write(&mut out, payload).expect("write to Vec");
        self.raw(out)
    }

    pub fn icmp(&mut self, src: Host, dst: Host, icmp_type: u8, code: u8) -> &mut Self {
        let b = PacketBuilder::ethernet2(src.mac.0, dst.mac.0)
            .ipv4(src.ip.octets(), dst.ip.octets(), 64)
            .icmpv4_raw(icmp_type, code, [0, 1, 0, 1]);
        let payload = [0u8; 32];
        let mut out = Vec::with_capacity(b.size(payload.len()));
        b.write(&mut out, &payload).expect("write to Vec");
        self.raw(out)
    }

    /// Handshake, one request and one response.
    pub fn tcp_session(&mut self, client: Host, server: Host, cport: u16, sport: u16, req: usize, resp: usize) -> &mut Self {
        self.tcp(client, server, cport, sport, TcpFlags::SYN, &[])
            .tcp(server, client, sport, cport, TcpFlags::SYN_ACK, &[])
            .tcp(client, server, cport, sport, TcpFlags::ACK, &vec![0x41; req])
            .tcp(server, client, sport, cport, TcpFlags::ACK, &vec![0x42; resp])
    }

    /// A query and its response carrying one A record per address.
    pub fn dns_lookup(&mut self, client: Host, server: Host, cport: u16, name: &str, addrs: &[Ipv4Addr], ttl: u32) -> &mut Self {
        let id = self.dns_id;
        self.dns_id = self.dns_id.wrapping_add(1);
        let answers: Vec<(Ipv4Addr, u32)> = addrs.iter().map(|a| (*a, ttl)).collect();
        self.udp(client, server, cport, 53, &encode_dns_query(id, name))
            .udp(server, client, 53, cport, &encode_dns_response(id, name, None, &answers))
    }

    pub fn events(&self) -> Vec<PacketEvent> {
        self.frames
            .iter()
            .filter_map(|(t, f)| decode_frame(*t, f.len() as u32, f).ok())
            .collect()
    }

    /// Frames sorted by timestamp (stable).
    pub fn sort(&mut self) {
        self.frames.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    pub fn extend(&mut self, other: &TraceBuilder) {
        self.frames.extend(other.frames.iter().cloned());
    }

    pub fn write_pcap<W: Write>(&self, out: W) -> Result<(), pcap_file::PcapError> {
        let mut w = PcapWriter::new(out)?;
        for (t, f) in &self.frames {
            let p = PcapPacket::new(Duration::from_secs_f64(*t), f.len() as u32, f);
            w.write_packet(&p)?;
        }
        Ok(())
    }

    pub fn to_pcap_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_pcap(&mut out).expect("write to Vec");
        out
    }
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    for label in name.trim_end_matches('.').split('.').filter(|l| !l.is_empty()) {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
}

/// Standard recursive A query.
pub fn encode_dns_query(id: u16, name: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&0x0100u16.to_be_bytes());
    out.extend_from_slice(&[0, 1, 0, 0, 0, 0, 0, 0]);
    push_name(&mut out, name);
    out.extend_from_slice(&[0, 1, 0, 1]);
    out
}

/// Response for `name`. With `cname`, the answer section is
/// `name CNAME cname` followed by the A records owned by `cname`.
pub fn encode_dns_response(id: u16, name: &str, cname: Option<&str>, answers: &[(Ipv4Addr, u32)]) -> Vec<u8> {
    let ancount = answers.len() + usize::from(cname.is_some());
    let mut out = Vec::new();
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&0x8180u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(ancount as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    push_name(&mut out, name);
    out.extend_from_slice(&[0, 1, 0, 1]);
    let owner = match cname {
        Some(target) => {
            push_name(&mut out, name);
            out.extend_from_slice(&[0, 5, 0, 1]);
            out.extend_from_slice(&300u32.to_be_bytes());
            let mut rdata = Vec::new();
            push_name(&mut rdata, target);
            out.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
            out.extend_from_slice(&rdata);
            target
        }
        None => name,
    };
    for (ip, ttl) in answers {
        push_name(&mut out, owner);
        out.extend_from_slice(&[0, 1, 0, 1]);
        out.extend_from_slice(&ttl.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&ip.octets());
    }
    out
}

/// A small home network: the device, its gateway (also the DNS resolver)
/// and one other local host. Public addresses for domains are handed out
/// from 198.18.0.0/15 in first-use order.
#[derive(Clone, Debug)]
pub struct SyntheticNet {
    pub device: Host,
    pub gateway: Host,
    pub local_peer: Host,
    addresses: BTreeMap<String, Ipv4Addr>,
    next_public: u32,
}

impl SyntheticNet {
    /// `index` varies the device MAC and address so several devices can
    /// share one capture.
    pub fn new(index: u8) -> SyntheticNet {
        SyntheticNet {
            device: Host::new([0x02, 0x10, 0, 0, 0, index], [192, 168, 1, 100u8.wrapping_add(index)]),
            gateway: Host::new([0x02, 0x00, 0, 0, 0, 0x01], [192, 168, 1, 1]),
            local_peer: Host::new([0x02, 0x20, 0, 0, 0, 0x01], [192, 168, 1, 50]),
            addresses: BTreeMap::new(),
            next_public: u32::from(Ipv4Addr::new(198, 18, 0, 10)),
        }
    }

    /// Share the public address plan with another network so a domain maps
    /// to the same address for every device.
    pub fn share_addresses_from(&mut self, other: &SyntheticNet) {
        self.addresses = other.addresses.clone();
        self.next_public = other.next_public;
    }

    pub fn address_of(&mut self, domain: &str) -> Ipv4Addr {
        if let Some(ip) = self.addresses.get(domain) {
            return *ip;
        }
        let ip = self.fresh_public();
        self.addresses.insert(domain.to_string(), ip);
        ip
    }

    pub fn fresh_public(&mut self) -> Ipv4Addr {
        let ip = Ipv4Addr::from(self.next_public);
        self.next_public += 1;
        ip
    }

    /// A host behind the gateway MAC (how Internet hosts appear on the LAN).
    pub fn internet_host(&self, ip: Ipv4Addr) -> Host {
        Host { mac: self.gateway.mac, ip }
    }
}

fn pick(port: PortMatch, rng: &mut impl Rng, ephemeral: bool) -> u16 {
    match port {
        PortMatch::Eq(p) => p,
        PortMatch::Range(lo, hi) => rng.gen_range(lo..=hi),
        PortMatch::Any => {
            if ephemeral {
                rng.gen_range(49152..=65535)
            } else {
                rng.gen_range(1024..=48000)
            }
        }
    }
}

/// Does some ACE of the profile accept this packet (described from the
/// device's side)?
pub fn profile_accepts(
    profile: &MudProfile,
    direction: Direction,
    endpoint: &Endpoint,
    proto: u8,
    device_port: u16,
    remote_port: u16,
    icmp_type: Option<u8>,
) -> bool {
    profile.aces().any(|a| {
        a.direction == direction
            && a.protocol == proto
            && a.endpoint.covers(endpoint)
            && if matches!(proto, PROTO_TCP | PROTO_UDP) {
                a.device_port().matches(device_port) && a.remote_port().matches(remote_port)
            } else {
                a.icmp.is_none_or(|m| m.icmp_type.is_none_or(|t| Some(t) == icmp_type))
            }
    })
}

/// Generates traffic that a profile fully accepts.
pub struct ConformantGen<'a> {
    pub profile: &'a MudProfile,
    pub net: SyntheticNet,
    /// Resolve domains through the gateway before use.
    pub resolve: bool,
    /// Names to use on the wire instead of the profile's, keyed by profile name.
    pub rename: BTreeMap<String, String>,
}

impl<'a> ConformantGen<'a> {
    pub fn new(profile: &'a MudProfile, net: SyntheticNet) -> Self {
        ConformantGen {
            profile,
            net,
            resolve: true,
            rename: BTreeMap::new(),
        }
    }

    fn remote_host(&mut self, endpoint: &Endpoint, trace: &mut TraceBuilder, rng: &mut impl Rng) -> (Host, Endpoint) {
        match endpoint {
            Endpoint::Domain(d) => {
                let wire = self.rename.get(d).cloned().unwrap_or_else(|| d.clone());
                let ip = self.net.address_of(&wire);
                if self.resolve {
                    let cport = rng.gen_range(49152..=65535);
                    trace.dns_lookup(self.net.device, self.net.gateway, cport, &wire, &[ip], 3600);
                }
                (self.net.internet_host(ip), Endpoint::Domain(wire))
            }
            Endpoint::Controller(_) => (self.net.gateway, endpoint.clone()),
            Endpoint::LocalNetworks | Endpoint::SameManufacturer => (self.net.local_peer, Endpoint::LocalNetworks),
            Endpoint::Ipv4(ip) => {
                let host = if crate::model::is_local_scope(*ip) {
                    Host { mac: self.net.local_peer.mac, ip: *ip }
                } else {
                    self.net.internet_host(*ip)
                };
                (host, endpoint.clone())
            }
            Endpoint::Any => {
                let ip = self.net.fresh_public();
                (self.net.internet_host(ip), Endpoint::Ipv4(ip))
            }
        }
    }

    /// Emit traffic exercising one ACE. The reverse direction is added only
    /// when the profile accepts it.
    pub fn exercise(&mut self, ace: &MudAce, trace: &mut TraceBuilder, rng: &mut impl Rng) {
        let (remote, as_endpoint) = self.remote_host(&ace.endpoint, trace, rng);
        let dev = self.net.device;
        let accepts_reverse = |dp: u16, rp: u16, icmp: Option<u8>| {
            // Wire names differ from profile names only under renaming; the
            // reverse check is done against the profile endpoint.
            profile_accepts(self.profile, ace.direction.reverse(), &ace.endpoint, ace.protocol, dp, rp, icmp)
                || profile_accepts(self.profile, ace.direction.reverse(), &as_endpoint, ace.protocol, dp, rp, icmp)
        };
        match ace.protocol {
            PROTO_TCP => {
                // The side whose port is pinned is the server.
                let device_serves = !ace.device_port().is_any() && ace.remote_port().is_any();
                let dp = pick(ace.device_port(), rng, !device_serves);
                let rp = pick(ace.remote_port(), rng, device_serves);
                let initiator_is_device = !device_serves;
                let first_from_device = ace.direction == Direction::FromDevice;
                let reverse = accepts_reverse(dp, rp, None);
                let (a, b, ap, bp) = if first_from_device { (dev, remote, dp, rp) } else { (remote, dev, rp, dp) };
                if reverse && first_from_device == initiator_is_device {
                    trace.tcp_session(a, b, ap, bp, 200, 1200);
                } else if reverse {
                    // This ACE carries the server's half; the client half is the reverse.
                    trace.tcp_session(b, a, bp, ap, 200, 1200);
                } else if first_from_device == initiator_is_device {
                    trace.tcp(a, b, ap, bp, TcpFlags::SYN, &[]);
                } else {
                    trace.tcp(a, b, ap, bp, TcpFlags::SYN_ACK, &[]);
                }
            }
            PROTO_UDP => {
                let device_serves = !ace.device_port().is_any() && ace.remote_port().is_any();
                let dp = pick(ace.device_port(), rng, !device_serves);
                let rp = pick(ace.remote_port(), rng, device_serves);
                let (a, b, ap, bp) = match ace.direction {
                    Direction::FromDevice => (dev, remote, dp, rp),
                    Direction::ToDevice => (remote, dev, rp, dp),
                };
                // The serving side sends the larger datagrams.
                let first_serves = device_serves == (ace.direction == Direction::FromDevice);
                let (first, second) = if first_serves { (600, 48) } else { (48, 600) };
                trace.udp(a, b, ap, bp, &vec![0x55; first]);
                if accepts_reverse(dp, rp, None) {
                    trace.udp(b, a, bp, ap, &vec![0x66; second]);
                    trace.udp(b, a, bp, ap, &vec![0x66; second]);
                }
            }
            PROTO_ICMP => {
                let t = ace.icmp.and_then(|m| m.icmp_type).unwrap_or(8);
                let code = ace.icmp.and_then(|m| m.code).unwrap_or(0);
                let (a, b) = match ace.direction {
                    Direction::FromDevice => (dev, remote),
                    Direction::ToDevice => (remote, dev),
                };
                trace.icmp(a, b, t, code);
                if t == 8 && accepts_reverse(0, 0, Some(0)) {
                    trace.icmp(b, a, 0, 0);
                }
            }
            _ => {}
        }
    }

    /// Exercise every ACE once, in profile order, `gap` seconds apart.
    pub fn exercise_all(&mut self, trace: &mut TraceBuilder, gap: f64, rng: &mut impl Rng) {
        let aces: Vec<MudAce> = self.profile.aces().cloned().collect();
        for ace in &aces {
            self.exercise(ace, trace, rng);
            trace.advance(gap);
        }
    }
}

fn dns_pair(profile: &mut MudProfile) {
    profile.push(MudAce::accept("dns-q", Direction::FromDevice, Endpoint::gateway(), PROTO_UDP).with_dst(PortMatch::Eq(53)));
    profile.push(MudAce::accept("dns-r", Direction::ToDevice, Endpoint::gateway(), PROTO_UDP).with_src(PortMatch::Eq(53)));
}

/// Both directions of a client conversation with a remote service port.
pub fn client_pair(profile: &mut MudProfile, tag: &str, endpoint: Endpoint, proto: u8, port: u16) {
    profile.push(
        MudAce::accept(format!("{tag}-out"), Direction::FromDevice, endpoint.clone(), proto).with_dst(PortMatch::Eq(port)),
    );
    profile.push(MudAce::accept(format!("{tag}-in"), Direction::ToDevice, endpoint, proto).with_src(PortMatch::Eq(port)));
}

/// Both directions of a service the device offers on `port`.
pub fn server_pair(profile: &mut MudProfile, tag: &str, endpoint: Endpoint, proto: u8, port: u16) {
    profile.push(MudAce::accept(format!("{tag}-in"), Direction::ToDevice, endpoint.clone(), proto).with_dst(PortMatch::Eq(port)));
    profile.push(MudAce::accept(format!("{tag}-out"), Direction::FromDevice, endpoint, proto).with_src(PortMatch::Eq(port)));
}

/// The blood-pressure monitor: DNS through the gateway and uploads to
/// `tech.carematix.com` on TCP 8777.
pub fn blipcare_profile() -> MudProfile {
    let mut p = MudProfile::new("https://mud.example.com/blipcare-bp.json", "Blipcare BP monitor");
    dns_pair(&mut p);
    client_pair(&mut p, "carematix", Endpoint::domain("tech.carematix.com"), PROTO_TCP, 8777);
    p
}

/// A capture realizing exactly the four Blipcare flows.
pub fn blipcare_trace(net: &mut SyntheticNet) -> TraceBuilder {
    let mut t = TraceBuilder::new(1_500_000_000.0);
    let ip = net.address_of("tech.carematix.com");
    t.dns_lookup(net.device, net.gateway, 50123, "tech.carematix.com", &[ip], 300);
    t.advance(0.5);
    t.tcp_session(net.device, net.internet_host(ip), 50200, 8777, 180, 60);
    t.tcp(net.device, net.internet_host(ip), 50200, 8777, TcpFlags { fin: true, ack: true, ..Default::default() }, &[]);
    t.tcp(net.internet_host(ip), net.device, 8777, 50200, TcpFlags { fin: true, ack: true, ..Default::default() }, &[]);
    t
}

const VENDORS: [&str; 12] = [
    "acmecam", "brightbulb", "cozyplug", "dropsensor", "echohub", "frostcool", "glowstrip", "homelock", "inkjet",
    "jollytoy", "kettlepro", "lumenhue",
];

/// Deterministic catalog of `n` device profiles (n ≤ 12). Each device talks
/// to its own vendor domains; DNS through the gateway is common to all, and
/// every other device shares `pool.ntp.org`.
pub fn device_catalog(n: usize) -> Vec<MudProfile> {
    assert!(n <= VENDORS.len(), "catalog has {} devices", VENDORS.len());
    VENDORS[..n]
        .iter()
        .enumerate()
        .map(|(i, vendor)| {
            let mut p = MudProfile::new(format!("https://mud.example.com/{vendor}.json"), format!("{vendor} device"));
            dns_pair(&mut p);
            if i % 2 == 0 {
                client_pair(&mut p, "ntp", Endpoint::domain("pool.ntp.org"), PROTO_UDP, 123);
            } else {
                client_pair(&mut p, "ntp", Endpoint::domain(&format!("time.{vendor}.com")), PROTO_UDP, 123);
            }
            client_pair(&mut p, "api", Endpoint::domain(&format!("api.{vendor}.com")), PROTO_TCP, 443);
            client_pair(&mut p, "telemetry", Endpoint::domain(&format!("telemetry.{vendor}.net")), PROTO_TCP, 8883 + i as u16);
            if i % 3 == 0 {
                client_pair(&mut p, "fw", Endpoint::domain(&format!("fw.{vendor}-cdn.com")), PROTO_TCP, 80);
            }
            if i % 2 == 1 {
                server_pair(&mut p, "lan", Endpoint::LocalNetworks, PROTO_TCP, 9000 + i as u16);
            }
            if i % 4 == 0 {
                p.push(MudAce::accept("ping-in", Direction::ToDevice, Endpoint::gateway(), PROTO_ICMP).with_icmp(Some(8), None));
                p.push(MudAce::accept("ping-out", Direction::FromDevice, Endpoint::gateway(), PROTO_ICMP).with_icmp(Some(0), None));
            }
            p.renumber(&format!("{vendor}-"));
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blipcare_trace_decodes() {
        let mut net = SyntheticNet::new(1);
        let t = blipcare_trace(&mut net);
        let events = t.events();
        assert_eq!(events.len(), t.len());
        assert!(events[2].tcp_syn && !events[2].tcp_ack);
    }

    #[test]
    fn catalog_is_deterministic_and_named_uniquely() {
        let a = device_catalog(10);
        let b = device_catalog(10);
        assert_eq!(a, b);
        for p in &a {
            assert!(p.duplicate_names().is_empty());
        }
    }

    #[test]
    fn conformant_traffic_is_accepted() {
        let lib = device_catalog(10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (i, p) in lib.iter().enumerate() {
            let net = SyntheticNet::new(i as u8);
            let mut gen = ConformantGen::new(p, net.clone());
            let mut trace = TraceBuilder::new(0.0);
            gen.exercise_all(&mut trace, 1.0, &mut rng);
            let mut names = crate::flow::DnsCache::default();
            for ev in trace.events() {
                for a in crate::pcap::extract_dns_answers(&ev) {
                    names.insert(&a);
                }
                let (dir, dp, rp, rip, rmac) = if ev.src_mac == net.device.mac {
                    (Direction::FromDevice, ev.src_port, ev.dst_port, ev.dst_ip, ev.dst_mac)
                } else {
                    (Direction::ToDevice, ev.dst_port, ev.src_port, ev.src_ip, ev.src_mac)
                };
                let endpoint = if rmac == net.gateway.mac && rip == net.gateway.ip {
                    Endpoint::gateway()
                } else if crate::model::is_local_scope(rip) {
                    Endpoint::Ipv4(rip)
                } else {
                    names.lookup_at(rip, ev.timestamp).map_or(Endpoint::Ipv4(rip), Endpoint::domain)
                };
                assert!(
                    profile_accepts(p, dir, &endpoint, ev.ip_proto, dp, rp, ev.icmp_type),
                    "{} rejects {dir} {endpoint} proto {} {dp}->{rp}",
                    p.systeminfo,
                    ev.ip_proto
                );
            }
        }
    }
}
