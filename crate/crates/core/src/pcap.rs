//! Packet-capture decoding into [`PacketEvent`]s, plus the DNS and SSDP
//! payload parsers that feed the flow tracker.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use etherparse::{NetSlice, SlicedPacket, TransportSlice};
use pcap_file::pcap::PcapReader;
use pcap_file::DataLink;
use serde::Serialize;

use crate::model::{normalize_domain, MacAddr, PROTO_ICMP, PROTO_TCP, PROTO_UDP};

pub const DNS_PORT: u16 = 53;
pub const SSDP_PORT: u16 = 1900;
pub const STUN_MAGIC_COOKIE: u32 = 0x2112_A442;

/// One decoded IPv4 packet carrying TCP, UDP or ICMP.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketEvent {
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub ip_proto: u8,
    /// Zero for ICMP.
    pub src_port: u16,
    pub dst_port: u16,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
    pub tcp_syn: bool,
    pub tcp_ack: bool,
    /// Original frame length.
    pub length: u32,
    /// UDP payload carried the STUN magic cookie.
    pub stun: bool,
    /// Kept only for DNS and SSDP-looking traffic; empty otherwise.
    pub payload: Vec<u8>,
}

impl PacketEvent {
    pub fn involves_port(&self, port: u16) -> bool {
        self.src_port == port || self.dst_port == port
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DecodeStats {
    pub frames: u64,
    pub events: u64,
    pub non_ip: u64,
    pub ipv6: u64,
    pub other_protocol: u64,
    pub fragments: u64,
    pub malformed: u64,
}

impl DecodeStats {
    pub fn skipped(&self) -> u64 {
        self.non_ip + self.ipv6 + self.other_protocol + self.fragments + self.malformed
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a classic pcap file: {0}")]
    Format(String),
    #[error("unsupported link type {0} (only Ethernet is supported)")]
    LinkType(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    NonIp,
    Ipv6,
    OtherProtocol,
    Fragment,
    Malformed,
}

/// Streaming decoder over a pcap source. Undecodable frames are counted in
/// [`TraceReader::stats`] and skipped.
pub struct TraceReader<R: Read> {
    reader: PcapReader<R>,
    stats: DecodeStats,
    done: bool,
}

/// Open a classic pcap file with Ethernet framing.
pub fn open_trace(path: impl AsRef<Path>) -> Result<TraceReader<BufReader<File>>, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    TraceReader::new(BufReader::new(file))
}

impl<R: Read> TraceReader<R> {
    pub fn new(source: R) -> Result<Self, TraceError> {
        let reader = PcapReader::new(source).map_err(|e| TraceError::Format(e.to_string()))?;
        let link = reader.header().datalink;
        if link != DataLink::ETHERNET {
            return Err(TraceError::LinkType(format!("{link:?}")));
        }
        Ok(TraceReader {
            reader,
            stats: DecodeStats::default(),
            done: false,
        })
    }

    pub fn stats(&self) -> DecodeStats {
        self.stats
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = PacketEvent;

    fn next(&mut self) -> Option<PacketEvent> {
        while !self.done {
            let packet = match self.reader.next_packet() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => {
                    // A broken record header means the rest of the file cannot be framed.
                    log::warn!("stopping at unreadable pcap record: {e}");
                    self.stats.frames += 1;
                    self.stats.malformed += 1;
                    self.done = true;
                    break;
                }
                Some(Ok(p)) => p,
            };
            self.stats.frames += 1;
            match decode_frame(packet.timestamp.as_secs_f64(), packet.orig_len, &packet.data) {
                Ok(ev) => {
                    self.stats.events += 1;
                    return Some(ev);
                }
                Err(reason) => match reason {
                    SkipReason::NonIp => self.stats.non_ip += 1,
                    SkipReason::Ipv6 => self.stats.ipv6 += 1,
                    SkipReason::OtherProtocol => self.stats.other_protocol += 1,
                    SkipReason::Fragment => self.stats.fragments += 1,
                    SkipReason::Malformed => self.stats.malformed += 1,
                },
            }
        }
        None
    }
}

fn keep_payload(proto: u8, src_port: u16, dst_port: u16, payload: &[u8]) -> bool {
    let ports = [src_port, dst_port];
    if ports.contains(&DNS_PORT) {
        return true;
    }
    proto == PROTO_UDP && (ports.contains(&SSDP_PORT) || looks_like_ssdp(payload))
}

fn looks_like_ssdp(payload: &[u8]) -> bool {
    payload.starts_with(b"HTTP/1.") || payload.starts_with(b"NOTIFY ") || payload.starts_with(b"M-SEARCH ")
}

pub fn is_stun(payload: &[u8]) -> bool {
    payload.len() >= 20
        && payload[0] & 0xC0 == 0
        && u32::from_be_bytes([payload[4], payload[5], payload[6], payload[7]]) == STUN_MAGIC_COOKIE
}

/// Decode one Ethernet frame.
pub fn decode_frame(timestamp: f64, orig_len: u32, data: &[u8]) -> Result<PacketEvent, SkipReason> {
    let sliced = SlicedPacket::from_ethernet(data).map_err(|_| SkipReason::Malformed)?;
    let (src_mac, dst_mac) = match &sliced.link {
        Some(etherparse::LinkSlice::Ethernet2(eth)) => (MacAddr(eth.source()), MacAddr(eth.destination())),
        _ => return Err(SkipReason::Malformed),
    };
    let ip = match &sliced.net {
        Some(NetSlice::Ipv4(ip)) => ip,
        Some(NetSlice::Ipv6(_)) => return Err(SkipReason::Ipv6),
        _ => return Err(SkipReason::NonIp),
    };
    let header = ip.header();
    let proto = header.protocol().0;
    if !matches!(proto, PROTO_ICMP | PROTO_TCP | PROTO_UDP) {
        return Err(SkipReason::OtherProtocol);
    }
    if header.is_fragmenting_payload() {
        return Err(SkipReason::Fragment);
    }
    let mut ev = PacketEvent {
        timestamp,
        src_mac,
        dst_mac,
        src_ip: header.source_addr(),
        dst_ip: header.destination_addr(),
        ip_proto: proto,
        src_port: 0,
        dst_port: 0,
        icmp_type: None,
        icmp_code: None,
        tcp_syn: false,
        tcp_ack: false,
        length: orig_len.max(data.len() as u32),
        stun: false,
        payload: Vec::new(),
    };
    match &sliced.transport {
        Some(TransportSlice::Tcp(tcp)) => {
            ev.src_port = tcp.source_port();
            ev.dst_port = tcp.destination_port();
            ev.tcp_syn = tcp.syn();
            ev.tcp_ack = tcp.ack();
            if keep_payload(proto, ev.src_port, ev.dst_port, tcp.payload()) {
                ev.payload = tcp.payload().to_vec();
            }
        }
        Some(TransportSlice::Udp(udp)) => {
            ev.src_port = udp.source_port();
            ev.dst_port = udp.destination_port();
            ev.stun = is_stun(udp.payload());
            if keep_payload(proto, ev.src_port, ev.dst_port, udp.payload()) {
                ev.payload = udp.payload().to_vec();
            }
        }
        Some(TransportSlice::Icmpv4(icmp)) => {
            ev.icmp_type = Some(icmp.type_u8());
            ev.icmp_code = Some(icmp.code_u8());
        }
        _ => return Err(SkipReason::Malformed),
    }
    Ok(ev)
}

/// One A record, keyed by the name the device originally asked for.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DnsAnswer {
    pub query_name: String,
    pub answer_ip: Ipv4Addr,
    pub ttl: u32,
    pub observed_at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DnsError {
    #[error("DNS message truncated")]
    Truncated,
    #[error("DNS name compression loop or oversized name")]
    BadName,
    #[error("DNS-over-TCP message split across segments")]
    Fragmented,
    #[error("not a DNS packet")]
    NotDns,
}

struct DnsCursor<'a> {
    msg: &'a [u8],
    pos: usize,
}

impl<'a> DnsCursor<'a> {
    fn u8(&mut self) -> Result<u8, DnsError> {
        let v = *self.msg.get(self.pos).ok_or(DnsError::Truncated)?;
        self.pos += 1;
        Ok(v)
    }

    fn u16(&mut self) -> Result<u16, DnsError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32, DnsError> {
        Ok(u32::from_be_bytes([self.u8()?, self.u8()?, self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], DnsError> {
        let end = self.pos.checked_add(n).ok_or(DnsError::Truncated)?;
        let out = self.msg.get(self.pos..end).ok_or(DnsError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn name(&mut self) -> Result<String, DnsError> {
        let (name, next) = read_name(self.msg, self.pos)?;
        self.pos = next;
        Ok(name)
    }
}

/// Decode a possibly compressed name at `start`; returns the name and the
/// offset just past it in the original stream.
fn read_name(msg: &[u8], start: usize) -> Result<(String, usize), DnsError> {
    let mut labels: Vec<String> = Vec::new();
    let mut pos = start;
    let mut resume = None;
    let mut jumps = 0;
    let mut total = 0usize;
    loop {
        let len = *msg.get(pos).ok_or(DnsError::Truncated)? as usize;
        if len & 0xC0 == 0xC0 {
            let lo = *msg.get(pos + 1).ok_or(DnsError::Truncated)? as usize;
            if resume.is_none() {
                resume = Some(pos + 2);
            }
            jumps += 1;
            if jumps > 64 {
                return Err(DnsError::BadName);
            }
            pos = ((len & 0x3F) << 8) | lo;
            continue;
        }
        if len & 0xC0 != 0 {
            return Err(DnsError::BadName);
        }
        if len == 0 {
            pos += 1;
            break;
        }
        let label = msg.get(pos + 1..pos + 1 + len).ok_or(DnsError::Truncated)?;
        total += len + 1;
        if total > 255 {
            return Err(DnsError::BadName);
        }
        labels.push(String::from_utf8_lossy(label).to_ascii_lowercase());
        pos += 1 + len;
    }
    Ok((labels.join("."), resume.unwrap_or(pos)))
}

/// Parse a DNS response and return its A records, each attributed to the
/// question name (CNAME chains are followed back to it).
pub fn parse_dns_answers(message: &[u8], observed_at: f64) -> Result<Vec<DnsAnswer>, DnsError> {
    let mut cur = DnsCursor { msg: message, pos: 0 };
    let _id = cur.u16()?;
    let flags = cur.u16()?;
    let qdcount = cur.u16()?;
    let ancount = cur.u16()?;
    let _nscount = cur.u16()?;
    let _arcount = cur.u16()?;
    let is_response = flags & 0x8000 != 0;
    let rcode = flags & 0x000F;
    if !is_response || rcode != 0 {
        return Ok(Vec::new());
    }
    let mut questions = Vec::new();
    for _ in 0..qdcount {
        questions.push(cur.name()?);
        let _qtype = cur.u16()?;
        let _qclass = cur.u16()?;
    }
    // alias target -> owner
    let mut alias_of: BTreeMap<String, String> = BTreeMap::new();
    let mut records: Vec<(String, Ipv4Addr, u32)> = Vec::new();
    for _ in 0..ancount {
        let owner = cur.name()?;
        let rtype = cur.u16()?;
        let class = cur.u16()?;
        let ttl = cur.u32()?;
        let rdlen = cur.u16()? as usize;
        let rdata_start = cur.pos;
        let rdata = cur.bytes(rdlen)?;
        match (rtype, class) {
            (1, 1) if rdlen == 4 => {
                records.push((owner, Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3]), ttl));
            }
            (5, 1) => {
                let (target, _) = read_name(message, rdata_start)?;
                alias_of.insert(target, owner);
            }
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for (owner, ip, ttl) in records {
        let mut name = owner;
        let mut hops = 0;
        while let Some(prev) = alias_of.get(&name) {
            if questions.contains(&name) || hops > 16 {
                break;
            }
            name = prev.clone();
            hops += 1;
        }
        if name.is_empty() {
            continue;
        }
        out.push(DnsAnswer {
            query_name: normalize_domain(&name),
            answer_ip: ip,
            ttl,
            observed_at,
        });
    }
    Ok(out)
}

/// Fallible form of [`extract_dns_answers`].
pub fn try_extract_dns_answers(event: &PacketEvent) -> Result<Vec<DnsAnswer>, DnsError> {
    if !event.involves_port(DNS_PORT) {
        return Err(DnsError::NotDns);
    }
    match event.ip_proto {
        PROTO_UDP => parse_dns_answers(&event.payload, event.timestamp),
        PROTO_TCP => {
            if event.payload.is_empty() {
                return Ok(Vec::new());
            }
            if event.payload.len() < 2 {
                return Err(DnsError::Fragmented);
            }
            let len = u16::from_be_bytes([event.payload[0], event.payload[1]]) as usize;
            if len + 2 != event.payload.len() {
                return Err(DnsError::Fragmented);
            }
            parse_dns_answers(&event.payload[2..], event.timestamp)
        }
        _ => Err(DnsError::NotDns),
    }
}

/// A records carried by a DNS response; empty for queries, errors and
/// undecodable payloads.
pub fn extract_dns_answers(event: &PacketEvent) -> Vec<DnsAnswer> {
    try_extract_dns_answers(event).unwrap_or_else(|e| {
        log::debug!("ignoring DNS payload at {}: {e}", event.timestamp);
        Vec::new()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SsdpMethod {
    #[serde(rename = "NOTIFY")]
    Notify,
    #[serde(rename = "M-SEARCH")]
    MSearch,
    #[serde(rename = "RESPONSE")]
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SsdpEvent {
    pub device_mac: MacAddr,
    pub advertised_port: Option<u16>,
    pub method: SsdpMethod,
}

/// Parse an SSDP message. Returns `None` for anything that is not UDP or
/// does not carry an SSDP start line.
pub fn extract_ssdp(event: &PacketEvent) -> Option<SsdpEvent> {
    if event.ip_proto != PROTO_UDP {
        return None;
    }
    let text = std::str::from_utf8(&event.payload).ok()?;
    let mut lines = text.split("\r\n").flat_map(|l| l.split('\n'));
    let start = lines.next()?.trim();
    let method = if start.starts_with("NOTIFY ") {
        SsdpMethod::Notify
    } else if start.starts_with("M-SEARCH ") {
        SsdpMethod::MSearch
    } else if start.starts_with("HTTP/1.") {
        SsdpMethod::Response
    } else {
        return None;
    };
    let mut advertised_port = None;
    if method != SsdpMethod::MSearch {
        for line in lines {
            let Some((key, value)) = line.split_once(':') else { continue };
            if key.trim().eq_ignore_ascii_case("location") {
                advertised_port = url::Url::parse(value.trim()).ok().and_then(|u| u.port_or_known_default());
            }
        }
    }
    Some(SsdpEvent {
        device_mac: event.src_mac,
        advertised_port,
        method,
    })
}

/// Ports each device has advertised through SSDP; traffic from those ports
/// counts as discovery chatter.
#[derive(Clone, Debug, Default)]
pub struct SsdpPorts {
    learned: BTreeMap<MacAddr, BTreeSet<u16>>,
}

impl SsdpPorts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inspect an event; SSDP messages update the learned port set.
    pub fn observe(&mut self, event: &PacketEvent) -> Option<SsdpEvent> {
        if event.ip_proto != PROTO_UDP {
            return None;
        }
        let from_learned = self.is_learned(event.src_mac, event.src_port);
        if !event.involves_port(SSDP_PORT) && !from_learned {
            return None;
        }
        let ssdp = extract_ssdp(event)?;
        if let Some(port) = ssdp.advertised_port {
            self.learned.entry(ssdp.device_mac).or_default().insert(port);
        }
        Some(ssdp)
    }

    pub fn learn(&mut self, mac: MacAddr, port: u16) {
        self.learned.entry(mac).or_default().insert(port);
    }

    pub fn is_learned(&self, mac: MacAddr, port: u16) -> bool {
        self.learned.get(&mac).is_some_and(|s| s.contains(&port))
    }

    /// Some host advertised `port`.
    pub fn learned_anywhere(&self, port: u16) -> bool {
        self.learned.values().any(|s| s.contains(&port))
    }

    pub fn ports_of(&self, mac: MacAddr) -> BTreeSet<u16> {
        self.learned.get(&mac).cloned().unwrap_or_default()
    }
}
