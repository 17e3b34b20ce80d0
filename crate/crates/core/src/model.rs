//! Policy and flow vocabulary shared by every stage: directions, channels,
//! endpoints, ACEs and profiles.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ports::PortMatch;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// Default controller namespace for the local gateway.
pub const GATEWAY_URN: &str = "urn:ietf:params:mud:gateway";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub fn is_multicast(&self) -> bool {
        self.0[0] & 1 == 1
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split([':', '-']).collect();
        if parts.len() != 6 {
            return Err(format!("invalid MAC address '{s}'"));
        }
        let mut out = [0u8; 6];
        for (slot, part) in out.iter_mut().zip(parts) {
            if part.len() != 2 {
                return Err(format!("invalid MAC address '{s}'"));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| format!("invalid MAC address '{s}'"))?;
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    FromDevice,
    ToDevice,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::FromDevice, Direction::ToDevice];

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::FromDevice => "from-device",
            Direction::ToDevice => "to-device",
        }
    }

    pub fn reverse(&self) -> Direction {
        match self {
            Direction::FromDevice => Direction::ToDevice,
            Direction::ToDevice => Direction::FromDevice,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Local,
    Internet,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Local, Channel::Internet];

    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Local => "Local",
            Channel::Internet => "Internet",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Addresses with local significance: RFC 1918, link-local and loopback.
pub fn is_local_scope(ip: Ipv4Addr) -> bool {
    ip.is_private() || ip.is_link_local() || ip.is_loopback()
}

/// The remote side of an ACE or flow.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    /// No address constraint.
    Any,
    /// Lowercase FQDN without trailing dot.
    Domain(String),
    /// A controller URN, e.g. the gateway.
    Controller(String),
    LocalNetworks,
    SameManufacturer,
    Ipv4(Ipv4Addr),
}

impl Endpoint {
    pub fn domain(name: &str) -> Endpoint {
        Endpoint::Domain(normalize_domain(name))
    }

    pub fn gateway() -> Endpoint {
        Endpoint::Controller(GATEWAY_URN.to_string())
    }

    /// Channel the endpoint lives on. `Any` spans both channels and is
    /// classified Internet, which is the side it opens up.
    pub fn channel(&self) -> Channel {
        match self {
            Endpoint::Any | Endpoint::Domain(_) => Channel::Internet,
            Endpoint::Controller(_) | Endpoint::LocalNetworks | Endpoint::SameManufacturer => Channel::Local,
            Endpoint::Ipv4(ip) => {
                if is_local_scope(*ip) {
                    Channel::Local
                } else {
                    Channel::Internet
                }
            }
        }
    }

    /// Whether every host denoted by `other` is also denoted by `self`.
    pub fn covers(&self, other: &Endpoint) -> bool {
        if self == other {
            return true;
        }
        match self {
            Endpoint::Any => true,
            Endpoint::LocalNetworks => other.channel() == Channel::Local && !matches!(other, Endpoint::Any),
            _ => false,
        }
    }

    /// Human-readable label used in reports and tree renderings.
    pub fn label(&self) -> String {
        match self {
            Endpoint::Any => "*".to_string(),
            Endpoint::Domain(d) => d.clone(),
            Endpoint::Controller(urn) => urn.clone(),
            Endpoint::LocalNetworks => "local-networks".to_string(),
            Endpoint::SameManufacturer => "same-manufacturer".to_string(),
            Endpoint::Ipv4(ip) => ip.to_string(),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Inverse of [`Endpoint::label`].
impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Ok(match s {
            "" => return Err("empty endpoint".to_string()),
            "*" | "any" => Endpoint::Any,
            "local-networks" => Endpoint::LocalNetworks,
            "same-manufacturer" => Endpoint::SameManufacturer,
            _ if s.starts_with("urn:") => Endpoint::Controller(s.to_string()),
            _ => match s.parse::<Ipv4Addr>() {
                Ok(ip) => Endpoint::Ipv4(ip),
                Err(_) => Endpoint::domain(s),
            },
        })
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowercase and strip one trailing dot.
pub fn normalize_domain(name: &str) -> String {
    name.trim().trim_end_matches('.').to_ascii_lowercase()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IcmpMatch {
    pub icmp_type: Option<u8>,
    pub code: Option<u8>,
}

impl IcmpMatch {
    pub fn covers(&self, icmp_type: u8, code: u8) -> bool {
        self.icmp_type.is_none_or(|t| t == icmp_type) && self.code.is_none_or(|c| c == code)
    }

    pub fn covers_match(&self, other: &IcmpMatch) -> bool {
        let field = |mine: Option<u8>, theirs: Option<u8>| match (mine, theirs) {
            (None, _) => true,
            (Some(a), Some(b)) => a == b,
            (Some(_), None) => false,
        };
        field(self.icmp_type, other.icmp_type) && field(self.code, other.code)
    }
}

impl fmt::Display for IcmpMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<u8>| v.map_or("*".to_string(), |x| x.to_string());
        write!(f, "type {} code {}", show(self.icmp_type), show(self.code))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Accept,
    Drop,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Accept => "accept",
            Action::Drop => "drop",
        }
    }
}

/// One access-control entry.
///
/// Port fields keep the wire orientation (`src_port` is the packet source in
/// the ACE's direction); [`MudAce::device_port`] and [`MudAce::remote_port`]
/// give the orientation-free view.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MudAce {
    pub name: String,
    pub direction: Direction,
    pub endpoint: Endpoint,
    pub protocol: u8,
    pub src_port: PortMatch,
    pub dst_port: PortMatch,
    pub icmp: Option<IcmpMatch>,
    pub action: Action,
}

impl MudAce {
    /// Accept ACE with wildcard ports, to be refined with the builder methods.
    pub fn accept(name: impl Into<String>, direction: Direction, endpoint: Endpoint, protocol: u8) -> MudAce {
        MudAce {
            name: name.into(),
            direction,
            endpoint,
            protocol,
            src_port: PortMatch::Any,
            dst_port: PortMatch::Any,
            icmp: None,
            action: Action::Accept,
        }
    }

    pub fn with_src(mut self, port: PortMatch) -> Self {
        self.src_port = port;
        self
    }

    pub fn with_dst(mut self, port: PortMatch) -> Self {
        self.dst_port = port;
        self
    }

    /// A fully wildcarded ICMP match is stored as `None`.
    pub fn with_icmp(mut self, icmp_type: Option<u8>, code: Option<u8>) -> Self {
        self.icmp = (icmp_type.is_some() || code.is_some()).then_some(IcmpMatch { icmp_type, code });
        self
    }

    pub fn with_ports(mut self, device: PortMatch, remote: PortMatch) -> Self {
        match self.direction {
            Direction::FromDevice => {
                self.src_port = device;
                self.dst_port = remote;
            }
            Direction::ToDevice => {
                self.src_port = remote;
                self.dst_port = device;
            }
        }
        self
    }

    pub fn device_port(&self) -> PortMatch {
        match self.direction {
            Direction::FromDevice => self.src_port,
            Direction::ToDevice => self.dst_port,
        }
    }

    pub fn remote_port(&self) -> PortMatch {
        match self.direction {
            Direction::FromDevice => self.dst_port,
            Direction::ToDevice => self.src_port,
        }
    }

    pub fn has_ports(&self) -> bool {
        matches!(self.protocol, PROTO_TCP | PROTO_UDP)
    }

    pub fn channel(&self) -> Channel {
        self.endpoint.channel()
    }

    /// Same match fields, ignoring the name.
    pub fn same_match(&self, other: &MudAce) -> bool {
        self.direction == other.direction
            && self.endpoint == other.endpoint
            && self.protocol == other.protocol
            && self.src_port == other.src_port
            && self.dst_port == other.dst_port
            && self.icmp == other.icmp
            && self.action == other.action
    }
}

/// A device policy. ACE order carries no meaning.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MudProfile {
    pub mud_url: String,
    pub last_update: String,
    pub systeminfo: String,
    pub from_device: Vec<MudAce>,
    pub to_device: Vec<MudAce>,
}

impl MudProfile {
    pub fn new(mud_url: impl Into<String>, systeminfo: impl Into<String>) -> MudProfile {
        MudProfile {
            mud_url: mud_url.into(),
            last_update: "1970-01-01T00:00:00+00:00".to_string(),
            systeminfo: systeminfo.into(),
            from_device: Vec::new(),
            to_device: Vec::new(),
        }
    }

    /// Append an ACE to the list matching its direction.
    pub fn push(&mut self, ace: MudAce) {
        match ace.direction {
            Direction::FromDevice => self.from_device.push(ace),
            Direction::ToDevice => self.to_device.push(ace),
        }
    }

    pub fn aces(&self) -> impl Iterator<Item = &MudAce> + '_ {
        self.from_device.iter().chain(self.to_device.iter())
    }

    pub fn ace_count(&self) -> usize {
        self.from_device.len() + self.to_device.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ace_count() == 0
    }

    pub fn has_drop(&self) -> bool {
        self.aces().any(|a| a.action == Action::Drop)
    }

    /// Names that occur more than once.
    pub fn duplicate_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for ace in self.aces() {
            if !seen.insert(ace.name.as_str()) {
                dups.insert(ace.name.clone());
            }
        }
        dups.into_iter().collect()
    }

    /// Rename every ACE to `{prefix}{direction}-{index}` so names are unique.
    pub fn renumber(&mut self, prefix: &str) {
        for (i, ace) in self.from_device.iter_mut().enumerate() {
            ace.name = format!("{prefix}from-{i}");
        }
        for (i, ace) in self.to_device.iter_mut().enumerate() {
            ace.name = format!("{prefix}to-{i}");
        }
    }

    /// Copy of the profile without the ACEs whose names are listed.
    pub fn without(&self, names: &BTreeSet<String>) -> MudProfile {
        let keep = |list: &Vec<MudAce>| list.iter().filter(|a| !names.contains(&a.name)).cloned().collect();
        MudProfile {
            from_device: keep(&self.from_device),
            to_device: keep(&self.to_device),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ScopeFinding {
    pub ace: String,
    pub address: Ipv4Addr,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ScopeReport {
    /// Literals with local significance; the profile is rejected.
    pub violations: Vec<ScopeFinding>,
    /// Public literals; accepted but discouraged.
    pub warnings: Vec<ScopeFinding>,
}

impl ScopeReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flag address literals. Output is sorted, so ACE order does not matter.
pub fn validate_address_scope(profile: &MudProfile) -> ScopeReport {
    let mut report = ScopeReport::default();
    for ace in profile.aces() {
        let Endpoint::Ipv4(ip) = ace.endpoint else { continue };
        let reason = if ip.is_private() {
            Some("private (RFC 1918) address")
        } else if ip.is_link_local() {
            Some("link-local address")
        } else if ip.is_loopback() {
            Some("loopback address")
        } else {
            None
        };
        match reason {
            Some(r) => report.violations.push(ScopeFinding {
                ace: ace.name.clone(),
                address: ip,
                reason: r.to_string(),
            }),
            None => report.warnings.push(ScopeFinding {
                ace: ace.name.clone(),
                address: ip,
                reason: "explicit public address; prefer a domain name".to_string(),
            }),
        }
    }
    report.violations.sort();
    report.warnings.sort();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_round_trips() {
        let m: MacAddr = "AA:bb:0c:00:01:ff".parse().unwrap();
        assert_eq!(m.to_string(), "aa:bb:0c:00:01:ff");
        assert!("aa:bb".parse::<MacAddr>().is_err());
        assert!("zz:bb:0c:00:01:ff".parse::<MacAddr>().is_err());
    }

    #[test]
    fn endpoint_channels() {
        assert_eq!(Endpoint::gateway().channel(), Channel::Local);
        assert_eq!(Endpoint::domain("Tech.Carematix.com.").channel(), Channel::Internet);
        assert_eq!(Endpoint::Ipv4(Ipv4Addr::new(192, 168, 1, 1)).channel(), Channel::Local);
        assert_eq!(Endpoint::Ipv4(Ipv4Addr::new(8, 8, 8, 8)).channel(), Channel::Internet);
        assert_eq!(Endpoint::domain("Tech.Carematix.com."), Endpoint::Domain("tech.carematix.com".into()));
    }

    #[test]
    fn local_networks_covers_controller() {
        assert!(Endpoint::LocalNetworks.covers(&Endpoint::gateway()));
        assert!(Endpoint::LocalNetworks.covers(&Endpoint::Ipv4(Ipv4Addr::new(10, 0, 0, 3))));
        assert!(!Endpoint::LocalNetworks.covers(&Endpoint::domain("a.com")));
        assert!(!Endpoint::LocalNetworks.covers(&Endpoint::Any));
        assert!(Endpoint::Any.covers(&Endpoint::LocalNetworks));
    }

    #[test]
    fn scope_validation() {
        let mut p = MudProfile::new("https://example.com/x.json", "x");
        p.push(MudAce::accept("a", Direction::FromDevice, Endpoint::Ipv4(Ipv4Addr::new(192, 168, 1, 1)), 17));
        p.push(MudAce::accept("b", Direction::FromDevice, Endpoint::gateway(), 17));
        p.push(MudAce::accept("c", Direction::ToDevice, Endpoint::Ipv4(Ipv4Addr::new(8, 8, 8, 8)), 17));
        let r = validate_address_scope(&p);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].ace, "a");
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.warnings[0].ace, "c");
    }
}
