//! MUD JSON reading and writing.
//!
//! Parsing runs in two passes. The first walks the document against
//! [`SCHEMA`], a declarative allowlist of the YANG vocabulary we accept
//! (`ietf-mud`, `ietf-access-control-list`, the `ietf-acldns` name
//! augmentations and the MUD match augmentations). Any element outside the
//! table is an error, never a silent drop. The second pass extracts the
//! profile and checks the cross-field rules the table cannot express. Every
//! problem is collected with its JSON path.
//!
//! The writer emits keys in a fixed order: the `ietf-mud:mud` container
//! first (`mud-version`, `mud-url`, `last-update`, `cache-validity`,
//! `is-supported`, `systeminfo`, `from-device-policy`, `to-device-policy`),
//! then `ietf-access-control-list:acls` with one ACL per direction. Within an
//! ACE: `name`, `matches` (`ipv4`, `tcp`, `udp`, `icmp`, `ietf-mud:mud`),
//! `actions`. Output is 2-space indented with a trailing newline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::Serialize;
use serde_json::Value;

use crate::model::{
    Action, Direction, Endpoint, IcmpMatch, MudAce, MudProfile, PROTO_ICMP, PROTO_TCP, PROTO_UDP,
};
use crate::ports::PortMatch;

/// Expected JSON shape of an element.
#[derive(Debug)]
pub enum Shape {
    Object(&'static [Field]),
    Array(&'static Shape),
    Str,
    Int { min: i64, max: i64 },
    Bool,
    /// `[null]`, the JSON encoding of a YANG `empty` leaf.
    Empty,
}

#[derive(Debug)]
pub struct Field {
    pub key: &'static str,
    pub shape: &'static Shape,
    /// `Some(message)` when the element is mandatory.
    pub required: Option<&'static str>,
}

const fn opt(key: &'static str, shape: &'static Shape) -> Field {
    Field { key, shape, required: None }
}

const fn req(key: &'static str, shape: &'static Shape, message: &'static str) -> Field {
    Field { key, shape, required: Some(message) }
}

static STR: Shape = Shape::Str;
static BOOL: Shape = Shape::Bool;
static EMPTY: Shape = Shape::Empty;
static PORT_NUM: Shape = Shape::Int { min: 0, max: 65535 };
static OCTET: Shape = Shape::Int { min: 0, max: 255 };
static MUD_VERSION: Shape = Shape::Int { min: 1, max: 1 };
static CACHE_VALIDITY: Shape = Shape::Int { min: 1, max: 168 };

static ACL_REF: Shape = Shape::Object(&[req("name", &STR, "missing ACL name")]);
static ACL_REF_LIST: Shape = Shape::Array(&ACL_REF);
static ACCESS_LISTS: Shape = Shape::Object(&[req("access-list", &ACL_REF_LIST, "missing access-list")]);
static POLICY: Shape = Shape::Object(&[req("access-lists", &ACCESS_LISTS, "missing access-lists")]);

static MUD_CONTAINER: Shape = Shape::Object(&[
    opt("mud-version", &MUD_VERSION),
    req("mud-url", &STR, "missing mud-url"),
    req("last-update", &STR, "missing last-update"),
    opt("cache-validity", &CACHE_VALIDITY),
    opt("is-supported", &BOOL),
    opt("systeminfo", &STR),
    opt("mfg-name", &STR),
    opt("model-name", &STR),
    opt("documentation", &STR),
    opt("from-device-policy", &POLICY),
    opt("to-device-policy", &POLICY),
]);

static PORT: Shape = Shape::Object(&[
    opt("operator", &STR),
    opt("port", &PORT_NUM),
    opt("lower-port", &PORT_NUM),
    opt("upper-port", &PORT_NUM),
]);
static L4_PORTS: Shape = Shape::Object(&[opt("source-port", &PORT), opt("destination-port", &PORT)]);
static ICMP: Shape = Shape::Object(&[opt("type", &OCTET), opt("code", &OCTET)]);
static IPV4: Shape = Shape::Object(&[
    opt("protocol", &OCTET),
    opt("ietf-acldns:dst-dnsname", &STR),
    opt("ietf-acldns:src-dnsname", &STR),
    opt("destination-ipv4-network", &STR),
    opt("source-ipv4-network", &STR),
]);
static MUD_MATCH: Shape = Shape::Object(&[
    opt("controller", &STR),
    opt("local-networks", &EMPTY),
    opt("same-manufacturer", &EMPTY),
]);
static MATCHES: Shape = Shape::Object(&[
    opt("ipv4", &IPV4),
    opt("tcp", &L4_PORTS),
    opt("udp", &L4_PORTS),
    opt("icmp", &ICMP),
    opt("ietf-mud:mud", &MUD_MATCH),
]);
static ACTIONS: Shape = Shape::Object(&[req("forwarding", &STR, "missing forwarding action")]);
static ACE: Shape = Shape::Object(&[
    req("name", &STR, "missing ACE name"),
    req("matches", &MATCHES, "missing matches"),
    req("actions", &ACTIONS, "missing actions"),
]);
static ACE_LIST: Shape = Shape::Array(&ACE);
static ACES: Shape = Shape::Object(&[req("ace", &ACE_LIST, "missing ace list")]);
static ACL: Shape = Shape::Object(&[
    req("name", &STR, "missing ACL name"),
    opt("type", &STR),
    req("aces", &ACES, "missing aces"),
]);
static ACL_LIST: Shape = Shape::Array(&ACL);
static ACLS: Shape = Shape::Object(&[req("acl", &ACL_LIST, "missing acl list")]);

/// The accepted document vocabulary.
pub static SCHEMA: Shape = Shape::Object(&[
    req("ietf-mud:mud", &MUD_CONTAINER, "missing mud container"),
    req("ietf-access-control-list:acls", &ACLS, "missing access-lists container"),
]);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SyntaxError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

struct Collector(Vec<SyntaxError>);

impl Collector {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.0.push(SyntaxError {
            path: path.to_string(),
            message: message.into(),
        });
    }
}

fn check_shape(value: &Value, shape: &Shape, path: &str, errs: &mut Collector) {
    match shape {
        Shape::Object(fields) => {
            let Some(map) = value.as_object() else {
                errs.push(path, "expected an object");
                return;
            };
            for (key, child) in map {
                match fields.iter().find(|f| f.key == key) {
                    Some(f) => check_shape(child, f.shape, &format!("{path}.{key}"), errs),
                    None => errs.push(&format!("{path}.{key}"), format!("unsupported element '{key}'")),
                }
            }
            for f in fields.iter() {
                if let Some(msg) = f.required {
                    if !map.contains_key(f.key) {
                        errs.push(path, msg);
                    }
                }
            }
        }
        Shape::Array(inner) => {
            let Some(items) = value.as_array() else {
                errs.push(path, "expected an array");
                return;
            };
            for (i, item) in items.iter().enumerate() {
                check_shape(item, inner, &format!("{path}[{i}]"), errs);
            }
        }
        Shape::Str => {
            if !value.is_string() {
                errs.push(path, "expected a string");
            }
        }
        Shape::Bool => {
            if !value.is_boolean() {
                errs.push(path, "expected a boolean");
            }
        }
        Shape::Int { min, max } => match value.as_i64() {
            Some(v) if v >= *min && v <= *max => {}
            Some(v) => errs.push(path, format!("value {v} outside [{min}, {max}]")),
            None => errs.push(path, "expected an integer"),
        },
        Shape::Empty => {
            let ok = value.as_array().is_some_and(|a| a.len() == 1 && a[0].is_null());
            if !ok {
                errs.push(path, "expected [null]");
            }
        }
    }
}

fn get<'a>(value: &'a Value, key: &str) -> Option<&'a Value> {
    value.as_object().and_then(|m| m.get(key))
}

fn get_str<'a>(value: &'a Value, key: &str) -> Option<&'a str> {
    get(value, key).and_then(Value::as_str)
}

fn get_u8(value: &Value, key: &str) -> Option<u8> {
    get(value, key).and_then(Value::as_u64).and_then(|v| u8::try_from(v).ok())
}

fn get_u16(value: &Value, key: &str) -> Option<u16> {
    get(value, key).and_then(Value::as_u64).and_then(|v| u16::try_from(v).ok())
}

fn parse_port(value: &Value, path: &str, errs: &mut Collector) -> PortMatch {
    let operator = get_str(value, "operator");
    let port = get_u16(value, "port");
    let lower = get_u16(value, "lower-port");
    let upper = get_u16(value, "upper-port");
    match (operator, port, lower, upper) {
        (Some(op), Some(p), None, None) => match op {
            "eq" => PortMatch::Eq(p),
            "lte" => PortMatch::range(0, p),
            "gte" => PortMatch::range(p, u16::MAX),
            other => {
                errs.push(&format!("{path}.operator"), format!("unsupported port operator '{other}'"));
                PortMatch::Any
            }
        },
        (None, None, Some(lo), Some(hi)) => {
            if lo > hi {
                errs.push(path, format!("lower-port {lo} exceeds upper-port {hi}"));
                PortMatch::Any
            } else {
                PortMatch::range(lo, hi)
            }
        }
        _ => {
            errs.push(path, "port match needs operator+port or lower-port+upper-port");
            PortMatch::Any
        }
    }
}

fn parse_network(text: &str, path: &str, errs: &mut Collector) -> Option<Ipv4Addr> {
    let net: Ipv4Net = match text.parse::<Ipv4Net>() {
        Ok(n) => n,
        Err(_) => match text.parse::<Ipv4Addr>() {
            Ok(ip) => Ipv4Net::from(ip),
            Err(_) => {
                errs.push(path, format!("invalid IPv4 network '{text}'"));
                return None;
            }
        },
    };
    if net.prefix_len() != 32 {
        errs.push(path, format!("only host (/32) networks are supported, got '{text}'"));
        return None;
    }
    Some(net.addr())
}

fn parse_ace(value: &Value, direction: Direction, path: &str, errs: &mut Collector) -> Option<MudAce> {
    let name = get_str(value, "name")?.to_string();
    let matches = get(value, "matches")?;
    let mpath = format!("{path}.matches");

    let action = match get(value, "actions").and_then(|a| get_str(a, "forwarding")) {
        Some("accept") => Action::Accept,
        Some("drop") => Action::Drop,
        Some(other) => {
            errs.push(&format!("{path}.actions.forwarding"), format!("unsupported action '{other}'"));
            return None;
        }
        None => return None,
    };

    let ipv4 = get(matches, "ipv4");
    let protocol = match ipv4.and_then(|v| get_u8(v, "protocol")) {
        Some(p) => p,
        None => {
            errs.push(&mpath, "missing ipv4 protocol");
            return None;
        }
    };

    let mut endpoints: Vec<Endpoint> = Vec::new();
    if let Some(ip) = ipv4 {
        let (name_key, net_key, wrong_name, wrong_net) = match direction {
            Direction::FromDevice => (
                "ietf-acldns:dst-dnsname",
                "destination-ipv4-network",
                "ietf-acldns:src-dnsname",
                "source-ipv4-network",
            ),
            Direction::ToDevice => (
                "ietf-acldns:src-dnsname",
                "source-ipv4-network",
                "ietf-acldns:dst-dnsname",
                "destination-ipv4-network",
            ),
        };
        for key in [wrong_name, wrong_net] {
            if get(ip, key).is_some() {
                errs.push(
                    &format!("{mpath}.ipv4.{key}"),
                    format!("'{key}' does not name the remote side of a {direction} ACE"),
                );
            }
        }
        if let Some(d) = get_str(ip, name_key) {
            if d.trim().is_empty() {
                errs.push(&format!("{mpath}.ipv4.{name_key}"), "empty domain name");
            } else {
                endpoints.push(Endpoint::domain(d));
            }
        }
        if let Some(n) = get_str(ip, net_key) {
            if let Some(addr) = parse_network(n, &format!("{mpath}.ipv4.{net_key}"), errs) {
                endpoints.push(Endpoint::Ipv4(addr));
            }
        }
    }
    if let Some(mm) = get(matches, "ietf-mud:mud") {
        if let Some(urn) = get_str(mm, "controller") {
            endpoints.push(Endpoint::Controller(urn.to_string()));
        }
        if get(mm, "local-networks").is_some() {
            endpoints.push(Endpoint::LocalNetworks);
        }
        if get(mm, "same-manufacturer").is_some() {
            endpoints.push(Endpoint::SameManufacturer);
        }
    }
    if endpoints.len() > 1 {
        errs.push(&mpath, "more than one remote endpoint in a single ACE");
        return None;
    }
    let endpoint = endpoints.pop().unwrap_or(Endpoint::Any);

    let mut ace = MudAce {
        name,
        direction,
        endpoint,
        protocol,
        src_port: PortMatch::Any,
        dst_port: PortMatch::Any,
        icmp: None,
        action,
    };

    for (key, proto) in [("tcp", PROTO_TCP), ("udp", PROTO_UDP)] {
        let Some(l4) = get(matches, key) else { continue };
        if protocol != proto {
            errs.push(&format!("{mpath}.{key}"), format!("{key} match requires protocol {proto}"));
            continue;
        }
        if let Some(p) = get(l4, "source-port") {
            ace.src_port = parse_port(p, &format!("{mpath}.{key}.source-port"), errs);
        }
        if let Some(p) = get(l4, "destination-port") {
            ace.dst_port = parse_port(p, &format!("{mpath}.{key}.destination-port"), errs);
        }
    }
    if let Some(icmp) = get(matches, "icmp") {
        if protocol != PROTO_ICMP {
            errs.push(&format!("{mpath}.icmp"), "icmp match requires protocol 1");
        } else {
            let m = IcmpMatch {
                icmp_type: get_u8(icmp, "type"),
                code: get_u8(icmp, "code"),
            };
            if m.icmp_type.is_some() || m.code.is_some() {
                ace.icmp = Some(m);
            }
        }
    }
    Some(ace)
}

fn policy_acl_names(mud: &Value, key: &str) -> Vec<String> {
    get(mud, key)
        .and_then(|p| get(p, "access-lists"))
        .and_then(|a| get(a, "access-list"))
        .and_then(Value::as_array)
        .map(|list| {
            list.iter()
                .filter_map(|r| get_str(r, "name").map(str::to_string))
                .collect()
        })
        .unwrap_or_default()
}

/// Parse and syntactically validate a MUD document.
pub fn parse_mud(bytes: &[u8]) -> Result<MudProfile, Vec<SyntaxError>> {
    let doc: Value = match serde_json::from_slice(bytes) {
        Ok(v) => v,
        Err(e) => {
            return Err(vec![SyntaxError {
                path: "$".to_string(),
                message: format!("invalid JSON: {e}"),
            }])
        }
    };
    let mut errs = Collector(Vec::new());
    check_shape(&doc, &SCHEMA, "$", &mut errs);

    let mut profile = MudProfile::default();
    if let Some(mud) = get(&doc, "ietf-mud:mud") {
        profile.mud_url = get_str(mud, "mud-url").unwrap_or_default().to_string();
        profile.last_update = get_str(mud, "last-update").unwrap_or_default().to_string();
        profile.systeminfo = get_str(mud, "systeminfo").unwrap_or_default().to_string();
        if get(mud, "mud-url").is_some_and(Value::is_string) {
            match url::Url::parse(&profile.mud_url) {
                Ok(u) if u.scheme() == "https" => {}
                Ok(_) => errs.push("$.ietf-mud:mud.mud-url", "mud-url must use https"),
                Err(e) => errs.push("$.ietf-mud:mud.mud-url", format!("invalid mud-url: {e}")),
            }
        }
    }

    let mut direction_of: BTreeMap<String, Direction> = BTreeMap::new();
    if let Some(mud) = get(&doc, "ietf-mud:mud") {
        for (key, dir) in [
            ("from-device-policy", Direction::FromDevice),
            ("to-device-policy", Direction::ToDevice),
        ] {
            for name in policy_acl_names(mud, key) {
                if let Some(prev) = direction_of.insert(name.clone(), dir) {
                    if prev != dir {
                        errs.push(
                            &format!("$.ietf-mud:mud.{key}"),
                            format!("ACL '{name}' referenced by both device policies"),
                        );
                    }
                }
            }
        }
    }

    let mut defined: BTreeSet<String> = BTreeSet::new();
    let acl_list = get(&doc, "ietf-access-control-list:acls")
        .and_then(|a| get(a, "acl"))
        .and_then(Value::as_array);
    for (i, acl) in acl_list.into_iter().flatten().enumerate() {
        let path = format!("$.ietf-access-control-list:acls.acl[{i}]");
        let Some(name) = get_str(acl, "name") else { continue };
        if !defined.insert(name.to_string()) {
            errs.push(&path, format!("duplicate ACL name '{name}'"));
            continue;
        }
        if let Some(t) = get_str(acl, "type") {
            if t != "ipv4-acl-type" {
                errs.push(&format!("{path}.type"), format!("unsupported ACL type '{t}'"));
            }
        }
        let Some(&direction) = direction_of.get(name) else {
            errs.push(&path, format!("ACL '{name}' is not referenced by any device policy"));
            continue;
        };
        let aces = get(acl, "aces").and_then(|a| get(a, "ace")).and_then(Value::as_array);
        for (j, ace) in aces.into_iter().flatten().enumerate() {
            let ace_path = format!("{path}.aces.ace[{j}]");
            if let Some(parsed) = parse_ace(ace, direction, &ace_path, &mut errs) {
                profile.push(parsed);
            }
        }
    }
    for name in direction_of.keys() {
        if !defined.contains(name) {
            errs.push("$.ietf-mud:mud", format!("policy references undefined ACL '{name}'"));
        }
    }
    for name in profile.duplicate_names() {
        errs.push("$.ietf-access-control-list:acls", format!("duplicate ACE name '{name}'"));
    }

    if errs.0.is_empty() {
        Ok(profile)
    } else {
        Err(errs.0)
    }
}

#[derive(Serialize)]
struct Document<'a> {
    #[serde(rename = "ietf-mud:mud")]
    mud: MudContainer<'a>,
    #[serde(rename = "ietf-access-control-list:acls")]
    acls: Acls<'a>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct MudContainer<'a> {
    mud_version: u8,
    mud_url: &'a str,
    last_update: &'a str,
    cache_validity: u32,
    is_supported: bool,
    systeminfo: &'a str,
    from_device_policy: Policy,
    to_device_policy: Policy,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Policy {
    access_lists: AccessLists,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct AccessLists {
    access_list: Vec<NameRef>,
}

#[derive(Serialize)]
struct NameRef {
    name: String,
}

#[derive(Serialize)]
struct Acls<'a> {
    acl: Vec<Acl<'a>>,
}

#[derive(Serialize)]
struct Acl<'a> {
    name: String,
    #[serde(rename = "type")]
    acl_type: &'static str,
    aces: Aces<'a>,
}

#[derive(Serialize)]
struct Aces<'a> {
    ace: Vec<AceOut<'a>>,
}

#[derive(Serialize)]
struct AceOut<'a> {
    name: &'a str,
    matches: MatchesOut<'a>,
    actions: ActionsOut,
}

#[derive(Serialize)]
struct ActionsOut {
    forwarding: &'static str,
}

#[derive(Serialize)]
struct MatchesOut<'a> {
    ipv4: Ipv4Out<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tcp: Option<L4Out>,
    #[serde(skip_serializing_if = "Option::is_none")]
    udp: Option<L4Out>,
    #[serde(skip_serializing_if = "Option::is_none")]
    icmp: Option<IcmpOut>,
    #[serde(rename = "ietf-mud:mud", skip_serializing_if = "Option::is_none")]
    mud: Option<MudMatchOut<'a>>,
}

#[derive(Serialize)]
struct Ipv4Out<'a> {
    protocol: u8,
    #[serde(rename = "ietf-acldns:dst-dnsname", skip_serializing_if = "Option::is_none")]
    dst_dnsname: Option<&'a str>,
    #[serde(rename = "ietf-acldns:src-dnsname", skip_serializing_if = "Option::is_none")]
    src_dnsname: Option<&'a str>,
    #[serde(rename = "destination-ipv4-network", skip_serializing_if = "Option::is_none")]
    dst_network: Option<String>,
    #[serde(rename = "source-ipv4-network", skip_serializing_if = "Option::is_none")]
    src_network: Option<String>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct L4Out {
    #[serde(skip_serializing_if = "Option::is_none")]
    source_port: Option<PortOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    destination_port: Option<PortOut>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum PortOut {
    Eq {
        operator: &'static str,
        port: u16,
    },
    Range {
        #[serde(rename = "lower-port")]
        lower: u16,
        #[serde(rename = "upper-port")]
        upper: u16,
    },
}

#[derive(Serialize)]
struct IcmpOut {
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    icmp_type: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    code: Option<u8>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct MudMatchOut<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    controller: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_networks: Option<[(); 1]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    same_manufacturer: Option<[(); 1]>,
}

fn port_out(p: PortMatch) -> Option<PortOut> {
    match p {
        PortMatch::Any => None,
        PortMatch::Eq(port) => Some(PortOut::Eq { operator: "eq", port }),
        PortMatch::Range(lower, upper) => Some(PortOut::Range { lower, upper }),
    }
}

fn ace_out(ace: &MudAce) -> AceOut<'_> {
    let from = ace.direction == Direction::FromDevice;
    let mut ipv4 = Ipv4Out {
        protocol: ace.protocol,
        dst_dnsname: None,
        src_dnsname: None,
        dst_network: None,
        src_network: None,
    };
    let mut mud = None;
    match &ace.endpoint {
        Endpoint::Any => {}
        Endpoint::Domain(d) => {
            if from {
                ipv4.dst_dnsname = Some(d);
            } else {
                ipv4.src_dnsname = Some(d);
            }
        }
        Endpoint::Ipv4(ip) => {
            if from {
                ipv4.dst_network = Some(format!("{ip}/32"));
            } else {
                ipv4.src_network = Some(format!("{ip}/32"));
            }
        }
        Endpoint::Controller(urn) => {
            mud = Some(MudMatchOut {
                controller: Some(urn),
                local_networks: None,
                same_manufacturer: None,
            })
        }
        Endpoint::LocalNetworks => {
            mud = Some(MudMatchOut {
                controller: None,
                local_networks: Some([()]),
                same_manufacturer: None,
            })
        }
        Endpoint::SameManufacturer => {
            mud = Some(MudMatchOut {
                controller: None,
                local_networks: None,
                same_manufacturer: Some([()]),
            })
        }
    }
    let l4 = if ace.src_port.is_any() && ace.dst_port.is_any() {
        None
    } else {
        Some(L4Out {
            source_port: port_out(ace.src_port),
            destination_port: port_out(ace.dst_port),
        })
    };
    let (tcp, udp) = match ace.protocol {
        PROTO_TCP => (l4, None),
        PROTO_UDP => (None, l4),
        _ => (None, None),
    };
    let icmp = ace
        .icmp
        .filter(|m| ace.protocol == PROTO_ICMP && (m.icmp_type.is_some() || m.code.is_some()))
        .map(|m| IcmpOut {
            icmp_type: m.icmp_type,
            code: m.code,
        });
    AceOut {
        name: &ace.name,
        matches: MatchesOut { ipv4, tcp, udp, icmp, mud },
        actions: ActionsOut {
            forwarding: ace.action.as_str(),
        },
    }
}

/// ACL name stem derived from the systeminfo string.
fn acl_stem(profile: &MudProfile) -> String {
    let mut stem = String::new();
    for c in profile.systeminfo.chars() {
        if c.is_ascii_alphanumeric() {
            stem.push(c.to_ascii_lowercase());
        } else if !stem.ends_with('-') && !stem.is_empty() {
            stem.push('-');
        }
    }
    let stem = stem.trim_end_matches('-').to_string();
    if stem.is_empty() {
        "device".to_string()
    } else {
        stem
    }
}

/// Serialize a profile as a MUD document.
pub fn emit_mud_json(profile: &MudProfile) -> Vec<u8> {
    let stem = acl_stem(profile);
    let from_name = format!("from-ipv4-{stem}");
    let to_name = format!("to-ipv4-{stem}");
    let policy = |n: &str| Policy {
        access_lists: AccessLists {
            access_list: vec![NameRef { name: n.to_string() }],
        },
    };
    let doc = Document {
        mud: MudContainer {
            mud_version: 1,
            mud_url: &profile.mud_url,
            last_update: &profile.last_update,
            cache_validity: 48,
            is_supported: true,
            systeminfo: &profile.systeminfo,
            from_device_policy: policy(&from_name),
            to_device_policy: policy(&to_name),
        },
        acls: Acls {
            acl: vec![
                Acl {
                    name: from_name.clone(),
                    acl_type: "ipv4-acl-type",
                    aces: Aces {
                        ace: profile.from_device.iter().map(ace_out).collect(),
                    },
                },
                Acl {
                    name: to_name.clone(),
                    acl_type: "ipv4-acl-type",
                    aces: Aces {
                        ace: profile.to_device.iter().map(ace_out).collect(),
                    },
                },
            ],
        },
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("MUD document serializes");
    out.push(b'\n');
    out
}
