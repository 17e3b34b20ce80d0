//! Run-time identification: per-device profile trees built from traffic,
//! similarity scoring against a library of profiles, winner selection per
//! epoch, endpoint compaction, SSDP separation and profile differences.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::Serialize;

use crate::flow::{DnsCache, FlowRecord, Initiator, RemoteEndpoint, TrackerConfig};
use crate::model::{
    Channel, Direction, Endpoint, IcmpMatch, MacAddr, MudAce, MudProfile, GATEWAY_URN, PROTO_ICMP, PROTO_TCP,
    PROTO_UDP,
};
use crate::pcap::{extract_dns_answers, PacketEvent, SsdpPorts, DNS_PORT, SSDP_PORT};
use crate::ports::PortMatch;
use crate::scalar::{parse_decimal, Scalar};

pub const DEFAULT_BRANCH_CAP: usize = 512;
pub const DEFAULT_EPOCH_SECS: f64 = 15.0 * 60.0;
pub const DEFAULT_CONVERGENCE_EPOCHS: u32 = 12;

/// One root-to-leaf path: channel, direction, endpoint, then the leaf.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Branch {
    pub channel: Channel,
    pub direction: Direction,
    pub endpoint: Endpoint,
    pub proto: u8,
    pub device_port: PortMatch,
    pub remote_port: PortMatch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icmp: Option<IcmpMatch>,
}

impl Branch {
    pub fn new(direction: Direction, endpoint: Endpoint, proto: u8, device_port: PortMatch, remote_port: PortMatch) -> Self {
        Branch {
            channel: endpoint.channel(),
            direction,
            endpoint,
            proto,
            device_port,
            remote_port,
            icmp: None,
        }
    }

    pub fn from_ace(ace: &MudAce) -> Branch {
        let mut b = Branch::new(ace.direction, ace.endpoint.clone(), ace.protocol, ace.device_port(), ace.remote_port());
        if ace.protocol == PROTO_ICMP {
            b.icmp = ace.icmp;
        }
        b
    }

    /// Whether a signature branch `self` admits the observed branch `other`.
    pub fn covers(&self, other: &Branch) -> bool {
        self.direction == other.direction
            && self.proto == other.proto
            && self.endpoint.covers(&other.endpoint)
            && self.device_port.covers(&other.device_port)
            && self.remote_port.covers(&other.remote_port)
            && match (self.icmp, other.icmp) {
                (None, _) => true,
                (Some(m), Some(o)) => m.covers_match(&o),
                (Some(m), None) => m.icmp_type.is_none() && m.code.is_none(),
            }
    }

    /// Smaller is more specific.
    fn specificity(&self) -> (u8, u64, u8) {
        let endpoint = match self.endpoint {
            Endpoint::Any => 2,
            Endpoint::LocalNetworks => 1,
            _ => 0,
        };
        let icmp = self.icmp.map_or(2, |m| m.icmp_type.is_none() as u8 + m.code.is_none() as u8);
        (endpoint, self.device_port.width() * self.remote_port.width(), icmp)
    }

    pub fn leaf_label(&self) -> String {
        match (self.proto, self.icmp) {
            (PROTO_ICMP, Some(m)) => format!("proto=1 icmp={m}"),
            (PROTO_ICMP, None) => "proto=1 icmp=*".to_string(),
            _ => format!("proto={} device={} remote={}", self.proto, self.device_port, self.remote_port),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.channel, self.direction, self.endpoint, self.leaf_label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Seen {
    pub first_seen: f64,
    pub last_seen: f64,
}

/// Outcome of one insertion attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inserted {
    New,
    Existing,
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTree {
    branches: BTreeMap<Branch, Seen>,
    cap: usize,
    rejected: u64,
    // raw UDP observations no library branch covered, kept so they can be
    // adopted again once names are compacted
    split_raw: BTreeMap<Branch, Seen>,
    // leaves that exist only because of such a split
    split_only: BTreeSet<Branch>,
}

impl Default for ProfileTree {
    fn default() -> Self {
        ProfileTree::with_cap(DEFAULT_BRANCH_CAP)
    }
}

/// Rough per-node cost used for the memory budget check.
pub const NODE_BYTES: usize = std::mem::size_of::<Branch>() + std::mem::size_of::<Seen>();

impl ProfileTree {
    pub fn with_cap(cap: usize) -> Self {
        ProfileTree {
            branches: BTreeMap::new(),
            cap,
            rejected: 0,
            split_raw: BTreeMap::new(),
            split_only: BTreeSet::new(),
        }
    }

    pub fn from_profile(profile: &MudProfile) -> Self {
        let mut t = ProfileTree::with_cap(usize::MAX);
        for ace in profile.aces() {
            t.insert(Branch::from_ace(ace), 0.0);
        }
        t
    }

    pub fn insert(&mut self, b: Branch, t: f64) -> Inserted {
        self.split_only.remove(&b);
        self.touch(b, t)
    }

    /// Record an unadopted raw UDP observation as a device-port leaf and a
    /// remote-port leaf.
    pub fn insert_split(&mut self, raw: Branch, t: f64) -> Vec<Inserted> {
        let seen = self.split_raw.entry(raw.clone()).or_insert(Seen { first_seen: t, last_seen: t });
        seen.first_seen = seen.first_seen.min(t);
        seen.last_seen = seen.last_seen.max(t);
        let mut dev = raw.clone();
        dev.remote_port = PortMatch::Any;
        let mut rem = raw;
        rem.device_port = PortMatch::Any;
        [dev, rem]
            .into_iter()
            .map(|leaf| {
                let fresh = !self.branches.contains_key(&leaf);
                let r = self.touch(leaf.clone(), t);
                if fresh && r == Inserted::New {
                    self.split_only.insert(leaf);
                }
                r
            })
            .collect()
    }

    fn touch(&mut self, b: Branch, t: f64) -> Inserted {
        if let Some(seen) = self.branches.get_mut(&b) {
            seen.first_seen = seen.first_seen.min(t);
            seen.last_seen = seen.last_seen.max(t);
            return Inserted::Existing;
        }
        if self.branches.len() >= self.cap {
            self.rejected += 1;
            return Inserted::Rejected;
        }
        self.branches.insert(
            b,
            Seen {
                first_seen: t,
                last_seen: t,
            },
        );
        Inserted::New
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.keys()
    }

    pub fn seen(&self, b: &Branch) -> Option<Seen> {
        self.branches.get(b).copied()
    }

    pub fn contains(&self, b: &Branch) -> bool {
        self.branches.contains_key(b)
    }

    /// Root, channel, direction, endpoint and leaf nodes.
    pub fn node_count(&self) -> usize {
        if self.branches.is_empty() {
            return 1;
        }
        let ch: BTreeSet<_> = self.branches.keys().map(|b| b.channel).collect();
        let dir: BTreeSet<_> = self.branches.keys().map(|b| (b.channel, b.direction)).collect();
        let ep: BTreeSet<_> = self.branches.keys().map(|b| (b.channel, b.direction, &b.endpoint)).collect();
        1 + ch.len() + dir.len() + ep.len() + self.branches.len()
    }

    pub fn approx_bytes(&self) -> usize {
        self.node_count() * NODE_BYTES
    }

    pub fn within_budget(&self, bytes: usize) -> bool {
        self.approx_bytes() <= bytes
    }

    /// Copy with each FQDN reduced to its registrable domain.
    pub fn compacted(&self) -> ProfileTree {
        self.compacted_against(&[])
    }

    /// Compacted copy in which split UDP observations get another chance to
    /// be adopted by a (compacted) library branch.
    pub fn compacted_against(&self, known: &[MudSignature]) -> ProfileTree {
        let mut out = ProfileTree::with_cap(self.cap);
        out.rejected = self.rejected;
        for (b, seen) in &self.branches {
            if self.split_only.contains(b) {
                continue;
            }
            let mut b = b.clone();
            b.endpoint = compact_endpoint(&b.endpoint);
            out.split_only.remove(&b);
            let slot = out.branches.entry(b).or_insert(*seen);
            slot.first_seen = slot.first_seen.min(seen.first_seen);
            slot.last_seen = slot.last_seen.max(seen.last_seen);
        }
        for (raw, seen) in &self.split_raw {
            let mut raw = raw.clone();
            raw.endpoint = compact_endpoint(&raw.endpoint);
            match adopt(&raw, known) {
                Some(b) => {
                    out.insert(b.clone(), seen.first_seen);
                    out.insert(b, seen.last_seen);
                }
                None => {
                    out.insert_split(raw.clone(), seen.first_seen);
                    out.insert_split(raw, seen.last_seen);
                }
            }
        }
        out
    }

    fn grouped(&self) -> BTreeMap<Channel, BTreeMap<Direction, BTreeMap<&Endpoint, Vec<&Branch>>>> {
        let mut g: BTreeMap<Channel, BTreeMap<Direction, BTreeMap<&Endpoint, Vec<&Branch>>>> = BTreeMap::new();
        for b in self.branches.keys() {
            g.entry(b.channel)
                .or_default()
                .entry(b.direction)
                .or_default()
                .entry(&b.endpoint)
                .or_default()
                .push(b);
        }
        g
    }

    /// Indented text rendering, one node per line.
    pub fn render_text(&self) -> String {
        let mut s = String::from("root\n");
        for (ch, dirs) in self.grouped() {
            let _ = writeln!(s, "  {ch}");
            for (dir, eps) in dirs {
                let _ = writeln!(s, "    {dir}");
                for (ep, leaves) in eps {
                    let _ = writeln!(s, "      {ep}");
                    for b in leaves {
                        let _ = writeln!(s, "        {}", b.leaf_label());
                    }
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> TreeNode {
        let node = |label: String, kind: &'static str, children: Vec<TreeNode>, seen: Option<Seen>| {
            let seen = seen.or_else(|| {
                children.iter().filter_map(|c| c.seen).reduce(|a, b| Seen {
                    first_seen: a.first_seen.min(b.first_seen),
                    last_seen: a.last_seen.max(b.last_seen),
                })
            });
            TreeNode {
                label,
                kind,
                seen,
                children,
            }
        };
        let channels = self
            .grouped()
            .into_iter()
            .map(|(ch, dirs)| {
                let dirs = dirs
                    .into_iter()
                    .map(|(dir, eps)| {
                        let eps = eps
                            .into_iter()
                            .map(|(ep, leaves)| {
                                let leaves = leaves
                                    .into_iter()
                                    .map(|b| node(b.leaf_label(), "leaf", vec![], self.seen(b)))
                                    .collect();
                                node(ep.label(), "endpoint", leaves, None)
                            })
                            .collect();
                        node(dir.to_string(), "direction", eps, None)
                    })
                    .collect();
                node(ch.to_string(), "channel", dirs, None)
            })
            .collect();
        node("root".to_string(), "root", channels, None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeNode {
    pub label: String,
    pub kind: &'static str,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub seen: Option<Seen>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeNode>,
}

/// FQDN to registrable domain; other endpoints unchanged.
pub fn compact_endpoint(e: &Endpoint) -> Endpoint {
    match e {
        Endpoint::Domain(d) => match psl::domain_str(d) {
            Some(reg) => Endpoint::Domain(reg.to_string()),
            None => e.clone(),
        },
        _ => e.clone(),
    }
}

/// Compact every domain endpoint of a profile and drop ACEs that become
/// identical matches.
pub fn compact_profile(profile: &MudProfile) -> MudProfile {
    let mut out = MudProfile {
        from_device: Vec::new(),
        to_device: Vec::new(),
        ..profile.clone()
    };
    for ace in profile.aces() {
        let mut ace = ace.clone();
        ace.endpoint = compact_endpoint(&ace.endpoint);
        if !out.aces().any(|a| a.same_match(&ace)) {
            out.push(ace);
        }
    }
    out
}

/// A library profile flattened to unique branches.
#[derive(Clone, Debug, PartialEq)]
pub struct MudSignature {
    pub name: String,
    pub branches: Vec<Branch>,
}

impl MudSignature {
    pub fn new(profile: &MudProfile) -> Self {
        let set: BTreeSet<Branch> = profile.aces().map(Branch::from_ace).collect();
        MudSignature {
            name: profile.systeminfo.clone(),
            branches: set.into_iter().collect(),
        }
    }

    /// Most specific signature branch admitting `b`.
    pub fn best_cover(&self, b: &Branch, channel: Option<Channel>) -> Option<usize> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, s)| channel.is_none_or(|c| s.channel == c) && s.covers(b))
            .min_by_key(|(i, s)| (s.specificity(), *i))
            .map(|(i, _)| i)
    }
}

/// The remote side of a flow as a profile endpoint.
pub fn flow_endpoint(remote: &RemoteEndpoint) -> Endpoint {
    match remote {
        RemoteEndpoint::Gateway => Endpoint::Controller(GATEWAY_URN.to_string()),
        RemoteEndpoint::LocalNetwork => Endpoint::LocalNetworks,
        RemoteEndpoint::Domain(d) => Endpoint::domain(d),
        RemoteEndpoint::Ip(ip) => Endpoint::Ipv4(*ip),
    }
}

/// Add a flow. UDP flows with raw ports take the port spec of the most
/// specific library ACE they fall under, or split into one leaf per port
/// orientation when none does.
pub fn update_tree(tree: &mut ProfileTree, flow: &FlowRecord, known: &[MudSignature]) -> Vec<Inserted> {
    let endpoint = flow_endpoint(&flow.remote);
    let mut b = Branch::new(flow.direction, endpoint, flow.ip_proto, flow.device_port, flow.remote_port);
    if flow.ip_proto == PROTO_ICMP {
        b.icmp = Some(IcmpMatch {
            icmp_type: flow.icmp_type,
            code: flow.icmp_code,
        });
    }
    let t = flow.first_seen;
    let raw_udp = flow.ip_proto == PROTO_UDP
        && matches!(flow.device_port, PortMatch::Eq(_))
        && matches!(flow.remote_port, PortMatch::Eq(_));
    if !raw_udp {
        return vec![tree.insert(b, t)];
    }
    match adopt(&b, known) {
        Some(a) => vec![tree.insert(a, t)],
        None => tree.insert_split(b, t),
    }
}

/// `raw` with its ports replaced by those of the most specific library
/// branch covering it.
fn adopt(raw: &Branch, known: &[MudSignature]) -> Option<Branch> {
    let s = known
        .iter()
        .flat_map(|sig| sig.best_cover(raw, None).map(|i| &sig.branches[i]))
        .min_by_key(|s| (s.specificity(), (*s).clone()))?;
    let mut b = raw.clone();
    b.device_port = s.device_port;
    b.remote_port = s.remote_port;
    Some(b)
}

/// Sizes after morphing R onto M: each R branch under some M branch is
/// replaced by the most specific such M branch, so branches sharing one
/// wildcard count once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MorphCounts {
    pub intersection: u64,
    pub r: u64,
    pub m: u64,
}

pub fn morph<'a>(r: impl IntoIterator<Item = &'a Branch>, m: &MudSignature, channel: Option<Channel>) -> MorphCounts {
    let mut matched = BTreeSet::new();
    let mut unmatched = 0u64;
    for b in r {
        if channel.is_some_and(|c| b.channel != c) {
            continue;
        }
        match m.best_cover(b, channel) {
            Some(i) => {
                matched.insert(i);
            }
            None => unmatched += 1,
        }
    }
    let m_size = m.branches.iter().filter(|s| channel.is_none_or(|c| s.channel == c)).count() as u64;
    MorphCounts {
        intersection: matched.len() as u64,
        r: matched.len() as u64 + unmatched,
        m: m_size,
    }
}

/// |R ∩ M| after morphing.
pub fn intersect(r: &ProfileTree, m: &MudSignature) -> u64 {
    morph(r.branches(), m, None).intersection
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelScore<T> {
    pub sim_d: T,
    pub sim_s: T,
    pub counts: MorphCounts,
}

impl<T: Scalar> ChannelScore<T> {
    /// Empty sides score zero.
    pub fn from_counts(counts: MorphCounts) -> Self {
        let ratio = |n: u64, d: u64| if d == 0 { T::zero() } else { T::ratio(n, d) };
        ChannelScore {
            sim_d: ratio(counts.intersection, counts.r),
            sim_s: ratio(counts.intersection, counts.m),
            counts,
        }
    }

    /// |R∩M| / |R∪M|.
    pub fn jaccard(&self) -> T {
        let c = self.counts;
        let union = c.r + c.m - c.intersection;
        if union == 0 {
            T::zero()
        } else {
            T::ratio(c.intersection, union)
        }
    }

    pub fn record(&self) -> ChannelRecord {
        ChannelRecord {
            sim_d: self.sim_d.to_f64(),
            sim_s: self.sim_s.to_f64(),
            intersection: self.counts.intersection,
            r: self.counts.r,
            m: self.counts.m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityScore<T> {
    pub aggregate: ChannelScore<T>,
    pub internet: ChannelScore<T>,
    pub local: ChannelScore<T>,
}

impl<T: Scalar> SimilarityScore<T> {
    pub fn channel(&self, c: Channel) -> &ChannelScore<T> {
        match c {
            Channel::Internet => &self.internet,
            Channel::Local => &self.local,
        }
    }
}

pub fn score<T: Scalar>(r: &ProfileTree, m: &MudSignature) -> SimilarityScore<T> {
    SimilarityScore {
        aggregate: ChannelScore::from_counts(morph(r.branches(), m, None)),
        internet: ChannelScore::from_counts(morph(r.branches(), m, Some(Channel::Internet))),
        local: ChannelScore::from_counts(morph(r.branches(), m, Some(Channel::Local))),
    }
}

/// Branches of `r` that no branch of `m` admits.
pub fn diff(r: &ProfileTree, m: &MudSignature) -> ProfileTree {
    let mut out = ProfileTree::with_cap(usize::MAX);
    for b in r.branches() {
        if m.best_cover(b, None).is_none() {
            out.insert(b.clone(), r.seen(b).map_or(0.0, |s| s.first_seen));
            if let (Some(seen), Some(slot)) = (r.seen(b), out.branches.get_mut(b)) {
                *slot = seen;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds<T> {
    pub dyn_internet: T,
    pub dyn_local: T,
    pub static_internet: T,
    pub epoch_secs: f64,
    /// Epochs allowed before identification counts as not converged.
    pub convergence_epochs: u32,
    /// Compact endpoints automatically after this many unconverged epochs.
    pub compaction_after: Option<u32>,
}

impl<T: Scalar> Default for Thresholds<T> {
    fn default() -> Self {
        Thresholds {
            dyn_internet: T::ratio(60, 100),
            dyn_local: T::ratio(75, 100),
            static_internet: T::ratio(50, 100),
            epoch_secs: DEFAULT_EPOCH_SECS,
            convergence_epochs: DEFAULT_CONVERGENCE_EPOCHS,
            compaction_after: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("thresholds must be three numbers in [0,1] as dyn_internet,dyn_local,static_internet: {0}")]
pub struct ThresholdError(pub String);

impl<T: Scalar> Thresholds<T> {
    /// Parse "dyn_internet,dyn_local,static_internet", keeping other
    /// settings at their defaults.
    pub fn parse(s: &str) -> Result<Self, ThresholdError> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let err = || ThresholdError(s.to_string());
        if parts.len() != 3 {
            return Err(err());
        }
        let mut vals = Vec::with_capacity(3);
        for p in parts {
            let v: T = parse_decimal(p).ok_or_else(err)?;
            if v < T::zero() || v > T::one() {
                return Err(err());
            }
            vals.push(v);
        }
        Ok(Thresholds {
            dyn_internet: vals[0],
            dyn_local: vals[1],
            static_internet: vals[2],
            ..Thresholds::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SimState {
    /// High dynamic and high static similarity.
    #[serde(rename = "1")]
    S1,
    /// High dynamic, low static.
    #[serde(rename = "2")]
    S2,
    /// Low dynamic, high static: run-time deviation.
    #[serde(rename = "3")]
    S3,
    /// Both low.
    #[serde(rename = "4")]
    S4,
    #[serde(rename = "undetermined")]
    Undetermined,
}

impl fmt::Display for SimState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimState::S1 => "1",
            SimState::S2 => "2",
            SimState::S3 => "3",
            SimState::S4 => "4",
            SimState::Undetermined => "undetermined",
        })
    }
}

/// Quadrant of the aggregate scores, using the Internet thresholds.
pub fn classify_state<T: Scalar>(s: &SimilarityScore<T>, th: &Thresholds<T>) -> SimState {
    let high_d = s.aggregate.sim_d >= th.dyn_internet;
    let high_s = s.aggregate.sim_s >= th.static_internet;
    match (high_d, high_s) {
        (true, true) => SimState::S1,
        (true, false) => SimState::S2,
        (false, true) => SimState::S3,
        (false, false) => SimState::S4,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationState<T> {
    /// Current winners; shrinks over epochs once first set.
    pub winners: BTreeSet<String>,
    /// Whether a non-empty winner set has been recorded yet.
    pub restricted: bool,
    pub state: SimState,
    pub epochs: u32,
    pub compacted: bool,
    /// The per-channel winner sets disagreed and aggregate scores decided.
    pub disagreement: bool,
    /// Epoch at which the winner set first became a singleton.
    pub converged_at: Option<u32>,
    /// Best aggregate match regardless of thresholds.
    pub closest: Option<(String, SimilarityScore<T>)>,
}

impl<T> Default for IdentificationState<T> {
    fn default() -> Self {
        IdentificationState {
            winners: BTreeSet::new(),
            restricted: false,
            state: SimState::Undetermined,
            epochs: 0,
            compacted: false,
            disagreement: false,
            converged_at: None,
            closest: None,
        }
    }
}

impl<T> IdentificationState<T> {
    pub fn sole_winner(&self) -> Option<&str> {
        (self.winners.len() == 1).then(|| self.winners.iter().next().expect("one winner").as_str())
    }
}

fn argmax<T: Scalar>(cands: &[usize], key: impl Fn(usize) -> T) -> BTreeSet<usize> {
    let Some(best) = cands.iter().map(|&i| key(i)).reduce(T::max_of) else {
        return BTreeSet::new();
    };
    cands.iter().copied().filter(|&i| key(i) == best).collect()
}

/// Eligible profiles this epoch and the argmax rule's pick among them.
fn pick<T: Scalar>(tree: &ProfileTree, scores: &[SimilarityScore<T>], th: &Thresholds<T>) -> (BTreeSet<usize>, bool) {
    let has = |c: Channel| tree.branches().any(|b| b.channel == c);
    let (inet, local) = (has(Channel::Internet), has(Channel::Local));
    let eligible: Vec<usize> = (0..scores.len())
        .filter(|&i| {
            let s = &scores[i];
            (inet || local)
                && (!inet || (s.internet.sim_d >= th.dyn_internet && s.internet.sim_s >= th.static_internet))
                && (!local || s.local.sim_d >= th.dyn_local)
        })
        .collect();
    let per_channel = |active: bool, c: Channel| -> BTreeSet<usize> {
        if active {
            argmax(&eligible, |i| scores[i].channel(c).sim_d)
        } else {
            eligible.iter().copied().collect()
        }
    };
    let a = per_channel(inet, Channel::Internet);
    let b = per_channel(local, Channel::Local);
    let both: BTreeSet<usize> = a.intersection(&b).copied().collect();
    if !both.is_empty() || eligible.is_empty() {
        (both, false)
    } else {
        (argmax(&eligible, |i| scores[i].aggregate.sim_d), true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome<T> {
    pub state: IdentificationState<T>,
    pub scores: Vec<(String, SimilarityScore<T>)>,
}

/// Score `tree` against every signature and advance the state one epoch.
pub fn epoch_step<T: Scalar>(
    prev: &IdentificationState<T>,
    tree: &ProfileTree,
    library: &[MudSignature],
    th: &Thresholds<T>,
) -> EpochOutcome<T> {
    let scores: Vec<SimilarityScore<T>> = library.iter().map(|m| score(tree, m)).collect();
    let (picked, disagreement) = pick(tree, &scores, th);
    let picked: BTreeSet<String> = picked.into_iter().map(|i| library[i].name.clone()).collect();

    let mut next = prev.clone();
    next.epochs += 1;
    next.disagreement = disagreement;
    if !picked.is_empty() {
        if !next.restricted {
            next.winners = picked;
            next.restricted = true;
        } else {
            let kept: BTreeSet<String> = next.winners.intersection(&picked).cloned().collect();
            if !kept.is_empty() {
                next.winners = kept;
            }
        }
    }
    if next.converged_at.is_none() && next.winners.len() == 1 {
        next.converged_at = Some(next.epochs);
    }

    let named: Vec<(String, SimilarityScore<T>)> = library.iter().map(|m| m.name.clone()).zip(scores).collect();
    next.closest = named
        .iter()
        .fold(None::<&(String, SimilarityScore<T>)>, |best, cur| match best {
            Some(b) if b.1.aggregate.sim_d >= cur.1.aggregate.sim_d => Some(b),
            _ => Some(cur),
        })
        .cloned();
    next.state = if next.winners.is_empty() {
        SimState::Undetermined
    } else {
        named
            .iter()
            .filter(|(n, _)| next.winners.contains(n))
            .map(|(_, s)| classify_state(s, th))
            .min()
            .unwrap_or(SimState::Undetermined)
    };
    EpochOutcome { state: next, scores: named }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelRecord {
    pub sim_d: f64,
    pub sim_s: f64,
    pub intersection: u64,
    pub r: u64,
    pub m: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub mud: String,
    pub aggregate: ChannelRecord,
    pub internet: ChannelRecord,
    pub local: ChannelRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub device: String,
    pub epoch: u32,
    pub scores: Vec<ScoreRecord>,
    pub winners: Vec<String>,
    pub state: SimState,
    pub disagreement: bool,
    pub compacted: bool,
    pub branches: usize,
}

impl EpochReport {
    pub fn new<T: Scalar>(device: &str, outcome: &EpochOutcome<T>, branches: usize) -> Self {
        EpochReport {
            device: device.to_string(),
            epoch: outcome.state.epochs,
            scores: outcome
                .scores
                .iter()
                .map(|(n, s)| ScoreRecord {
                    mud: n.clone(),
                    aggregate: s.aggregate.record(),
                    internet: s.internet.record(),
                    local: s.local.record(),
                })
                .collect(),
            winners: outcome.state.winners.iter().cloned().collect(),
            state: outcome.state.state,
            disagreement: outcome.state.disagreement,
            compacted: outcome.state.compacted,
            branches,
        }
    }
}

/// Turns packets into per-packet flow records for one device.
#[derive(Clone, Debug)]
pub struct Observer {
    cfg: TrackerConfig,
    dns: DnsCache,
    ssdp: SsdpPorts,
    /// (remote ip, device port, remote port) -> remote side is the server
    tcp_roles: HashMap<(std::net::Ipv4Addr, u16, u16), bool>,
}

impl Observer {
    pub fn new(cfg: TrackerConfig) -> Self {
        Observer {
            dns: DnsCache::new(cfg.dns_ttl_floor),
            cfg,
            ssdp: SsdpPorts::new(),
            tcp_roles: HashMap::new(),
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn ssdp_ports(&self) -> &SsdpPorts {
        &self.ssdp
    }

    pub fn dns(&self) -> &DnsCache {
        &self.dns
    }

    /// The flow this packet belongs to, if it involves the device. TCP
    /// ports are reduced to the server side; UDP keeps both raw ports.
    pub fn observe(&mut self, ev: &PacketEvent) -> Option<FlowRecord> {
        if ev.involves_port(DNS_PORT) {
            for a in extract_dns_answers(ev) {
                self.dns.insert(&a);
            }
        }
        self.ssdp.observe(ev);
        let o = self.cfg.orient(ev)?;
        let (remote, _) = self.cfg.classify_remote(&o, &self.dns, ev.timestamp);
        let (mut device_port, mut remote_port) = (PortMatch::Any, PortMatch::Any);
        let mut initiated_by = Initiator::Unknown;
        match ev.ip_proto {
            PROTO_TCP => {
                let key = (o.remote_ip, o.device_port, o.remote_port);
                let remote_serves = match (ev.tcp_syn, ev.tcp_ack) {
                    (true, false) => {
                        let r = o.direction == Direction::FromDevice;
                        self.tcp_roles.insert(key, r);
                        r
                    }
                    (true, true) => {
                        let r = o.direction == Direction::ToDevice;
                        self.tcp_roles.insert(key, r);
                        r
                    }
                    _ => *self.tcp_roles.entry(key).or_insert(o.remote_port <= o.device_port),
                };
                if remote_serves {
                    remote_port = PortMatch::Eq(o.remote_port);
                    initiated_by = Initiator::Device;
                } else {
                    device_port = PortMatch::Eq(o.device_port);
                    initiated_by = Initiator::Remote;
                }
            }
            PROTO_UDP => {
                device_port = PortMatch::Eq(o.device_port);
                remote_port = PortMatch::Eq(o.remote_port);
            }
            _ => {}
        }
        let is_icmp = ev.ip_proto == PROTO_ICMP;
        Some(FlowRecord {
            device_mac: self.cfg.device_mac,
            channel: remote.channel(),
            direction: o.direction,
            remote_ip: matches!(remote, RemoteEndpoint::Ip(_) | RemoteEndpoint::Domain(_)).then_some(o.remote_ip),
            remote,
            ip_proto: ev.ip_proto,
            device_port,
            remote_port,
            icmp_type: if is_icmp { ev.icmp_type } else { None },
            icmp_code: if is_icmp { ev.icmp_code } else { None },
            initiated_by,
            packets: 1,
            bytes: ev.length as u64,
            first_seen: ev.timestamp,
            last_seen: ev.timestamp,
            stun: ev.stun,
        })
    }
}

/// Whether a flow is discovery chatter: local UDP on the SSDP port or on a
/// port some host advertised in an SSDP message.
pub fn is_ssdp_flow(flow: &FlowRecord, ports: &SsdpPorts, device: MacAddr) -> bool {
    if flow.channel != Channel::Local || flow.ip_proto != PROTO_UDP {
        return false;
    }
    let port = |p: PortMatch| match p {
        PortMatch::Eq(v) => Some(v),
        _ => None,
    };
    let (dp, rp) = (port(flow.device_port), port(flow.remote_port));
    dp == Some(SSDP_PORT)
        || rp == Some(SSDP_PORT)
        || dp.is_some_and(|p| ports.is_learned(device, p))
        || rp.is_some_and(|p| ports.learned_anywhere(p))
}

/// Move discovery flows into their own tree.
pub fn ssdp_split(flows: &[FlowRecord], ports: &SsdpPorts, device: MacAddr) -> (ProfileTree, Vec<FlowRecord>) {
    let mut tree = ProfileTree::with_cap(usize::MAX);
    let mut rest = Vec::new();
    for f in flows {
        if is_ssdp_flow(f, ports, device) {
            update_tree(&mut tree, f, &[]);
        } else {
            rest.push(f.clone());
        }
    }
    (tree, rest)
}

/// End-to-end identification of one device from its packets.
#[derive(Clone, Debug)]
pub struct Identifier<T> {
    pub device: String,
    observer: Observer,
    library: Vec<MudProfile>,
    signatures: Vec<MudSignature>,
    thresholds: Thresholds<T>,
    tree: ProfileTree,
    ssdp_tree: ProfileTree,
    separate_ssdp: bool,
    state: IdentificationState<T>,
    reports: Vec<EpochReport>,
    epoch_end: Option<f64>,
    pending: bool,
    /// sim_s history of every library entry, one row per epoch.
    history: Vec<Vec<T>>,
}

impl<T: Scalar> Identifier<T> {
    pub fn new(device: impl Into<String>, cfg: TrackerConfig, library: Vec<MudProfile>, thresholds: Thresholds<T>) -> Self {
        let signatures = library.iter().map(MudSignature::new).collect();
        Identifier {
            device: device.into(),
            observer: Observer::new(cfg),
            library,
            signatures,
            thresholds,
            tree: ProfileTree::default(),
            ssdp_tree: ProfileTree::with_cap(usize::MAX),
            separate_ssdp: true,
            state: IdentificationState::default(),
            reports: Vec::new(),
            epoch_end: None,
            pending: false,
            history: Vec::new(),
        }
    }

    pub fn with_ssdp_separation(mut self, on: bool) -> Self {
        self.separate_ssdp = on;
        self
    }

    pub fn with_branch_cap(mut self, cap: usize) -> Self {
        self.tree = ProfileTree::with_cap(cap);
        self
    }

    pub fn feed(&mut self, ev: &PacketEvent) {
        let end = *self.epoch_end.get_or_insert(ev.timestamp + self.thresholds.epoch_secs);
        if ev.timestamp >= end {
            self.close_epoch();
            let mut next = end + self.thresholds.epoch_secs;
            // idle epochs still count
            while ev.timestamp >= next {
                self.close_epoch();
                next += self.thresholds.epoch_secs;
            }
            self.epoch_end = Some(next);
        }
        let Some(mut flow) = self.observer.observe(ev) else {
            return;
        };
        self.pending = true;
        if self.separate_ssdp && is_ssdp_flow(&flow, self.observer.ssdp_ports(), self.observer.config().device_mac) {
            update_tree(&mut self.ssdp_tree, &flow, &[]);
            return;
        }
        if self.state.compacted {
            if let RemoteEndpoint::Domain(d) = &flow.remote {
                if let Endpoint::Domain(c) = compact_endpoint(&Endpoint::domain(d)) {
                    flow.remote = RemoteEndpoint::Domain(c);
                }
            }
        }
        update_tree(&mut self.tree, &flow, &self.signatures);
    }

    fn close_epoch(&mut self) {
        let out = epoch_step(&self.state, &self.tree, &self.signatures, &self.thresholds);
        self.history.push(out.scores.iter().map(|(_, s)| s.aggregate.sim_s).collect());
        self.reports.push(EpochReport::new(&self.device, &out, self.tree.len()));
        self.state = out.state;
        self.pending = false;
        if let Some(after) = self.thresholds.compaction_after {
            if !self.state.compacted && self.state.epochs >= after && self.state.winners.len() != 1 {
                self.compact();
            }
        }
    }

    /// Reduce tree and library endpoints to registrable domains.
    pub fn compact(&mut self) {
        if self.state.compacted {
            return;
        }
        self.library = self.library.iter().map(compact_profile).collect();
        self.signatures = self.library.iter().map(MudSignature::new).collect();
        self.tree = self.tree.compacted_against(&self.signatures);
        self.state.compacted = true;
        // earlier restrictions were made on uncompacted names
        self.state.winners.clear();
        self.state.restricted = false;
        self.state.converged_at = None;
    }

    /// Close the last partial epoch.
    pub fn finish(&mut self) {
        if self.pending || self.reports.is_empty() {
            self.close_epoch();
        }
    }

    pub fn state(&self) -> &IdentificationState<T> {
        &self.state
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    pub fn tree(&self) -> &ProfileTree {
        &self.tree
    }

    pub fn ssdp_tree(&self) -> &ProfileTree {
        &self.ssdp_tree
    }

    pub fn signatures(&self) -> &[MudSignature] {
        &self.signatures
    }

    pub fn static_history(&self) -> &[Vec<T>] {
        &self.history
    }

    pub fn converged(&self) -> bool {
        self.state.converged_at.is_some_and(|e| e <= self.thresholds.convergence_epochs) && self.state.winners.len() == 1
    }
}

pub const NO_WINNER: &str = "(none)";
pub const MANY_WINNERS: &str = "(multiple)";

/// Final predictions against true labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: BTreeMap<(String, String), u64>,
    labels: BTreeSet<String>,
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: &str, winners: &BTreeSet<String>) {
        let predicted = match winners.len() {
            0 => NO_WINNER.to_string(),
            1 => winners.iter().next().expect("one").clone(),
            _ => MANY_WINNERS.to_string(),
        };
        self.labels.insert(truth.to_string());
        *self.counts.entry((truth.to_string(), predicted)).or_default() += 1;
    }

    pub fn get(&self, truth: &str, predicted: &str) -> u64 {
        self.counts.get(&(truth.to_string(), predicted.to_string())).copied().unwrap_or(0)
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts.iter().all(|((t, p), n)| *n == 0 || t == p)
    }

    fn columns(&self) -> Vec<String> {
        let mut cols: BTreeSet<String> = self.labels.clone();
        cols.extend(self.counts.keys().map(|(_, p)| p.clone()));
        let mut out: Vec<String> = cols.into_iter().filter(|c| c != NO_WINNER && c != MANY_WINNERS).collect();
        out.push(MANY_WINNERS.to_string());
        out.push(NO_WINNER.to_string());
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let cols = self.columns();
        let mut header = vec!["truth".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header)?;
        for t in &self.labels {
            let mut row = vec![t.clone()];
            row.extend(cols.iter().map(|c| self.get(t, c).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
