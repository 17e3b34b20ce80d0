//! Conditional metagraphs: policies as edges between element sets, with
//! metapath enumeration, dominance tests and redundancy detection.
//!
//! An edge fires once its whole invertex is available. A metapath from `B`
//! to `C` is an edge set in which every edge fires starting from `B` using
//! only edges of the set, and whose outvertices together cover `C`.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;

use crate::compliance::{ace_region, canonicalize};
use crate::model::{Action, Direction, Endpoint, MudAce, MudProfile, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::ports::PortMatch;

pub type ElementSet = BTreeSet<String>;

/// Complete enumeration is attempted up to this many relevant edges.
pub const ENUMERATION_LIMIT: usize = 20;
/// Search budget (leaves visited) and result cap once past the limit.
const TRUNCATED_BUDGET: u64 = 1 << 16;
const TRUNCATED_MAX_PATHS: usize = 4096;

pub const DEVICE_NODE: &str = "device";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MgEdge {
    pub invertex: ElementSet,
    pub outvertex: ElementSet,
    pub label: String,
    /// The ACE this edge models, when built from a profile.
    #[serde(skip)]
    pub ace: Option<MudAce>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetagraphError {
    #[error("element '{0}' is both a variable and a proposition")]
    Overlap(String),
    #[error("edge '{0}' has empty invertex and outvertex")]
    EmptyEdge(String),
    #[error("edge '{0}' mixes a proposition with other elements in its outvertex")]
    PropositionOut(String),
    #[error("edge '{0}' uses undeclared element '{1}'")]
    Undeclared(String, String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConditionalMetagraph {
    pub variables: ElementSet,
    pub propositions: ElementSet,
    pub edges: Vec<MgEdge>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Metapath {
    pub source: ElementSet,
    pub target: ElementSet,
    /// Indices into the metagraph's edge list, ascending.
    pub edges: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Enumeration {
    pub paths: Vec<Metapath>,
    /// Set when the search hit its budget and `paths` may be incomplete.
    pub truncated: bool,
}

impl ConditionalMetagraph {
    pub fn new(variables: ElementSet, propositions: ElementSet, edges: Vec<MgEdge>) -> Result<Self, MetagraphError> {
        if let Some(x) = variables.intersection(&propositions).next() {
            return Err(MetagraphError::Overlap(x.clone()));
        }
        for e in &edges {
            if e.invertex.is_empty() && e.outvertex.is_empty() {
                return Err(MetagraphError::EmptyEdge(e.label.clone()));
            }
            if e.outvertex.len() > 1 && e.outvertex.iter().any(|x| propositions.contains(x)) {
                return Err(MetagraphError::PropositionOut(e.label.clone()));
            }
            for x in e.invertex.iter().chain(&e.outvertex) {
                if !variables.contains(x) && !propositions.contains(x) {
                    return Err(MetagraphError::Undeclared(e.label.clone(), x.clone()));
                }
            }
        }
        Ok(ConditionalMetagraph {
            variables,
            propositions,
            edges,
        })
    }

    /// Edges fired from `source` using only `allowed` edges, and the
    /// elements their outvertices produce.
    fn closure(&self, source: &ElementSet, allowed: &dyn Fn(usize) -> bool) -> (BTreeSet<usize>, ElementSet) {
        let mut avail = source.clone();
        let mut produced = ElementSet::new();
        let mut fired = BTreeSet::new();
        loop {
            let mut changed = false;
            for (i, e) in self.edges.iter().enumerate() {
                if fired.contains(&i) || !allowed(i) || !e.invertex.is_subset(&avail) {
                    continue;
                }
                fired.insert(i);
                for x in &e.outvertex {
                    avail.insert(x.clone());
                    produced.insert(x.clone());
                }
                changed = true;
            }
            if !changed {
                return (fired, produced);
            }
        }
    }

    /// Whether `edges` forms a metapath from `source` to `target`.
    pub fn is_metapath(&self, source: &ElementSet, target: &ElementSet, edges: &BTreeSet<usize>) -> bool {
        if edges.is_empty() {
            return false;
        }
        let (fired, produced) = self.closure(source, &|i| edges.contains(&i));
        fired.len() == edges.len() && target.is_subset(&produced)
    }

    /// All metapaths from `source` to `target`.
    pub fn metapaths(&self, source: &ElementSet, target: &ElementSet) -> Enumeration {
        let (reachable, produced) = self.closure(source, &|_| true);
        if !target.is_subset(&produced) {
            return Enumeration::default();
        }
        let relevant: Vec<usize> = reachable.into_iter().collect();
        let truncated = relevant.len() > ENUMERATION_LIMIT;
        let mut out = Vec::new();
        let mut budget = TRUNCATED_BUDGET;
        let mut chosen = BTreeSet::new();
        self.enumerate(source, target, &relevant, 0, &mut chosen, &mut out, &mut budget, truncated);
        Enumeration {
            paths: out,
            truncated: truncated && budget == 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate(
        &self,
        source: &ElementSet,
        target: &ElementSet,
        relevant: &[usize],
        at: usize,
        chosen: &mut BTreeSet<usize>,
        out: &mut Vec<Metapath>,
        budget: &mut u64,
        bounded: bool,
    ) {
        if bounded && (*budget == 0 || out.len() >= TRUNCATED_MAX_PATHS) {
            *budget = 0;
            return;
        }
        if at == relevant.len() {
            *budget = budget.saturating_sub(1);
            if self.is_metapath(source, target, chosen) {
                out.push(Metapath {
                    source: source.clone(),
                    target: target.clone(),
                    edges: chosen.clone(),
                });
            }
            return;
        }
        // prune: the chosen edges plus all remaining cannot cover the target
        let rest = &relevant[at..];
        let mut cover: ElementSet = ElementSet::new();
        for &i in chosen.iter().chain(rest) {
            cover.extend(self.edges[i].outvertex.iter().cloned());
        }
        if !target.is_subset(&cover) {
            return;
        }
        chosen.insert(relevant[at]);
        self.enumerate(source, target, relevant, at + 1, chosen, out, budget, bounded);
        chosen.remove(&relevant[at]);
        self.enumerate(source, target, relevant, at + 1, chosen, out, budget, bounded);
    }

    /// No proper subset of the edge set is itself a metapath.
    pub fn is_edge_dominant(&self, m: &Metapath) -> bool {
        // Any metapath inside m lies inside m minus some edge, and the edges
        // that fire there form the largest such candidate.
        m.edges.iter().all(|&drop| {
            let (_, produced) = self.closure(&m.source, &|i| i != drop && m.edges.contains(&i));
            !m.target.is_subset(&produced)
        })
    }

    /// No proper subset of the source reaches the target.
    pub fn is_input_dominant(&self, m: &Metapath) -> bool {
        // reachability is monotone in the source, so maximal subsets suffice
        m.source.iter().all(|x| {
            let mut smaller = m.source.clone();
            smaller.remove(x);
            let (_, produced) = self.closure(&smaller, &|_| true);
            !m.target.is_subset(&produced)
        })
    }

    pub fn is_dominant(&self, m: &Metapath) -> bool {
        self.is_edge_dominant(m) && self.is_input_dominant(m)
    }

    /// Singleton metapath of one edge.
    pub fn edge_path(&self, i: usize) -> Metapath {
        Metapath {
            source: self.edges[i].invertex.clone(),
            target: self.edges[i].outvertex.clone(),
            edges: BTreeSet::from([i]),
        }
    }
}

fn port_prop(proto: &str, field: &str, p: PortMatch) -> Option<String> {
    (!p.is_any()).then(|| format!("{proto}.{field}={p}"))
}

/// Proposition atoms describing an ACE's match and action.
pub fn ace_propositions(ace: &MudAce) -> ElementSet {
    let mut props = ElementSet::new();
    props.insert(format!("protocol={}", ace.protocol));
    let proto = match ace.protocol {
        PROTO_TCP => Some("TCP"),
        PROTO_UDP => Some("UDP"),
        _ => None,
    };
    if let Some(proto) = proto {
        let (sport, dport) = (ace.src_port, ace.dst_port);
        props.extend(port_prop(proto, "sport", sport));
        props.extend(port_prop(proto, "dport", dport));
    }
    if ace.protocol == PROTO_ICMP {
        if let Some(m) = ace.icmp {
            props.extend(m.icmp_type.map(|t| format!("ICMP.type={t}")));
            props.extend(m.code.map(|c| format!("ICMP.code={c}")));
        }
    }
    props.insert(format!("action={}", ace.action.as_str()));
    props
}

fn endpoint_node(e: &Endpoint) -> String {
    match e {
        Endpoint::Controller(urn) if urn == crate::model::GATEWAY_URN => "gateway".to_string(),
        Endpoint::LocalNetworks => "local-network".to_string(),
        _ => e.label(),
    }
}

/// One edge per ACE between the device and the remote endpoint, with the
/// ACE's propositions in the invertex.
pub fn from_mud(profile: &MudProfile) -> ConditionalMetagraph {
    let mut variables = ElementSet::from([DEVICE_NODE.to_string()]);
    let mut propositions = ElementSet::new();
    let mut edges = Vec::new();
    for ace in profile.aces() {
        let node = endpoint_node(&ace.endpoint);
        variables.insert(node.clone());
        let props = ace_propositions(ace);
        propositions.extend(props.iter().cloned());
        let (from, to) = match ace.direction {
            Direction::FromDevice => (DEVICE_NODE.to_string(), node),
            Direction::ToDevice => (node, DEVICE_NODE.to_string()),
        };
        let mut invertex = props;
        invertex.insert(from);
        edges.push(MgEdge {
            invertex,
            outvertex: ElementSet::from([to]),
            label: ace.name.clone(),
            ace: Some(ace.clone()),
        });
    }
    ConditionalMetagraph {
        variables,
        propositions,
        edges,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingKind {
    /// Removing the ACE leaves the accepted traffic unchanged.
    Redundant,
    /// An accept and a drop ACE overlap, so intent depends on ordering.
    Ambiguous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub ace_name: String,
    pub edge: usize,
    /// Edges that together cover the reported one.
    pub witness: Vec<Metapath>,
    pub witness_aces: Vec<String>,
}

fn overlaps(a: &MudAce, b: &MudAce) -> bool {
    a.direction == b.direction
        && a.protocol == b.protocol
        && (a.endpoint.covers(&b.endpoint) || b.endpoint.covers(&a.endpoint))
        && {
            let rb = ace_region(b);
            ace_region(a).boxes().any(|(x, y)| rb.intersects_box(x, y))
        }
}

fn profile_of(edges: &[(usize, &MudAce)]) -> MudProfile {
    let mut p = MudProfile::default();
    for (_, a) in edges {
        p.push((*a).clone());
    }
    p
}

/// Redundant and ambiguous ACEs of a profile-derived metagraph.
///
/// Edges are tried from the narrowest match outwards and removed while the
/// accept set stays the same, so dropping every reported edge at once is
/// safe. Each report names the surviving edges that overlap it.
pub fn find_redundancies(g: &ConditionalMetagraph) -> Vec<Finding> {
    let aces: Vec<(usize, &MudAce)> = g.edges.iter().enumerate().filter_map(|(i, e)| e.ace.as_ref().map(|a| (i, a))).collect();
    let mut findings = Vec::new();

    for (x, &(i, a)) in aces.iter().enumerate() {
        for &(j, b) in &aces[x + 1..] {
            if a.action != b.action && overlaps(a, b) {
                for (k, ace) in [(i, a), (j, b)] {
                    findings.push(Finding {
                        kind: FindingKind::Ambiguous,
                        ace_name: ace.name.clone(),
                        edge: k,
                        witness: vec![g.edge_path(if k == i { j } else { i })],
                        witness_aces: vec![if k == i { b.name.clone() } else { a.name.clone() }],
                    });
                }
            }
        }
    }

    let mut order: Vec<(usize, &MudAce)> = aces.iter().copied().filter(|(_, a)| a.action == Action::Accept).collect();
    let width = |a: &MudAce| -> (u8, u64) {
        let generality = match a.endpoint {
            Endpoint::Any => 2,
            Endpoint::LocalNetworks => 1,
            _ => 0,
        };
        (generality, ace_region(a).boxes().map(|(x, y)| x.len() * y.len()).sum())
    };
    // narrowest first; among equals the later edge goes first
    order.sort_by(|(i, a), (j, b)| width(a).cmp(&width(b)).then(j.cmp(i)));

    let mut kept: Vec<(usize, &MudAce)> = aces.iter().copied().filter(|(_, a)| a.action == Action::Accept).collect();
    let target = canonicalize(&profile_of(&kept));
    for (i, a) in order {
        let without: Vec<(usize, &MudAce)> = kept.iter().copied().filter(|(k, _)| *k != i).collect();
        if canonicalize(&profile_of(&without)) != target {
            continue;
        }
        let covering: Vec<(usize, &MudAce)> = without.iter().copied().filter(|(_, b)| overlaps(a, b)).collect();
        findings.push(Finding {
            kind: FindingKind::Redundant,
            ace_name: a.name.clone(),
            edge: i,
            witness: covering.iter().map(|(k, _)| g.edge_path(*k)).collect(),
            witness_aces: covering.iter().map(|(_, b)| b.name.clone()).collect(),
        });
        kept = without;
    }
    findings
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RedundancyReport {
    pub rule_count: usize,
    pub redundant_count: usize,
    pub cpu_time: f64,
    pub findings: Vec<Finding>,
}

impl RedundancyReport {
    pub fn text_row(&self, device: &str) -> String {
        format!(
            "{:<24} rules={:<4} redundant={:<4} cpu={:.3}s",
            device, self.rule_count, self.redundant_count, self.cpu_time
        )
    }
}

pub fn redundancy_report(profile: &MudProfile) -> RedundancyReport {
    let start = Instant::now();
    let g = from_mud(profile);
    let findings = find_redundancies(&g);
    RedundancyReport {
        rule_count: profile.ace_count(),
        redundant_count: findings.iter().filter(|f| f.kind == FindingKind::Redundant).count(),
        cpu_time: start.elapsed().as_secs_f64(),
        findings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> ElementSet {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn edge(i: &[&str], o: &[&str], l: &str) -> MgEdge {
        MgEdge {
            invertex: set(i),
            outvertex: set(o),
            label: l.to_string(),
            ace: None,
        }
    }

    #[test]
    fn chain_metapath() {
        let g = ConditionalMetagraph::new(
            set(&["U1", "R1", "R3", "U2"]),
            ElementSet::new(),
            vec![edge(&["U1"], &["R1"], "e1"), edge(&["U2"], &["R1"], "e2"), edge(&["R1"], &["R3"], "e3")],
        )
        .unwrap();
        let e = g.metapaths(&set(&["U1"]), &set(&["R3"]));
        assert_eq!(e.paths.len(), 1);
        assert_eq!(e.paths[0].edges, BTreeSet::from([0, 2]));
        assert!(g.is_dominant(&e.paths[0]));
    }

    #[test]
    fn duplicates_are_not_edge_dominant_together() {
        let g = ConditionalMetagraph::new(
            set(&["B", "C"]),
            ElementSet::new(),
            vec![edge(&["B"], &["C"], "e1"), edge(&["B"], &["C"], "e2")],
        )
        .unwrap();
        let e = g.metapaths(&set(&["B"]), &set(&["C"]));
        assert_eq!(e.paths.len(), 3);
        for p in &e.paths {
            assert_eq!(g.is_edge_dominant(p), p.edges.len() == 1);
        }
    }

    #[test]
    fn superset_source_is_not_input_dominant() {
        let g = ConditionalMetagraph::new(set(&["B", "X", "C"]), ElementSet::new(), vec![edge(&["B"], &["C"], "e1")])
            .unwrap();
        let m = Metapath {
            source: set(&["B", "X"]),
            target: set(&["C"]),
            edges: BTreeSet::from([0]),
        };
        assert!(g.is_metapath(&m.source, &m.target, &m.edges));
        assert!(g.is_edge_dominant(&m));
        assert!(!g.is_input_dominant(&m));
        assert!(!g.is_dominant(&m));
    }

    #[test]
    fn invariants_are_enforced() {
        assert_eq!(
            ConditionalMetagraph::new(set(&["a"]), set(&["a"]), vec![]),
            Err(MetagraphError::Overlap("a".into()))
        );
        assert!(matches!(
            ConditionalMetagraph::new(set(&["a"]), set(&["p"]), vec![edge(&["a"], &["a", "p"], "e")]),
            Err(MetagraphError::PropositionOut(_))
        ));
        assert!(matches!(
            ConditionalMetagraph::new(set(&["a"]), set(&[]), vec![edge(&[], &[], "e")]),
            Err(MetagraphError::EmptyEdge(_))
        ));
    }

    #[test]
    fn empty_profile_has_only_device() {
        let g = from_mud(&MudProfile::default());
        assert_eq!(g.variables, set(&["device"]));
        assert!(g.edges.is_empty());
        assert!(find_redundancies(&g).is_empty());
    }
}
