//! Brute-force metagraph oracles and random instances.

use mudwatch_core::metagraph::{ConditionalMetagraph, ElementSet, Metapath, MgEdge};
use rand::Rng;

/// Independent metapath test: some firing order exists in which every edge
/// of `edges` has its invertex available, and the outputs cover `target`.
pub fn oracle_is_metapath(g: &ConditionalMetagraph, source: &ElementSet, target: &ElementSet, edges: &[usize]) -> bool {
    if edges.is_empty() {
        return false;
    }
    let mut avail = source.clone();
    let mut left: Vec<usize> = edges.to_vec();
    let mut outs = ElementSet::new();
    while !left.is_empty() {
        let Some(pos) = left.iter().position(|&i| g.edges[i].invertex.iter().all(|x| avail.contains(x))) else {
            return false;
        };
        let i = left.remove(pos);
        avail.extend(g.edges[i].outvertex.iter().cloned());
        outs.extend(g.edges[i].outvertex.iter().cloned());
    }
    target.iter().all(|x| outs.contains(x))
}

pub fn subsets<T: Clone>(xs: &[T]) -> Vec<Vec<T>> {
    (0u32..(1 << xs.len()))
        .map(|mask| xs.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, x)| x.clone()).collect())
        .collect()
}

pub fn oracle_edge_dominant(g: &ConditionalMetagraph, m: &Metapath) -> bool {
    let edges: Vec<usize> = m.edges.iter().copied().collect();
    subsets(&edges)
        .into_iter()
        .filter(|s| s.len() < edges.len())
        .all(|s| !oracle_is_metapath(g, &m.source, &m.target, &s))
}

pub fn oracle_input_dominant(g: &ConditionalMetagraph, m: &Metapath) -> bool {
    let all: Vec<usize> = (0..g.edges.len()).collect();
    let src: Vec<String> = m.source.iter().cloned().collect();
    let edge_sets = subsets(&all);
    subsets(&src).into_iter().filter(|b| b.len() < src.len()).all(|b| {
        let b: ElementSet = b.into_iter().collect();
        edge_sets.iter().all(|s| !oracle_is_metapath(g, &b, &m.target, s))
    })
}

pub fn random_metagraph(rng: &mut impl Rng, max_edges: usize) -> ConditionalMetagraph {
    let vars: Vec<String> = (0..5).map(|i| format!("v{i}")).collect();
    let props: Vec<String> = (0..2).map(|i| format!("p{i}")).collect();
    let n = rng.gen_range(1..=max_edges);
    let mut edges = Vec::new();
    for k in 0..n {
        let mut inv = ElementSet::new();
        for _ in 0..rng.gen_range(1..=2) {
            inv.insert(vars[rng.gen_range(0..vars.len())].clone());
        }
        if rng.gen_bool(0.3) {
            inv.insert(props[rng.gen_range(0..props.len())].clone());
        }
        let mut out = ElementSet::new();
        for _ in 0..rng.gen_range(1..=2) {
            out.insert(vars[rng.gen_range(0..vars.len())].clone());
        }
        edges.push(MgEdge { invertex: inv, outvertex: out, label: format!("e{k}"), ace: None });
    }
    ConditionalMetagraph::new(vars.into_iter().collect(), props.into_iter().collect(), edges).expect("valid")
}

/// Source/target pairs worth querying: each edge's own endpoints plus a few
/// random element sets.
pub fn queries(g: &ConditionalMetagraph, rng: &mut impl Rng) -> Vec<(ElementSet, ElementSet)> {
    let mut q: Vec<(ElementSet, ElementSet)> = g.edges.iter().map(|e| (e.invertex.clone(), e.outvertex.clone())).collect();
    let elems: Vec<String> = g.variables.iter().chain(&g.propositions).cloned().collect();
    for _ in 0..4 {
        let mut b = ElementSet::new();
        for _ in 0..rng.gen_range(1..=3) {
            b.insert(elems[rng.gen_range(0..elems.len())].clone());
        }
        let c = ElementSet::from([g.variables.iter().nth(rng.gen_range(0..g.variables.len())).unwrap().clone()]);
        q.push((b, c));
    }
    q
}

