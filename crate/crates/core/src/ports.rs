//! Port matches and the interval algebra used by canonicalization,
//! redundancy analysis and tree matching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest value on either axis of a [`PortRegion`]. ICMP type/code share the
/// same axes and simply never exceed 255.
pub const AXIS_MAX: u32 = 65535;

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub lo: u32,
    pub hi: u32,
}

impl Interval {
    pub fn new(lo: u32, hi: u32) -> Self {
        assert!(lo <= hi, "empty interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: u32) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn full() -> Self {
        Interval { lo: 0, hi: AXIS_MAX }
    }

    pub fn contains(&self, v: u32) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    /// Number of values; never zero, since `lo <= hi`.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u64 {
        (self.hi - self.lo) as u64 + 1
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}-{}", self.lo, self.hi)
        }
    }
}

/// Sorted, pairwise disjoint and non-adjacent intervals.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntervalSet(Vec<Interval>);

impl IntervalSet {
    pub fn new() -> Self {
        IntervalSet(Vec::new())
    }

    pub fn single(iv: Interval) -> Self {
        IntervalSet(vec![iv])
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.0
    }

    pub fn contains(&self, v: u32) -> bool {
        self.0
            .binary_search_by(|iv| {
                if iv.hi < v {
                    std::cmp::Ordering::Less
                } else if iv.lo > v {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .is_ok()
    }

    pub fn insert(&mut self, iv: Interval) {
        self.0.push(iv);
        self.normalize();
    }

    pub fn union(&self, other: &IntervalSet) -> IntervalSet {
        let mut all = Vec::with_capacity(self.0.len() + other.0.len());
        all.extend_from_slice(&self.0);
        all.extend_from_slice(&other.0);
        let mut out = IntervalSet(all);
        out.normalize();
        out
    }

    pub fn contains_interval(&self, iv: &Interval) -> bool {
        self.0.iter().any(|s| s.contains_interval(iv))
    }

    pub fn is_subset(&self, other: &IntervalSet) -> bool {
        self.0.iter().all(|iv| other.contains_interval(iv))
    }

    fn normalize(&mut self) {
        self.0.sort();
        let mut merged: Vec<Interval> = Vec::with_capacity(self.0.len());
        for iv in self.0.drain(..) {
            match merged.last_mut() {
                Some(last) if iv.lo <= last.hi.saturating_add(1) => {
                    last.hi = last.hi.max(iv.hi);
                }
                _ => merged.push(iv),
            }
        }
        self.0 = merged;
    }
}

impl FromIterator<Interval> for IntervalSet {
    fn from_iter<I: IntoIterator<Item = Interval>>(iter: I) -> Self {
        let mut s = IntervalSet(iter.into_iter().collect());
        s.normalize();
        s
    }
}

/// A union of axis-aligned boxes in (device port × remote port) space, kept
/// in a unique slab form: the first axis is cut into maximal intervals over
/// which the cross-section on the second axis is constant and non-empty.
/// Two regions are equal as point sets iff they are equal as values.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRegion {
    slabs: Vec<(Interval, IntervalSet)>,
}

impl PortRegion {
    pub fn empty() -> Self {
        PortRegion { slabs: Vec::new() }
    }

    pub fn from_box(x: Interval, y: Interval) -> Self {
        PortRegion {
            slabs: vec![(x, IntervalSet::single(y))],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slabs.is_empty()
    }

    pub fn slabs(&self) -> &[(Interval, IntervalSet)] {
        &self.slabs
    }

    /// The disjoint boxes making up this region, in canonical order.
    pub fn boxes(&self) -> impl Iterator<Item = (Interval, Interval)> + '_ {
        self.slabs
            .iter()
            .flat_map(|(x, ys)| ys.intervals().iter().map(move |y| (*x, *y)))
    }

    fn cross_section(&self, x: u32) -> Option<&IntervalSet> {
        let idx = self.slabs.partition_point(|(iv, _)| iv.hi < x);
        self.slabs
            .get(idx)
            .filter(|(iv, _)| iv.contains(x))
            .map(|(_, ys)| ys)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.cross_section(x).is_some_and(|ys| ys.contains(y))
    }

    fn breakpoints(&self, out: &mut Vec<u32>) {
        for (iv, _) in &self.slabs {
            out.push(iv.lo);
            out.push(iv.hi + 1);
        }
    }

    pub fn union(&self, other: &PortRegion) -> PortRegion {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        let mut cuts = Vec::new();
        self.breakpoints(&mut cuts);
        other.breakpoints(&mut cuts);
        cuts.sort_unstable();
        cuts.dedup();
        let mut slabs: Vec<(Interval, IntervalSet)> = Vec::new();
        for w in cuts.windows(2) {
            let seg = Interval::new(w[0], w[1] - 1);
            let section = match (self.cross_section(seg.lo), other.cross_section(seg.lo)) {
                (Some(a), Some(b)) => a.union(b),
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b.clone(),
                (None, None) => continue,
            };
            match slabs.last_mut() {
                Some((last, ys)) if last.hi + 1 == seg.lo && *ys == section => last.hi = seg.hi,
                _ => slabs.push((seg, section)),
            }
        }
        PortRegion { slabs }
    }

    pub fn union_box(&self, x: Interval, y: Interval) -> PortRegion {
        self.union(&PortRegion::from_box(x, y))
    }

    /// `self ⊆ other`.
    pub fn is_subset(&self, other: &PortRegion) -> bool {
        for (x, ys) in &self.slabs {
            let mut cuts = vec![x.lo, x.hi + 1];
            for (ov, _) in &other.slabs {
                if ov.lo > x.lo && ov.lo <= x.hi {
                    cuts.push(ov.lo);
                }
                if ov.hi + 1 > x.lo && ov.hi < x.hi {
                    cuts.push(ov.hi + 1);
                }
            }
            cuts.sort_unstable();
            cuts.dedup();
            for w in cuts.windows(2) {
                match other.cross_section(w[0]) {
                    Some(os) if ys.is_subset(os) => {}
                    _ => return false,
                }
            }
        }
        true
    }

    pub fn intersects_box(&self, x: Interval, y: Interval) -> bool {
        self.slabs.iter().any(|(sx, ys)| {
            sx.intersect(&x).is_some() && ys.intervals().iter().any(|iv| iv.intersect(&y).is_some())
        })
    }
}

/// A TCP/UDP port constraint as it appears in an ACE or a flow rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PortMatch {
    Any,
    Eq(u16),
    /// Inclusive; never degenerate (see [`PortMatch::range`]).
    Range(u16, u16),
}

impl PortMatch {
    /// Normalizing constructor: `lo == hi` becomes `Eq`, the full range `Any`.
    pub fn range(lo: u16, hi: u16) -> PortMatch {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        if lo == hi {
            PortMatch::Eq(lo)
        } else if lo == 0 && hi == u16::MAX {
            PortMatch::Any
        } else {
            PortMatch::Range(lo, hi)
        }
    }

    pub fn interval(&self) -> Interval {
        match *self {
            PortMatch::Any => Interval::full(),
            PortMatch::Eq(p) => Interval::point(p as u32),
            PortMatch::Range(lo, hi) => Interval::new(lo as u32, hi as u32),
        }
    }

    pub fn from_interval(iv: Interval) -> PortMatch {
        PortMatch::range(iv.lo.min(65535) as u16, iv.hi.min(65535) as u16)
    }

    pub fn is_any(&self) -> bool {
        matches!(self, PortMatch::Any)
    }

    pub fn matches(&self, port: u16) -> bool {
        self.interval().contains(port as u32)
    }

    pub fn covers(&self, other: &PortMatch) -> bool {
        self.interval().contains_interval(&other.interval())
    }

    pub fn intersect(&self, other: &PortMatch) -> Option<PortMatch> {
        self.interval().intersect(&other.interval()).map(PortMatch::from_interval)
    }

    /// Smaller is more specific.
    pub fn width(&self) -> u64 {
        self.interval().len()
    }
}

impl fmt::Display for PortMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortMatch::Any => f.write_str("*"),
            PortMatch::Eq(p) => write!(f, "{p}"),
            PortMatch::Range(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

impl FromStr for PortMatch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "*" || s.eq_ignore_ascii_case("any") {
            return Ok(PortMatch::Any);
        }
        if let Some((lo, hi)) = s.split_once('-') {
            let lo: u16 = lo.trim().parse().map_err(|_| format!("bad port range '{s}'"))?;
            let hi: u16 = hi.trim().parse().map_err(|_| format!("bad port range '{s}'"))?;
            if lo > hi {
                return Err(format!("inverted port range '{s}'"));
            }
            return Ok(PortMatch::range(lo, hi));
        }
        s.parse::<u16>()
            .map(PortMatch::Eq)
            .map_err(|_| format!("bad port '{s}'"))
    }
}

impl Serialize for PortMatch {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortMatch {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_box() -> impl Strategy<Value = (Interval, Interval)> {
        (0u32..20, 0u32..6, 0u32..20, 0u32..6)
            .prop_map(|(x, w, y, h)| (Interval::new(x, x + w), Interval::new(y, y + h)))
    }

    #[test]
    fn interval_set_merges_adjacent_and_overlapping() {
        let s: IntervalSet = [Interval::new(80, 90), Interval::new(85, 100), Interval::new(101, 105)]
            .into_iter()
            .collect();
        assert_eq!(s.intervals(), &[Interval::new(80, 105)]);
        assert!(s.contains(101));
        assert!(!s.contains(106));
    }

    #[test]
    fn port_match_normalizes() {
        assert_eq!(PortMatch::range(53, 53), PortMatch::Eq(53));
        assert_eq!(PortMatch::range(0, 65535), PortMatch::Any);
        assert_eq!(PortMatch::range(90, 80), PortMatch::Range(80, 90));
        assert!(PortMatch::Any.covers(&PortMatch::Eq(1)));
        assert!(!PortMatch::Eq(1).covers(&PortMatch::Any));
        assert_eq!("1000-2000".parse::<PortMatch>().unwrap(), PortMatch::Range(1000, 2000));
        assert_eq!("*".parse::<PortMatch>().unwrap(), PortMatch::Any);
        assert!("70000".parse::<PortMatch>().is_err());
    }

    #[test]
    fn region_union_merges_equal_neighbours() {
        let a = PortRegion::from_box(Interval::new(0, 9), Interval::new(0, 5));
        let b = PortRegion::from_box(Interval::new(10, 19), Interval::new(0, 5));
        let u = a.union(&b);
        assert_eq!(u, PortRegion::from_box(Interval::new(0, 19), Interval::new(0, 5)));
        assert!(a.is_subset(&u));
        assert!(!u.is_subset(&a));
    }

    #[test]
    fn region_handles_axis_maximum() {
        let full = PortRegion::from_box(Interval::full(), Interval::full());
        let p = PortRegion::from_box(Interval::point(AXIS_MAX), Interval::point(0));
        assert!(p.is_subset(&full));
        assert_eq!(full.union(&p), full);
    }

    proptest! {
        // Brute-force membership over a small grid is the oracle for the slab form.
        #[test]
        fn union_matches_pointwise_membership(boxes in proptest::collection::vec(small_box(), 0..6)) {
            let mut region = PortRegion::empty();
            for (x, y) in &boxes {
                region = region.union_box(*x, *y);
            }
            for x in 0..28u32 {
                for y in 0..28u32 {
                    let expected = boxes.iter().any(|(bx, by)| bx.contains(x) && by.contains(y));
                    prop_assert_eq!(region.contains(x, y), expected);
                }
            }
        }

        #[test]
        fn slab_form_is_unique(boxes in proptest::collection::vec(small_box(), 1..6)) {
            let forward = boxes.iter().fold(PortRegion::empty(), |r, (x, y)| r.union_box(*x, *y));
            let backward = boxes.iter().rev().fold(PortRegion::empty(), |r, (x, y)| r.union_box(*x, *y));
            prop_assert_eq!(&forward, &backward);
            // Re-adding boxes decomposed from the region reproduces it.
            let rebuilt = forward.boxes().fold(PortRegion::empty(), |r, (x, y)| r.union_box(x, y));
            prop_assert_eq!(forward, rebuilt);
        }

        #[test]
        fn subset_matches_pointwise(a in proptest::collection::vec(small_box(), 0..4),
                                    b in proptest::collection::vec(small_box(), 0..4)) {
            let ra = a.iter().fold(PortRegion::empty(), |r, (x, y)| r.union_box(*x, *y));
            let rb = b.iter().fold(PortRegion::empty(), |r, (x, y)| r.union_box(*x, *y));
            let mut expected = true;
            for x in 0..28u32 {
                for y in 0..28u32 {
                    if ra.contains(x, y) && !rb.contains(x, y) {
                        expected = false;
                    }
                }
            }
            prop_assert_eq!(ra.is_subset(&rb), expected);
        }
    }
}
