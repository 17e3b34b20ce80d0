mod common;

use std::path::PathBuf;

use common::{accept_set, arb_profile, universe};
use mudwatch_core::compliance::{canonicalize, check_zone, equivalent, includes, safe_zones, ComplianceError, ZonePolicy};
use mudwatch_core::model::{Action, Direction, Endpoint, MudAce, MudProfile, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use mudwatch_core::ports::PortMatch;
use mudwatch_core::synth::blipcare_profile;
use proptest::prelude::*;

fn zones_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/zones")
}

fn zones() -> Vec<ZonePolicy> {
    ZonePolicy::load_dir(&zones_dir()).expect("zone fixtures load")
}

fn zone(name: &str) -> ZonePolicy {
    zones().into_iter().find(|z| z.name == name).expect("zone present")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equivalence_and_inclusion_match_packet_oracle(a in arb_profile(5), b in arb_profile(5)) {
        let u = universe(&[&a, &b]);
        let (sa, sb) = (accept_set(&a, &u), accept_set(&b, &u));
        prop_assert_eq!(equivalent(&a, &b), sa == sb);
        prop_assert_eq!(includes(&a, &b), sa.is_subset(&sb));
        prop_assert_eq!(includes(&b, &a), sb.is_subset(&sa));
    }

    #[test]
    fn includes_is_a_preorder(a in arb_profile(4), b in arb_profile(4), c in arb_profile(4)) {
        prop_assert!(includes(&a, &a));
        if includes(&a, &b) && includes(&b, &c) {
            prop_assert!(includes(&a, &c));
        }
        prop_assert_eq!(equivalent(&a, &b), includes(&a, &b) && includes(&b, &a));
    }

    #[test]
    fn canonical_form_ignores_order(p in arb_profile(6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut aces: Vec<MudAce> = p.aces().cloned().collect();
        aces.shuffle(&mut rng);
        let mut q = MudProfile::new(p.mud_url.clone(), p.systeminfo.clone());
        for a in aces {
            q.push(a);
        }
        prop_assert_eq!(canonicalize(&p), canonicalize(&q));
        // idempotent: rebuilding a profile from the tuples gives the same form
        let mut r = MudProfile::default();
        for (i, t) in canonicalize(&p).tuples().into_iter().enumerate() {
            let ace = MudAce::accept(format!("t{i}"), t.direction, t.endpoint, t.ip_proto);
            let ace = if t.ip_proto == PROTO_ICMP {
                let pt = |m: PortMatch| match m { PortMatch::Eq(v) => Some(v as u8), _ => None };
                ace.with_icmp(pt(t.remote_port), pt(t.device_port))
            } else {
                ace.with_ports(t.device_port, t.remote_port)
            };
            r.push(ace);
        }
        prop_assert_eq!(canonicalize(&r), canonicalize(&p));
    }

    #[test]
    fn splitting_a_range_is_invisible(lo in 1u16..30000, mid in 0u16..1000, span in 1u16..1000) {
        let hi = lo + mid + span;
        let cut = lo + mid;
        let ep = Endpoint::domain("svc.example.com");
        let mut whole = MudProfile::default();
        whole.push(MudAce::accept("w", Direction::FromDevice, ep.clone(), PROTO_TCP).with_dst(PortMatch::range(lo, hi)));
        let mut split = MudProfile::default();
        split.push(MudAce::accept("s1", Direction::FromDevice, ep.clone(), PROTO_TCP).with_dst(PortMatch::range(lo, cut)));
        split.push(MudAce::accept("s2", Direction::FromDevice, ep, PROTO_TCP).with_dst(PortMatch::range(cut + 1, hi)));
        prop_assert_eq!(canonicalize(&whole), canonicalize(&split));
    }
}

#[test]
fn blipcare_canonical_has_four_tuples() {
    assert_eq!(canonicalize(&blipcare_profile()).tuples().len(), 4);
}

#[test]
fn removing_an_ace_breaks_equivalence() {
    let p = blipcare_profile();
    let name = p.aces().next().unwrap().name.clone();
    let q = p.without(&[name].into_iter().collect());
    assert!(!equivalent(&p, &q));
    assert!(includes(&q, &p));
}

#[test]
fn empty_profile_is_included_everywhere() {
    let empty = MudProfile::default();
    assert!(includes(&empty, &blipcare_profile()));
    assert!(includes(&empty, &empty));
}

#[test]
fn blipcare_zone_percentages() {
    let p = blipcare_profile();
    let scada = check_zone(&p, &zone("SCADA")).unwrap();
    assert_eq!((scada.violating, scada.total), (2, 4));
    assert_eq!(scada.percent_violating, 50.0);
    assert_eq!(scada.fraction::<num_rational::Ratio<u64>>(), num_rational::Ratio::new(1, 2));
    let ent = check_zone(&p, &zone("Enterprise")).unwrap();
    assert_eq!(ent.violating, 0);
    assert_eq!(safe_zones(&p, &zones()).unwrap(), vec!["Enterprise".to_string(), "DMZ".to_string()]);
}

#[test]
fn controller_dns_only_is_enterprise_safe() {
    let mut p = MudProfile::default();
    p.push(MudAce::accept("q", Direction::FromDevice, Endpoint::gateway(), PROTO_UDP).with_dst(PortMatch::Eq(53)));
    p.push(MudAce::accept("r", Direction::ToDevice, Endpoint::gateway(), PROTO_UDP).with_src(PortMatch::Eq(53)));
    assert_eq!(check_zone(&p, &zone("Enterprise")).unwrap().percent_violating, 0.0);
}

#[test]
fn all_violating_profile_is_only_dmz_safe() {
    let mut p = MudProfile::default();
    p.push(MudAce::accept("x", Direction::FromDevice, Endpoint::domain("x.example.com"), PROTO_UDP).with_dst(PortMatch::Eq(9999)));
    assert_eq!(safe_zones(&p, &zones()).unwrap(), vec!["DMZ".to_string()]);
    assert_eq!(check_zone(&p, &zone("DMZ")).unwrap().percent_violating, 0.0);
}

#[test]
fn empty_profile_is_safe_everywhere() {
    let names: Vec<String> = zones().into_iter().map(|z| z.name).collect();
    assert_eq!(safe_zones(&MudProfile::default(), &zones()).unwrap(), names);
    assert_eq!(names, vec!["SCADA", "Enterprise", "DMZ"]);
}

#[test]
fn drop_aces_are_rejected() {
    let mut p = blipcare_profile();
    let mut d = MudAce::accept("d", Direction::FromDevice, Endpoint::Any, PROTO_TCP);
    d.action = Action::Drop;
    p.push(d);
    assert!(matches!(check_zone(&p, &zone("DMZ")), Err(ComplianceError::DropAce)));
}
