//! Epoch-paced synthetic replays of catalog devices.

use std::collections::BTreeMap;

use mudwatch_core::flow::TrackerConfig;
use mudwatch_core::model::MudProfile;
use mudwatch_core::pcap::PacketEvent;
use mudwatch_core::runtime::Thresholds;
use mudwatch_core::scalar::Scalar;
use mudwatch_core::synth::{ConformantGen, SyntheticNet, TraceBuilder};
use rand::{Rng, SeedableRng};

pub const EPOCH: f64 = 900.0;
pub const START: f64 = 1_600_000_000.0;

pub struct Replay {
    pub net: SyntheticNet,
    pub events: Vec<PacketEvent>,
}

/// `epochs` epochs of conformant traffic; each epoch exercises every ACE
/// with probability `p` (all of them when `p` is 1).
pub fn conformant(profile: &MudProfile, index: u8, epochs: u32, p: f64, seed: u64) -> Replay {
    conformant_renamed(profile, index, epochs, p, seed, BTreeMap::new())
}

pub fn conformant_renamed(
    profile: &MudProfile,
    index: u8,
    epochs: u32,
    p: f64,
    seed: u64,
    rename: BTreeMap<String, String>,
) -> Replay {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let net = SyntheticNet::new(index);
    let mut gen = ConformantGen::new(profile, net.clone());
    gen.rename = rename;
    let mut trace = TraceBuilder::new(START);
    let aces: Vec<_> = profile.aces().cloned().collect();
    for e in 0..epochs {
        trace.at(START + e as f64 * EPOCH + 1.0);
        for ace in &aces {
            if p >= 1.0 || rng.gen_bool(p) {
                gen.exercise(ace, &mut trace, &mut rng);
                trace.advance(2.0);
            }
        }
    }
    Replay { net, events: trace.events() }
}

pub fn tracker_config(net: &SyntheticNet) -> TrackerConfig {
    TrackerConfig::new(net.device.mac, net.gateway.mac)
}

pub fn thresholds<T: Scalar>() -> Thresholds<T> {
    Thresholds { epoch_secs: EPOCH, ..Thresholds::default() }
}
