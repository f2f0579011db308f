//! Synthetic labelled traffic for end-to-end checks.
//!
//! Each class owns a first-order byte Markov chain over two byte sets of its
//! own: a large tail set and a small head set. A payload starts on a random
//! tail byte and wanders uniformly inside the tail set, stepping into the
//! head set with probability `enter_head` per byte. Inside the head set it
//! follows a few preferred successors and falls back to the tail set with
//! probability `1 - stay_head`. Short payloads are thus made of rare tail
//! pairs, long ones mostly of frequent head pairs.
//!
//! Every datagram starts with the transport header remainder (16 bytes for
//! TCP, length and checksum for UDP) drawn identically for all classes, so
//! only the payload carries class information.

use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::capture::{build_ipv4_frame, CaptureError, CaptureWriter, CleanPacket, FiveTuple, Protocol, Timestamp};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub tail_bytes: usize,
    pub head_bytes: usize,
    /// Preferred successors of each head byte, inside the head set.
    pub successors: usize,
    pub enter_head: f64,
    pub stay_head: f64,
    pub payload_min: usize,
    pub payload_max: usize,
    pub packets_per_flow: (usize, usize),
    /// Bounds on the length of a same-direction run. Runs are never cut
    /// short, so a flow can exceed `packets_per_flow.1`.
    pub burst_packets: (usize, usize),
    /// Draw sequence/ack numbers and window/checksum afresh per packet;
    /// otherwise the header is the same constant for every packet.
    pub random_header: bool,
    pub transport: Protocol,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            tail_bytes: 64,
            head_bytes: 16,
            successors: 2,
            enter_head: 0.1,
            stay_head: 0.95,
            payload_min: 40,
            payload_max: 120,
            packets_per_flow: (4, 10),
            burst_packets: (1, 4),
            random_header: true,
            transport: Protocol::Tcp,
            seed: 7,
        }
    }
}

/// Transition structure of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteChain {
    pub tail: Vec<u8>,
    pub head: Vec<u8>,
    /// Preferred successors by byte value; empty for non-head bytes.
    pub successors: Vec<Vec<u8>>,
}

impl ByteChain {
    fn random(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let tail_n = cfg.tail_bytes.clamp(1, 255);
        let head_n = cfg.head_bytes.clamp(1, 256 - tail_n);
        let bytes: Vec<u8> = sample(rng, 256, tail_n + head_n).into_iter().map(|b| b as u8).collect();
        let (tail, head) = bytes.split_at(tail_n);
        let k = cfg.successors.clamp(1, head_n);
        let mut successors = vec![Vec::new(); 256];
        for &b in head {
            successors[b as usize] = sample(rng, head_n, k).into_iter().map(|i| head[i]).collect();
        }
        ByteChain {
            tail: tail.to_vec(),
            head: head.to_vec(),
            successors,
        }
    }

    pub fn emit(&self, len: usize, enter_head: f64, stay_head: f64, rng: &mut Rng) -> Vec<u8> {
        let pick = |set: &[u8], rng: &mut Rng| set[rng.random_range(0..set.len())];
        let mut out = Vec::with_capacity(len);
        let mut cur = pick(&self.tail, rng);
        for _ in 0..len {
            out.push(cur);
            let succ = &self.successors[cur as usize];
            cur = if succ.is_empty() {
                if rng.random_bool(enter_head) {
                    pick(&self.head, rng)
                } else {
                    pick(&self.tail, rng)
                }
            } else if rng.random_bool(stay_head) {
                pick(succ, rng)
            } else {
                pick(&self.tail, rng)
            };
        }
        out
    }
}

pub fn class_chains(cfg: &SynthConfig) -> Vec<ByteChain> {
    (0..cfg.classes)
        .map(|c| ByteChain::random(cfg, &mut seed::rng(cfg.seed, "synth-chain", &[c as u64])))
        .collect()
}

/// A generated flow: clean packets in time order plus the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFlow {
    pub class: usize,
    pub packets: Vec<CleanPacket>,
}

impl SynthConfig {
    /// Bytes of transport header left in each datagram.
    pub fn header_len(&self) -> usize {
        match self.transport {
            Protocol::Tcp => 16,
            Protocol::Udp => 4,
        }
    }

    fn header(&self, payload_len: usize, rng: &mut Rng) -> Vec<u8> {
        let mut h = vec![0u8; self.header_len()];
        match self.transport {
            Protocol::Tcp => {
                h[8] = 0x50;
                h[9] = 0x18;
                if self.random_header {
                    rng.fill(&mut h[..8]);
                    rng.fill(&mut h[10..14]);
                } else {
                    h[10] = 0x01;
                    h[11] = 0xf6;
                }
            }
            Protocol::Udp => {
                h[..2].copy_from_slice(&((8 + payload_len) as u16).to_be_bytes());
                if self.random_header {
                    rng.fill(&mut h[2..]);
                }
            }
        }
        h
    }
}

pub struct Generator {
    cfg: SynthConfig,
    chains: Vec<ByteChain>,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Self {
        let chains = class_chains(&cfg);
        Generator { cfg, chains }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn chains(&self) -> &[ByteChain] {
        &self.chains
    }

    /// Deterministic flow `index` of `class` within stream `stream` (use
    /// different streams for disjoint pre-training and labelled sets).
    pub fn flow(&self, stream: &str, class: usize, index: usize) -> SynthFlow {
        let cfg = &self.cfg;
        let mut rng = seed::rng(cfg.seed, stream, &[class as u64, index as u64]);
        let flow_id = (class * 1_000_003 + index) as u32;
        let client = Ipv4Addr::from(0x0a00_0000 | (flow_id & 0x00ff_ffff));
        let server = Ipv4Addr::new(192, 0, 2, (class + 1) as u8);
        let forward = FiveTuple {
            src_addr: IpAddr::V4(client),
            src_port: 1024 + (rng.random::<u16>() % 60_000),
            dst_addr: IpAddr::V4(server),
            dst_port: 443,
            protocol: cfg.transport,
        };
        let n = rng.random_range(cfg.packets_per_flow.0..=cfg.packets_per_flow.1);
        let runs = cfg.burst_packets.0.max(1)..=cfg.burst_packets.1.max(1);
        let mut packets = Vec::with_capacity(n);
        let mut outbound = true;
        let mut left_in_burst = rng.random_range(runs.clone());
        let base = 1_600_000_000 + index as u32;
        let mut i = 0;
        while i < n || left_in_burst > 0 {
            if left_in_burst == 0 {
                outbound = !outbound;
                left_in_burst = rng.random_range(runs.clone());
            }
            left_in_burst -= 1;
            let len = rng.random_range(cfg.payload_min..=cfg.payload_max);
            let mut datagram = cfg.header(len, &mut rng);
            datagram.extend(self.chains[class].emit(len, cfg.enter_head, cfg.stay_head, &mut rng));
            packets.push(CleanPacket {
                five_tuple: if outbound { forward } else { forward.reversed() },
                timestamp: Timestamp::new(base, (i * 1000) as u32),
                datagram,
                source_index: i as u64,
            });
            i += 1;
        }
        SynthFlow { class, packets }
    }

    pub fn flows(&self, stream: &str, class: usize, count: usize) -> Vec<SynthFlow> {
        (0..count).map(|i| self.flow(stream, class, i)).collect()
    }

    /// Flows cycling through the classes, as an unlabelled mix.
    pub fn mixed_flows(&self, stream: &str, count: usize) -> Vec<SynthFlow> {
        (0..count)
            .map(|i| self.flow(stream, i % self.cfg.classes, i / self.cfg.classes))
            .collect()
    }
}

/// Writes flows as an Ethernet/IPv4 capture.
pub fn write_capture(path: impl AsRef<Path>, flows: &[SynthFlow]) -> Result<(), CaptureError> {
    let mut w = CaptureWriter::create(path)?;
    for flow in flows {
        for p in &flow.packets {
            w.write_frame(p.timestamp, &build_ipv4_frame(&p.five_tuple, &p.datagram))?;
        }
    }
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_class_specific() {
        let g = Generator::new(SynthConfig::default());
        assert_eq!(g.flow("s", 1, 3), g.flow("s", 1, 3));
        assert_ne!(g.flow("s", 1, 3), g.flow("t", 1, 3));
        let chains = g.chains();
        assert_eq!(chains.len(), 4);
        assert_ne!(chains[0].tail, chains[1].tail);
        for c in chains {
            assert_eq!((c.tail.len(), c.head.len()), (64, 16));
            assert!(c.head.iter().all(|b| !c.tail.contains(b)));
        }
    }

    #[test]
    fn payload_follows_the_chain() {
        let cfg = SynthConfig::default();
        let g = Generator::new(cfg.clone());
        let chain = &g.chains()[2];
        for p in g.flow("s", 2, 0).packets {
            let payload = &p.datagram[cfg.header_len()..];
            assert!((cfg.payload_min..=cfg.payload_max).contains(&payload.len()));
            assert!(chain.tail.contains(&payload[0]));
            for w in payload.windows(2) {
                assert!(chain.tail.contains(&w[1]) || chain.head.contains(&w[1]));
                if chain.head.contains(&w[0]) && chain.head.contains(&w[1]) {
                    assert!(chain.successors[w[0] as usize].contains(&w[1]));
                }
            }
        }
    }

    #[test]
    fn head_only_after_entering() {
        let never = Generator::new(SynthConfig {
            enter_head: 0.0,
            ..Default::default()
        });
        let chain = &never.chains()[0];
        for p in never.flow("s", 0, 0).packets {
            assert!(p.datagram[16..].iter().all(|b| chain.tail.contains(b)));
        }
        let sticky = Generator::new(SynthConfig {
            enter_head: 1.0,
            stay_head: 1.0,
            ..Default::default()
        });
        let chain = &sticky.chains()[0];
        for p in sticky.flow("s", 0, 0).packets {
            assert!(p.datagram[17..].iter().all(|b| chain.head.contains(b)));
        }
    }

    #[test]
    fn flows_have_both_directions_and_one_key() {
        let g = Generator::new(SynthConfig::default());
        let flows = crate::flow::assemble_flows(g.flow("s", 0, 5).packets);
        assert_eq!(flows.len(), 1);
    }

    #[test]
    fn runs_are_never_cut_short() {
        let cfg = SynthConfig {
            burst_packets: (3, 5),
            ..Default::default()
        };
        let g = Generator::new(cfg);
        for i in 0..20 {
            let f = g.flow("s", i % 4, i);
            let flow = &crate::flow::assemble_flows(f.packets)[0];
            for b in crate::flow::generate_bursts(flow) {
                assert!((3..=5).contains(&b.packets.len()));
            }
        }
    }

    #[test]
    fn udp_header_holds_the_length() {
        let g = Generator::new(SynthConfig {
            transport: Protocol::Udp,
            ..Default::default()
        });
        for p in g.flow("s", 0, 1).packets {
            assert_eq!(p.five_tuple.protocol, Protocol::Udp);
            let len = u16::from_be_bytes([p.datagram[0], p.datagram[1]]) as usize;
            assert_eq!(len, p.datagram.len() + 4);
        }
    }

    #[test]
    fn fixed_header_is_constant() {
        let g = Generator::new(SynthConfig {
            random_header: false,
            ..Default::default()
        });
        let f = g.flow("s", 1, 0);
        let first = &f.packets[0].datagram[..16];
        assert!(f.packets.iter().all(|p| &p.datagram[..16] == first));
    }
}
