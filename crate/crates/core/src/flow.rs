//! Session flows and BURST segmentation.
//!
//! Packets sharing a canonical five-tuple form one bidirectional flow. A
//! flow is then cut into BURSTs: maximal runs of consecutive packets
//! travelling in the same direction. There is no inactivity timeout, so a
//! direction change is the only boundary.

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{CleanPacket, FiveTuple, Protocol};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("BURST of {0} bytes is too short to split (need at least 4)")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.addr {
            IpAddr::V4(a) => write!(f, "{a}:{}", self.port),
            IpAddr::V6(a) => write!(f, "[{a}]:{}", self.port),
        }
    }
}

/// Direction-free flow identity: `lo <= hi` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub protocol: Protocol,
}

impl FlowKey {
    pub fn of(t: &FiveTuple) -> FlowKey {
        let a = Endpoint {
            addr: t.src_addr,
            port: t.src_port,
        };
        let b = Endpoint {
            addr: t.dst_addr,
            port: t.dst_port,
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey {
            lo,
            hi,
            protocol: t.protocol,
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}/{}", self.lo, self.hi, self.protocol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Sent by the flow's origin (the sender of its first packet).
    Forward,
    Backward,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowPacket {
    pub packet: CleanPacket,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub id: FlowId,
    pub key: FlowKey,
    pub origin: Endpoint,
    pub packets: Vec<FlowPacket>,
}

impl Flow {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }
}

/// A maximal same-direction run of a flow's packets.
#[derive(Debug, Clone, Copy)]
pub struct Burst<'a> {
    pub direction: Direction,
    pub packets: &'a [FlowPacket],
    pub flow: FlowId,
    pub ordinal: usize,
}

impl Burst<'_> {
    /// Stable identifier used as a corpus `origin` tag.
    pub fn label(&self) -> String {
        format!("f{}b{}", self.flow.0, self.ordinal)
    }

    pub fn bytes(&self) -> Vec<u8> {
        burst_bytes(self)
    }
}

/// Groups packets into bidirectional flows.
///
/// Packets are stably ordered by `(timestamp, source_index)`; flows are
/// returned in order of their first packet and numbered accordingly.
pub fn assemble_flows(packets: impl IntoIterator<Item = CleanPacket>) -> Vec<Flow> {
    let mut packets: Vec<CleanPacket> = packets.into_iter().collect();
    packets.sort_by_key(|p| (p.timestamp, p.source_index));

    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<Flow> = Vec::new();
    for packet in packets {
        let key = FlowKey::of(&packet.five_tuple);
        let src = Endpoint {
            addr: packet.five_tuple.src_addr,
            port: packet.five_tuple.src_port,
        };
        let slot = *index.entry(key).or_insert_with(|| {
            flows.push(Flow {
                id: FlowId(flows.len()),
                key,
                origin: src,
                packets: Vec::new(),
            });
            flows.len() - 1
        });
        let flow = &mut flows[slot];
        let direction = if src == flow.origin {
            Direction::Forward
        } else {
            Direction::Backward
        };
        flow.packets.push(FlowPacket { packet, direction });
    }
    flows
}

/// Splits a flow into BURSTs of consecutive same-direction packets.
pub fn generate_bursts(flow: &Flow) -> Vec<Burst<'_>> {
    flow.packets
        .chunk_by(|a, b| a.direction == b.direction)
        .enumerate()
        .map(|(ordinal, run)| Burst {
            direction: run[0].direction,
            packets: run,
            flow: flow.id,
            ordinal,
        })
        .collect()
}

/// Concatenates the member datagrams of a BURST in packet order.
pub fn burst_bytes(burst: &Burst<'_>) -> Vec<u8> {
    let total = burst.packets.iter().map(|p| p.packet.datagram.len()).sum();
    let mut out = Vec::with_capacity(total);
    for p in burst.packets {
        out.extend_from_slice(&p.packet.datagram);
    }
    out
}

/// Splits a byte string into two halves; an odd middle byte goes to the
/// first half.
pub fn split_half(bytes: &[u8]) -> Result<(&[u8], &[u8]), FlowError> {
    if bytes.len() < 4 {
        return Err(FlowError::TooShort(bytes.len()));
    }
    Ok(bytes.split_at(bytes.len().div_ceil(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::Timestamp;

    fn pkt(fwd: bool, ts: u32, data: &[u8]) -> CleanPacket {
        let a: IpAddr = "192.168.1.2".parse().unwrap();
        let b: IpAddr = "1.1.1.1".parse().unwrap();
        let (sa, sp, da, dp) = if fwd { (a, 5000, b, 443) } else { (b, 443, a, 5000) };
        CleanPacket {
            five_tuple: FiveTuple {
                src_addr: sa,
                src_port: sp,
                dst_addr: da,
                dst_port: dp,
                protocol: Protocol::Tcp,
            },
            timestamp: Timestamp::new(ts, 0),
            datagram: data.to_vec(),
            source_index: ts as u64,
        }
    }

    #[test]
    fn one_flow_for_both_directions() {
        let flows = assemble_flows(vec![pkt(true, 0, &[]), pkt(false, 1, &[]), pkt(true, 2, &[])]);
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].len(), 3);
        assert_eq!(flows[0].origin.port, 5000);
        let dirs: Vec<_> = flows[0].packets.iter().map(|p| p.direction).collect();
        assert_eq!(dirs, [Direction::Forward, Direction::Backward, Direction::Forward]);
    }

    #[test]
    fn distinct_ports_make_distinct_flows() {
        let mut other = pkt(true, 1, &[]);
        other.five_tuple.src_port = 5001;
        assert_eq!(assemble_flows(vec![pkt(true, 0, &[]), other]).len(), 2);
        assert!(assemble_flows(Vec::new()).is_empty());
    }

    #[test]
    fn origin_follows_timestamp_not_input_order() {
        let flows = assemble_flows(vec![pkt(true, 5, &[]), pkt(false, 1, &[])]);
        assert_eq!(flows[0].origin.port, 443);
        assert_eq!(flows[0].packets[0].packet.timestamp.secs, 1);
    }

    #[test]
    fn burst_sizes_follow_direction_runs() {
        let sizes = |dirs: &[bool]| {
            let pk = dirs.iter().enumerate().map(|(i, &d)| pkt(d, i as u32, &[])).collect::<Vec<_>>();
            let flows = assemble_flows(pk);
            generate_bursts(&flows[0]).iter().map(|b| b.packets.len()).collect::<Vec<_>>()
        };
        assert_eq!(sizes(&[true, true, false]), [2, 1]);
        assert_eq!(sizes(&[true, false, true]), [1, 1, 1]);
        assert_eq!(sizes(&[true]), [1]);
    }

    #[test]
    fn burst_bytes_concatenates() {
        let flows = assemble_flows(vec![pkt(true, 0, &[1, 2]), pkt(true, 1, &[3])]);
        let bursts = generate_bursts(&flows[0]);
        assert_eq!(burst_bytes(&bursts[0]), vec![1, 2, 3]);

        let flows = assemble_flows(vec![pkt(true, 0, &[]), pkt(true, 1, &[])]);
        assert!(burst_bytes(&generate_bursts(&flows[0])[0]).is_empty());
    }

    #[test]
    fn split_half_rules() {
        assert_eq!(split_half(&[1, 2, 3, 4, 5, 6]).unwrap(), (&[1, 2, 3][..], &[4, 5, 6][..]));
        assert_eq!(split_half(&[1, 2, 3, 4, 5, 6, 7]).unwrap(), (&[1, 2, 3, 4][..], &[5, 6, 7][..]));
        assert_eq!(split_half(&[1, 2, 3]), Err(FlowError::TooShort(3)));
    }
}
