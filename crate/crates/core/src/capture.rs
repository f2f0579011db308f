//! Classic packet-capture reading and header stripping.
//!
//! A capture file starts with a 24-byte global header (magic, version 2.4,
//! timezone, sigfigs, snaplen, link type) followed by records, each with a
//! 16-byte header (`ts_sec`, `ts_usec`, `incl_len`, `orig_len`) and
//! `incl_len` bytes of frame data. Both byte orders are accepted; the
//! block-based pcapng format is not.
//!
//! [`decode_frame`] turns an Ethernet frame into a [`CleanPacket`]: the
//! Ethernet header, the IP header and the four port bytes of the transport
//! header are removed, leaving the rest of the transport header plus payload.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC_NATIVE: u32 = 0xa1b2_c3d4;
pub const MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
pub const LINKTYPE_ETHERNET: u32 = 1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const ETHERNET_HEADER_LEN: usize = 14;
const IPV6_HEADER_LEN: usize = 40;
/// Leading transport-header bytes holding the source and destination ports.
const PORT_BYTES: usize = 4;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_ARP: u16 = 0x0806;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;

const IPPROTO_IPIP: u8 = 4;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;
const IPPROTO_IPV6: u8 = 41;
const IPPROTO_GRE: u8 = 47;

const DHCP_PORTS: [u16; 2] = [67, 68];

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("{path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown capture magic {0:#010x} (only classic pcap is supported)")]
    UnknownMagic(u32),
    #[error("capture global header truncated ({0} of 24 bytes)")]
    TruncatedHeader(usize),
    #[error("record {index} truncated: header claims {claimed} bytes, {available} remain")]
    TruncatedRecord {
        index: u64,
        claimed: usize,
        available: usize,
    },
    #[error("malformed packet: {0}")]
    MalformedPacket(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => f.write_str("TCP"),
            Protocol::Udp => f.write_str("UDP"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_addr: IpAddr,
    pub src_port: u16,
    pub dst_addr: IpAddr,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FiveTuple {
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            src_addr: self.dst_addr,
            src_port: self.dst_port,
            dst_addr: self.src_addr,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} {}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.protocol
        )
    }
}

/// Capture timestamp, seconds and microseconds since the epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp {
    pub secs: u32,
    pub micros: u32,
}

impl Timestamp {
    pub fn new(secs: u32, micros: u32) -> Self {
        Timestamp { secs, micros }
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.secs as f64 + self.micros as f64 * 1e-6
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub timestamp: Timestamp,
    pub link_type: u32,
    /// Length of the packet on the wire; `bytes` may be shorter when the
    /// capture was taken with a small snaplen.
    pub orig_len: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanPacket {
    pub five_tuple: FiveTuple,
    pub timestamp: Timestamp,
    /// Transport header without its port bytes, followed by the payload.
    #[serde(with = "hex_bytes")]
    pub datagram: Vec<u8>,
    pub source_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Arp,
    Dhcp,
    Vlan,
    Tunnel,
    NonIp,
    NonTcpUdp,
    Fragment,
    UnsupportedLink,
}

impl SkipReason {
    pub const ALL: [SkipReason; 8] = [
        SkipReason::Arp,
        SkipReason::Dhcp,
        SkipReason::Vlan,
        SkipReason::Tunnel,
        SkipReason::NonIp,
        SkipReason::NonTcpUdp,
        SkipReason::Fragment,
        SkipReason::UnsupportedLink,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SkipReason::Arp => "arp",
            SkipReason::Dhcp => "dhcp",
            SkipReason::Vlan => "vlan",
            SkipReason::Tunnel => "tunnel",
            SkipReason::NonIp => "non_ip",
            SkipReason::NonTcpUdp => "non_tcp_udp",
            SkipReason::Fragment => "fragment",
            SkipReason::UnsupportedLink => "unsupported_link",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Packet(CleanPacket),
    Skip(SkipReason),
}

/// Streaming reader over the records of a classic capture file.
pub struct CaptureReader<R> {
    inner: R,
    swapped: bool,
    link_type: u32,
    snaplen: u32,
    index: u64,
    done: bool,
}

/// Opens `path` and returns a lazy iterator over its frames.
pub fn read_capture(path: impl AsRef<Path>) -> Result<CaptureReader<BufReader<File>>, CaptureError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CaptureError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    CaptureReader::new(BufReader::new(file))
}

/// Reads as many bytes as are available, up to `buf.len()`.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CaptureError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut header)?;
        if got >= 4 {
            let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
            if magic != MAGIC_NATIVE && magic != MAGIC_SWAPPED {
                return Err(CaptureError::UnknownMagic(magic));
            }
        }
        if got < GLOBAL_HEADER_LEN {
            return Err(CaptureError::TruncatedHeader(got));
        }
        // The magic was written in the writer's native order; reading it as
        // little-endian yields MAGIC_NATIVE iff the file is little-endian.
        let swapped = u32::from_le_bytes(header[0..4].try_into().unwrap()) == MAGIC_SWAPPED;
        let word = |off: usize| {
            let b: [u8; 4] = header[off..off + 4].try_into().unwrap();
            if swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        Ok(CaptureReader {
            inner,
            swapped,
            snaplen: word(16),
            link_type: word(20),
            index: 0,
            done: false,
        })
    }

    pub fn link_type(&self) -> u32 {
        self.link_type
    }

    pub fn snaplen(&self) -> u32 {
        self.snaplen
    }

    /// True when the file was written big-endian.
    pub fn is_big_endian(&self) -> bool {
        self.swapped
    }

    fn word(&self, b: &[u8]) -> u32 {
        let b: [u8; 4] = b.try_into().unwrap();
        if self.swapped {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn next_frame(&mut self) -> Result<Option<RawFrame>, CaptureError> {
        let mut rec = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut rec)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(CaptureError::TruncatedRecord {
                index: self.index,
                claimed: RECORD_HEADER_LEN,
                available: got,
            });
        }
        let ts_sec = self.word(&rec[0..4]);
        let ts_usec = self.word(&rec[4..8]);
        let incl_len = self.word(&rec[8..12]) as usize;
        let orig_len = self.word(&rec[12..16]);
        let mut bytes = vec![0u8; incl_len];
        let got = read_full(&mut self.inner, &mut bytes)?;
        if got < incl_len {
            return Err(CaptureError::TruncatedRecord {
                index: self.index,
                claimed: incl_len,
                available: got,
            });
        }
        self.index += 1;
        Ok(Some(RawFrame {
            timestamp: Timestamp::new(ts_sec, ts_usec),
            link_type: self.link_type,
            orig_len,
            bytes,
        }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<RawFrame, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_frame() {
            Ok(Some(frame)) => Some(Ok(frame)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn be16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

/// Strips link, network and port bytes from an Ethernet frame.
///
/// `source_index` is the frame's ordinal within its capture file.
pub fn decode_frame(frame: &RawFrame, source_index: u64) -> Result<Decoded, CaptureError> {
    use CaptureError::MalformedPacket as Malformed;

    if frame.link_type != LINKTYPE_ETHERNET {
        return Ok(Decoded::Skip(SkipReason::UnsupportedLink));
    }
    let b = &frame.bytes;
    if b.len() < ETHERNET_HEADER_LEN {
        return Err(Malformed("frame shorter than an Ethernet header"));
    }
    let ethertype = be16(b, 12);
    let ip_start = ETHERNET_HEADER_LEN;

    let (src_addr, dst_addr, proto, transport_start, ip_end) = match ethertype {
        ETHERTYPE_ARP => return Ok(Decoded::Skip(SkipReason::Arp)),
        ETHERTYPE_VLAN | ETHERTYPE_QINQ => return Ok(Decoded::Skip(SkipReason::Vlan)),
        ETHERTYPE_IPV4 => {
            if b.len() < ip_start + 20 {
                return Err(Malformed("IPv4 header truncated"));
            }
            if b[ip_start] >> 4 != 4 {
                return Err(Malformed("IPv4 version field is not 4"));
            }
            let ihl = (b[ip_start] & 0x0f) as usize * 4;
            if ihl < 20 {
                return Err(Malformed("IPv4 IHL below 5"));
            }
            if b.len() < ip_start + ihl {
                return Err(Malformed("IPv4 options exceed frame"));
            }
            let total_len = be16(b, ip_start + 2) as usize;
            if total_len != 0 && total_len < ihl {
                return Err(Malformed("IPv4 total length shorter than header"));
            }
            let frag = be16(b, ip_start + 6) & 0x1fff;
            let proto = b[ip_start + 9];
            let src = Ipv4Addr::new(b[ip_start + 12], b[ip_start + 13], b[ip_start + 14], b[ip_start + 15]);
            let dst = Ipv4Addr::new(b[ip_start + 16], b[ip_start + 17], b[ip_start + 18], b[ip_start + 19]);
            if frag != 0 {
                return Ok(Decoded::Skip(SkipReason::Fragment));
            }
            // Trailing link-layer padding lies beyond the IP total length;
            // zero total length (segmentation offload) means "rest of frame".
            let end = if total_len == 0 {
                b.len()
            } else {
                (ip_start + total_len).min(b.len())
            };
            (IpAddr::V4(src), IpAddr::V4(dst), proto, ip_start + ihl, end)
        }
        ETHERTYPE_IPV6 => {
            if b.len() < ip_start + IPV6_HEADER_LEN {
                return Err(Malformed("IPv6 header truncated"));
            }
            if b[ip_start] >> 4 != 6 {
                return Err(Malformed("IPv6 version field is not 6"));
            }
            let payload_len = be16(b, ip_start + 4) as usize;
            let next = b[ip_start + 6];
            let mut src = [0u8; 16];
            let mut dst = [0u8; 16];
            src.copy_from_slice(&b[ip_start + 8..ip_start + 24]);
            dst.copy_from_slice(&b[ip_start + 24..ip_start + 40]);
            let start = ip_start + IPV6_HEADER_LEN;
            let end = if payload_len == 0 {
                b.len()
            } else {
                (start + payload_len).min(b.len())
            };
            (IpAddr::V6(Ipv6Addr::from(src)), IpAddr::V6(Ipv6Addr::from(dst)), next, start, end)
        }
        _ => return Ok(Decoded::Skip(SkipReason::NonIp)),
    };

    let protocol = match proto {
        IPPROTO_TCP => Protocol::Tcp,
        IPPROTO_UDP => Protocol::Udp,
        IPPROTO_IPIP | IPPROTO_IPV6 | IPPROTO_GRE => return Ok(Decoded::Skip(SkipReason::Tunnel)),
        _ => return Ok(Decoded::Skip(SkipReason::NonTcpUdp)),
    };
    let segment = &b[transport_start..ip_end];
    match protocol {
        Protocol::Tcp => {
            if segment.len() < 20 {
                return Err(Malformed("TCP header truncated"));
            }
            let data_offset = (segment[12] >> 4) as usize * 4;
            if data_offset < 20 || data_offset > segment.len() {
                return Err(Malformed("TCP data offset inconsistent with segment length"));
            }
        }
        Protocol::Udp => {
            if segment.len() < 8 {
                return Err(Malformed("UDP header truncated"));
            }
        }
    }
    let src_port = be16(segment, 0);
    let dst_port = be16(segment, 2);
    if protocol == Protocol::Udp && (DHCP_PORTS.contains(&src_port) || DHCP_PORTS.contains(&dst_port)) {
        return Ok(Decoded::Skip(SkipReason::Dhcp));
    }
    Ok(Decoded::Packet(CleanPacket {
        five_tuple: FiveTuple {
            src_addr,
            src_port,
            dst_addr,
            dst_port,
            protocol,
        },
        timestamp: frame.timestamp,
        datagram: segment[PORT_BYTES..].to_vec(),
        source_index,
    }))
}

/// Per-reason counts of frames that `decode_frame` skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub arp: u64,
    pub dhcp: u64,
    pub vlan: u64,
    pub tunnel: u64,
    pub non_ip: u64,
    pub non_tcp_udp: u64,
    pub fragment: u64,
    pub unsupported_link: u64,
    pub malformed: u64,
}

impl SkipCounts {
    pub fn record(&mut self, reason: SkipReason) {
        let slot = match reason {
            SkipReason::Arp => &mut self.arp,
            SkipReason::Dhcp => &mut self.dhcp,
            SkipReason::Vlan => &mut self.vlan,
            SkipReason::Tunnel => &mut self.tunnel,
            SkipReason::NonIp => &mut self.non_ip,
            SkipReason::NonTcpUdp => &mut self.non_tcp_udp,
            SkipReason::Fragment => &mut self.fragment,
            SkipReason::UnsupportedLink => &mut self.unsupported_link,
        };
        *slot += 1;
    }

    pub fn total(&self) -> u64 {
        self.arp
            + self.dhcp
            + self.vlan
            + self.tunnel
            + self.non_ip
            + self.non_tcp_udp
            + self.fragment
            + self.unsupported_link
            + self.malformed
    }

    pub fn merge(&mut self, other: &SkipCounts) {
        self.arp += other.arp;
        self.dhcp += other.dhcp;
        self.vlan += other.vlan;
        self.tunnel += other.tunnel;
        self.non_ip += other.non_ip;
        self.non_tcp_udp += other.non_tcp_udp;
        self.fragment += other.fragment;
        self.unsupported_link += other.unsupported_link;
        self.malformed += other.malformed;
    }
}

/// Reads a whole capture and decodes every frame. Malformed frames are
/// counted rather than aborting the file; record-level errors abort.
pub fn ingest_capture(path: impl AsRef<Path>) -> Result<(Vec<CleanPacket>, SkipCounts), CaptureError> {
    let mut packets = Vec::new();
    let mut skips = SkipCounts::default();
    for (index, frame) in read_capture(path)?.enumerate() {
        let frame = frame?;
        match decode_frame(&frame, index as u64) {
            Ok(Decoded::Packet(p)) => packets.push(p),
            Ok(Decoded::Skip(reason)) => skips.record(reason),
            Err(CaptureError::MalformedPacket(why)) => {
                log::debug!("frame {index}: {why}");
                skips.malformed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((packets, skips))
}

/// Little-endian classic capture writer, used for fixtures and the
/// synthetic traffic generator.
pub struct CaptureWriter<W: Write> {
    inner: W,
}

impl CaptureWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, CaptureError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| CaptureError::Open {
            path: path.to_path_buf(),
            source,
        })?;
        CaptureWriter::new(BufWriter::new(file), LINKTYPE_ETHERNET)
    }
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut inner: W, link_type: u32) -> Result<Self, CaptureError> {
        inner.write_all(&MAGIC_NATIVE.to_le_bytes())?;
        inner.write_all(&2u16.to_le_bytes())?;
        inner.write_all(&4u16.to_le_bytes())?;
        inner.write_all(&0i32.to_le_bytes())?;
        inner.write_all(&0u32.to_le_bytes())?;
        inner.write_all(&65535u32.to_le_bytes())?;
        inner.write_all(&link_type.to_le_bytes())?;
        Ok(CaptureWriter { inner })
    }

    pub fn write_frame(&mut self, ts: Timestamp, bytes: &[u8]) -> Result<(), CaptureError> {
        let len = bytes.len() as u32;
        self.inner.write_all(&ts.secs.to_le_bytes())?;
        self.inner.write_all(&ts.micros.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(bytes)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, CaptureError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Builds an Ethernet + IPv4 frame around a transport segment whose first
/// four bytes are the ports taken from `tuple`.
///
/// `rest` is everything after the port bytes (for TCP: sequence number
/// onward; for UDP: length, checksum and payload).
pub fn build_ipv4_frame(tuple: &FiveTuple, rest: &[u8]) -> Vec<u8> {
    let (src, dst) = match (tuple.src_addr, tuple.dst_addr) {
        (IpAddr::V4(s), IpAddr::V4(d)) => (s, d),
        _ => panic!("build_ipv4_frame needs IPv4 addresses"),
    };
    let proto = match tuple.protocol {
        Protocol::Tcp => IPPROTO_TCP,
        Protocol::Udp => IPPROTO_UDP,
    };
    let seg_len = PORT_BYTES + rest.len();
    let total = 20 + seg_len;
    let mut f = Vec::with_capacity(ETHERNET_HEADER_LEN + total);
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    f.push(0x45);
    f.push(0);
    f.extend_from_slice(&(total as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0, 0x40, 0]);
    f.push(64);
    f.push(proto);
    f.extend_from_slice(&[0, 0]);
    f.extend_from_slice(&src.octets());
    f.extend_from_slice(&dst.octets());
    f.extend_from_slice(&tuple.src_port.to_be_bytes());
    f.extend_from_slice(&tuple.dst_port.to_be_bytes());
    f.extend_from_slice(rest);
    f
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
