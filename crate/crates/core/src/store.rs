//! JSON-lines packet store and label maps.
//!
//! A store line is one clean packet plus the capture file it came from.
//! A label map assigns class names to flows, one rule per line:
//!
//! ```text
//! # comment
//! file  captures/chat-*.pcap  chat
//! host  192.0.2.7             video
//! host  192.0.2.8:443         video
//! ```
//!
//! `file` rules glob-match the capture path (or its file name); `host` rules
//! match either endpoint of the flow, optionally with a port. The first
//! matching rule wins and unmatched flows are left out.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::CleanPacket;
use crate::flow::{assemble_flows, Endpoint, Flow};
use crate::train::ClassSource;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredPacket {
    pub file: String,
    #[serde(flatten)]
    pub packet: CleanPacket,
}

pub fn write_store(path: impl AsRef<Path>, packets: &[StoredPacket]) -> Result<(), StoreError> {
    let path = path.as_ref();
    crate::io::write_atomic(path, |w| {
        for p in packets {
            serde_json::to_writer(&mut *w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(io_err(path))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<Vec<StoredPacket>, StoreError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Flows of each capture file, assembled separately so identical tuples in
/// different files never merge.
pub fn flows_by_file(packets: &[StoredPacket]) -> Vec<(String, Vec<Flow>)> {
    let mut groups: BTreeMap<&str, Vec<CleanPacket>> = BTreeMap::new();
    for p in packets {
        groups.entry(&p.file).or_default().push(p.packet.clone());
    }
    groups
        .into_iter()
        .map(|(file, pk)| (file.to_string(), assemble_flows(pk)))
        .collect()
}

#[derive(Debug, Clone)]
pub enum Rule {
    File(glob::Pattern),
    Host { addr: IpAddr, port: Option<u16> },
}

#[derive(Debug, Clone)]
pub struct LabelMap {
    pub rules: Vec<(Rule, String)>,
}

fn parse_host(s: &str) -> Option<(IpAddr, Option<u16>)> {
    if let Ok(a) = s.parse() {
        return Some((a, None));
    }
    let ep: std::net::SocketAddr = s.parse().ok()?;
    Some((ep.ip(), Some(ep.port())))
}

impl LabelMap {
    pub fn parse(text: &str, path: &str) -> Result<Self, StoreError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| StoreError::Malformed {
                path: path.to_string(),
                line: i + 1,
                reason,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [kind, target, class] = parts[..] else {
                return Err(bad(format!("expected `<file|host> <pattern> <class>`, got {line:?}")));
            };
            let rule = match kind {
                "file" => Rule::File(glob::Pattern::new(target).map_err(|e| bad(e.to_string()))?),
                "host" => {
                    let (addr, port) = parse_host(target).ok_or_else(|| bad(format!("bad address {target:?}")))?;
                    Rule::Host { addr, port }
                }
                _ => return Err(bad(format!("unknown rule kind {kind:?}"))),
            };
            rules.push((rule, class.to_string()));
        }
        Ok(LabelMap { rules })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn label(&self, file: &str, flow: &Flow) -> Option<&str> {
        let name = Path::new(file).file_name().and_then(|n| n.to_str()).unwrap_or(file);
        let hits = |ep: &Endpoint, addr: &IpAddr, port: &Option<u16>| ep.addr == *addr && port.is_none_or(|p| p == ep.port);
        self.rules
            .iter()
            .find(|(rule, _)| match rule {
                Rule::File(g) => g.matches(file) || g.matches(name),
                Rule::Host { addr, port } => hits(&flow.key.lo, addr, port) || hits(&flow.key.hi, addr, port),
            })
            .map(|(_, c)| c.as_str())
    }
}

/// Labelled flows grouped per class (classes sorted by name), plus the
/// number of flows no rule matched.
pub fn class_sources(packets: &[StoredPacket], labels: &LabelMap) -> (Vec<ClassSource>, usize) {
    let mut classes: BTreeMap<String, Vec<Vec<Vec<u8>>>> = BTreeMap::new();
    let mut unlabelled = 0;
    for (file, flows) in flows_by_file(packets) {
        for flow in &flows {
            match labels.label(&file, flow) {
                Some(c) => classes
                    .entry(c.to_string())
                    .or_default()
                    .push(flow.packets.iter().map(|p| p.packet.datagram.clone()).collect()),
                None => unlabelled += 1,
            }
        }
    }
    let sources = classes.into_iter().map(|(name, flows)| ClassSource { name, flows }).collect();
    (sources, unlabelled)
}
