//! Ground-truth log, one JSON record per line.

use std::io::{BufRead, Write};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::HostId;

#[derive(Debug, Error)]
pub enum TruthError {
    #[error("truth line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("truth log has no run record")]
    MissingRun,
}

/// Per-source emission accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub source: String,
    pub emitted: u64,
    pub in_lens: u64,
    pub out_of_lens: u64,
    /// Dropped by an active outage.
    pub suppressed: u64,
}

impl Totals {
    pub fn new(source: &str) -> Self {
        Totals { source: source.to_string(), emitted: 0, in_lens: 0, out_of_lens: 0, suppressed: 0 }
    }
}

/// Who sent trace line `index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub index: u64,
    pub origin: String,
    pub spoofed: bool,
    pub hops: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TruthRecord {
    Run {
        run_id: String,
        seed: u64,
        scenario_digest: String,
        trace_digest: String,
        arrivals: u64,
        lens: Ipv4Net,
        start_ns: u64,
        end_ns: u64,
    },
    Host {
        name: String,
        addresses: Vec<Ipv4Addr>,
        rate_uhz: u32,
        nat_group: Option<String>,
    },
    /// Sources inside `prefix` were silenced; `addresses` lists those scripted.
    Outage {
        index: usize,
        prefix: Ipv4Net,
        start_ns: u64,
        end_ns: u64,
        addresses: Vec<Ipv4Addr>,
    },
    RouteShift {
        index: usize,
        prefix: Ipv4Net,
        at_ns: u64,
        delta_hops: i16,
    },
    LoadBalance {
        index: usize,
        host: String,
        addresses: Vec<Ipv4Addr>,
        hop_a: u8,
        hop_b: u8,
        split: f64,
        start_ns: u64,
        end_ns: u64,
    },
    Spoofer {
        index: usize,
        forged_src: Ipv4Addr,
        host_id: HostId,
        hop_count: u8,
        start_ns: u64,
        end_ns: u64,
    },
    /// Scripted hop count of `addr` changed.
    PathChange {
        addr: Ipv4Addr,
        at_ns: u64,
        before: i16,
        after: i16,
    },
    HostId {
        host: String,
        host_id: HostId,
        from_ns: u64,
    },
    Totals(Totals),
    Arrival(Attribution),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    /// `(run_id, trace_digest, arrivals)` of the run header.
    pub fn run_header(&self) -> Option<(&str, &str, u64)> {
        self.records.iter().find_map(|r| match r {
            TruthRecord::Run { run_id, trace_digest, arrivals, .. } => Some((run_id.as_str(), trace_digest.as_str(), *arrivals)),
            _ => None,
        })
    }

    pub fn totals(&self) -> Vec<&Totals> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TruthRecord::Totals(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    pub fn attributions(&self) -> impl Iterator<Item = &Attribution> {
        self.records.iter().filter_map(|r| match r {
            TruthRecord::Arrival(a) => Some(a),
            _ => None,
        })
    }

    /// Address sets of hosts with two or more interfaces.
    pub fn multi_interface_hosts(&self) -> Vec<Vec<Ipv4Addr>> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TruthRecord::Host { addresses, .. } if addresses.len() >= 2 => {
                    let mut a = addresses.clone();
                    a.sort();
                    a.dedup();
                    Some(a)
                }
                _ => None,
            })
            .collect()
    }
}

pub fn write_truth<W: Write>(mut out: W, truth: &GroundTruth) -> Result<(), TruthError> {
    for r in &truth.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_truth<R: BufRead>(reader: R) -> Result<GroundTruth, TruthError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| TruthError::Parse { line: i + 1, source })?);
    }
    let truth = GroundTruth { records };
    truth.run_header().ok_or(TruthError::MissingRun)?;
    Ok(truth)
}
