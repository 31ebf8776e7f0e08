//! Line-delimited record logs and the on-disk snapshot format.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Snapshot, SourceState, StoreConfig, StoreCounters};
use crate::wire::ObservedHeartbeat;

pub const SNAPSHOT_FORMAT: &str = "ihb.snapshot.v1";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unsupported snapshot format {0:?}")]
    Format(String),
}

/// One `ObservedHeartbeat` per line; blank lines are skipped.
pub fn read_records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<ObservedHeartbeat, RecordError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(RecordError::Io(e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(|source| RecordError::Parse { line: i + 1, source })),
    })
}

pub fn write_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a ObservedHeartbeat>,
) -> Result<(), RecordError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Serialized form of a [`Snapshot`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotFile {
    pub format: String,
    pub config: StoreConfig,
    pub counters: StoreCounters,
    pub states: Vec<SourceState>,
}

impl From<&Snapshot> for SnapshotFile {
    fn from(s: &Snapshot) -> Self {
        SnapshotFile {
            format: SNAPSHOT_FORMAT.to_string(),
            config: s.config.clone(),
            counters: s.counters,
            states: s.iter().cloned().collect(),
        }
    }
}

pub fn write_snapshot<W: Write>(mut out: W, snapshot: &Snapshot) -> Result<(), RecordError> {
    serde_json::to_writer(&mut out, &SnapshotFile::from(snapshot))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_snapshot<R: io::Read>(reader: R) -> Result<Snapshot, RecordError> {
    let file: SnapshotFile = serde_json::from_reader(reader)?;
    if file.format != SNAPSHOT_FORMAT {
        return Err(RecordError::Format(file.format));
    }
    Ok(Snapshot {
        config: file.config,
        counters: file.counters,
        states: file.states.into_iter().map(|s| (s.key, Arc::new(s))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::tests::obs;
    use crate::observer::StateStore;

    #[test]
    fn record_log_roundtrip_and_determinism() {
        let records: Vec<_> = (0..50u32)
            .map(|i| obs(u64::from(i) * 1_000_000_000, [10, 0, (i % 3) as u8, 1], (i % 2) as u16, i, 64, 50))
            .collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        let back: Vec<_> = read_records(&buf[..]).collect::<Result<_, _>>().unwrap();
        assert_eq!(back, records);

        let build = || {
            let mut st = StateStore::new(StoreConfig::new("44.0.0.0/8".parse().unwrap()));
            for r in read_records(&buf[..]) {
                st.ingest(&r.unwrap()).unwrap();
            }
            st.snapshot()
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);

        let mut file = Vec::new();
        write_snapshot(&mut file, &a).unwrap();
        assert_eq!(read_snapshot(&file[..]).unwrap(), a);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "\n{\"bad\": 1}\n";
        let err = read_records(text.as_bytes()).next().unwrap().unwrap_err();
        assert!(matches!(err, RecordError::Parse { line: 2, .. }));
    }

    #[test]
    fn rejects_other_snapshot_versions() {
        let st = StateStore::new(StoreConfig::new("44.0.0.0/8".parse().unwrap()));
        let mut file = SnapshotFile::from(&st.snapshot());
        file.format = "ihb.snapshot.v0".into();
        let text = serde_json::to_vec(&file).unwrap();
        assert!(matches!(read_snapshot(&text[..]), Err(RecordError::Format(_))));
    }
}
