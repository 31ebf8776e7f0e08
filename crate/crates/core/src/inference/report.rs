//! Line-delimited report records. Every record carries `schema` and `type`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{
    AliasCandidateSet, FaultLocalization, IntegrityCounts, NatEstimate, OutageAssessment, PathChangeEvent,
    SharedFateGroup, SpoofEpisode,
};

pub const REPORT_SCHEMA: &str = "ihb.report.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Report {
    Outage(OutageAssessment),
    PathEvent(PathChangeEvent),
    SharedFate(SharedFateGroup),
    Spoof(SpoofEpisode),
    Alias(AliasCandidateSet),
    Nat(NatEstimate),
    Fault(FaultLocalization),
    Integrity(IntegrityCounts),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub schema: String,
    #[serde(flatten)]
    pub report: Report,
}

impl From<Report> for ReportRecord {
    fn from(report: Report) -> Self {
        ReportRecord { schema: REPORT_SCHEMA.to_string(), report }
    }
}

impl ReportRecord {
    pub fn to_line(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn write_all<W: Write>(mut out: W, reports: impl IntoIterator<Item = Report>) -> std::io::Result<()> {
        for r in reports {
            let line = ReportRecord::from(r).to_line().map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        out.flush()
    }

    pub fn read_all<R: BufRead>(reader: R) -> Result<Vec<ReportRecord>, serde_json::Error> {
        reader
            .lines()
            .map_while(Result::ok)
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(&l))
            .collect()
    }
}
