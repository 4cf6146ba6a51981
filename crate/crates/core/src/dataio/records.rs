use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LabelSet = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialStatus {
    Completed,
    Closed,
    Other,
}

impl TrialStatus {
    /// Only finished trials carry usable outcome labels.
    pub fn is_labeled(self) -> bool {
        matches!(self, TrialStatus::Completed | TrialStatus::Closed)
    }
}

/// One clinical trial: structured key attributes, free-text context and
/// (for historical trials) observed outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    #[serde(default)]
    pub phase: LabelSet,
    #[serde(default)]
    pub countries: LabelSet,
    #[serde(default)]
    pub therapeutic_areas: LabelSet,
    #[serde(default)]
    pub sponsors: LabelSet,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub objective: Option<String>,
    #[serde(default)]
    pub mechanism_of_action: Option<String>,
    #[serde(default)]
    pub indication: Option<String>,
    #[serde(default)]
    pub inclusion_criteria: Option<String>,
    #[serde(default)]
    pub exclusion_criteria: Option<String>,
    pub planned_participants: u32,
    pub planned_sites: u32,
    pub status: TrialStatus,
    #[serde(default)]
    pub actual_enrollment: Option<u32>,
    #[serde(default)]
    pub duration_months: Option<f64>,
}

const KNOWN_FIELDS: &[&str] = &[
    "trial_id",
    "phase",
    "countries",
    "therapeutic_areas",
    "sponsors",
    "title",
    "objective",
    "mechanism_of_action",
    "indication",
    "inclusion_criteria",
    "exclusion_criteria",
    "planned_participants",
    "planned_sites",
    "status",
    "actual_enrollment",
    "duration_months",
];

impl TrialRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.trial_id.is_empty() {
            return Err("empty trial_id".into());
        }
        if self.planned_participants == 0 {
            return Err("planned_participants must be positive".into());
        }
        if self.planned_sites == 0 {
            return Err("planned_sites must be positive".into());
        }
        if self.actual_enrollment == Some(0) {
            return Err("actual_enrollment must be at least 1 when present".into());
        }
        if let Some(d) = self.duration_months {
            if !(d > 0.0) || !d.is_finite() {
                return Err(format!("duration_months must be positive, got {d}"));
            }
        }
        Ok(())
    }
}

/// Per-site outcome of a historical trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteOutcome {
    pub trial_id: String,
    pub site_id: String,
    pub patients: u32,
    pub startup_months: f64,
    /// Patients per month of active enrollment.
    pub rate: f64,
}

/// Floor on the active-enrollment window when deriving rates.
pub const RATE_WINDOW_EPS: f64 = 1e-9;

/// rate = patients / (trial duration − startup).
pub fn derive_site_rate(
    trial_id: &str,
    site_id: &str,
    patients: u32,
    startup_months: f64,
    trial_duration: f64,
) -> Result<SiteOutcome> {
    if !(startup_months >= 0.0) {
        return Err(Error::Data(format!(
            "site {site_id} of {trial_id}: negative startup {startup_months}"
        )));
    }
    if startup_months >= trial_duration {
        return Err(Error::Data(format!(
            "site {site_id} of {trial_id}: startup {startup_months} is not before trial end {trial_duration}"
        )));
    }
    let window = (trial_duration - startup_months).max(RATE_WINDOW_EPS);
    Ok(SiteOutcome {
        trial_id: trial_id.to_string(),
        site_id: site_id.to_string(),
        patients,
        startup_months,
        rate: patients as f64 / window,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub unknown_fields: usize,
}

/// Reads line-delimited JSON trial records. Blank lines are skipped.
pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    Ok(load_trials_with_report(path)?.0)
}

pub fn load_trials_with_report(path: impl AsRef<Path>) -> Result<(Vec<TrialRecord>, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let unknown = obj
            .keys()
            .filter(|k| !KNOWN_FIELDS.contains(&k.as_str()))
            .count();
        if unknown > 0 {
            log::warn!("{}:{lineno}: ignoring {unknown} unknown field(s)", path.display());
            report.unknown_fields += unknown;
        }
        let rec: TrialRecord = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        rec.validate().map_err(malformed)?;
        if let Some(&first) = seen.get(&rec.trial_id) {
            return Err(Error::DuplicateId {
                id: rec.trial_id,
                first,
                second: lineno,
            });
        }
        seen.insert(rec.trial_id.clone(), lineno);
        records.push(rec);
    }
    Ok((records, report))
}

pub fn save_trials(path: impl AsRef<Path>, records: &[TrialRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_sites(path: impl AsRef<Path>) -> Result<Vec<SiteOutcome>> {
    read_jsonl(path)
}

pub fn save_sites(path: impl AsRef<Path>, sites: &[SiteOutcome]) -> Result<()> {
    write_jsonl(path, sites)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Trials with more than 10 planned sites and a duration in [6, 36] months.
pub fn filter_pg_eligible(records: &[TrialRecord]) -> Vec<TrialRecord> {
    records
        .iter()
        .filter(|r| {
            r.planned_sites > 10
                && r
                    .duration_months
                    .is_some_and(|d| (6.0..=36.0).contains(&d))
        })
        .cloned()
        .collect()
}

/// Groups site outcomes by trial id.
pub fn sites_by_trial(sites: &[SiteOutcome]) -> HashMap<&str, Vec<&SiteOutcome>> {
    let mut map: HashMap<&str, Vec<&SiteOutcome>> = HashMap::new();
    for s in sites {
        map.entry(s.trial_id.as_str()).or_default().push(s);
    }
    map
}
