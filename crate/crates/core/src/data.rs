//! Study data model: questionnaire grids, per-subject event paths, and the
//! long-format CSV interchange (one row per subject x event x grid time).

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// A study time expressed as an integer number of ticks of a declared unit.
/// Integer ticks make tie detection exact.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Time(pub i64);

/// How many ticks make up one study-time unit. A file time `x` is accepted
/// only if `round(x * ticks) / ticks` reproduces `x` bit for bit.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TimeScale {
    ticks_per_unit: i64,
}

impl Default for TimeScale {
    fn default() -> Self {
        TimeScale { ticks_per_unit: 1 }
    }
}

impl TimeScale {
    pub fn new(ticks_per_unit: i64) -> Result<Self> {
        if ticks_per_unit <= 0 {
            return Err(Error::Config(format!(
                "ticks per unit must be positive, got {ticks_per_unit}"
            )));
        }
        Ok(TimeScale { ticks_per_unit })
    }

    pub fn ticks_per_unit(&self) -> i64 {
        self.ticks_per_unit
    }

    pub fn to_ticks(&self, value: f64) -> Result<Time> {
        if !value.is_finite() {
            return Err(Error::Schema(format!("non-finite time {value}")));
        }
        let ticks = (value * self.ticks_per_unit as f64).round();
        if ticks.abs() > 9.0e15 || self.value(Time(ticks as i64)) != value {
            return Err(Error::Schema(format!(
                "time {value} is not a multiple of 1/{} time units",
                self.ticks_per_unit
            )));
        }
        Ok(Time(ticks as i64))
    }

    pub fn value(&self, t: Time) -> f64 {
        t.0 as f64 / self.ticks_per_unit as f64
    }
}

/// Ordered questionnaire return times for one event type. The origin is
/// implicit and never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionnaireGrid {
    times: Vec<Time>,
}

impl QuestionnaireGrid {
    pub fn new(times: Vec<Time>) -> Result<Self> {
        if let Some(t) = times.iter().find(|t| t.0 <= 0) {
            return Err(Error::Invalid(format!(
                "grid times must be positive, found tick {}",
                t.0
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("grid times must be strictly increasing".into()));
        }
        Ok(QuestionnaireGrid { times })
    }

    pub fn times(&self) -> &[Time] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One subject's observations for one event type.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPath {
    pub censor: Time,
    pub grid: QuestionnaireGrid,
    pub self_report: Vec<bool>,
    pub true_status: Option<Vec<bool>>,
    /// Z(t), one vector per grid time.
    pub covariates: Vec<Vec<f64>>,
    /// Raw measurement-error predictors W(t), one vector per grid time.
    pub me_predictors: Vec<Vec<f64>>,
}

fn is_monotone(path: &[bool]) -> bool {
    path.windows(2).all(|w| w[0] <= w[1])
}

impl EventPath {
    pub fn new(
        censor: Time,
        grid: QuestionnaireGrid,
        self_report: Vec<bool>,
        true_status: Option<Vec<bool>>,
        covariates: Vec<Vec<f64>>,
        me_predictors: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let path = EventPath { censor, grid, self_report, true_status, covariates, me_predictors };
        if let Some(problem) = path.problem() {
            return Err(Error::Invalid(problem));
        }
        Ok(path)
    }

    /// First invariant violation, if any.
    fn problem(&self) -> Option<String> {
        let n = self.grid.len();
        if self.censor.0 <= 0 {
            return Some("censoring time must be positive".into());
        }
        if self.self_report.len() != n
            || self.covariates.len() != n
            || self.me_predictors.len() != n
            || self.true_status.as_ref().is_some_and(|d| d.len() != n)
        {
            return Some("path lengths differ from the grid length".into());
        }
        if !is_monotone(&self.self_report) {
            return Some("non-monotone self-report path".into());
        }
        if self.true_status.as_ref().is_some_and(|d| !is_monotone(d)) {
            return Some("non-monotone true-status path".into());
        }
        if let Some(first) = self.covariates.first() {
            if self.covariates.iter().any(|z| z.len() != first.len()) {
                return Some("covariate dimension varies across grid times".into());
            }
        }
        if let Some(first) = self.me_predictors.first() {
            if self.me_predictors.iter().any(|w| w.len() != first.len()) {
                return Some("predictor dimension varies across grid times".into());
            }
        }
        None
    }

    pub fn times(&self) -> &[Time] {
        self.grid.times()
    }

    /// Number of grid times `t` with `C >= t`.
    pub fn n_effective(&self) -> usize {
        self.times().partition_point(|t| *t <= self.censor)
    }

    /// Index of the first effective grid time with a true event.
    pub fn first_true_event(&self) -> Option<usize> {
        let d = self.true_status.as_ref()?;
        d[..self.n_effective()].iter().position(|&x| x)
    }

    /// Index of the first effective grid time with a self-reported event.
    pub fn first_report(&self) -> Option<usize> {
        self.self_report[..self.n_effective()].iter().position(|&x| x)
    }

    /// Z at an arbitrary time: last grid value at or before `t`, or the
    /// first grid value when `t` precedes the grid.
    pub fn covariates_at(&self, t: Time) -> &[f64] {
        let idx = self.times().partition_point(|s| *s <= t);
        &self.covariates[idx.saturating_sub(1)]
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Event type `k` lives at index `k - 1`.
    pub events: Vec<EventPath>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Main,
    Validation,
}

/// Validation-study design relative to the main study.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub enum StudyDesign {
    /// External validation study, disjoint from the main study.
    #[serde(rename = "MS/EVS")]
    External,
    /// Internal validation study, a subset of the main study.
    #[serde(rename = "MS/IVS")]
    Internal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyDataset {
    pub subjects: Vec<SubjectRecord>,
    pub n_events: usize,
    pub role: Role,
    pub design: Option<StudyDesign>,
    pub scale: TimeScale,
}

impl StudyDataset {
    /// Builds a dataset and enforces its invariants.
    pub fn new(subjects: Vec<SubjectRecord>, role: Role, scale: TimeScale) -> Result<Self> {
        let n_events = subjects.iter().map(|s| s.events.len()).max().unwrap_or(0);
        let data = StudyDataset { subjects, n_events, role, design: None, scale };
        data.validate()?;
        Ok(data)
    }

    pub fn with_design(mut self, design: StudyDesign) -> Self {
        self.design = Some(design);
        self
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match check_dataset(self).violations.into_iter().next() {
            Some(v) => Err(Error::Invalid(v)),
            None => Ok(()),
        }
    }

    pub fn time_value(&self, t: Time) -> f64 {
        self.scale.value(t)
    }

    pub fn has_true_status(&self) -> bool {
        !self.subjects.is_empty()
            && self
                .subjects
                .iter()
                .all(|s| s.events.iter().all(|e| e.true_status.is_some()))
    }

    /// Subjects whose id is (not) in `ids`, keeping order.
    pub fn filter_ids(&self, ids: &std::collections::HashSet<&str>, keep: bool) -> StudyDataset {
        StudyDataset {
            subjects: self
                .subjects
                .iter()
                .filter(|s| ids.contains(s.id.as_str()) == keep)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Column names of the long-format CSV.
#[derive(Clone, Debug)]
pub struct Schema {
    pub subject_id: String,
    pub event_type: String,
    pub time: String,
    pub self_report: String,
    pub censor_time: String,
    pub true_status: String,
    /// Prefix of covariate columns (`z_1`, `z_2`, ...).
    pub covariate_prefix: String,
    /// Prefix of measurement-error predictor columns (`w_1`, ...).
    pub predictor_prefix: String,
    pub scale: TimeScale,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            subject_id: "subject_id".into(),
            event_type: "event_type".into(),
            time: "time".into(),
            self_report: "self_report".into(),
            censor_time: "censor_time".into(),
            true_status: "true_status".into(),
            covariate_prefix: "z_".into(),
            predictor_prefix: "w_".into(),
            scale: TimeScale::default(),
        }
    }
}

fn numbered_columns(headers: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        if let Some(rest) = name.strip_prefix(prefix) {
            let n: usize = rest
                .parse()
                .map_err(|_| Error::Schema(format!("bad column name {name:?}")))?;
            found.push((n, col));
        }
    }
    found.sort();
    for (expected, (n, _)) in (1..).zip(&found) {
        if *n != expected {
            return Err(Error::Schema(format!(
                "columns {prefix}1..{prefix}{} must be numbered consecutively",
                found.len()
            )));
        }
    }
    Ok(found.into_iter().map(|(_, c)| c).collect())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing required column {name:?}")))
}

fn cell<'r>(rec: &'r csv::StringRecord, col: usize, name: &str, line: u64) -> Result<&'r str> {
    let v = rec.get(col).unwrap_or("").trim();
    if v.is_empty() {
        return Err(Error::Schema(format!("line {line}: missing value for {name}")));
    }
    Ok(v)
}

fn parse_f64(v: &str, name: &str, line: u64) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::Schema(format!("line {line}: cannot parse {name} = {v:?}")))?;
    if !x.is_finite() {
        return Err(Error::Schema(format!("line {line}: non-finite {name}")));
    }
    Ok(x)
}

fn parse_flag(v: &str, name: &str, line: u64) -> Result<bool> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Schema(format!("line {line}: {name} must be 0 or 1, got {v:?}"))),
    }
}

struct Row {
    time: Time,
    censor: Time,
    self_report: bool,
    true_status: Option<bool>,
    z: Vec<f64>,
    w: Vec<f64>,
}

pub fn load_study(path: impl AsRef<Path>, role: Role, schema: &Schema) -> Result<StudyDataset> {
    let file = File::open(path.as_ref())?;
    read_study(file, role, schema)
}

/// Parses a long-format study table. Rows are grouped per subject and event
/// and sorted by time; subjects keep their first-appearance order.
pub fn read_study<R: Read>(reader: R, role: Role, schema: &Schema) -> Result<StudyDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Schema("empty file".into()));
    }
    let c_id = column(&headers, &schema.subject_id)?;
    let c_event = column(&headers, &schema.event_type)?;
    let c_time = column(&headers, &schema.time)?;
    let c_report = column(&headers, &schema.self_report)?;
    let c_censor = column(&headers, &schema.censor_time)?;
    let c_true = headers.iter().position(|h| h == schema.true_status);
    if role == Role::Validation && c_true.is_none() {
        return Err(Error::Schema(format!(
            "validation data requires a {:?} column",
            schema.true_status
        )));
    }
    let z_cols = numbered_columns(&headers, &schema.covariate_prefix)?;
    let w_cols = numbered_columns(&headers, &schema.predictor_prefix)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Vec<Row>>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let id = cell(&rec, c_id, &schema.subject_id, line)?.to_string();
        let event: usize = cell(&rec, c_event, &schema.event_type, line)?
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Schema(format!("line {line}: event_type must be an integer >= 1")))?;
        let time = schema.scale.to_ticks(parse_f64(cell(&rec, c_time, &schema.time, line)?, "time", line)?)?;
        let censor = schema
            .scale
            .to_ticks(parse_f64(cell(&rec, c_censor, &schema.censor_time, line)?, "censor_time", line)?)?;
        let self_report = parse_flag(cell(&rec, c_report, &schema.self_report, line)?, "self_report", line)?;
        let true_status = match c_true {
            Some(c) => Some(parse_flag(cell(&rec, c, &schema.true_status, line)?, "true_status", line)?),
            None => None,
        };
        let z = z_cols
            .iter()
            .map(|&c| parse_f64(cell(&rec, c, &headers[c], line)?, &headers[c], line))
            .collect::<Result<Vec<_>>>()?;
        let w = w_cols
            .iter()
            .map(|&c| parse_f64(cell(&rec, c, &headers[c], line)?, &headers[c], line))
            .collect::<Result<Vec<_>>>()?;

        let slots = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if slots.len() < event {
            slots.resize_with(event, Vec::new);
        }
        slots[event - 1].push(Row { time, censor, self_report, true_status, z, w });
    }
    if order.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let slots = groups.remove(&id).expect("grouped");
        let mut events = Vec::with_capacity(slots.len());
        for (k, mut rows) in slots.into_iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::Schema(format!(
                    "subject {id}: no rows for event {} although a later event type is present",
                    k + 1
                )));
            }
            rows.sort_by_key(|r| r.time);
            if rows.windows(2).any(|w| w[0].time == w[1].time) {
                return Err(Error::Schema(format!(
                    "subject {id}, event {}: duplicate (subject, event, time) rows",
                    k + 1
                )));
            }
            let censor = rows[0].censor;
            if rows.iter().any(|r| r.censor != censor) {
                return Err(Error::Invalid(format!(
                    "subject {id}, event {}: censor_time differs across rows",
                    k + 1
                )));
            }
            let grid = QuestionnaireGrid::new(rows.iter().map(|r| r.time).collect())
                .map_err(|e| Error::Invalid(format!("subject {id}, event {}: {e}", k + 1)))?;
            let true_status = if c_true.is_some() {
                Some(rows.iter().map(|r| r.true_status.unwrap_or(false)).collect())
            } else {
                None
            };
            let path = EventPath::new(
                censor,
                grid,
                rows.iter().map(|r| r.self_report).collect(),
                true_status,
                rows.iter().map(|r| r.z.clone()).collect(),
                rows.into_iter().map(|r| r.w).collect(),
            )
            .map_err(|e| Error::Invalid(format!("subject {id}, event {}: {e}", k + 1)))?;
            events.push(path);
        }
        subjects.push(SubjectRecord { id, events });
    }
    let n_events = subjects.iter().map(|s| s.events.len()).max().unwrap_or(0);
    Ok(StudyDataset { subjects, n_events, role, design: None, scale: schema.scale })
}

/// Writes the dataset in the canonical long format.
pub fn write_study<W: Write>(data: &StudyDataset, writer: W) -> Result<()> {
    let p = data
        .subjects
        .iter()
        .flat_map(|s| s.events.iter())
        .map(EventPath::covariate_dim)
        .max()
        .unwrap_or(0);
    let q = data
        .subjects
        .iter()
        .flat_map(|s| s.events.iter())
        .map(|e| e.me_predictors.first().map_or(0, Vec::len))
        .max()
        .unwrap_or(0);
    let with_true = data.has_true_status();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> =
        ["subject_id", "event_type", "time", "self_report", "censor_time"].map(String::from).to_vec();
    if with_true {
        header.push("true_status".into());
    }
    header.extend((1..=p).map(|j| format!("z_{j}")));
    header.extend((1..=q).map(|j| format!("w_{j}")));
    wtr.write_record(&header)?;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for s in &data.subjects {
        for (k, e) in s.events.iter().enumerate() {
            for (j, &t) in e.times().iter().enumerate() {
                let mut row = vec![
                    s.id.clone(),
                    (k + 1).to_string(),
                    data.time_value(t).to_string(),
                    flag(e.self_report[j]),
                    data.time_value(e.censor).to_string(),
                ];
                if with_true {
                    row.push(flag(e.true_status.as_ref().expect("checked")[j]));
                }
                row.extend(e.covariates[j].iter().map(f64::to_string));
                row.extend(e.me_predictors[j].iter().map(f64::to_string));
                wtr.write_record(&row)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EventSummary {
    pub event: usize,
    pub n_subjects: usize,
    /// Subjects with a self-reported event by their censoring time.
    pub reported_cases: usize,
    pub true_cases: Option<usize>,
    /// Fraction of subjects without a self-reported event by censoring.
    pub censored_fraction: f64,
    pub true_censored_fraction: Option<f64>,
    pub covariate_dim: usize,
    pub predictor_dim: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub n_subjects: usize,
    pub n_events: usize,
    pub role: Role,
    pub events: Vec<EventSummary>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Summarizes a dataset and lists every invariant violation found.
pub fn check_dataset(data: &StudyDataset) -> ValidationReport {
    let mut violations = Vec::new();
    if data.subjects.is_empty() {
        violations.push("dataset has no subjects".to_string());
    }
    for s in &data.subjects {
        if s.events.len() != data.n_events {
            violations.push(format!(
                "subject {}: has {} event types, dataset has {}",
                s.id,
                s.events.len(),
                data.n_events
            ));
        }
        for (k, e) in s.events.iter().enumerate() {
            if let Some(p) = e.problem() {
                violations.push(format!("subject {}, event {}: {p}", s.id, k + 1));
            }
            if data.role == Role::Validation && e.true_status.is_none() {
                violations.push(format!("subject {}, event {}: validation record without true status", s.id, k + 1));
            }
        }
    }

    let mut events = Vec::with_capacity(data.n_events);
    for k in 0..data.n_events {
        let paths: Vec<&EventPath> = data.subjects.iter().filter_map(|s| s.events.get(k)).collect();
        let n = paths.len();
        let reported = paths.iter().filter(|e| e.first_report().is_some()).count();
        let with_truth = paths.iter().all(|e| e.true_status.is_some()) && n > 0;
        let true_cases = with_truth.then(|| paths.iter().filter(|e| e.first_true_event().is_some()).count());
        let frac = |cases: usize| if n == 0 { 0.0 } else { 1.0 - cases as f64 / n as f64 };
        let z_dims: Vec<usize> = paths.iter().map(|e| e.covariate_dim()).collect();
        let w_dims: Vec<usize> = paths.iter().map(|e| e.me_predictors.first().map_or(0, Vec::len)).collect();
        if z_dims.windows(2).any(|w| w[0] != w[1]) {
            violations.push(format!("event {}: covariate dimension differs across subjects", k + 1));
        }
        if w_dims.windows(2).any(|w| w[0] != w[1]) {
            violations.push(format!("event {}: predictor dimension differs across subjects", k + 1));
        }
        if n > 0 && paths.iter().all(|e| e.n_effective() == 0) {
            violations.push(format!("event {}: all censored before first questionnaire", k + 1));
        }
        events.push(EventSummary {
            event: k + 1,
            n_subjects: n,
            reported_cases: reported,
            true_cases,
            censored_fraction: frac(reported),
            true_censored_fraction: true_cases.map(frac),
            covariate_dim: z_dims.first().copied().unwrap_or(0),
            predictor_dim: w_dims.first().copied().unwrap_or(0),
        });
    }
    ValidationReport { n_subjects: data.subjects.len(), n_events: data.n_events, role: data.role, events, violations }
}
