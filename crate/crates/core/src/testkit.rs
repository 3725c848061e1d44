//! Executing compiled test suites against loaded frames.
//!
//! Shares are person-level: a person with many matching records counts
//! once. Code matching is exact after trimming and uppercasing.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{code_conforms, ColumnRole, Frame, Frames};
use crate::gensuite::{Category, ComparisonType, Level, TestSuggestion};
use crate::provider::Unit;
use crate::stats::{
    obs_exp_ratio, point_passes, smd_means, smd_proportions, welch_t, ProportionPair, SampleStats, StatsError,
    P_THRESHOLD, RATIO_HIGH, RATIO_LOW, SMD_THRESHOLD,
};
use crate::vocab::{normalize_code, CodeList};

/// Length of the incidence window ending at the latest diagnosis.
pub const INCIDENCE_WINDOW_DAYS: i64 = 365;
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error("no table with a diagnosis code column is loaded")]
    MissingDiagnosisTable,
    #[error("suite does not match the data: {}", .0.join("; "))]
    Mismatch(Vec<String>),
    #[error("invalid suite: {0}")]
    InvalidSuite(String),
    #[error("suite file: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        ColumnRef {
            table: table.into(),
            column: column.into(),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFormat {
    pub column: ColumnRef,
    pub system: String,
}

/// What a case reads from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// Every declared column; code columns also checked against `code_formats`.
    Schema { code_formats: Vec<CodeFormat> },
    /// Share of the population in the condition cohort.
    Cohort { condition: ColumnRef },
    /// New cohort cases in the last year over the population at risk.
    Incidence { condition: ColumnRef, date: ColumnRef },
    /// Share of persons whose `column` equals `value`.
    Demographic { column: ColumnRef, value: String },
    /// Share of persons with at least one record coded in `codes`.
    Codes { column: ColumnRef, codes: Vec<String> },
    /// Age at first cohort diagnosis, in years.
    Age {
        birth: ColumnRef,
        condition: ColumnRef,
        date: ColumnRef,
    },
    Unbound { reason: String },
}

impl Target {
    /// Columns read, in binding order (schema checks list only code columns).
    pub fn columns(&self) -> Vec<&ColumnRef> {
        match self {
            Target::Schema { code_formats } => code_formats.iter().map(|f| &f.column).collect(),
            Target::Cohort { condition } => vec![condition],
            Target::Incidence { condition, date } => vec![condition, date],
            Target::Demographic { column, .. } | Target::Codes { column, .. } => vec![column],
            Target::Age { birth, condition, date } => vec![birth, condition, date],
            Target::Unbound { .. } => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortScope {
    Population,
    Diagnosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceStatus {
    Referenced,
    NoReference,
}

/// Reference value of a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expected {
    Value(f64),
    Range { low: f64, high: f64 },
    Distribution { mean: f64, sd: f64, n: Option<u64> },
}

impl Expected {
    pub fn from_suggestion(s: &TestSuggestion) -> Option<Expected> {
        match s.comparison_type {
            ComparisonType::DtypeCheck => None,
            ComparisonType::Range => Some(Expected::Range {
                low: s.range_low?,
                high: s.range_high?,
            }),
            ComparisonType::DistributionWelch => Some(Expected::Distribution {
                mean: s.expected_value?,
                sd: s.expected_sd?,
                n: s.reference_n,
            }),
            _ => s.expected_value.map(Expected::Value),
        }
    }

    fn fits(&self, comparison: ComparisonType) -> bool {
        matches!(
            (comparison, self),
            (ComparisonType::Range, Expected::Range { .. })
                | (ComparisonType::DistributionWelch, Expected::Distribution { .. })
                | (
                    ComparisonType::Point | ComparisonType::LessThan | ComparisonType::GreaterThan,
                    Expected::Value(_)
                )
        )
    }
}

/// One executable data check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub category: Category,
    pub level: Level,
    pub comparison_type: ComparisonType,
    pub expected: Option<Expected>,
    pub unit: Unit,
    pub cohort_scope: CohortScope,
    pub target: Target,
    /// Diagnosis column filtering the cohort, for diagnosed-scope cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<ColumnRef>,
    pub references: Vec<String>,
    pub reference_status: ReferenceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TestCase {
    fn validate(&self) -> Result<(), String> {
        let bad = |m: &str| Err(format!("case `{}`: {m}", self.name));
        match self.reference_status {
            ReferenceStatus::NoReference if self.expected.is_some() => bad("No Reference case with an expected value"),
            ReferenceStatus::NoReference => Ok(()),
            ReferenceStatus::Referenced => {
                if self.references.is_empty() {
                    return bad("referenced case without references");
                }
                match (&self.expected, self.comparison_type) {
                    (None, ComparisonType::DtypeCheck) => Ok(()),
                    (Some(e), c) if e.fits(c) => {
                        if let Expected::Range { low, high } = e {
                            if low > high {
                                return bad("range low exceeds high");
                            }
                        }
                        Ok(())
                    }
                    _ => bad("expected value does not fit the comparison type"),
                }
            }
        }
    }

    /// Every column the case reads, including the cohort filter.
    pub fn bound_columns(&self) -> Vec<&ColumnRef> {
        let mut cols = self.target.columns();
        if let Some(c) = &self.cohort {
            if !cols.contains(&c) {
                cols.push(c);
            }
        }
        cols
    }

    fn needs_cohort(&self) -> bool {
        self.reference_status == ReferenceStatus::Referenced
            && (self.cohort_scope == CohortScope::Diagnosed
                || matches!(self.target, Target::Cohort { .. } | Target::Incidence { .. } | Target::Age { .. }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub provider: String,
    pub vocabulary_checksum: String,
    pub generated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub condition: String,
    pub region: String,
    pub cases: Vec<TestCase>,
    /// Codes defining the condition cohort.
    pub cohort_codes: CodeList,
    pub generation_metadata: GenerationMetadata,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TestSuite {
    pub fn validate(&self) -> Result<(), String> {
        let mut names = HashSet::new();
        for case in &self.cases {
            if !names.insert(case.name.as_str()) {
                return Err(format!("duplicate case name `{}`", case.name));
            }
            case.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<TestSuite, TestkitError> {
        let suite: TestSuite = serde_json::from_str(text)?;
        suite.validate().map_err(TestkitError::InvalidSuite)?;
        Ok(suite)
    }

    pub fn case(&self, name: &str) -> Option<&TestCase> {
        self.cases.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Pass,
    Fail,
    NoReference,
    Error,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "Pass",
            Status::Fail => "Fail",
            Status::NoReference => "No Reference",
            Status::Error => "Error",
        })
    }
}

/// Outcome of one case. Values are unrounded; `actual` is a percentage for
/// shares and a mean for distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub status: Status,
    pub expected: Option<Expected>,
    pub actual: Option<f64>,
    pub smd: Option<f64>,
    pub ratio: Option<f64>,
    pub p_value: Option<f64>,
    pub detail: String,
}

impl TestResult {
    fn bare(name: &str, status: Status, expected: Option<Expected>, detail: impl Into<String>) -> Self {
        TestResult {
            name: name.to_string(),
            status,
            expected,
            actual: None,
            smd: None,
            ratio: None,
            p_value: None,
            detail: detail.into(),
        }
    }
}

/// Persons in the condition cohort and their first diagnosis dates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub persons: BTreeSet<String>,
    pub first_diagnosis: BTreeMap<String, NaiveDate>,
    pub latest_diagnosis: Option<NaiveDate>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    pub fn contains(&self, person: &str) -> bool {
        self.persons.contains(person)
    }
}

fn person_at(frame: &Frame, row: usize) -> Option<String> {
    let v = &frame.person_id_column().values[row];
    v.is_conforming().then(|| v.to_raw()).filter(|s| !s.is_empty())
}

/// [`normalize_code`] without allocating for codes already in normal form.
fn code_key(code: &str) -> Cow<'_, str> {
    let trimmed = code.trim();
    if trimmed.chars().any(char::is_lowercase) {
        Cow::Owned(normalize_code(trimmed))
    } else {
        Cow::Borrowed(trimmed)
    }
}

/// Persons with at least one diagnosis record coded in `code_list`.
pub fn extract_cohort(frames: &Frames, code_list: &CodeList) -> Result<Cohort, TestkitError> {
    let frame = frames
        .first_with_role(ColumnRole::DiagnosisCode)
        .ok_or(TestkitError::MissingDiagnosisTable)?;
    let codes = code_list.normalized_codes();
    let code_col = frame
        .columns_with_role(ColumnRole::DiagnosisCode)
        .next()
        .ok_or(TestkitError::MissingDiagnosisTable)?;
    let date_col = frame.columns_with_role(ColumnRole::Date).next();
    let mut cohort = Cohort::default();
    for row in 0..frame.row_count() {
        let code = &code_col.values[row];
        if code.as_text().is_none_or(|c| !codes.contains(code_key(&c).as_ref())) {
            continue;
        }
        let Some(person) = person_at(frame, row) else { continue };
        if let Some(date) = date_col.and_then(|c| c.values[row].as_date()) {
            cohort
                .first_diagnosis
                .entry(person.clone())
                .and_modify(|d| *d = (*d).min(date))
                .or_insert(date);
            cohort.latest_diagnosis = cohort.latest_diagnosis.max(Some(date));
        }
        cohort.persons.insert(person);
    }
    Ok(cohort)
}

/// Persons interned to dense ids, the person id of every row of every
/// frame, and the population: persons of the table holding demographics
/// (else the first table). Cohort membership is mapped onto the same ids.
struct RowIndex<'a> {
    rows: HashMap<&'a str, Vec<Option<u32>>>,
    dictionaries: HashMap<&'a ColumnRef, Dictionary>,
    persons: usize,
    population: Result<(Vec<bool>, usize), String>,
    in_cohort: Vec<bool>,
    first_diagnosis: Vec<(u32, NaiveDate)>,
}

impl<'a> RowIndex<'a> {
    /// `matched` lists the columns that predicates will scan; each is
    /// dictionary-encoded once up front.
    fn new(frames: &'a Frames, cohort: &Cohort, matched: impl IntoIterator<Item = &'a ColumnRef>) -> Self {
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut rows: HashMap<&str, Vec<Option<u32>>> = HashMap::new();
        for f in frames.iter() {
            let col = f.person_id_column();
            let keys = col
                .values
                .iter()
                .map(|v| {
                    let key = v.as_text().filter(|k| v.is_conforming() && !k.is_empty())?;
                    let next = ids.len() as u32;
                    Some(match ids.get(key.as_ref()) {
                        Some(id) => *id,
                        None => *ids.entry(key.into_owned()).or_insert(next),
                    })
                })
                .collect();
            rows.insert(f.table_name(), keys);
        }
        let persons = ids.len();
        let mask = |keys: &[Option<u32>]| {
            let mut m = vec![false; persons];
            keys.iter().flatten().for_each(|&i| m[i as usize] = true);
            let n = m.iter().filter(|b| **b).count();
            (m, n)
        };
        let population = frames
            .first_with_role(ColumnRole::Demographic)
            .or_else(|| frames.iter().next())
            .map(|f| mask(&rows[f.table_name()]))
            .ok_or_else(|| "no tables loaded".to_string());
        let mut in_cohort = vec![false; persons];
        for p in &cohort.persons {
            if let Some(&i) = ids.get(p.as_str()) {
                in_cohort[i as usize] = true;
            }
        }
        let first_diagnosis = cohort
            .first_diagnosis
            .iter()
            .filter_map(|(p, d)| ids.get(p.as_str()).map(|&i| (i, *d)))
            .collect();
        let dictionaries = matched
            .into_iter()
            .filter_map(|c| column(frames, c).ok().map(|(_, col)| (c, Dictionary::new(col))))
            .collect();
        RowIndex {
            rows,
            dictionaries,
            persons,
            population,
            in_cohort,
            first_diagnosis,
        }
    }

    fn rows(&self, table: &str) -> &[Option<u32>] {
        self.rows.get(table).map(Vec::as_slice).unwrap_or_default()
    }

    fn population(&self) -> Result<(&[bool], usize), String> {
        self.population.as_ref().map(|(m, n)| (m.as_slice(), *n)).map_err(Clone::clone)
    }

    /// Cohort members that satisfy `keep`.
    fn cohort_count(&self, keep: impl Fn(usize) -> bool) -> usize {
        (0..self.persons).filter(|&i| self.in_cohort[i] && keep(i)).count()
    }
}

/// Columns that demographic and code targets match values in.
fn matched_columns<'c>(cases: impl IntoIterator<Item = &'c TestCase>) -> Vec<&'c ColumnRef> {
    let mut out: Vec<&ColumnRef> = Vec::new();
    for case in cases {
        if let Target::Demographic { column: c, .. } | Target::Codes { column: c, .. } = &case.target {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

fn column<'a>(frames: &'a Frames, c: &ColumnRef) -> Result<(&'a Frame, &'a crate::frame::Column), String> {
    let frame = frames.get(&c.table).ok_or_else(|| format!("table `{}` is not loaded", c.table))?;
    let col = frame.column(&c.column).ok_or_else(|| format!("column `{c}` is missing"))?;
    Ok((frame, col))
}

/// Distinct text values of a column and, per row, the index of its value.
struct Dictionary {
    values: Vec<String>,
    rows: Vec<Option<u32>>,
}

impl Dictionary {
    fn new(col: &crate::frame::Column) -> Self {
        let mut lookup: HashMap<String, u32> = HashMap::new();
        let rows = col
            .values
            .iter()
            .map(|v| {
                let text = v.as_text()?;
                let next = lookup.len() as u32;
                Some(match lookup.get(text.as_ref()) {
                    Some(i) => *i,
                    None => *lookup.entry(text.into_owned()).or_insert(next),
                })
            })
            .collect();
        let mut values = vec![String::new(); lookup.len()];
        for (text, i) in lookup {
            values[i as usize] = text;
        }
        Dictionary { values, rows }
    }
}

fn keys_where(dict: &Dictionary, ix: &RowIndex<'_>, c: &ColumnRef, pred: impl Fn(&str) -> bool) -> (Vec<bool>, usize) {
    let hits: Vec<bool> = dict.values.iter().map(|v| pred(v)).collect();
    let mut mask = vec![false; ix.persons];
    for (p, v) in ix.rows(&c.table).iter().zip(&dict.rows) {
        if let (Some(p), Some(v)) = (p, v) {
            mask[*p as usize] |= hits[*v as usize];
        }
    }
    let n = mask.iter().filter(|b| **b).count();
    (mask, n)
}

/// Persons having at least one row where `pred` holds for `c`, as a mask
/// over person ids plus its size.
fn persons_where(
    frames: &Frames,
    ix: &RowIndex<'_>,
    c: &ColumnRef,
    pred: impl Fn(&str) -> bool,
) -> Result<(Vec<bool>, usize), String> {
    match ix.dictionaries.get(c) {
        Some(dict) => Ok(keys_where(dict, ix, c, pred)),
        None => Ok(keys_where(&Dictionary::new(column(frames, c)?.1), ix, c, pred)),
    }
}

enum Observed {
    Share { num: usize, den: usize },
    Ages(Vec<f64>),
}

fn observe(case: &TestCase, frames: &Frames, cohort: &Cohort, ix: &RowIndex<'_>) -> Result<Observed, String> {
    let diagnosed = case.cohort_scope == CohortScope::Diagnosed;
    match &case.target {
        Target::Cohort { .. } => {
            let (pop, den) = ix.population()?;
            Ok(Observed::Share {
                num: ix.cohort_count(|i| pop[i]),
                den,
            })
        }
        Target::Incidence { .. } => {
            let end = cohort.latest_diagnosis.ok_or("no dated diagnosis records in the cohort")?;
            let start = end - Duration::days(INCIDENCE_WINDOW_DAYS);
            let (pop, den) = ix.population()?;
            let mut new = 0;
            let mut prior = 0;
            for (i, first) in &ix.first_diagnosis {
                if !pop[*i as usize] {
                    continue;
                }
                if *first > start {
                    new += 1;
                } else {
                    prior += 1;
                }
            }
            Ok(Observed::Share { num: new, den: den - prior })
        }
        Target::Demographic { column: c, value } => {
            let wanted = value.trim();
            let (group, size) = persons_where(frames, ix, c, |v| v.trim().eq_ignore_ascii_case(wanted))?;
            if diagnosed {
                Ok(Observed::Share {
                    num: ix.cohort_count(|i| group[i]),
                    den: size,
                })
            } else {
                let mut seen = vec![false; ix.persons];
                ix.rows(&c.table).iter().flatten().for_each(|&i| seen[i as usize] = true);
                let den = seen.iter().filter(|b| **b).count();
                Ok(Observed::Share { num: size, den })
            }
        }
        Target::Codes { column: c, codes } => {
            let codes: HashSet<&str> = codes.iter().map(String::as_str).collect();
            let (holders, _) = persons_where(frames, ix, c, |v| codes.contains(code_key(v).as_ref()))?;
            if diagnosed {
                Ok(Observed::Share {
                    num: ix.cohort_count(|i| holders[i]),
                    den: cohort.len(),
                })
            } else {
                let (pop, den) = ix.population()?;
                let num = (0..ix.persons).filter(|&i| holders[i] && pop[i]).count();
                Ok(Observed::Share { num, den })
            }
        }
        Target::Age { birth, .. } => {
            let (_, col) = column(frames, birth)?;
            let mut births: Vec<Option<NaiveDate>> = vec![None; ix.persons];
            for (p, v) in ix.rows(&birth.table).iter().zip(&col.values) {
                if let (Some(p), Some(d)) = (p, v.as_date()) {
                    births[*p as usize].get_or_insert(d);
                }
            }
            let ages = ix
                .first_diagnosis
                .iter()
                .filter_map(|(i, first)| births[*i as usize].map(|b| (*first - b).num_days() as f64 / DAYS_PER_YEAR))
                .collect();
            Ok(Observed::Ages(ages))
        }
        Target::Schema { .. } => Err("schema binding on a value comparison".into()),
        Target::Unbound { reason } => Err(reason.clone()),
    }
}

fn dtype_check(name: &str, code_formats: &[CodeFormat], frames: &Frames) -> Result<TestResult, String> {
    let mut problems = Vec::new();
    for frame in frames.iter() {
        for (column, n) in frame.non_conforming_counts() {
            if n > 0 {
                problems.push(format!("{}.{column}: {n} value(s) not of the declared type", frame.table_name()));
            }
        }
    }
    for format in code_formats {
        let (_, col) = column(frames, &format.column)?;
        let bad = col
            .values
            .iter()
            .filter_map(|v| v.as_text())
            .filter(|code| !code_conforms(&format.system, code))
            .count();
        if bad > 0 {
            problems.push(format!("{}: {bad} code(s) not in {} format", format.column, format.system));
        }
    }
    let (status, detail) = if problems.is_empty() {
        (Status::Pass, "all values conform".to_string())
    } else {
        (Status::Fail, problems.join("; "))
    };
    Ok(TestResult::bare(name, status, None, detail))
}

fn share(num: usize, den: usize) -> Result<f64, String> {
    if den == 0 {
        Err("empty denominator".into())
    } else {
        Ok(num as f64 / den as f64)
    }
}

fn point(name: &str, expected_pct: f64, num: usize, den: usize) -> Result<TestResult, String> {
    let o = share(num, den)?;
    let pair = ProportionPair::new(expected_pct / 100.0, o).map_err(|e| e.to_string())?;
    let mut r = TestResult::bare(name, Status::Fail, Some(Expected::Value(expected_pct)), "");
    r.actual = Some(o * 100.0);
    let smd = smd_proportions(pair);
    let ratio = obs_exp_ratio(pair);
    r.smd = smd.as_ref().ok().copied();
    r.ratio = ratio.as_ref().ok().copied();
    r.detail = match (smd, ratio) {
        (_, Err(StatsError::UndefinedRatio)) => "ratio undefined: expected value is 0".into(),
        (Err(e), _) => format!("SMD undefined: {e}"),
        (_, Err(e)) => format!("ratio undefined: {e}"),
        (Ok(smd), Ok(ratio)) => {
            let mut reasons = Vec::new();
            if smd.abs() >= SMD_THRESHOLD {
                reasons.push(format!("|SMD| {:.4} >= {SMD_THRESHOLD}", smd.abs()));
            }
            if !(RATIO_LOW..=RATIO_HIGH).contains(&ratio) {
                reasons.push(format!("ratio {ratio:.4} outside [{RATIO_LOW}, {RATIO_HIGH}]"));
            }
            if point_passes(smd, ratio) {
                r.status = Status::Pass;
                format!("{num}/{den} persons")
            } else {
                format!("{num}/{den} persons; {}", reasons.join(", "))
            }
        }
    };
    Ok(r)
}

fn scalar(observed: &Observed) -> Result<(f64, String), String> {
    match observed {
        Observed::Share { num, den } => Ok((share(*num, *den)? * 100.0, format!("{num}/{den} persons"))),
        Observed::Ages(ages) if ages.is_empty() => Err("empty denominator".into()),
        Observed::Ages(ages) => Ok((
            ages.iter().sum::<f64>() / ages.len() as f64,
            format!("mean over {} persons", ages.len()),
        )),
    }
}

fn evaluate_inner(case: &TestCase, frames: &Frames, cohort: &Cohort, ix: &RowIndex<'_>) -> Result<TestResult, String> {
    if let Target::Schema { code_formats } = &case.target {
        return dtype_check(&case.name, code_formats, frames);
    }
    let expected = case.expected.clone().ok_or("no expected value")?;
    let observed = observe(case, frames, cohort, ix)?;
    match (case.comparison_type, &expected, &observed) {
        (ComparisonType::Point, Expected::Value(e), Observed::Share { num, den }) => point(&case.name, *e, *num, *den),
        (ComparisonType::DistributionWelch, Expected::Distribution { mean, sd, n }, Observed::Ages(ages)) => {
            let obs = SampleStats::from_values(ages).map_err(|e| format!("observed ages: {e}"))?;
            let reference =
                SampleStats::new(n.unwrap_or(obs.n()), *mean, sd * sd).map_err(|e| format!("reference: {e}"))?;
            let w = welch_t(reference, obs).map_err(|e| e.to_string())?;
            let mut r = TestResult::bare(&case.name, Status::Fail, Some(expected.clone()), "");
            r.actual = Some(obs.mean());
            r.smd = smd_means(reference, obs).ok();
            r.p_value = Some(w.p);
            r.status = if w.p >= P_THRESHOLD { Status::Pass } else { Status::Fail };
            r.detail = format!(
                "t = {:.4}, df = {:.2}, n = {}, observed SD {:.2}",
                w.t,
                w.df,
                obs.n(),
                obs.variance().sqrt()
            );
            Ok(r)
        }
        (ComparisonType::Range | ComparisonType::LessThan | ComparisonType::GreaterThan, _, _) => {
            let (actual, basis) = scalar(&observed)?;
            let pass = match (case.comparison_type, &expected) {
                (ComparisonType::Range, Expected::Range { low, high }) => (*low..=*high).contains(&actual),
                (ComparisonType::LessThan, Expected::Value(e)) => actual < *e,
                (ComparisonType::GreaterThan, Expected::Value(e)) => actual > *e,
                _ => return Err("expected value does not fit the comparison type".into()),
            };
            let mut r = TestResult::bare(
                &case.name,
                if pass { Status::Pass } else { Status::Fail },
                Some(expected),
                basis,
            );
            r.actual = Some(actual);
            Ok(r)
        }
        (c, _, _) => Err(format!("{c} comparison cannot use this binding")),
    }
}

/// Runs one case. Failures to compute become `Error` results.
pub fn evaluate(case: &TestCase, frames: &Frames, cohort: &Cohort) -> TestResult {
    if case.reference_status == ReferenceStatus::NoReference {
        return no_reference(case);
    }
    evaluate_indexed(case, frames, cohort, &RowIndex::new(frames, cohort, matched_columns([case])))
}

fn no_reference(case: &TestCase) -> TestResult {
    let detail = case.note.clone().unwrap_or_else(|| "no reference".into());
    TestResult::bare(&case.name, Status::NoReference, None, detail)
}

fn evaluate_indexed(case: &TestCase, frames: &Frames, cohort: &Cohort, ix: &RowIndex<'_>) -> TestResult {
    if case.reference_status == ReferenceStatus::NoReference {
        return no_reference(case);
    }
    evaluate_inner(case, frames, cohort, ix)
        .unwrap_or_else(|detail| TestResult::bare(&case.name, Status::Error, case.expected.clone(), detail))
}

/// Columns bound by the suite that the frames lack.
pub fn check_bindings(suite: &TestSuite, frames: &Frames) -> Vec<String> {
    let mut missing = BTreeSet::new();
    for case in suite.cases.iter().filter(|c| c.reference_status == ReferenceStatus::Referenced) {
        for c in case.bound_columns() {
            match frames.get(&c.table) {
                None => missing.insert(format!("table `{}` (case `{}`)", c.table, case.name)),
                Some(f) if f.column(&c.column).is_none() => {
                    missing.insert(format!("column `{c}` (case `{}`)", case.name))
                }
                Some(_) => false,
            };
        }
    }
    missing.into_iter().collect()
}

/// Runs every case, in parallel, and returns results sorted by name.
/// Errors only when the suite is invalid or bound to absent columns.
pub fn run_suite(suite: &TestSuite, frames: &Frames) -> Result<Vec<TestResult>, TestkitError> {
    suite.validate().map_err(TestkitError::InvalidSuite)?;
    let missing = check_bindings(suite, frames);
    if !missing.is_empty() {
        return Err(TestkitError::Mismatch(missing));
    }
    let cohort = if suite.cases.iter().any(TestCase::needs_cohort) {
        extract_cohort(frames, &suite.cohort_codes).map_err(|e| e.to_string())
    } else {
        Ok(Cohort::default())
    };
    let empty = Cohort::default();
    let ix = RowIndex::new(frames, cohort.as_ref().unwrap_or(&empty), matched_columns(&suite.cases));
    let mut results: Vec<TestResult> = suite
        .cases
        .par_iter()
        .map(|case| match &cohort {
            Err(e) if case.needs_cohort() => TestResult::bare(&case.name, Status::Error, case.expected.clone(), e),
            Err(_) => evaluate_indexed(case, frames, &empty, &ix),
            Ok(c) => evaluate_indexed(case, frames, c, &ix),
        })
        .collect();
    results.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(results)
}

pub fn results_to_json(results: &[TestResult]) -> serde_json::Result<String> {
    serde_json::to_string_pretty(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{ColumnSchema, DeclaredType, TableSchema};
    use crate::vocab::{Concept, Domain};
    use proptest::prelude::*;

    fn col(name: &str, t: DeclaredType, role: ColumnRole) -> ColumnSchema {
        ColumnSchema {
            name: name.into(),
            declared_type: t,
            role,
            nullable: true,
        }
    }

    fn person_schema() -> TableSchema {
        TableSchema {
            table_name: "person".into(),
            columns: vec![
                col("person_id", DeclaredType::Integer, ColumnRole::PersonId),
                col("gender", DeclaredType::Text, ColumnRole::Demographic),
                col("birth_date", DeclaredType::Date, ColumnRole::Date),
            ],
        }
    }

    fn dx_schema() -> TableSchema {
        TableSchema {
            table_name: "dx".into(),
            columns: vec![
                col("person_id", DeclaredType::Integer, ColumnRole::PersonId),
                col("code", DeclaredType::Code, ColumnRole::DiagnosisCode),
                col("date", DeclaredType::Date, ColumnRole::Date),
            ],
        }
    }

    fn frames(people: &[[&str; 3]], dx: &[[&str; 3]]) -> Frames {
        Frames::new(vec![
            Frame::from_records(&person_schema(), people.iter().map(|r| r.to_vec())).unwrap(),
            Frame::from_records(&dx_schema(), dx.iter().map(|r| r.to_vec())).unwrap(),
        ])
    }

    fn codes(list: &[&str]) -> CodeList {
        let concepts = list
            .iter()
            .enumerate()
            .map(|(i, c)| Concept {
                concept_id: i as i64,
                concept_name: c.to_string(),
                vocabulary: "ICD9CM".into(),
                concept_code: c.to_string(),
                domain: Domain::Condition,
            })
            .collect();
        CodeList::user_supplied("chf", Domain::Condition, concepts)
    }

    fn five() -> Frames {
        frames(
            &[
                ["1", "Female", "1950-01-01"],
                ["2", "Male", "1960-01-01"],
                ["3", "Female", "1970-01-01"],
                ["4", "Male", "1980-01-01"],
                ["5", "Female", "1990-01-01"],
            ],
            &[
                ["1", "428.0", "2010-01-01"],
                ["1", "428.0", "2012-01-01"],
                ["3", " 428.0 ", "2011-06-01"],
                ["4", "250.00", "2011-01-01"],
            ],
        )
    }

    fn case(name: &str, target: Target, comparison: ComparisonType, expected: Option<Expected>) -> TestCase {
        TestCase {
            name: name.into(),
            category: Category::Demography,
            level: Level::Distribution,
            comparison_type: comparison,
            expected,
            unit: Unit::Percent,
            cohort_scope: CohortScope::Population,
            target,
            cohort: None,
            references: vec!["r".into()],
            reference_status: ReferenceStatus::Referenced,
            note: None,
        }
    }

    #[test]
    fn cohort_of_two() {
        let c = extract_cohort(&five(), &codes(&["428.0"])).unwrap();
        assert_eq!(c.persons, ["1", "3"].map(String::from).into_iter().collect());
        assert_eq!(c.first_diagnosis["1"], NaiveDate::from_ymd_opt(2010, 1, 1).unwrap());
        assert_eq!(c.latest_diagnosis, NaiveDate::from_ymd_opt(2012, 1, 1));
        assert!(extract_cohort(&five(), &codes(&[])).unwrap().is_empty());
    }

    #[test]
    fn dot_stripped_codes_do_not_match() {
        let f = frames(&[["1", "Female", "1950-01-01"]], &[["1", "4280", "2010-01-01"]]);
        assert!(extract_cohort(&f, &codes(&["428.0"])).unwrap().is_empty());
    }

    #[test]
    fn missing_diagnosis_table_is_an_error() {
        let f = Frames::new(vec![Frame::from_records(&person_schema(), Vec::<Vec<&str>>::new()).unwrap()]);
        assert!(matches!(
            extract_cohort(&f, &codes(&["1"])),
            Err(TestkitError::MissingDiagnosisTable)
        ));
    }

    fn female(expected: f64) -> TestCase {
        case(
            "Female",
            Target::Demographic {
                column: ColumnRef::new("person", "gender"),
                value: "female".into(),
            },
            ComparisonType::Point,
            Some(Expected::Value(expected)),
        )
    }

    #[test]
    fn point_share_and_scope() {
        let f = five();
        let cohort = extract_cohort(&f, &codes(&["428.0"])).unwrap();
        let r = evaluate(&female(60.0), &f, &cohort);
        assert_eq!(r.status, Status::Pass);
        assert!((r.actual.unwrap() - 60.0).abs() < 1e-12);
        assert_eq!(r.ratio, Some(1.0));
        let mut diag = female(60.0);
        diag.cohort_scope = CohortScope::Diagnosed;
        let r = evaluate(&diag, &f, &cohort);
        // 2 of 3 women are in the cohort
        assert!((r.actual.unwrap() - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_denominator_is_an_error() {
        let f = five();
        let mut c = female(50.0);
        c.cohort_scope = CohortScope::Diagnosed;
        c.target = Target::Demographic {
            column: ColumnRef::new("person", "gender"),
            value: "Unknown".into(),
        };
        let r = evaluate(&c, &f, &Cohort::default());
        assert_eq!(r.status, Status::Error);
        assert_eq!(r.detail, "empty denominator");
    }

    #[test]
    fn zero_expected_fails_with_undefined_ratio() {
        let r = evaluate(&female(0.0), &five(), &Cohort::default());
        assert_eq!(r.status, Status::Fail);
        assert_eq!(r.ratio, None);
        assert!(r.detail.contains("ratio undefined"));
    }

    #[test]
    fn prevalence_and_incidence() {
        let f = five();
        let cohort = extract_cohort(&f, &codes(&["428.0"])).unwrap();
        let prev = case(
            "check prevalence",
            Target::Cohort {
                condition: ColumnRef::new("dx", "code"),
            },
            ComparisonType::Point,
            Some(Expected::Value(40.0)),
        );
        let r = evaluate(&prev, &f, &cohort);
        assert_eq!(r.status, Status::Pass);
        assert!((r.actual.unwrap() - 40.0).abs() < 1e-12);
        let inc = case(
            "check incidence",
            Target::Incidence {
                condition: ColumnRef::new("dx", "code"),
                date: ColumnRef::new("dx", "date"),
            },
            ComparisonType::Point,
            Some(Expected::Value(25.0)),
        );
        // window (2011-01-01, 2012-01-01]: person 3 new, person 1 prior → 1/(5-1)
        let r = evaluate(&inc, &f, &cohort);
        assert!((r.actual.unwrap() - 25.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn completeness_and_range() {
        let f = five();
        let cohort = extract_cohort(&f, &codes(&["428.0"])).unwrap();
        let mut lab = case(
            "lab",
            Target::Codes {
                column: ColumnRef::new("dx", "code"),
                codes: vec!["250.00".into()],
            },
            ComparisonType::GreaterThan,
            Some(Expected::Value(95.0)),
        );
        lab.cohort_scope = CohortScope::Diagnosed;
        let r = evaluate(&lab, &f, &cohort);
        assert_eq!((r.status, r.actual), (Status::Fail, Some(0.0)));
        lab.cohort_scope = CohortScope::Population;
        lab.comparison_type = ComparisonType::Range;
        lab.expected = Some(Expected::Range { low: 20.0, high: 20.0 });
        let r = evaluate(&lab, &f, &cohort);
        assert_eq!((r.status, r.actual), (Status::Pass, Some(20.0)));
        lab.comparison_type = ComparisonType::LessThan;
        lab.expected = Some(Expected::Value(20.0));
        assert_eq!(evaluate(&lab, &f, &cohort).status, Status::Fail);
    }

    #[test]
    fn age_welch() {
        let f = five();
        let cohort = extract_cohort(&f, &codes(&["428.0"])).unwrap();
        let mut age = case(
            "Age at diagnosis",
            Target::Age {
                birth: ColumnRef::new("person", "birth_date"),
                condition: ColumnRef::new("dx", "code"),
                date: ColumnRef::new("dx", "date"),
            },
            ComparisonType::DistributionWelch,
            Some(Expected::Distribution {
                mean: 50.0,
                sd: 10.0,
                n: Some(100),
            }),
        );
        age.cohort_scope = CohortScope::Diagnosed;
        let r = evaluate(&age, &f, &cohort);
        // ages at first diagnosis: 60.0 and 41.4 years
        let a = (NaiveDate::from_ymd_opt(2010, 1, 1).unwrap() - NaiveDate::from_ymd_opt(1950, 1, 1).unwrap()).num_days()
            as f64
            / 365.25;
        let b = (NaiveDate::from_ymd_opt(2011, 6, 1).unwrap() - NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()).num_days()
            as f64
            / 365.25;
        assert!((r.actual.unwrap() - (a + b) / 2.0).abs() < 1e-12);
        let p = r.p_value.unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(r.status == Status::Pass, p >= 0.05);
    }

    #[test]
    fn dtype_check_flags_bad_cells_and_code_formats() {
        let f = frames(
            &[["1", "Female", "1950-13-01"], ["2", "Male", "1960-01-01"]],
            &[["1", "4280", "2010-01-01"]],
        );
        let formats = vec![CodeFormat {
            column: ColumnRef::new("dx", "code"),
            system: "ICD9CM".into(),
        }];
        let c = case("check data types", Target::Schema { code_formats: formats }, ComparisonType::DtypeCheck, None);
        let r = evaluate(&c, &f, &Cohort::default());
        assert_eq!(r.status, Status::Fail);
        assert!(r.detail.contains("person.birth_date: 1"), "{}", r.detail);
        assert!(r.detail.contains("dx.code: 1 code(s) not in ICD9CM"), "{}", r.detail);
    }

    #[test]
    fn no_reference_computes_nothing() {
        let mut c = female(50.0);
        c.reference_status = ReferenceStatus::NoReference;
        c.expected = None;
        let r = evaluate(&c, &five(), &Cohort::default());
        assert_eq!(r.status, Status::NoReference);
        assert!(r.expected.is_none() && r.actual.is_none() && r.smd.is_none() && r.ratio.is_none());
    }

    fn suite(cases: Vec<TestCase>) -> TestSuite {
        TestSuite {
            condition: "chf".into(),
            region: "US".into(),
            cases,
            cohort_codes: codes(&["428.0"]),
            generation_metadata: GenerationMetadata::default(),
            warnings: vec![],
        }
    }

    #[test]
    fn run_suite_sorts_and_captures_errors() {
        let mut broken = female(50.0);
        broken.name = "B broken".into();
        broken.expected = Some(Expected::Value(250.0));
        let mut z = female(60.0);
        z.name = "z".into();
        let s = suite(vec![z, broken, female(60.0)]);
        let results = run_suite(&s, &five()).unwrap();
        let names: Vec<_> = results.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["B broken", "Female", "z"]);
        assert_eq!(results[0].status, Status::Error);
        assert_eq!(results_to_json(&results).unwrap(), results_to_json(&run_suite(&s, &five()).unwrap()).unwrap());
    }

    #[test]
    fn run_suite_rejects_unknown_columns() {
        let mut c = female(50.0);
        c.target = Target::Demographic {
            column: ColumnRef::new("person", "race"),
            value: "White".into(),
        };
        assert!(matches!(run_suite(&suite(vec![c]), &five()), Err(TestkitError::Mismatch(_))));
    }

    #[test]
    fn suite_json_round_trip() {
        let s = suite(vec![female(50.0)]);
        assert_eq!(TestSuite::from_json(&s.to_json().unwrap()).unwrap(), s);
        let dup = suite(vec![female(50.0), female(40.0)]);
        assert!(TestSuite::from_json(&dup.to_json().unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn row_permutation_leaves_results_unchanged(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let people = [
                ["1", "Female", "1950-01-01"], ["2", "Male", "1960-01-01"], ["3", "Female", "1970-01-01"],
                ["4", "Male", "1980-01-01"], ["5", "Female", "1990-01-01"], ["6", "Male", "1999-02-03"],
            ];
            let dx = [
                ["1", "428.0", "2010-01-01"], ["1", "428.0", "2012-01-01"], ["3", "428.0", "2011-06-01"],
                ["4", "250.00", "2011-01-01"], ["6", "428.0", "2011-09-09"],
            ];
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let mut p2 = people.to_vec();
            let mut d2 = dx.to_vec();
            p2.shuffle(&mut rng);
            d2.shuffle(&mut rng);
            let mut diag = female(60.0);
            diag.name = "Female diagnosed".into();
            diag.cohort_scope = CohortScope::Diagnosed;
            let s = suite(vec![female(50.0), diag]);
            let a = run_suite(&s, &frames(&people, &dx)).unwrap();
            let b = run_suite(&s, &frames(&p2, &d2)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
