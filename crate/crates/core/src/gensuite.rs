//! Test suite generation.
//!
//! Grounded statistics become [`TestSuggestion`]s ([`suggest`]), are reviewed
//! a second time by the provider ([`double_pass_validate`]), travel as a
//! pipe-delimited matrix ([`serialize_matrix`] / [`parse_matrix`]) and are
//! finally bound to concrete columns and code lists ([`compile`]).
//!
//! Target binding text in a suggestion is one of:
//! - `table.column`: an explicit column;
//! - any other text: a case-insensitive name fragment;
//! - empty: inferred from column roles (and, for demographic shares, from
//!   the values present in the data).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{ColumnRole, DataDomain, Frames, StudySpec, TableSchema};
use crate::provider::{
    GroundedStat, KnowledgeProvider, ProviderError, Recommendation, StatKind, StatValue, Unit, DROP_MARKER, FIX_MARKER,
};
use crate::testkit::{
    CodeFormat, CohortScope, ColumnRef, Expected, GenerationMetadata, ReferenceStatus, Target, TestCase, TestSuite,
};
use crate::vocab::{extract_demographic_codes, CodeBook, CodeList, Domain, Embedder, EmbeddingIndex, SearchRequest, VocabError, DEFAULT_K};

/// Completeness threshold (%) for measurement expectations.
pub const COMPLETENESS_PERCENT: f64 = 95.0;
/// Minimum cosine similarity for code-list searches.
pub const DEFAULT_MIN_SIMILARITY: f64 = 0.85;
pub const DTYPE_DESCRIPTION: &str = "check data types";
pub const DTYPE_REFERENCE: &str = "declared schema types and classification-system code formats";

pub const MATRIX_HEADER: [&str; 17] = [
    "description",
    "category",
    "level",
    "comparison_type",
    "expected_value",
    "range_low",
    "range_high",
    "expected_sd",
    "reference_n",
    "qualitative",
    "diagnosed",
    "statistic",
    "subject",
    "target",
    "references",
    "fixed",
    "remove",
];

#[derive(Debug, Error)]
pub enum GenError {
    #[error("provider failed after validating {completed} of {total} suggestions: {source}")]
    Provider {
        completed: usize,
        total: usize,
        /// Suggestions validated before the failure.
        partial: Vec<TestSuggestion>,
        #[source]
        source: ProviderError,
    },
    #[error("matrix row {row}: {message}")]
    Matrix { row: usize, message: String },
    #[error("malformed suggestion `{description}`: {message}")]
    Malformed { description: String, message: String },
    #[error("compile error: {0}")]
    Compile(String),
    #[error("fetching statistics failed: {0}")]
    Fetch(#[source] ProviderError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

macro_rules! token_enum {
    ($name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $token)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($token => Ok($name::$variant),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($name))),
                }
            }
        }
    };
}

token_enum!(Category {
    Demography => "demography",
    Diagnosis => "diagnosis",
    Drug => "drug",
    Measurement => "measurement",
    Procedure => "procedure",
    Metadata => "metadata",
});

token_enum!(Level {
    Metadata => "metadata",
    Distribution => "distribution",
    Subpopulation => "subpopulation",
});

token_enum!(ComparisonType {
    Point => "point",
    Range => "range",
    LessThan => "less_than",
    GreaterThan => "greater_than",
    DistributionWelch => "distribution_welch",
    DtypeCheck => "dtype_check",
});

/// One proposed data check, as exchanged in the suite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuggestion {
    pub description: String,
    pub category: Category,
    pub level: Level,
    pub comparison_type: ComparisonType,
    pub expected_value: Option<f64>,
    pub range_low: Option<f64>,
    pub range_high: Option<f64>,
    /// Reference standard deviation for distribution comparisons.
    pub expected_sd: Option<f64>,
    /// Reference sample size for distribution comparisons.
    pub reference_n: Option<u64>,
    /// Non-numeric reference value; such suggestions never execute.
    pub qualitative: Option<String>,
    pub diagnosed: bool,
    pub statistic: Option<StatKind>,
    /// Statistic subject as returned by the provider.
    pub subject: String,
    pub target: String,
    pub references: Vec<String>,
    pub fixed: bool,
    pub remove: bool,
}

impl TestSuggestion {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |message: &str| {
            Err(GenError::Malformed {
                description: self.description.clone(),
                message: message.to_string(),
            })
        };
        let numbers = [self.expected_value, self.range_low, self.range_high, self.expected_sd];
        if numbers.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite number");
        }
        if self.references.iter().any(|r| r.trim().is_empty()) {
            return bad("blank reference");
        }
        if self.qualitative.as_deref().is_some_and(|q| q.trim().is_empty()) {
            return bad("blank qualitative value");
        }
        let qualitative = self.qualitative.is_some();
        match self.comparison_type {
            ComparisonType::Range => match (self.range_low, self.range_high) {
                (Some(lo), Some(hi)) if lo <= hi && self.expected_value.is_none() => Ok(()),
                (Some(lo), Some(hi)) if lo > hi => bad("range_low exceeds range_high"),
                (None, None) if qualitative => Ok(()),
                (Some(_), Some(_)) => bad("range comparison with an expected_value"),
                _ => bad("range comparison needs range_low and range_high"),
            },
            ComparisonType::Point
            | ComparisonType::LessThan
            | ComparisonType::GreaterThan
            | ComparisonType::DistributionWelch => {
                if self.expected_value.is_none() && !qualitative {
                    bad("expected_value is required")
                } else if self.expected_sd.is_some_and(|sd| sd < 0.0) {
                    bad("negative expected_sd")
                } else {
                    Ok(())
                }
            }
            ComparisonType::DtypeCheck => {
                if self.expected_value.is_some() || self.range_low.is_some() || self.range_high.is_some() {
                    bad("dtype_check takes no expected value")
                } else {
                    Ok(())
                }
            }
        }
    }

    /// The reference value as a provider statistic value.
    pub fn stat_value(&self) -> Option<StatValue> {
        if let Some(q) = &self.qualitative {
            return Some(StatValue::Qualitative(q.clone()));
        }
        match (self.expected_value, self.range_low, self.range_high) {
            (Some(v), _, _) => Some(StatValue::Point(v)),
            (None, Some(low), Some(high)) => Some(StatValue::Range { low, high }),
            _ => None,
        }
    }

    fn to_stat(&self) -> Option<GroundedStat> {
        let statistic = self.statistic?;
        let value = self.stat_value()?;
        let mut stat = GroundedStat::new(statistic, self.subject.clone(), value);
        stat.diagnosed_scope = self.diagnosed;
        stat.references = self.references.clone();
        stat.sample_size = self.reference_n;
        Some(stat)
    }

    /// Applies a corrected reference value. A range turns the comparison
    /// into `range`; a point turns a range comparison into `point`.
    pub fn apply_correction(&mut self, value: &StatValue) {
        match value {
            StatValue::Point(v) => {
                self.expected_value = Some(*v);
                self.range_low = None;
                self.range_high = None;
                self.qualitative = None;
                if self.comparison_type == ComparisonType::Range {
                    self.comparison_type = ComparisonType::Point;
                }
            }
            StatValue::Range { low, high } => {
                self.expected_value = None;
                self.range_low = Some(*low);
                self.range_high = Some(*high);
                self.qualitative = None;
                self.comparison_type = ComparisonType::Range;
            }
            StatValue::Qualitative(q) => {
                self.expected_value = None;
                self.range_low = None;
                self.range_high = None;
                self.qualitative = Some(q.clone());
            }
        }
    }

    fn dedup_key(&self) -> (String, [Option<u64>; 3]) {
        (
            self.description.clone(),
            [self.expected_value, self.range_low, self.range_high].map(|v| v.map(f64::to_bits)),
        )
    }
}

/// Subject text without mock review markers.
pub fn clean_subject(subject: &str) -> String {
    let mut s = subject.trim();
    loop {
        let before = s;
        for marker in [FIX_MARKER, DROP_MARKER] {
            s = s.strip_suffix(marker).unwrap_or(s).trim_end();
        }
        if s == before {
            return s.to_string();
        }
    }
}

fn category_of(kind: StatKind) -> Category {
    match kind {
        StatKind::Prevalence
        | StatKind::Incidence
        | StatKind::MortalityRate
        | StatKind::LifetimeRisk
        | StatKind::ComorbidityRate => Category::Diagnosis,
        StatKind::AgeMean | StatKind::AgeSd | StatKind::DemographicShare => Category::Demography,
        StatKind::DrugShare => Category::Drug,
        StatKind::MeasurementExpectation => Category::Measurement,
    }
}

fn level_of(kind: StatKind, diagnosed: bool) -> Level {
    match kind {
        StatKind::DemographicShare | StatKind::ComorbidityRate | StatKind::AgeMean | StatKind::AgeSd if diagnosed => {
            Level::Subpopulation
        }
        _ => Level::Distribution,
    }
}

fn describe(kind: StatKind, subject: &str, diagnosed: bool) -> String {
    let suffix = if diagnosed { " diagnosed" } else { "" };
    match kind {
        StatKind::Prevalence => "check prevalence".into(),
        StatKind::Incidence => "check incidence".into(),
        StatKind::MortalityRate => "check mortality rate".into(),
        StatKind::LifetimeRisk => "check lifetime risk".into(),
        StatKind::AgeMean | StatKind::AgeSd if subject.is_empty() => "Age".into(),
        StatKind::AgeMean | StatKind::AgeSd => subject.to_string(),
        StatKind::ComorbidityRate => format!("{subject} diagnosis{suffix}"),
        StatKind::DemographicShare => format!("{subject}{suffix}"),
        StatKind::DrugShare | StatKind::MeasurementExpectation => subject.to_string(),
    }
}

fn metadata_suggestion() -> TestSuggestion {
    TestSuggestion {
        description: DTYPE_DESCRIPTION.into(),
        category: Category::Metadata,
        level: Level::Metadata,
        comparison_type: ComparisonType::DtypeCheck,
        expected_value: None,
        range_low: None,
        range_high: None,
        expected_sd: None,
        reference_n: None,
        qualitative: None,
        diagnosed: false,
        statistic: None,
        subject: String::new(),
        target: String::new(),
        references: vec![DTYPE_REFERENCE.into()],
        fixed: false,
        remove: false,
    }
}

fn merge_references(into: &mut Vec<String>, extra: &[String]) {
    for r in extra {
        if !into.contains(r) {
            into.push(r.clone());
        }
    }
}

/// Demographic column (`table.column`) whose observed values include `value`.
fn demographic_target(codes: &CodeBook, value: &str) -> Option<String> {
    codes
        .demographics()?
        .concepts
        .iter()
        .find(|c| c.concept_code.trim().eq_ignore_ascii_case(value))
        .map(|c| c.vocabulary.clone())
}

/// Turns grounded statistics into suggestions: one data-types check, then
/// one suggestion per statistic in input order. Mean and SD of age with
/// the same subject and scope merge into one distribution comparison.
pub fn suggest(_spec: &StudySpec, stats: &[GroundedStat], codes: &CodeBook) -> Vec<TestSuggestion> {
    let mut out = vec![metadata_suggestion()];
    let mut age_slots: HashMap<(String, bool), usize> = HashMap::new();
    let mut pending_sd: HashMap<(String, bool), &GroundedStat> = HashMap::new();

    for stat in stats {
        let subject = clean_subject(&stat.subject);
        let diagnosed = stat.diagnosed_scope;
        if stat.statistic == StatKind::AgeSd {
            let key = (subject.to_lowercase(), diagnosed);
            match age_slots.get(&key) {
                Some(&i) => attach_sd(&mut out[i], stat),
                None => {
                    pending_sd.insert(key, stat);
                }
            }
            continue;
        }

        let mut s = TestSuggestion {
            description: describe(stat.statistic, &subject, diagnosed),
            category: category_of(stat.statistic),
            level: level_of(stat.statistic, diagnosed),
            comparison_type: ComparisonType::Point,
            expected_value: None,
            range_low: None,
            range_high: None,
            expected_sd: None,
            reference_n: None,
            qualitative: None,
            diagnosed,
            statistic: Some(stat.statistic),
            subject: stat.subject.clone(),
            target: String::new(),
            references: Vec::new(),
            fixed: false,
            remove: false,
        };
        merge_references(&mut s.references, &stat.references);
        s.apply_correction(&stat.value);

        match stat.statistic {
            StatKind::MeasurementExpectation => {
                s.comparison_type = ComparisonType::GreaterThan;
                s.expected_value = Some(COMPLETENESS_PERCENT);
                s.range_low = None;
                s.range_high = None;
                s.qualitative = None;
            }
            StatKind::AgeMean => {
                if matches!(stat.value, StatValue::Point(_)) {
                    s.comparison_type = ComparisonType::DistributionWelch;
                }
                s.reference_n = stat.sample_size;
                let key = (subject.to_lowercase(), diagnosed);
                if let Some(sd) = pending_sd.remove(&key) {
                    attach_sd(&mut s, sd);
                }
                age_slots.insert(key, out.len());
            }
            StatKind::DemographicShare => {
                s.target = stat
                    .attribute
                    .clone()
                    .or_else(|| demographic_target(codes, &subject))
                    .unwrap_or_default();
            }
            _ => {}
        }
        out.push(s);
    }
    for ((subject, _), sd) in pending_sd {
        log::warn!("age SD for `{subject}` has no matching mean; ignored");
        let _ = sd;
    }
    out
}

fn attach_sd(s: &mut TestSuggestion, sd: &GroundedStat) {
    if let StatValue::Point(v) = sd.value {
        s.expected_sd = Some(v);
    }
    if s.reference_n.is_none() {
        s.reference_n = sd.sample_size;
    }
    merge_references(&mut s.references, &sd.references);
}

/// Vocabulary domain searched for the subject of a code-bound statistic.
pub fn code_domain(kind: StatKind) -> Option<Domain> {
    match kind {
        StatKind::ComorbidityRate => Some(Domain::Condition),
        StatKind::DrugShare => Some(Domain::Drug),
        StatKind::MeasurementExpectation => Some(Domain::Measurement),
        _ => None,
    }
}

fn data_domain(domain: Domain) -> Option<DataDomain> {
    match domain {
        Domain::Condition => Some(DataDomain::Diagnosis),
        Domain::Drug => Some(DataDomain::Drug),
        Domain::Measurement => Some(DataDomain::Measurement),
        Domain::Procedure => Some(DataDomain::Procedure),
        Domain::Demographic => None,
    }
}

/// Searches code lists for the study condition and for every code-bound
/// statistic subject, restricted to the classification system the study spec
/// declares for each domain.
pub fn lookup_codes(
    spec: &StudySpec,
    stats: &[GroundedStat],
    index: &EmbeddingIndex,
    embedder: &dyn Embedder,
    min_similarity: f64,
) -> Result<CodeBook, VocabError> {
    let mut queries = vec![(Domain::Condition, spec.condition.clone())];
    for stat in stats {
        if let Some(domain) = code_domain(stat.statistic) {
            queries.push((domain, clean_subject(&stat.subject)));
        }
    }
    let mut book = CodeBook::new();
    for (domain, query) in queries {
        if book.get(domain, &query).is_some() {
            continue;
        }
        let request = SearchRequest {
            query: &query,
            domain,
            vocabulary: data_domain(domain).and_then(|d| spec.coding_system(d)),
            k: DEFAULT_K,
            min_similarity: Some(min_similarity),
        };
        let list = index.search(&request, embedder)?;
        if let Some(w) = &list.warning {
            log::warn!("{w}");
        }
        book.insert(list);
    }
    Ok(book)
}

/// Output of the generation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub suggestions: Vec<TestSuggestion>,
    pub codes: CodeBook,
    pub statistics: usize,
    /// Suggestions before review.
    pub suggested: usize,
    pub removed: usize,
    pub fixed: usize,
}

/// Fetches statistics, searches their code lists, records the demographic
/// values present in `frames`, suggests tests and reviews them.
pub fn generate(
    spec: &StudySpec,
    provider: &dyn KnowledgeProvider,
    index: &EmbeddingIndex,
    embedder: &dyn Embedder,
    frames: Option<&Frames>,
    min_similarity: f64,
) -> Result<Generated, GenError> {
    let stats = provider.fetch_statistics(spec).map_err(GenError::Fetch)?;
    let mut codes = lookup_codes(spec, &stats, index, embedder, min_similarity)?;
    if let Some(frames) = frames {
        codes.insert(extract_demographic_codes(frames));
    }
    let suggestions = suggest(spec, &stats, &codes);
    let suggested = suggestions.len();
    let suggestions = double_pass_validate(suggestions, provider, spec)?;
    Ok(Generated {
        removed: suggested - suggestions.len(),
        fixed: suggestions.iter().filter(|s| s.fixed).count(),
        statistics: stats.len(),
        suggested,
        suggestions,
        codes,
    })
}

/// Drops removed suggestions and repeats of `(description, expected value
/// or range)`, keeping the first.
pub fn dedup(suggestions: Vec<TestSuggestion>) -> Vec<TestSuggestion> {
    let mut seen = HashSet::new();
    suggestions
        .into_iter()
        .filter(|s| !s.remove && seen.insert(s.dedup_key()))
        .collect()
}

/// Reviews every suggestion with the provider. `Remove` verdicts drop the
/// suggestion, `Fix` verdicts replace the reference value and set `fixed`,
/// verdict references are appended, and repeats are collapsed.
///
/// Any provider failure aborts the whole pass; the error carries the
/// suggestions validated so far.
pub fn double_pass_validate(
    suggestions: Vec<TestSuggestion>,
    provider: &dyn KnowledgeProvider,
    spec: &StudySpec,
) -> Result<Vec<TestSuggestion>, GenError> {
    let total = suggestions.len();
    let mut out = Vec::with_capacity(total);
    for (i, mut s) in suggestions.into_iter().enumerate() {
        if s.remove {
            continue;
        }
        let Some(stat) = s.to_stat() else {
            out.push(s);
            continue;
        };
        let verdict = match provider.validate_statistic(&stat, spec).and_then(|v| v.validate().map(|_| v)) {
            Ok(v) => v,
            Err(source) => {
                return Err(GenError::Provider {
                    completed: i,
                    total,
                    partial: out,
                    source,
                })
            }
        };
        match verdict.recommendation {
            Recommendation::Remove => continue,
            Recommendation::Fix => {
                if let Some(v) = &verdict.corrected_value {
                    s.apply_correction(v);
                }
                s.fixed = true;
            }
            Recommendation::NoFix => {}
        }
        merge_references(&mut s.references, &verdict.references);
        out.push(s);
    }
    Ok(dedup(out))
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

fn quote(field: &str, force: bool) -> String {
    let needs = force || field.contains(['|', '"', '\n', '\r']);
    if needs {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn join_references(refs: &[String]) -> String {
    refs.iter()
        .map(|r| r.replace('\\', "\\\\").replace(';', "\\;"))
        .collect::<Vec<_>>()
        .join("; ")
}

fn split_references(field: &str) -> Vec<String> {
    if field.is_empty() {
        return Vec::new();
    }
    let mut refs = Vec::new();
    let mut cur = String::new();
    let mut chars = field.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => cur.extend(chars.next()),
            ';' => {
                refs.push(std::mem::take(&mut cur));
                if chars.peek() == Some(&' ') {
                    chars.next();
                }
            }
            _ => cur.push(c),
        }
    }
    refs.push(cur);
    refs
}

/// Writes the pipe-delimited matrix; references are always double-quoted.
pub fn serialize_matrix(suggestions: &[TestSuggestion]) -> String {
    let mut out = MATRIX_HEADER.join("|");
    out.push('\n');
    for s in suggestions {
        let fields = [
            quote(&s.description, false),
            s.category.to_string(),
            s.level.to_string(),
            s.comparison_type.to_string(),
            fmt_opt(s.expected_value),
            fmt_opt(s.range_low),
            fmt_opt(s.range_high),
            fmt_opt(s.expected_sd),
            fmt_opt(s.reference_n),
            quote(s.qualitative.as_deref().unwrap_or(""), false),
            fmt_bool(s.diagnosed).into(),
            s.statistic.map(|k| k.as_str().to_string()).unwrap_or_default(),
            quote(&s.subject, false),
            quote(&s.target, false),
            quote(&join_references(&s.references), true),
            fmt_bool(s.fixed).into(),
            fmt_bool(s.remove).into(),
        ];
        out.push_str(&fields.join("|"));
        out.push('\n');
    }
    out
}

/// Parses a matrix written by [`serialize_matrix`] (or by hand).
pub fn parse_matrix(text: &str) -> Result<Vec<TestSuggestion>, GenError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'|')
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| GenError::Matrix {
        row: 0,
        message: e.to_string(),
    })?;
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != MATRIX_HEADER {
        return Err(GenError::Matrix {
            row: 0,
            message: format!("header must be `{}`", MATRIX_HEADER.join("|")),
        });
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| GenError::Matrix {
            row,
            message: e.to_string(),
        })?;
        let err = |message: String| GenError::Matrix { row, message };
        let f = |k: usize| record.get(k).unwrap_or("");
        let num = |k: usize| -> Result<Option<f64>, GenError> {
            let v = f(k).trim();
            if v.is_empty() {
                return Ok(None);
            }
            v.parse::<f64>()
                .map(Some)
                .map_err(|_| err(format!("{}: `{v}` is not a number", MATRIX_HEADER[k])))
        };
        let boolean = |k: usize| -> Result<bool, GenError> {
            match f(k).trim().to_ascii_lowercase().as_str() {
                "true" => Ok(true),
                "false" | "" => Ok(false),
                v => Err(err(format!("{}: `{v}` is not True/False", MATRIX_HEADER[k]))),
            }
        };
        let reference_n = match f(8).trim() {
            "" => None,
            v => Some(v.parse::<u64>().map_err(|_| err(format!("reference_n: `{v}` is not a count")))?),
        };
        let statistic = match f(11).trim() {
            "" => None,
            v => Some(StatKind::parse(v).ok_or_else(|| err(format!("unknown statistic `{v}`")))?),
        };
        let suggestion = TestSuggestion {
            description: f(0).to_string(),
            category: f(1).trim().parse().map_err(err)?,
            level: f(2).trim().parse().map_err(err)?,
            comparison_type: f(3).trim().parse().map_err(err)?,
            expected_value: num(4)?,
            range_low: num(5)?,
            range_high: num(6)?,
            expected_sd: num(7)?,
            reference_n,
            qualitative: Some(f(9).to_string()).filter(|q| !q.is_empty()),
            diagnosed: boolean(10)?,
            statistic,
            subject: f(12).to_string(),
            target: f(13).to_string(),
            references: split_references(f(14)),
            fixed: boolean(15)?,
            remove: boolean(16)?,
        };
        suggestion.validate().map_err(|e| err(e.to_string()))?;
        out.push(suggestion);
    }
    Ok(out)
}

/// Study-level inputs to [`compile`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteContext {
    pub condition: String,
    pub region: String,
    pub coding_systems: BTreeMap<DataDomain, String>,
    pub generation_metadata: GenerationMetadata,
}

impl SuiteContext {
    pub fn from_spec(spec: &StudySpec, generation_metadata: GenerationMetadata) -> Self {
        SuiteContext {
            condition: spec.condition.clone(),
            region: spec.region.clone(),
            coding_systems: spec.coding_systems.clone(),
            generation_metadata,
        }
    }
}

struct Binder<'a> {
    schemas: &'a [TableSchema],
    codes: &'a CodeBook,
    warnings: Vec<String>,
}

impl Binder<'_> {
    fn columns(&self) -> impl Iterator<Item = (&TableSchema, &crate::frame::ColumnSchema)> {
        self.schemas.iter().flat_map(|t| t.columns.iter().map(move |c| (t, c)))
    }

    fn first_with_role(&self, role: ColumnRole) -> Option<ColumnRef> {
        self.columns()
            .find(|(_, c)| c.role == role)
            .map(|(t, c)| ColumnRef::new(&t.table_name, &c.name))
    }

    fn date_in(&self, table: &str) -> Option<ColumnRef> {
        let t = self.schemas.iter().find(|t| t.table_name == table)?;
        t.columns_with_role(ColumnRole::Date)
            .next()
            .map(|c| ColumnRef::new(table, &c.name))
    }

    /// Resolves target text against columns with one of `roles`.
    fn resolve(&mut self, name: &str, target: &str, roles: &[ColumnRole]) -> Result<Option<ColumnRef>, String> {
        let target = target.trim();
        if target.is_empty() {
            return Ok(None);
        }
        if let Some((table, column)) = target.split_once('.') {
            if self.columns().any(|(t, c)| t.table_name == table && c.name == column) {
                return Ok(Some(ColumnRef::new(table, column)));
            }
            return Err(format!("target column `{target}` is not in the schema"));
        }
        let hint = target.to_lowercase();
        let matches: Vec<ColumnRef> = self
            .columns()
            .filter(|(_, c)| roles.contains(&c.role) && c.name.to_lowercase().contains(&hint))
            .map(|(t, c)| ColumnRef::new(&t.table_name, &c.name))
            .collect();
        if matches.len() > 1 {
            let list: Vec<String> = matches.iter().map(ToString::to_string).collect();
            self.warnings.push(format!(
                "`{name}`: target `{target}` matches {}; using {}",
                list.join(", "),
                matches[0]
            ));
        }
        matches
            .into_iter()
            .next()
            .map(Some)
            .ok_or_else(|| format!("no column matches target `{target}`"))
    }

    fn code_list(&self, domain: Domain, subject: &str) -> Option<&CodeList> {
        self.codes.get(domain, subject).filter(|l| !l.is_empty())
    }

    fn bind(&mut self, name: &str, s: &TestSuggestion, ctx: &SuiteContext) -> Result<Target, String> {
        if s.comparison_type == ComparisonType::DtypeCheck {
            let code_formats = self
                .columns()
                .filter_map(|(t, c)| {
                    let system = ctx.coding_systems.get(&c.role.data_domain()?)?;
                    Some(CodeFormat {
                        column: ColumnRef::new(&t.table_name, &c.name),
                        system: system.clone(),
                    })
                })
                .collect();
            return Ok(Target::Schema { code_formats });
        }
        let kind = s.statistic.ok_or("suggestion names no statistic")?;
        let subject = clean_subject(&s.subject);
        let condition = || {
            self.first_with_role(ColumnRole::DiagnosisCode)
                .ok_or_else(|| "schema has no diagnosis code column".to_string())
        };
        match kind {
            StatKind::Prevalence => Ok(Target::Cohort { condition: condition()? }),
            StatKind::Incidence => {
                let condition = condition()?;
                let date = self
                    .date_in(&condition.table)
                    .ok_or_else(|| format!("table `{}` has no date column", condition.table))?;
                Ok(Target::Incidence { condition, date })
            }
            StatKind::MortalityRate | StatKind::LifetimeRisk => {
                Err(format!("no column in the schema records {}", kind.as_str().replace('_', " ")))
            }
            StatKind::AgeMean | StatKind::AgeSd => {
                let condition = condition()?;
                let date = self
                    .date_in(&condition.table)
                    .ok_or_else(|| format!("table `{}` has no date column", condition.table))?;
                let birth = match self.resolve(name, &s.target, &[ColumnRole::Date])? {
                    Some(c) => c,
                    None => self
                        .columns()
                        .filter(|(t, c)| c.role == ColumnRole::Date && t.table_name != condition.table)
                        .max_by_key(|(_, c)| c.name.to_lowercase().contains("birth"))
                        .map(|(t, c)| ColumnRef::new(&t.table_name, &c.name))
                        .ok_or("schema has no birth date column")?,
                };
                if s.comparison_type == ComparisonType::DistributionWelch && s.expected_sd.is_none() {
                    return Err("no reference standard deviation for the age distribution".into());
                }
                Ok(Target::Age { birth, condition, date })
            }
            StatKind::DemographicShare => {
                let column = match self.resolve(name, &s.target, &[ColumnRole::Demographic])? {
                    Some(c) => c,
                    None => match demographic_target(self.codes, &subject) {
                        Some(vocabulary) => {
                            let (table, column) = vocabulary
                                .split_once('.')
                                .ok_or_else(|| format!("bad demographic source `{vocabulary}`"))?;
                            ColumnRef::new(table, column)
                        }
                        None => return Err(format!("no demographic column holds `{subject}`")),
                    },
                };
                Ok(Target::Demographic { column, value: subject })
            }
            StatKind::ComorbidityRate | StatKind::DrugShare | StatKind::MeasurementExpectation => {
                let (role, domain) = match kind {
                    StatKind::ComorbidityRate => (ColumnRole::DiagnosisCode, Domain::Condition),
                    StatKind::DrugShare => (ColumnRole::DrugCode, Domain::Drug),
                    _ => (ColumnRole::MeasurementCode, Domain::Measurement),
                };
                let column = match self.resolve(name, &s.target, &[role])? {
                    Some(c) => c,
                    None => self
                        .first_with_role(role)
                        .ok_or_else(|| format!("schema has no {domain} code column"))?,
                };
                let list = self
                    .code_list(domain, &subject)
                    .ok_or_else(|| format!("no {domain} codes found for `{subject}`"))?;
                let codes: BTreeSet<String> = list.normalized_codes().into_iter().collect();
                Ok(Target::Codes {
                    column,
                    codes: codes.into_iter().collect(),
                })
            }
        }
    }
}

/// Unique test names: repeats of a description get ` 1`, ` 2`, ... suffixes.
fn unique_names<'a>(descriptions: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut taken = HashSet::new();
    let mut counters: HashMap<&str, usize> = HashMap::new();
    descriptions
        .map(|d| {
            if taken.insert(d.to_string()) {
                return d.to_string();
            }
            let n = counters.entry(d).or_insert(0);
            loop {
                *n += 1;
                let candidate = format!("{d} {n}");
                if taken.insert(candidate.clone()) {
                    return candidate;
                }
            }
        })
        .collect()
}

/// Binds validated suggestions to the schema and code lists. Suggestions
/// that cannot be bound, carry no reference or a qualitative value become
/// No Reference cases; nothing is dropped except `remove` entries.
pub fn compile(
    suggestions: &[TestSuggestion],
    codes: &CodeBook,
    schemas: &[TableSchema],
    ctx: SuiteContext,
) -> Result<TestSuite, GenError> {
    if schemas.is_empty() {
        return Err(GenError::Compile("no tables declared".into()));
    }
    for schema in schemas {
        schema.validate().map_err(|e| GenError::Compile(e.to_string()))?;
        if !schema.has_role(ColumnRole::PersonId) {
            return Err(GenError::Compile(format!(
                "table `{}` has no person_id column",
                schema.table_name
            )));
        }
    }
    let kept: Vec<&TestSuggestion> = suggestions.iter().filter(|s| !s.remove).collect();
    for s in &kept {
        s.validate()?;
    }

    let cohort_codes = match codes.get(Domain::Condition, &ctx.condition) {
        Some(list) => list.clone(),
        None => CodeList::user_supplied(ctx.condition.clone(), Domain::Condition, Vec::new()),
    };
    let mut binder = Binder {
        schemas,
        codes,
        warnings: Vec::new(),
    };
    if cohort_codes.is_empty() {
        binder
            .warnings
            .push(format!("no condition codes for `{}`; the cohort will be empty", ctx.condition));
    }

    let names = unique_names(kept.iter().map(|s| s.description.as_str()));
    let mut cases = Vec::with_capacity(kept.len());
    for (s, name) in kept.into_iter().zip(names) {
        let binding = binder.bind(&name, s, &ctx);
        let diagnosed = s.diagnosed || matches!(s.statistic, Some(StatKind::AgeMean | StatKind::AgeSd));
        let cohort_scope = if diagnosed {
            CohortScope::Diagnosed
        } else {
            CohortScope::Population
        };
        let cohort = match (&binding, cohort_scope) {
            (Ok(Target::Age { condition, .. }), _) => Some(condition.clone()),
            (Ok(Target::Schema { .. }), _) => None,
            (Ok(_), CohortScope::Diagnosed) => binder.first_with_role(ColumnRole::DiagnosisCode),
            _ => None,
        };
        let mut note = None;
        let reference_status = if let Err(reason) = &binding {
            note = Some(reason.clone());
            ReferenceStatus::NoReference
        } else if s.qualitative.is_some() {
            note = Some("qualitative reference value".into());
            ReferenceStatus::NoReference
        } else if s.references.is_empty() {
            note = Some("no reference for this statistic".into());
            ReferenceStatus::NoReference
        } else if diagnosed && cohort.is_none() {
            note = Some("schema has no diagnosis code column".into());
            ReferenceStatus::NoReference
        } else {
            ReferenceStatus::Referenced
        };
        let expected = match reference_status {
            ReferenceStatus::NoReference => None,
            ReferenceStatus::Referenced => Expected::from_suggestion(s),
        };
        cases.push(TestCase {
            name,
            category: s.category,
            level: s.level,
            comparison_type: s.comparison_type,
            expected,
            unit: if matches!(s.statistic, Some(StatKind::AgeMean | StatKind::AgeSd)) {
                Unit::Native
            } else {
                Unit::Percent
            },
            cohort_scope,
            target: binding.unwrap_or_else(|reason| Target::Unbound { reason }),
            cohort,
            references: s.references.clone(),
            reference_status,
            note,
        });
    }
    for w in &binder.warnings {
        log::warn!("{w}");
    }
    let suite = TestSuite {
        condition: ctx.condition,
        region: ctx.region,
        cases,
        cohort_codes,
        generation_metadata: ctx.generation_metadata,
        warnings: binder.warnings,
    };
    suite.validate().map_err(GenError::Compile)?;
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{ColumnSchema, DeclaredType};
    use crate::provider::MockProvider;
    use crate::vocab::{Concept, Provenance};
    use proptest::prelude::*;

    fn spec() -> StudySpec {
        StudySpec {
            condition: "type 2 diabetes".into(),
            region: "US".into(),
            coding_systems: [
                (DataDomain::Diagnosis, "SNOMED".to_string()),
                (DataDomain::Drug, "RxNorm".to_string()),
            ]
            .into_iter()
            .collect(),
            schema_ref: "schema.json".into(),
            tables: BTreeMap::new(),
            base_dir: Default::default(),
        }
    }

    fn col(name: &str, t: DeclaredType, role: ColumnRole) -> ColumnSchema {
        ColumnSchema {
            name: name.into(),
            declared_type: t,
            role,
            nullable: true,
        }
    }

    fn schemas() -> Vec<TableSchema> {
        vec![
            TableSchema {
                table_name: "person".into(),
                columns: vec![
                    col("person_id", DeclaredType::Integer, ColumnRole::PersonId),
                    col("gender", DeclaredType::Text, ColumnRole::Demographic),
                    col("race", DeclaredType::Text, ColumnRole::Demographic),
                    col("birth_date", DeclaredType::Date, ColumnRole::Date),
                ],
            },
            TableSchema {
                table_name: "condition".into(),
                columns: vec![
                    col("person_id", DeclaredType::Integer, ColumnRole::PersonId),
                    col("condition_code", DeclaredType::Code, ColumnRole::DiagnosisCode),
                    col("start_date", DeclaredType::Date, ColumnRole::Date),
                ],
            },
            TableSchema {
                table_name: "drug".into(),
                columns: vec![
                    col("person_id", DeclaredType::Integer, ColumnRole::PersonId),
                    col("drug_code", DeclaredType::Code, ColumnRole::DrugCode),
                ],
            },
        ]
    }

    fn concept(id: i64, name: &str, vocabulary: &str, code: &str, domain: Domain) -> Concept {
        Concept {
            concept_id: id,
            concept_name: name.into(),
            vocabulary: vocabulary.into(),
            concept_code: code.into(),
            domain,
        }
    }

    fn codes() -> CodeBook {
        [
            CodeList::user_supplied(
                "type 2 diabetes",
                Domain::Condition,
                vec![concept(1, "T2D", "SNOMED", "44054006", Domain::Condition)],
            ),
            CodeList::user_supplied(
                "Metformin",
                Domain::Drug,
                vec![concept(2, "Metformin", "RxNorm", "6809", Domain::Drug)],
            ),
            CodeList::user_supplied("Insulin", Domain::Drug, vec![]),
            CodeList::user_supplied(
                crate::vocab::DEMOGRAPHICS_QUERY,
                Domain::Demographic,
                vec![
                    concept(1, "Female", "person.gender", "Female", Domain::Demographic),
                    concept(2, "White", "person.race", "White", Domain::Demographic),
                ],
            ),
        ]
        .into_iter()
        .collect()
    }

    fn stat(kind: StatKind, subject: &str, value: f64, diagnosed: bool) -> GroundedStat {
        let mut s = GroundedStat::new(kind, subject, StatValue::Point(value));
        s.diagnosed_scope = diagnosed;
        s.references = vec![format!("ref for {subject}")];
        s
    }

    fn ctx() -> SuiteContext {
        SuiteContext::from_spec(&spec(), GenerationMetadata::default())
    }

    #[test]
    fn prevalence_becomes_point_check() {
        let out = suggest(&spec(), &[stat(StatKind::Prevalence, "type 2 diabetes", 11.3, false)], &codes());
        assert_eq!(out.len(), 2);
        let s = &out[1];
        assert_eq!(s.description, "check prevalence");
        assert_eq!(s.comparison_type, ComparisonType::Point);
        assert_eq!(s.expected_value, Some(11.3));
        assert_eq!(s.level, Level::Distribution);
    }

    #[test]
    fn lab_expectation_becomes_completeness_check() {
        let out = suggest(
            &spec(),
            &[stat(StatKind::MeasurementExpectation, "Hemoglobin A1c measurement", 6.5, true)],
            &codes(),
        );
        let s = &out[1];
        assert_eq!(s.comparison_type, ComparisonType::GreaterThan);
        assert_eq!(s.expected_value, Some(95.0));
        assert_eq!(s.category, Category::Measurement);
    }

    #[test]
    fn no_statistics_gives_only_the_metadata_check() {
        let out = suggest(&spec(), &[], &codes());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].comparison_type, ComparisonType::DtypeCheck);
        assert_eq!(out[0].level, Level::Metadata);
    }

    #[test]
    fn age_mean_and_sd_merge() {
        let mut sd = stat(StatKind::AgeSd, "Age at diagnosis", 12.1, true);
        sd.references = vec!["sd ref".into()];
        let mut mean = stat(StatKind::AgeMean, "Age at diagnosis", 52.0, true);
        mean.sample_size = Some(5000);
        let out = suggest(&spec(), &[sd, mean], &codes());
        assert_eq!(out.len(), 2);
        let s = &out[1];
        assert_eq!(s.comparison_type, ComparisonType::DistributionWelch);
        assert_eq!((s.expected_value, s.expected_sd, s.reference_n), (Some(52.0), Some(12.1), Some(5000)));
        assert_eq!(s.level, Level::Subpopulation);
        assert_eq!(s.references.len(), 2);
    }

    #[test]
    fn demographic_target_is_inferred_from_data_values() {
        let out = suggest(&spec(), &[stat(StatKind::DemographicShare, "Female", 50.8, false)], &codes());
        assert_eq!(out[1].target, "person.gender");
        let mut hinted = stat(StatKind::DemographicShare, "Asian", 6.2, false);
        hinted.attribute = Some("race".into());
        assert_eq!(suggest(&spec(), &[hinted], &codes())[1].target, "race");
    }

    #[test]
    fn markers_are_stripped_from_descriptions() {
        assert_eq!(clean_subject("Retinopathy!fixme"), "Retinopathy");
        assert_eq!(clean_subject(" Gout !drop "), "Gout");
        let out = suggest(&spec(), &[stat(StatKind::ComorbidityRate, "Retinopathy!fixme", 35.0, true)], &codes());
        assert_eq!(out[1].description, "Retinopathy diagnosis diagnosed");
        assert_eq!(out[1].subject, "Retinopathy!fixme");
    }

    fn mock() -> MockProvider {
        MockProvider::from_json(
            "m",
            r#"{"version":1,"entries":[{"condition":"type 2 diabetes","region":"US","statistics":[
                {"statistic":"comorbidity_rate","subject":"Retinopathy!fixme","value":35.0,"diagnosed":true,
                 "canonical_value":28.5,"references":["canonical ref"]}]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn double_pass_fixes_drops_and_dedups() {
        let stats = [
            stat(StatKind::ComorbidityRate, "Retinopathy!fixme", 35.0, true),
            stat(StatKind::ComorbidityRate, "Gout!drop", 9.0, true),
            stat(StatKind::Prevalence, "type 2 diabetes", 11.3, false),
            stat(StatKind::Prevalence, "type 2 diabetes", 11.3, false),
        ];
        let sugg = suggest(&spec(), &stats, &codes());
        assert_eq!(sugg.len(), 5);
        let out = double_pass_validate(sugg, &mock(), &spec()).unwrap();
        assert_eq!(out.len(), 3);
        let retino = out.iter().find(|s| s.description.starts_with("Retinopathy")).unwrap();
        assert!(retino.fixed);
        assert_eq!(retino.expected_value, Some(28.5));
        assert!(retino.references.contains(&"canonical ref".to_string()));
        assert!(out.iter().all(|s| !s.description.starts_with("Gout")));
        assert_eq!(double_pass_validate(out.clone(), &mock(), &spec()).unwrap(), out);
    }

    struct Failing;

    impl KnowledgeProvider for Failing {
        fn identity(&self) -> String {
            "failing".into()
        }
        fn fetch_statistics(&self, _: &StudySpec) -> Result<Vec<GroundedStat>, ProviderError> {
            Ok(vec![])
        }
        fn validate_statistic(&self, s: &GroundedStat, _: &StudySpec) -> Result<crate::provider::ValidationVerdict, ProviderError> {
            if s.subject == "b" {
                Err(ProviderError::Transport {
                    attempts: 3,
                    message: "down".into(),
                })
            } else {
                Ok(crate::provider::ValidationVerdict {
                    feedback: crate::provider::Feedback::Correct,
                    recommendation: Recommendation::NoFix,
                    corrected_value: None,
                    references: vec![],
                })
            }
        }
    }

    #[test]
    fn provider_failure_aborts_with_partial_progress() {
        let stats = [
            stat(StatKind::DrugShare, "a", 1.0, true),
            stat(StatKind::DrugShare, "b", 2.0, true),
            stat(StatKind::DrugShare, "c", 3.0, true),
        ];
        let sugg = suggest(&spec(), &stats, &codes());
        match double_pass_validate(sugg, &Failing, &spec()).unwrap_err() {
            GenError::Provider {
                completed, total, partial, ..
            } => {
                assert_eq!((completed, total), (2, 4));
                assert_eq!(partial.len(), 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn matrix_single_row_and_empty() {
        assert_eq!(serialize_matrix(&[]), format!("{}\n", MATRIX_HEADER.join("|")));
        assert!(parse_matrix(&serialize_matrix(&[])).unwrap().is_empty());
        let s = suggest(&spec(), &[stat(StatKind::Prevalence, "x", 11.3, false)], &codes());
        let text = serialize_matrix(&s[1..]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[1],
            "check prevalence|diagnosis|distribution|point|11.3||||||False|prevalence|x||\"ref for x\"|False|False"
        );
    }

    #[test]
    fn matrix_pipes_inside_quoted_references_survive() {
        let mut s = suggest(&spec(), &[stat(StatKind::Prevalence, "x", 11.3, false)], &codes()).remove(1);
        s.references = vec!["A | B (https://x.org/?a=1;b=2)".into(), "say \"hi\"".into()];
        let back = parse_matrix(&serialize_matrix(std::slice::from_ref(&s))).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn unknown_comparison_type_reports_row() {
        let mut text = serialize_matrix(&suggest(&spec(), &[], &codes()));
        text.push_str("bad|diagnosis|distribution|approximately|1||||||||||\"\"|False|False\n");
        match parse_matrix(&text).unwrap_err() {
            GenError::Matrix { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("approximately"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invalid_range_is_rejected() {
        let mut s = metadata_suggestion();
        s.comparison_type = ComparisonType::Range;
        s.range_low = Some(5.0);
        s.range_high = Some(1.0);
        assert!(s.validate().is_err());
        s.range_high = Some(6.0);
        assert!(s.validate().is_ok());
        s.expected_value = Some(5.5);
        assert!(s.validate().is_err());
        s.comparison_type = ComparisonType::Point;
        s.expected_value = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn correction_switches_comparison_type() {
        let mut s = suggest(&spec(), &[stat(StatKind::Prevalence, "x", 11.3, false)], &codes()).remove(1);
        s.apply_correction(&StatValue::Range { low: 10.0, high: 12.0 });
        assert_eq!(s.comparison_type, ComparisonType::Range);
        assert_eq!(s.expected_value, None);
        s.validate().unwrap();
        s.apply_correction(&StatValue::Point(9.0));
        assert_eq!(s.comparison_type, ComparisonType::Point);
        s.validate().unwrap();
    }

    #[test]
    fn compile_binds_and_flags_no_reference() {
        let stats = [
            stat(StatKind::DemographicShare, "Female", 50.8, false),
            stat(StatKind::DrugShare, "Metformin", 48.6, true),
            stat(StatKind::DrugShare, "Insulin", 30.0, true),
            stat(StatKind::MortalityRate, "t2d", 3.0, false),
            GroundedStat::new(StatKind::ComorbidityRate, "Fatty liver disease", StatValue::Point(50.0)),
        ];
        let sugg = suggest(&spec(), &stats, &codes());
        let suite = compile(&sugg, &codes(), &schemas(), ctx()).unwrap();
        assert_eq!(suite.cases.len(), 6);
        let by = |n: &str| suite.cases.iter().find(|c| c.name == n).unwrap();
        match &by("Female").target {
            Target::Demographic { column, value } => {
                assert_eq!(column.to_string(), "person.gender");
                assert_eq!(value, "Female");
            }
            t => panic!("unexpected {t:?}"),
        }
        assert_eq!(by("Metformin").reference_status, ReferenceStatus::Referenced);
        assert_eq!(by("Metformin").cohort_scope, CohortScope::Diagnosed);
        assert_eq!(by("Insulin").reference_status, ReferenceStatus::NoReference);
        assert!(by("Insulin").note.as_deref().unwrap().contains("no drug codes"));
        assert_eq!(by("check mortality rate").reference_status, ReferenceStatus::NoReference);
        assert_eq!(by("Fatty liver disease diagnosis").reference_status, ReferenceStatus::NoReference);
        assert_eq!(by(DTYPE_DESCRIPTION).reference_status, ReferenceStatus::Referenced);
        match &by(DTYPE_DESCRIPTION).target {
            Target::Schema { code_formats } => assert_eq!(code_formats.len(), 2),
            t => panic!("unexpected {t:?}"),
        }
        assert!(suite.cases.iter().all(|c| c.reference_status == ReferenceStatus::NoReference || !c.references.is_empty()));
        assert_eq!(suite.cohort_codes.concepts.len(), 1);
    }

    #[test]
    fn repeated_descriptions_get_numbered_names() {
        let stats = [
            stat(StatKind::MeasurementExpectation, "Serum creatinine measurement", 1.0, true),
            stat(StatKind::MeasurementExpectation, "Serum creatinine measurement", 2.0, true),
        ];
        let mut sugg = suggest(&spec(), &stats, &codes());
        sugg[2].expected_value = Some(90.0);
        let suite = compile(&sugg, &codes(), &schemas(), ctx()).unwrap();
        let names: Vec<_> = suite.cases.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, [DTYPE_DESCRIPTION, "Serum creatinine measurement", "Serum creatinine measurement 1"]);
    }

    #[test]
    fn explicit_and_hinted_targets() {
        let mut a = stat(StatKind::DemographicShare, "Asian", 6.2, false);
        a.attribute = Some("race".into());
        let mut b = stat(StatKind::DemographicShare, "Other", 6.2, false);
        b.attribute = Some("person.race".into());
        let mut c = stat(StatKind::DemographicShare, "Nobody", 1.0, false);
        c.attribute = Some("person.shoe_size".into());
        let suite = compile(&suggest(&spec(), &[a, b, c], &codes()), &codes(), &schemas(), ctx()).unwrap();
        for (i, expect) in [(1, Some("person.race")), (2, Some("person.race")), (3, None)] {
            match (&suite.cases[i].target, expect) {
                (Target::Demographic { column, .. }, Some(e)) => assert_eq!(column.to_string(), e),
                (Target::Unbound { reason }, None) => assert!(reason.contains("shoe_size")),
                (t, e) => panic!("{t:?} vs {e:?}"),
            }
        }
    }

    #[test]
    fn schema_without_person_id_fails_to_compile() {
        let mut s = schemas();
        s[2].columns[0].role = ColumnRole::Other;
        let err = compile(&suggest(&spec(), &[], &codes()), &codes(), &s, ctx()).unwrap_err();
        assert!(matches!(err, GenError::Compile(_)), "{err}");
    }

    #[test]
    fn qualitative_values_compile_to_no_reference() {
        let mut q = stat(StatKind::ComorbidityRate, "Neuropathy", 0.0, true);
        q.value = StatValue::Qualitative("common".into());
        let sugg = suggest(&spec(), &[q], &codes());
        sugg[1].validate().unwrap();
        let suite = compile(&sugg, &codes(), &schemas(), ctx()).unwrap();
        assert_eq!(suite.cases[1].reference_status, ReferenceStatus::NoReference);
        assert_eq!(suite.cases[1].expected, None);
        let _ = Provenance::UserSupplied;
    }

    fn any_text() -> impl Strategy<Value = String> {
        "[ -~]{0,12}"
    }

    fn any_suggestion() -> impl Strategy<Value = TestSuggestion> {
        let numbers = (
            prop::option::of(-1e6f64..1e6),
            prop::option::of(-1e3f64..1e3),
            prop::option::of(0u64..100_000),
        );
        (
            (
                any_text(),
                prop::sample::select(Category::ALL),
                prop::sample::select(Level::ALL),
                0usize..6,
                numbers,
            ),
            (
                prop::option::of("[!-~][ -~]{0,8}"),
                any::<bool>(),
                prop::option::of(prop::sample::select(StatKind::ALL.to_vec())),
                any_text(),
                any_text(),
                prop::collection::vec("[!-~][ -~;\\\\]{0,15}", 0..4),
                any::<bool>(),
                any::<bool>(),
            ),
        )
            .prop_map(|((description, category, level, kind, (v, sd, n)), rest)| {
                let (qualitative, diagnosed, statistic, subject, target, references, fixed, remove) = rest;
                let v = v.unwrap_or(1.5);
                let comparison_type = ComparisonType::ALL[kind];
                let (expected_value, range_low, range_high) = match comparison_type {
                    ComparisonType::Range => (None, Some(v.min(v / 2.0)), Some(v.max(v / 2.0))),
                    ComparisonType::DtypeCheck => (None, None, None),
                    _ => (Some(v), None, None),
                };
                TestSuggestion {
                    description,
                    category,
                    level,
                    comparison_type,
                    expected_value,
                    range_low,
                    range_high,
                    expected_sd: sd.map(f64::abs),
                    reference_n: n,
                    qualitative,
                    diagnosed,
                    statistic,
                    subject,
                    target,
                    references,
                    fixed,
                    remove,
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matrix_round_trip(list in prop::collection::vec(any_suggestion(), 0..6)) {
            for s in &list {
                prop_assert!(s.validate().is_ok(), "{:?}", s.validate());
            }
            let text = serialize_matrix(&list);
            prop_assert_eq!(parse_matrix(&text).unwrap(), list);
        }
    }
}
