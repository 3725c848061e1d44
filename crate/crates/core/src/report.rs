//! Rendering results, and summarizing reference quality from annotations.
//!
//! Reports group results into one table per category, rows sorted by test
//! name. Expected values print with 1 decimal; actual, SMD and ratio with 2
//! (half away from zero). An SMD with `|SMD| >= 0.2` or a ratio outside
//! `[0.85, 1.15]` is emphasized: bold in Markdown, class `fail` in HTML.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::coverage::CoverageReport;
use crate::gensuite::{Category, ComparisonType, Level};
use crate::provider::{StatValue, Unit};
use crate::stats::{round_half_away, RATIO_HIGH, RATIO_LOW, SMD_THRESHOLD};
use crate::testkit::{Expected, Status, TestCase, TestResult, TestSuite};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("results do not match the suite; orphaned: {}", .0.join(", "))]
    Mismatch(Vec<String>),
    #[error("duplicate annotation for `{0}`")]
    DuplicateAnnotation(String),
    #[error("annotation for unknown test `{0}`")]
    UnknownTest(String),
    #[error("annotations file: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Html,
}

/// Report sections in output order.
pub const SECTIONS: [(&str, &[Category]); 5] = [
    ("Demography and Diagnosis Tests", &[Category::Demography, Category::Diagnosis]),
    ("Drug Tests", &[Category::Drug]),
    ("Measurement Tests", &[Category::Measurement]),
    ("Procedure Tests", &[Category::Procedure]),
    ("Metadata Tests", &[Category::Metadata]),
];

const COLUMNS: [&str; 6] = ["Test name", "Result", "Expected value", "Actual value", "SMD", "ratio"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mark {
    Plain,
    Pass,
    Fail,
    NoRef,
}

impl Mark {
    fn class(self) -> Option<&'static str> {
        match self {
            Mark::Plain => None,
            Mark::Pass => Some("pass"),
            Mark::Fail => Some("fail"),
            Mark::NoRef => Some("noref"),
        }
    }
}

struct Cell {
    text: String,
    mark: Mark,
}

impl Cell {
    fn plain(text: impl Into<String>) -> Self {
        Cell {
            text: text.into(),
            mark: Mark::Plain,
        }
    }
}

fn fixed(x: f64, decimals: u32) -> String {
    let r = round_half_away(x, decimals);
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.*}", decimals as usize)
}

fn trimmed(x: f64) -> String {
    let s = fixed(x, 1);
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

fn expected_text(case: &TestCase, expected: &Expected) -> String {
    let pct = if case.unit == Unit::Percent { "%" } else { "" };
    match (case.comparison_type, expected) {
        (ComparisonType::GreaterThan, Expected::Value(v)) => format!(">{}{pct}", trimmed(*v)),
        (ComparisonType::LessThan, Expected::Value(v)) => format!("<{}{pct}", trimmed(*v)),
        (_, Expected::Value(v)) => fixed(*v, 1),
        (_, Expected::Range { low, high }) => format!("{}-{}", fixed(*low, 1), fixed(*high, 1)),
        (_, Expected::Distribution { mean, sd, .. }) => format!("{} ({})", fixed(*mean, 1), fixed(*sd, 1)),
    }
}

fn row(case: &TestCase, r: &TestResult) -> [Cell; 6] {
    let status_mark = match r.status {
        Status::Pass => Mark::Pass,
        Status::Fail | Status::Error => Mark::Fail,
        Status::NoReference => Mark::NoRef,
    };
    let expected = r.expected.as_ref().map(|e| expected_text(case, e)).unwrap_or_default();
    let smd = r.smd.map_or_else(
        || Cell::plain(""),
        |s| Cell {
            text: fixed(s, 2),
            mark: if s.abs() >= SMD_THRESHOLD { Mark::Fail } else { Mark::Pass },
        },
    );
    let ratio = r.ratio.map_or_else(
        || Cell::plain(""),
        |q| Cell {
            text: fixed(q, 2),
            mark: if (RATIO_LOW..=RATIO_HIGH).contains(&q) {
                Mark::Pass
            } else {
                Mark::Fail
            },
        },
    );
    [
        Cell::plain(r.name.clone()),
        Cell {
            text: r.status.to_string(),
            mark: status_mark,
        },
        Cell::plain(expected),
        Cell::plain(r.actual.map(|a| fixed(a, 2)).unwrap_or_default()),
        smd,
        ratio,
    ]
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn title(suite: &TestSuite) -> String {
    format!("{} in {} - Data Quality Evaluation Report", suite.condition, suite.region)
}

fn coverage_lines(coverage: &CoverageReport) -> Vec<(String, String)> {
    let mut lines = vec![("Overall".to_string(), format!("{}%", fixed(coverage.overall_percent, 1)))];
    for level in Level::ALL {
        let pct = coverage.per_level_percent.get(level).copied().unwrap_or(0.0);
        let n = coverage.tests_per_level.get(level).copied().unwrap_or(0);
        lines.push((format!("{level} level ({n} tests)"), format!("{}%", fixed(pct, 1))));
    }
    for (table, pct) in &coverage.per_table_percent {
        lines.push((format!("table {table}"), format!("{}%", fixed(*pct, 1))));
    }
    lines
}

/// Renders the report. Fails when results and suite cases differ by name.
pub fn render_report(
    results: &[TestResult],
    coverage: &CoverageReport,
    suite: &TestSuite,
    format: Format,
) -> Result<String, ReportError> {
    let cases: HashMap<&str, &TestCase> = suite.cases.iter().map(|c| (c.name.as_str(), c)).collect();
    let names: HashSet<&str> = results.iter().map(|r| r.name.as_str()).collect();
    let mut orphaned: Vec<String> = results
        .iter()
        .filter(|r| !cases.contains_key(r.name.as_str()))
        .map(|r| r.name.clone())
        .chain(suite.cases.iter().filter(|c| !names.contains(c.name.as_str())).map(|c| c.name.clone()))
        .collect();
    if !orphaned.is_empty() {
        orphaned.sort();
        return Err(ReportError::Mismatch(orphaned));
    }
    let mut sorted: Vec<&TestResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let sections: Vec<(&str, Vec<[Cell; 6]>)> = SECTIONS
        .iter()
        .map(|(heading, cats)| {
            let rows = sorted
                .iter()
                .filter_map(|r| {
                    let case = cases[r.name.as_str()];
                    cats.contains(&case.category).then(|| row(case, r))
                })
                .collect();
            (*heading, rows)
        })
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in results {
        *counts.entry(r.status.to_string()).or_default() += 1;
    }
    let summary = ["Pass", "Fail", "No Reference", "Error"]
        .iter()
        .map(|s| format!("{s}: {}", counts.get(*s).copied().unwrap_or(0)))
        .collect::<Vec<_>>()
        .join(", ");

    Ok(match format {
        Format::Markdown => markdown(suite, &sections, coverage, &summary),
        Format::Html => html(suite, &sections, coverage, &summary),
    })
}

fn markdown(suite: &TestSuite, sections: &[(&str, Vec<[Cell; 6]>)], coverage: &CoverageReport, summary: &str) -> String {
    let mut out = format!("# {}\n\n{summary}\n", title(suite));
    for (heading, rows) in sections {
        let _ = write!(out, "\n## {heading}\n\n| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(6));
        for cells in rows {
            let texts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let t = md_escape(&c.text);
                    if i >= 4 && c.mark == Mark::Fail {
                        format!("**{t}**")
                    } else {
                        t
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} |", texts.join(" | "));
        }
    }
    out.push_str("\n## Coverage\n\n| Scope | Columns covered |\n|---|---|\n");
    for (k, v) in coverage_lines(coverage) {
        let _ = writeln!(out, "| {k} | {v} |");
    }
    out
}

fn html(suite: &TestSuite, sections: &[(&str, Vec<[Cell; 6]>)], coverage: &CoverageReport, summary: &str) -> String {
    let t = html_escape(&title(suite));
    let mut out = format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n<style>\n\
         body {{ font-family: sans-serif; }}\n\
         table {{ border-collapse: collapse; margin-bottom: 1.5em; }}\n\
         th, td {{ border: 1px solid #999; padding: 2px 8px; }}\n\
         td.pass {{ background: #c8e6c9; }}\n\
         td.fail {{ background: #ffcdd2; }}\n\
         td.noref {{ background: #e0e0e0; }}\n\
         </style>\n</head>\n<body>\n<h1>{t}</h1>\n<p>{}</p>\n",
        html_escape(summary)
    );
    for (heading, rows) in sections {
        let _ = write!(out, "<h2>{heading}</h2>\n<table>\n<tr>");
        for c in COLUMNS {
            let _ = write!(out, "<th>{c}</th>");
        }
        out.push_str("</tr>\n");
        for cells in rows {
            out.push_str("<tr>");
            for c in cells {
                match c.mark.class() {
                    Some(class) => {
                        let _ = write!(out, "<td class=\"{class}\">{}</td>", html_escape(&c.text));
                    }
                    None => {
                        let _ = write!(out, "<td>{}</td>", html_escape(&c.text));
                    }
                }
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n");
    }
    out.push_str("<h2>Coverage</h2>\n<table>\n<tr><th>Scope</th><th>Columns covered</th></tr>\n");
    for (k, v) in coverage_lines(coverage) {
        let _ = writeln!(out, "<tr><td>{}</td><td>{v}</td></tr>", html_escape(&k));
    }
    out.push_str("</table>\n</body>\n</html>\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Accuracy {
    Accurate,
    Inaccurate,
    Incorrect,
    Qualitative,
    Irrelevant,
}

impl Accuracy {
    pub const ALL: [Accuracy; 5] = [
        Accuracy::Accurate,
        Accuracy::Inaccurate,
        Accuracy::Incorrect,
        Accuracy::Qualitative,
        Accuracy::Irrelevant,
    ];

    pub fn is_correct(self) -> bool {
        self == Accuracy::Accurate
    }
}

fn bool_word<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(serde::de::Error::custom(format!("`{other}` is not a boolean"))),
    }
}

/// Manual label of one test's reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityAnnotation {
    pub test_name: String,
    #[serde(deserialize_with = "bool_word")]
    pub reference_valid: bool,
    pub accuracy: Accuracy,
}

/// Reads `test_name,reference_valid,accuracy` CSV.
pub fn read_annotations<R: Read>(reader: R) -> Result<Vec<QualityAnnotation>, ReportError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().collect::<Result<_, _>>().map_err(ReportError::from)
}

pub fn write_annotations(annotations: &[QualityAnnotation]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in annotations {
        w.serialize(a)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).unwrap_or_default())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTab {
    pub correct_pass: usize,
    pub correct_fail: usize,
    pub non_correct_pass: usize,
    pub non_correct_fail: usize,
}

/// Reference quality over annotated (non-metadata) tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    /// All executed tests, metadata included.
    pub total_tests: usize,
    pub annotated_tests: usize,
    pub valid_reference_percent: f64,
    pub accuracy_percent: BTreeMap<String, f64>,
    pub correct_percent: f64,
    pub non_correct_percent: f64,
    /// Any status other than Pass counts as failed.
    pub crosstab: CrossTab,
    /// Tests without an annotation (normally just the metadata check).
    pub unannotated: Vec<String>,
}

impl QualitySummary {
    pub fn percent(&self, accuracy: Accuracy) -> f64 {
        self.accuracy_percent
            .get(&format!("{accuracy:?}"))
            .copied()
            .unwrap_or(0.0)
    }

    /// One-row table with percentages rounded to one decimal.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Valid References | Total Tests | Accurate | Inaccurate | Incorrect | Qualitative | Irrelevant |\n|---|---|---|---|---|---|---|\n",
        );
        let _ = write!(
            out,
            "| {}% | {} |",
            fixed(self.valid_reference_percent, 1),
            self.total_tests
        );
        for a in Accuracy::ALL {
            let _ = write!(out, " {}% |", fixed(self.percent(a), 1));
        }
        let c = self.crosstab;
        let _ = write!(
            out,
            "\n\n| | Passed | Failed |\n|---|---|---|\n| Correct | {} | {} |\n| Non-correct | {} | {} |\n",
            c.correct_pass, c.correct_fail, c.non_correct_pass, c.non_correct_fail
        );
        out
    }
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Summarizes annotation labels against executed results.
pub fn summarize_quality(
    annotations: &[QualityAnnotation],
    results: &[TestResult],
) -> Result<QualitySummary, ReportError> {
    let status: HashMap<&str, Status> = results.iter().map(|r| (r.name.as_str(), r.status)).collect();
    let mut seen = HashSet::new();
    let mut crosstab = CrossTab::default();
    let mut per: HashMap<Accuracy, usize> = HashMap::new();
    let mut valid = 0;
    for a in annotations {
        if !seen.insert(a.test_name.as_str()) {
            return Err(ReportError::DuplicateAnnotation(a.test_name.clone()));
        }
        let s = *status
            .get(a.test_name.as_str())
            .ok_or_else(|| ReportError::UnknownTest(a.test_name.clone()))?;
        *per.entry(a.accuracy).or_default() += 1;
        valid += usize::from(a.reference_valid);
        let passed = s == Status::Pass;
        match (a.accuracy.is_correct(), passed) {
            (true, true) => crosstab.correct_pass += 1,
            (true, false) => crosstab.correct_fail += 1,
            (false, true) => crosstab.non_correct_pass += 1,
            (false, false) => crosstab.non_correct_fail += 1,
        }
    }
    let n = annotations.len();
    let correct = per.get(&Accuracy::Accurate).copied().unwrap_or(0);
    let mut unannotated: Vec<String> = results
        .iter()
        .filter(|r| !seen.contains(r.name.as_str()))
        .map(|r| r.name.clone())
        .collect();
    unannotated.sort();
    Ok(QualitySummary {
        total_tests: results.len(),
        annotated_tests: n,
        valid_reference_percent: pct(valid, n),
        accuracy_percent: Accuracy::ALL
            .iter()
            .map(|a| (format!("{a:?}"), pct(per.get(a).copied().unwrap_or(0), n)))
            .collect(),
        correct_percent: pct(correct, n),
        non_correct_percent: pct(n - correct, n),
        crosstab,
        unannotated,
    })
}

/// Labels a claimed reference value against a trusted one: equal within
/// `tolerance` is accurate, within 2 SD inaccurate, beyond that incorrect.
/// A point claimed where a range is known is at best inaccurate.
pub fn classify_accuracy(claimed: &StatValue, truth: &StatValue, sd: f64, tolerance: f64) -> Accuracy {
    let mid = |v: &StatValue| match v {
        StatValue::Point(x) => Some(*x),
        StatValue::Range { low, high } => Some((low + high) / 2.0),
        StatValue::Qualitative(_) => None,
    };
    match (claimed, truth) {
        (StatValue::Qualitative(_), _) => Accuracy::Qualitative,
        (_, StatValue::Qualitative(_)) => Accuracy::Irrelevant,
        (StatValue::Point(c), StatValue::Range { low, high }) => {
            if *c >= low - 2.0 * sd && *c <= high + 2.0 * sd {
                Accuracy::Inaccurate
            } else {
                Accuracy::Incorrect
            }
        }
        (StatValue::Range { low: cl, high: ch }, StatValue::Range { low: tl, high: th })
            if (cl - tl).abs() <= tolerance && (ch - th).abs() <= tolerance =>
        {
            Accuracy::Accurate
        }
        _ => {
            let (c, t) = (mid(claimed).unwrap_or(f64::NAN), mid(truth).unwrap_or(f64::NAN));
            let d = (c - t).abs();
            if d <= tolerance && matches!(claimed, StatValue::Point(_)) {
                Accuracy::Accurate
            } else if d <= 2.0 * sd {
                Accuracy::Inaccurate
            } else {
                Accuracy::Incorrect
            }
        }
    }
}
