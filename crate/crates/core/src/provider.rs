//! Grounded reference knowledge.
//!
//! A [`KnowledgeProvider`] supplies reference statistics for a study and
//! reviews them in a second pass. [`MockProvider`] answers from a versioned
//! JSON fixture and never touches the network; [`HttpProvider`] speaks a
//! small JSON protocol to any gateway:
//!
//! - `POST /statistics` with `{"condition","region",...}` → list of [`GroundedStat`]
//! - `POST /validate` with `{"condition","region","statistic","subject","value","diagnosed","references"}`
//!   → [`ValidationVerdict`]
//!
//! The API key, when set, is read from `DATAPECK_PROVIDER_KEY` and sent as a
//! bearer token.
//!
//! Mock conventions: a subject ending in `!fixme` is answered with `Fix` and
//! the fixture's canonical value, a subject ending in `!drop` with `Remove`,
//! anything else with `NoFix`.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::StudySpec;

pub const API_KEY_ENV: &str = "DATAPECK_PROVIDER_KEY";
pub const FIX_MARKER: &str = "!fixme";
pub const DROP_MARKER: &str = "!drop";

const DEFAULT_ATTEMPTS: u32 = 3;
const DEFAULT_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider protocol error: {0}")]
    Protocol(String),
    #[error("provider returned an invalid record: {0}")]
    InvalidRecord(String),
    #[error("provider fixture error: {0}")]
    Fixture(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Prevalence,
    Incidence,
    MortalityRate,
    LifetimeRisk,
    AgeMean,
    AgeSd,
    ComorbidityRate,
    DemographicShare,
    DrugShare,
    MeasurementExpectation,
}

impl StatKind {
    pub const ALL: [StatKind; 10] = [
        StatKind::Prevalence,
        StatKind::Incidence,
        StatKind::MortalityRate,
        StatKind::LifetimeRisk,
        StatKind::AgeMean,
        StatKind::AgeSd,
        StatKind::ComorbidityRate,
        StatKind::DemographicShare,
        StatKind::DrugShare,
        StatKind::MeasurementExpectation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::Prevalence => "prevalence",
            StatKind::Incidence => "incidence",
            StatKind::MortalityRate => "mortality_rate",
            StatKind::LifetimeRisk => "lifetime_risk",
            StatKind::AgeMean => "age_mean",
            StatKind::AgeSd => "age_sd",
            StatKind::ComorbidityRate => "comorbidity_rate",
            StatKind::DemographicShare => "demographic_share",
            StatKind::DrugShare => "drug_share",
            StatKind::MeasurementExpectation => "measurement_expectation",
        }
    }

    pub fn parse(s: &str) -> Option<StatKind> {
        StatKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// A reference value: a point, a range, or a non-numeric description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StatValue {
    Point(f64),
    Range { low: f64, high: f64 },
    Qualitative(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    #[default]
    Percent,
    Native,
}

/// One reference statistic with its citations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedStat {
    pub statistic: StatKind,
    pub subject: String,
    pub value: StatValue,
    #[serde(default)]
    pub unit: Unit,
    /// Conditioned on the studied cohort rather than the general population.
    #[serde(default, alias = "diagnosed")]
    pub diagnosed_scope: bool,
    #[serde(default)]
    pub references: Vec<String>,
    /// Hint naming the demographic attribute (e.g. `race`) a share refers to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    /// Size of the reference population for distribution comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<u64>,
}

impl GroundedStat {
    pub fn new(statistic: StatKind, subject: impl Into<String>, value: StatValue) -> Self {
        GroundedStat {
            statistic,
            subject: subject.into(),
            value,
            unit: match statistic {
                StatKind::AgeMean | StatKind::AgeSd => Unit::Native,
                _ => Unit::Percent,
            },
            diagnosed_scope: false,
            references: Vec::new(),
            attribute: None,
            sample_size: None,
        }
    }

    /// No citation backs this statistic.
    pub fn is_reference_free(&self) -> bool {
        self.references.is_empty()
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: String| Err(ProviderError::InvalidRecord(format!("{} `{}`: {m}", self.statistic.as_str(), self.subject)));
        match &self.value {
            StatValue::Point(v) if !v.is_finite() => return bad(format!("non-finite value {v}")),
            StatValue::Range { low, high } if !(low.is_finite() && high.is_finite()) => {
                return bad("non-finite range".into())
            }
            StatValue::Range { low, high } if low > high => return bad(format!("range low {low} > high {high}")),
            _ => {}
        }
        if self.references.iter().any(|r| r.trim().is_empty()) {
            return bad("blank citation string".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feedback {
    Correct,
    Incorrect,
    Unsure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recommendation {
    Fix,
    NoFix,
    Remove,
}

/// Second-pass review of one statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub feedback: Feedback,
    pub recommendation: Recommendation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_value: Option<StatValue>,
    #[serde(default)]
    pub references: Vec<String>,
}

impl ValidationVerdict {
    pub fn validate(&self) -> Result<(), ProviderError> {
        match (self.recommendation, &self.corrected_value) {
            (Recommendation::Fix, None) => Err(ProviderError::InvalidRecord(
                "Fix verdict without a corrected value".into(),
            )),
            (Recommendation::Remove, Some(_)) => Err(ProviderError::InvalidRecord(
                "Remove verdict carries a corrected value".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Source of grounded reference statistics and their review.
pub trait KnowledgeProvider {
    /// Human-readable identity recorded in generation metadata.
    fn identity(&self) -> String;

    fn fetch_statistics(&self, spec: &StudySpec) -> Result<Vec<GroundedStat>, ProviderError>;

    fn validate_statistic(&self, stat: &GroundedStat, spec: &StudySpec) -> Result<ValidationVerdict, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureStat {
    #[serde(flatten)]
    stat: GroundedStat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    canonical_value: Option<StatValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureEntry {
    condition: String,
    region: String,
    statistics: Vec<FixtureStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Fixture {
    version: u32,
    entries: Vec<FixtureEntry>,
}

/// Answers from a fixture file keyed by `(condition, region)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MockProvider {
    name: String,
    fixture: Fixture,
}

fn same_key(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

impl MockProvider {
    pub fn from_json(name: impl Into<String>, text: &str) -> Result<Self, ProviderError> {
        let fixture: Fixture = serde_json::from_str(text).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        for entry in &fixture.entries {
            for s in &entry.statistics {
                s.stat.validate()?;
            }
        }
        Ok(MockProvider {
            name: name.into(),
            fixture,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(path.display().to_string(), &text)
    }

    fn entry(&self, spec: &StudySpec) -> Option<&FixtureEntry> {
        self.fixture
            .entries
            .iter()
            .find(|e| same_key(&e.condition, &spec.condition) && same_key(&e.region, &spec.region))
    }

    fn lookup(&self, stat: &GroundedStat, spec: &StudySpec) -> Option<&FixtureStat> {
        self.entry(spec)?.statistics.iter().find(|f| {
            f.stat.statistic == stat.statistic
                && f.stat.subject == stat.subject
                && f.stat.diagnosed_scope == stat.diagnosed_scope
        })
    }
}

impl KnowledgeProvider for MockProvider {
    fn identity(&self) -> String {
        format!("mock:{}@v{}", self.name, self.fixture.version)
    }

    fn fetch_statistics(&self, spec: &StudySpec) -> Result<Vec<GroundedStat>, ProviderError> {
        Ok(self
            .entry(spec)
            .map(|e| e.statistics.iter().map(|f| f.stat.clone()).collect())
            .unwrap_or_default())
    }

    fn validate_statistic(&self, stat: &GroundedStat, spec: &StudySpec) -> Result<ValidationVerdict, ProviderError> {
        let known = self.lookup(stat, spec);
        let references = known.map(|f| f.stat.references.clone()).unwrap_or_default();
        let subject = stat.subject.trim_end();
        let verdict = if subject.ends_with(DROP_MARKER) {
            ValidationVerdict {
                feedback: Feedback::Unsure,
                recommendation: Recommendation::Remove,
                corrected_value: None,
                references: Vec::new(),
            }
        } else if subject.ends_with(FIX_MARKER) {
            let corrected = known
                .and_then(|f| f.canonical_value.clone())
                .unwrap_or_else(|| stat.value.clone());
            ValidationVerdict {
                feedback: Feedback::Incorrect,
                recommendation: Recommendation::Fix,
                corrected_value: Some(corrected),
                references,
            }
        } else {
            ValidationVerdict {
                feedback: Feedback::Correct,
                recommendation: Recommendation::NoFix,
                corrected_value: None,
                references,
            }
        };
        Ok(verdict)
    }
}

#[derive(Debug, Serialize)]
struct ProviderRequest<'a> {
    condition: &'a str,
    region: &'a str,
    statistic: Option<StatKind>,
    subject: Option<&'a str>,
    value: Option<&'a StatValue>,
    diagnosed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    references: Option<&'a [String]>,
}

/// JSON-over-HTTP provider with bounded retries.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base_url: String,
    api_key: Option<String>,
    attempts: u32,
    initial_backoff: Duration,
    agent: ureq::Agent,
}

impl HttpProvider {
    /// A client for `base_url` with the key from `DATAPECK_PROVIDER_KEY`.
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpProvider {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            attempts: DEFAULT_ATTEMPTS,
            initial_backoff: DEFAULT_BACKOFF,
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Attempts (at least 1) and the first backoff delay; later delays double.
    pub fn with_retry(mut self, attempts: u32, initial_backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.initial_backoff = initial_backoff;
        self
    }

    fn post<T: serde::de::DeserializeOwned>(&self, route: &str, body: &ProviderRequest<'_>) -> Result<T, ProviderError> {
        let url = format!("{}/{route}", self.base_url);
        let mut delay = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<T>()
                            .map_err(|e| ProviderError::Protocol(format!("{url}: {e}")));
                    }
                    last = format!("{url}: HTTP {status}");
                    if status != 429 && status < 500 {
                        return Err(ProviderError::Protocol(last));
                    }
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            if attempt < self.attempts {
                log::warn!("provider attempt {attempt} failed ({last}); retrying in {delay:?}");
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(ProviderError::Transport {
            attempts: self.attempts,
            message: last,
        })
    }
}

impl KnowledgeProvider for HttpProvider {
    fn identity(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn fetch_statistics(&self, spec: &StudySpec) -> Result<Vec<GroundedStat>, ProviderError> {
        let body = ProviderRequest {
            condition: &spec.condition,
            region: &spec.region,
            statistic: None,
            subject: None,
            value: None,
            diagnosed: None,
            references: None,
        };
        let stats: Vec<GroundedStat> = self.post("statistics", &body)?;
        for s in &stats {
            s.validate()?;
        }
        Ok(stats)
    }

    fn validate_statistic(&self, stat: &GroundedStat, spec: &StudySpec) -> Result<ValidationVerdict, ProviderError> {
        let body = ProviderRequest {
            condition: &spec.condition,
            region: &spec.region,
            statistic: Some(stat.statistic),
            subject: Some(&stat.subject),
            value: Some(&stat.value),
            diagnosed: Some(stat.diagnosed_scope),
            references: Some(&stat.references),
        };
        let verdict: ValidationVerdict = self.post("validate", &body)?;
        verdict.validate()?;
        Ok(verdict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    fn spec(condition: &str) -> StudySpec {
        StudySpec {
            condition: condition.into(),
            region: "US".into(),
            coding_systems: BTreeMap::new(),
            schema_ref: "schema.json".into(),
            tables: BTreeMap::new(),
            base_dir: Default::default(),
        }
    }

    const FIXTURE: &str = r#"{"version": 3, "entries": [{
        "condition": "Type 2 Diabetes", "region": "us",
        "statistics": [
            {"statistic": "prevalence", "subject": "type 2 diabetes", "value": 11.3,
             "references": ["CDC National Diabetes Statistics Report (https://www.cdc.gov/diabetes)"]},
            {"statistic": "comorbidity_rate", "subject": "Retinopathy!fixme", "value": 35.0,
             "diagnosed": true, "canonical_value": {"low": 25.0, "high": 32.0},
             "references": ["ref a"]},
            {"statistic": "comorbidity_rate", "subject": "Gout!drop", "value": 9.0, "diagnosed": true}
        ]}]}"#;

    fn mock() -> MockProvider {
        MockProvider::from_json("t2d", FIXTURE).unwrap()
    }

    #[test]
    fn mock_returns_fixture_statistics() {
        let stats = mock().fetch_statistics(&spec("type 2 diabetes")).unwrap();
        assert_eq!(stats.len(), 3);
        assert_eq!(stats[0].value, StatValue::Point(11.3));
        assert!(!stats[0].is_reference_free());
        assert!(stats[2].is_reference_free());
        assert!(stats[1].diagnosed_scope);
        assert_eq!(stats, mock().fetch_statistics(&spec("type 2 diabetes")).unwrap());
        assert!(mock().fetch_statistics(&spec("unknownitis")).unwrap().is_empty());
        assert_eq!(mock().identity(), "mock:t2d@v3");
    }

    #[test]
    fn mock_verdict_conventions() {
        let p = mock();
        let s = spec("type 2 diabetes");
        let stats = p.fetch_statistics(&s).unwrap();
        let keep = p.validate_statistic(&stats[0], &s).unwrap();
        assert_eq!(keep.recommendation, Recommendation::NoFix);
        assert_eq!(keep.feedback, Feedback::Correct);
        let fix = p.validate_statistic(&stats[1], &s).unwrap();
        assert_eq!(fix.recommendation, Recommendation::Fix);
        assert_eq!(fix.corrected_value, Some(StatValue::Range { low: 25.0, high: 32.0 }));
        let drop = p.validate_statistic(&stats[2], &s).unwrap();
        assert_eq!(drop.recommendation, Recommendation::Remove);
        for v in [keep, fix, drop] {
            v.validate().unwrap();
        }
        // pure in (spec, stat)
        assert_eq!(p.validate_statistic(&stats[1], &s).unwrap(), p.validate_statistic(&stats[1], &s).unwrap());
    }

    #[test]
    fn fixme_without_canonical_reuses_value() {
        let p = mock();
        let stat = GroundedStat::new(StatKind::DrugShare, "Insulin!fixme", StatValue::Point(30.0));
        let v = p.validate_statistic(&stat, &spec("type 2 diabetes")).unwrap();
        assert_eq!(v.corrected_value, Some(StatValue::Point(30.0)));
    }

    #[test]
    fn invalid_records_are_rejected() {
        let mut s = GroundedStat::new(StatKind::Prevalence, "x", StatValue::Range { low: 3.0, high: 1.0 });
        assert!(s.validate().is_err());
        s.value = StatValue::Point(1.0);
        s.references = vec!["  ".into()];
        assert!(s.validate().is_err());
        let v = ValidationVerdict {
            feedback: Feedback::Incorrect,
            recommendation: Recommendation::Fix,
            corrected_value: None,
            references: vec![],
        };
        assert!(v.validate().is_err());
        let v = ValidationVerdict {
            recommendation: Recommendation::Remove,
            corrected_value: Some(StatValue::Point(1.0)),
            ..v
        };
        assert!(v.validate().is_err());
    }

    #[test]
    fn stat_value_json_shapes() {
        let v: StatValue = serde_json::from_str("12.5").unwrap();
        assert_eq!(v, StatValue::Point(12.5));
        let v: StatValue = serde_json::from_str(r#"{"low": 1, "high": 2}"#).unwrap();
        assert_eq!(v, StatValue::Range { low: 1.0, high: 2.0 });
        let v: StatValue = serde_json::from_str(r#""increased risk""#).unwrap();
        assert_eq!(v, StatValue::Qualitative("increased risk".into()));
    }

    /// Serves scripted `(status, body)` responses, one per connection, and
    /// reports each request's path, headers and body.
    fn serve(script: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in script {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                tx.send((path, headers, String::from_utf8(buf).unwrap())).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    #[test]
    fn http_statistics_round_trip() {
        let body = r#"[{"statistic":"prevalence","subject":"type 2 diabetes","value":11.3,
            "unit":"percent","diagnosed_scope":false,"references":["r1"]}]"#;
        let (url, rx) = serve(vec![(200, body.into())]);
        let p = HttpProvider::new(url).with_api_key(Some("sekret".into()));
        let stats = p.fetch_statistics(&spec("type 2 diabetes")).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].references, ["r1"]);
        let (path, headers, req) = rx.recv().unwrap();
        assert_eq!(path, "/statistics");
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer sekret"));
        let req: serde_json::Value = serde_json::from_str(&req).unwrap();
        assert_eq!(req["condition"], "type 2 diabetes");
        assert_eq!(req["region"], "US");
    }

    #[test]
    fn http_validate_sends_stat_and_retries_server_errors() {
        let verdict = r#"{"feedback":"Incorrect","recommendation":"Fix","corrected_value":12.0,"references":["r2"]}"#;
        let (url, rx) = serve(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, verdict.into()),
        ]);
        let p = HttpProvider::new(url).with_retry(3, Duration::from_millis(5));
        let mut stat = GroundedStat::new(StatKind::ComorbidityRate, "Anemia", StatValue::Point(17.8));
        stat.diagnosed_scope = true;
        stat.references = vec!["first pass".into()];
        let v = p.validate_statistic(&stat, &spec("type 2 diabetes")).unwrap();
        assert_eq!(v.corrected_value, Some(StatValue::Point(12.0)));
        let requests: Vec<_> = rx.iter().take(3).collect();
        assert!(requests.iter().all(|(path, _, _)| path == "/validate"));
        let body: serde_json::Value = serde_json::from_str(&requests[2].2).unwrap();
        assert_eq!(body["statistic"], "comorbidity_rate");
        assert_eq!(body["subject"], "Anemia");
        assert_eq!(body["value"], 17.8);
        assert_eq!(body["diagnosed"], true);
        assert_eq!(body["references"][0], "first pass");
    }

    #[test]
    fn http_gives_up_after_three_attempts() {
        let (url, _rx) = serve(vec![(500, "{}".into()), (502, "{}".into()), (503, "{}".into())]);
        let p = HttpProvider::new(url).with_retry(3, Duration::from_millis(1));
        let err = p.fetch_statistics(&spec("x")).unwrap_err();
        assert!(err.is_retriable());
        assert!(matches!(err, ProviderError::Transport { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn http_client_errors_are_not_retried() {
        let (url, _rx) = serve(vec![(404, "{}".into())]);
        let p = HttpProvider::new(url).with_retry(3, Duration::from_millis(1));
        let err = p.fetch_statistics(&spec("x")).unwrap_err();
        assert!(matches!(err, ProviderError::Protocol(_)), "{err}");
    }

    #[test]
    fn http_unreachable_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let p = HttpProvider::new(format!("http://{addr}")).with_retry(2, Duration::from_millis(1));
        assert!(p.fetch_statistics(&spec("x")).unwrap_err().is_retriable());
    }

    #[test]
    fn http_rejects_invalid_verdicts() {
        let (url, _rx) = serve(vec![(200, r#"{"feedback":"Incorrect","recommendation":"Fix"}"#.into())]);
        let p = HttpProvider::new(url);
        let stat = GroundedStat::new(StatKind::Prevalence, "x", StatValue::Point(1.0));
        assert!(matches!(
            p.validate_statistic(&stat, &spec("x")),
            Err(ProviderError::InvalidRecord(_))
        ));
    }
}
