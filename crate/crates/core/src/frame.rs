//! Typed tabular extracts.
//!
//! A [`Frame`] is an immutable, column-major table loaded from a CSV file
//! against a declared [`TableSchema`]. Cells that do not parse under the
//! declared type are kept as [`Value::Invalid`] with their raw text so that
//! metadata-level tests can report them; nothing is coerced or dropped.
//!
//! Conformance rules:
//!
//! - empty cell in a nullable column is [`Value::Null`], in a non-nullable
//!   column it is non-conforming
//! - dates are ISO-8601 calendar dates (`YYYY-MM-DD`) only
//! - floats must be finite
//! - booleans are `true`/`false` in any letter case

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error in table `{table}`: {message}")]
    Schema { table: String, message: String },
    #[error("{path}: header does not match schema of `{table}` ({})", describe_mismatch(.missing, .unexpected, .duplicated))]
    HeaderMismatch {
        path: PathBuf,
        table: String,
        missing: Vec<String>,
        unexpected: Vec<String>,
        duplicated: Vec<String>,
    },
    #[error("{path}: record {record}: {message}")]
    Record {
        path: PathBuf,
        record: u64,
        message: String,
    },
    #[error("invalid study spec: {0}")]
    Spec(String),
}

fn describe_mismatch(missing: &[String], unexpected: &[String], duplicated: &[String]) -> String {
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing columns: {}", missing.join(", ")));
    }
    if !unexpected.is_empty() {
        parts.push(format!("unexpected columns: {}", unexpected.join(", ")));
    }
    if !duplicated.is_empty() {
        parts.push(format!("duplicated columns: {}", duplicated.join(", ")));
    }
    parts.join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclaredType {
    Integer,
    Float,
    Text,
    Date,
    Code,
    Boolean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    PersonId,
    Demographic,
    DiagnosisCode,
    DrugCode,
    MeasurementCode,
    MeasurementValue,
    ProcedureCode,
    Date,
    Other,
}

impl ColumnRole {
    /// The coded data domain a role draws its values from, if any.
    pub fn data_domain(self) -> Option<DataDomain> {
        match self {
            ColumnRole::DiagnosisCode => Some(DataDomain::Diagnosis),
            ColumnRole::DrugCode => Some(DataDomain::Drug),
            ColumnRole::MeasurementCode => Some(DataDomain::Measurement),
            ColumnRole::ProcedureCode => Some(DataDomain::Procedure),
            _ => None,
        }
    }
}

/// Coded data domains that need a classification system in the study spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataDomain {
    Diagnosis,
    Drug,
    Procedure,
    Measurement,
}

impl fmt::Display for DataDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DataDomain::Diagnosis => "diagnosis",
            DataDomain::Drug => "drug",
            DataDomain::Procedure => "procedure",
            DataDomain::Measurement => "measurement",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    #[serde(rename = "type")]
    pub declared_type: DeclaredType,
    pub role: ColumnRole,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_name: String,
    pub columns: Vec<ColumnSchema>,
}

impl TableSchema {
    /// Checks column-name uniqueness and the single person-id rule.
    pub fn validate(&self) -> Result<(), FrameError> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(FrameError::Schema {
                    table: self.table_name.clone(),
                    message: format!("duplicate column name `{}`", col.name),
                });
            }
        }
        let person_ids = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::PersonId)
            .count();
        if person_ids != 1 {
            return Err(FrameError::Schema {
                table: self.table_name.clone(),
                message: format!("expected exactly one person_id column, found {person_ids}"),
            });
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSchema> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn person_id_column(&self) -> &ColumnSchema {
        self.columns
            .iter()
            .find(|c| c.role == ColumnRole::PersonId)
            .expect("validated schema has a person_id column")
    }

    pub fn columns_with_role(&self, role: ColumnRole) -> impl Iterator<Item = &ColumnSchema> {
        self.columns.iter().filter(move |c| c.role == role)
    }

    pub fn has_role(&self, role: ColumnRole) -> bool {
        self.columns.iter().any(|c| c.role == role)
    }
}

/// Parses a schema document: a JSON list of tables.
pub fn parse_schema(text: &str, path: &Path) -> Result<Vec<TableSchema>, FrameError> {
    let tables: Vec<TableSchema> = serde_json::from_str(text).map_err(|e| FrameError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut names = HashSet::new();
    for table in &tables {
        table.validate()?;
        if !names.insert(table.table_name.as_str()) {
            return Err(FrameError::Schema {
                table: table.table_name.clone(),
                message: "table declared twice".into(),
            });
        }
    }
    Ok(tables)
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Vec<TableSchema>, FrameError> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_schema(&text, path)
}

fn read_to_string(path: &Path) -> Result<String, FrameError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| FrameError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(text)
}

/// A parsed cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Value {
    Null,
    Integer(i64),
    Float(f64),
    Text(String),
    Date(NaiveDate),
    Code(String),
    Boolean(bool),
    /// Raw text that did not parse under the declared type.
    Invalid(String),
}

impl Value {
    pub fn is_conforming(&self) -> bool {
        !matches!(self, Value::Invalid(_))
    }

    /// Canonical text of a value, used for keys and code matching.
    /// `None` for nulls.
    pub fn as_text(&self) -> Option<Cow<'_, str>> {
        match self {
            Value::Null => None,
            Value::Integer(i) => Some(Cow::Owned(i.to_string())),
            Value::Float(x) => Some(Cow::Owned(x.to_string())),
            Value::Text(s) | Value::Code(s) | Value::Invalid(s) => Some(Cow::Borrowed(s)),
            Value::Date(d) => Some(Cow::Owned(d.format("%Y-%m-%d").to_string())),
            Value::Boolean(b) => Some(Cow::Borrowed(if *b { "true" } else { "false" })),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Float(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_date(&self) -> Option<NaiveDate> {
        match self {
            Value::Date(d) => Some(*d),
            _ => None,
        }
    }

    /// Text written back to CSV; `""` for nulls.
    pub fn to_raw(&self) -> String {
        self.as_text().map(Cow::into_owned).unwrap_or_default()
    }
}

/// Parses one raw cell. Pure in `(raw, declared_type, nullable)`.
pub fn parse_cell(raw: &str, declared_type: DeclaredType, nullable: bool) -> Value {
    if raw.is_empty() {
        return if nullable {
            Value::Null
        } else {
            Value::Invalid(String::new())
        };
    }
    let invalid = || Value::Invalid(raw.to_string());
    match declared_type {
        DeclaredType::Integer => raw.parse::<i64>().map(Value::Integer).unwrap_or_else(|_| invalid()),
        DeclaredType::Float => match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Value::Float(x),
            _ => invalid(),
        },
        DeclaredType::Text => Value::Text(raw.to_string()),
        DeclaredType::Code => Value::Code(raw.to_string()),
        DeclaredType::Date => parse_iso_date(raw).map(Value::Date).unwrap_or_else(invalid),
        DeclaredType::Boolean => {
            if raw.eq_ignore_ascii_case("true") {
                Value::Boolean(true)
            } else if raw.eq_ignore_ascii_case("false") {
                Value::Boolean(false)
            } else {
                invalid()
            }
        }
    }
}

fn parse_iso_date(raw: &str) -> Option<NaiveDate> {
    let b = raw.as_bytes();
    let shape_ok = b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit());
    if !shape_ok {
        return None;
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").ok()
}

/// Normalizes a classification-system name: `"ICD-9-CM"` → `"ICD9CM"`.
pub fn normalize_system(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_uppercase()
}

/// Whether `code` has the surface format of the named classification system.
/// Unknown systems accept any non-empty code.
pub fn code_conforms(system: &str, code: &str) -> bool {
    static PATTERNS: OnceLock<Vec<(&'static str, Regex)>> = OnceLock::new();
    let patterns = PATTERNS.get_or_init(|| {
        [
            ("ICD9CM", r"^(\d{3}(\.\d{1,2})?|V\d{2}(\.\d{1,2})?|E\d{3}(\.\d)?)$"),
            ("ICD9", r"^(\d{3}(\.\d{1,2})?|V\d{2}(\.\d{1,2})?|E\d{3}(\.\d)?)$"),
            ("ICD10CM", r"^[A-TV-Z]\d[0-9A-Z](\.[0-9A-Z]{1,4})?$"),
            ("ICD10", r"^[A-TV-Z]\d[0-9A-Z](\.[0-9A-Z]{1,4})?$"),
            ("SNOMED", r"^\d{6,18}$"),
            ("SNOMEDCT", r"^\d{6,18}$"),
            ("RXNORM", r"^\d{1,8}$"),
            ("LOINC", r"^\d{1,7}-\d$"),
            ("OMOP", r"^\d+$"),
            ("CPT4", r"^\d{4}[0-9A-Z]$"),
        ]
        .into_iter()
        .map(|(name, re)| (name, Regex::new(re).expect("static pattern")))
        .collect()
    });
    let code = code.trim();
    if code.is_empty() {
        return false;
    }
    let system = normalize_system(system);
    match patterns.iter().find(|(name, _)| *name == system) {
        Some((_, re)) => re.is_match(code),
        None => true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub schema: ColumnSchema,
    pub values: Vec<Value>,
}

/// An immutable table of typed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    table_name: String,
    columns: Vec<Column>,
    rows: usize,
}

impl Frame {
    /// Builds a frame from raw records given in schema column order.
    pub fn from_records<I, R, S>(schema: &TableSchema, records: I) -> Result<Frame, FrameError>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[S]>,
        S: AsRef<str>,
    {
        schema.validate()?;
        let mut columns: Vec<Column> = schema
            .columns
            .iter()
            .map(|c| Column {
                schema: c.clone(),
                values: Vec::new(),
            })
            .collect();
        let mut rows = 0;
        for (i, record) in records.into_iter().enumerate() {
            let record = record.as_ref();
            if record.len() != columns.len() {
                return Err(FrameError::Record {
                    path: PathBuf::from("<memory>"),
                    record: i as u64 + 1,
                    message: format!("expected {} fields, found {}", columns.len(), record.len()),
                });
            }
            for (col, raw) in columns.iter_mut().zip(record) {
                let v = parse_cell(raw.as_ref(), col.schema.declared_type, col.schema.nullable);
                col.values.push(v);
            }
            rows += 1;
        }
        Ok(Frame {
            table_name: schema.table_name.clone(),
            columns,
            rows,
        })
    }

    pub fn table_name(&self) -> &str {
        &self.table_name
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.schema.name == name)
    }

    pub fn schema(&self) -> TableSchema {
        TableSchema {
            table_name: self.table_name.clone(),
            columns: self.columns.iter().map(|c| c.schema.clone()).collect(),
        }
    }

    pub fn person_id_column(&self) -> &Column {
        self.columns
            .iter()
            .find(|c| c.schema.role == ColumnRole::PersonId)
            .expect("frame schema has a person_id column")
    }

    pub fn columns_with_role(&self, role: ColumnRole) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(move |c| c.schema.role == role)
    }

    pub fn is_conforming(&self, row: usize, column: usize) -> bool {
        self.columns[column].values[row].is_conforming()
    }

    /// Number of non-conforming cells per column, in column order.
    pub fn non_conforming_counts(&self) -> Vec<(&str, usize)> {
        self.columns
            .iter()
            .map(|c| {
                let n = c.values.iter().filter(|v| !v.is_conforming()).count();
                (c.schema.name.as_str(), n)
            })
            .collect()
    }

    /// Writes the frame back as CSV with a header row in column order.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns.iter().map(|c| c.schema.name.as_str()))?;
        for row in 0..self.rows {
            w.write_record(self.columns.iter().map(|c| c.values[row].to_raw()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a comma-separated file with a header row. Header names must match
/// the schema as a set; the frame keeps schema column order.
pub fn load_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Frame, FrameError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| FrameError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_table(file, path, schema)
}

/// Like [`load_table`] but from any reader; `path` is used in messages only.
pub fn read_table<R: Read>(reader: R, path: &Path, schema: &TableSchema) -> Result<Frame, FrameError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let record_err = |e: csv::Error| {
        let record = e.position().map(|p| p.line()).unwrap_or(0);
        FrameError::Record {
            path: path.to_path_buf(),
            record,
            message: e.to_string(),
        }
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(record_err)?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').to_string())
        .collect();

    let mut positions = BTreeMap::new();
    let mut duplicated = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if positions.insert(name.as_str(), i).is_some() && !duplicated.contains(name) {
            duplicated.push(name.clone());
        }
    }
    let missing: Vec<String> = schema
        .columns
        .iter()
        .filter(|c| !positions.contains_key(c.name.as_str()))
        .map(|c| c.name.clone())
        .collect();
    let unexpected: Vec<String> = header
        .iter()
        .filter(|h| schema.column(h).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || !duplicated.is_empty() {
        return Err(FrameError::HeaderMismatch {
            path: path.to_path_buf(),
            table: schema.table_name.clone(),
            missing,
            unexpected,
            duplicated,
        });
    }

    let order: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| positions[c.name.as_str()])
        .collect();
    let mut columns: Vec<Column> = schema
        .columns
        .iter()
        .map(|c| Column {
            schema: c.clone(),
            values: Vec::new(),
        })
        .collect();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(record_err)?;
        for (col, &pos) in columns.iter_mut().zip(&order) {
            let raw = record.get(pos).unwrap_or("");
            col.values
                .push(parse_cell(raw, col.schema.declared_type, col.schema.nullable));
        }
        rows += 1;
    }
    Ok(Frame {
        table_name: schema.table_name.clone(),
        columns,
        rows,
    })
}

/// The set of frames a suite runs against, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    frames: Vec<Frame>,
}

impl Frames {
    pub fn new(frames: Vec<Frame>) -> Frames {
        Frames { frames }
    }

    pub fn get(&self, table: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.table_name == table)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter()
    }

    pub fn schemas(&self) -> Vec<TableSchema> {
        self.frames.iter().map(Frame::schema).collect()
    }

    /// First frame (schema order) that has a column with `role`.
    pub fn first_with_role(&self, role: ColumnRole) -> Option<&Frame> {
        self.frames
            .iter()
            .find(|f| f.columns.iter().any(|c| c.schema.role == role))
    }
}

/// User-provided study parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub condition: String,
    pub region: String,
    pub coding_systems: BTreeMap<DataDomain, String>,
    pub schema_ref: PathBuf,
    pub tables: BTreeMap<String, PathBuf>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl StudySpec {
    pub fn load(path: impl AsRef<Path>) -> Result<StudySpec, FrameError> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        let mut spec: StudySpec = serde_json::from_str(&text).map_err(|e| FrameError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if spec.condition.trim().is_empty() {
            return Err(FrameError::Spec("condition must not be empty".into()));
        }
        Ok(spec)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn schema_path(&self) -> PathBuf {
        self.resolve(&self.schema_ref)
    }

    pub fn coding_system(&self, domain: DataDomain) -> Option<&str> {
        self.coding_systems.get(&domain).map(String::as_str)
    }

    /// Checks the study spec against the schemas it refers to: every bound table
    /// is declared and every coded role has a classification system.
    pub fn validate(&self, schemas: &[TableSchema]) -> Result<(), FrameError> {
        for table in self.tables.keys() {
            if !schemas.iter().any(|s| &s.table_name == table) {
                return Err(FrameError::Spec(format!(
                    "table `{table}` is bound to a file but not declared in the schema"
                )));
            }
        }
        for schema in schemas {
            for col in &schema.columns {
                if let Some(domain) = col.role.data_domain() {
                    if !self.coding_systems.contains_key(&domain) {
                        return Err(FrameError::Spec(format!(
                            "column `{}.{}` has role {:?} but no {domain} coding system is given",
                            schema.table_name, col.name, col.role
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Loads the schema and every bound table, in schema order.
    pub fn load_frames(&self) -> Result<(Vec<TableSchema>, Frames), FrameError> {
        let schemas = load_schema(self.schema_path())?;
        self.validate(&schemas)?;
        let mut frames = Vec::new();
        for schema in &schemas {
            if let Some(path) = self.tables.get(&schema.table_name) {
                frames.push(load_table(self.resolve(path), schema)?);
            }
        }
        Ok((schemas, Frames::new(frames)))
    }
}
