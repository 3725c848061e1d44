//! Vocabulary index and code-list retrieval.
//!
//! Concepts from an Athena-style vocabulary export are embedded with a
//! pluggable [`Embedder`], L2-normalized and searched by cosine similarity
//! (a dot product on unit vectors). [`HashingEmbedder`] is the deterministic
//! bag-of-words embedder used in tests and offline runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{ColumnRole, Frames};

/// Number of concepts retrieved per query unless configured otherwise.
pub const DEFAULT_K: usize = 20;
/// Dimension of the [`HashingEmbedder`] bag.
pub const HASHING_DIMENSION: usize = 256;

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("vocabulary line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate concept {vocabulary}:{code} (concept_id {concept_id})")]
    Duplicate {
        vocabulary: String,
        code: String,
        concept_id: i64,
    },
    #[error("index error: {0}")]
    Index(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding failed: {0}")]
    Embedding(String),
}

/// Concept domains of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Condition,
    Drug,
    Measurement,
    Procedure,
    Demographic,
}

impl Domain {
    /// Maps an Athena `domain_id`.
    pub fn from_athena(domain_id: &str) -> Option<Domain> {
        match domain_id.trim().to_ascii_lowercase().as_str() {
            "condition" => Some(Domain::Condition),
            "drug" => Some(Domain::Drug),
            "measurement" => Some(Domain::Measurement),
            "procedure" => Some(Domain::Procedure),
            "gender" | "race" | "ethnicity" | "demographic" => Some(Domain::Demographic),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Domain::Condition => "condition",
            Domain::Drug => "drug",
            Domain::Measurement => "measurement",
            Domain::Procedure => "procedure",
            Domain::Demographic => "demographic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Concept {
    pub concept_id: i64,
    pub concept_name: String,
    pub vocabulary: String,
    pub concept_code: String,
    pub domain: Domain,
}

/// Turns text into a fixed-dimension vector.
pub trait Embedder {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, VocabError>;
}

/// Lowercase word tokens hashed (FNV-1a) into a fixed bag, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        HashingEmbedder { dimension }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(HASHING_DIMENSION)
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, VocabError> {
        let mut v = vec![0.0; self.dimension];
        for token in tokenize(text) {
            v[(fnv1a(token.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Scales `v` to unit L2 norm; returns `false` (leaving it untouched) for
/// a zero vector.
fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Reads a tab-separated Athena-style export. Required header fields:
/// `concept_id concept_name domain_id vocabulary_id concept_code`; other
/// columns are ignored.
pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vec<Concept>, VocabError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| VocabError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_vocabulary(file)
}

pub fn parse_vocabulary<R: Read>(reader: R) -> Result<Vec<Concept>, VocabError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| VocabError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let field = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| VocabError::Parse {
                line: 1,
                message: format!("missing header field `{name}`"),
            })
    };
    let (id_i, name_i, domain_i, vocab_i, code_i) = (
        field("concept_id")?,
        field("concept_name")?,
        field("domain_id")?,
        field("vocabulary_id")?,
        field("concept_code")?,
    );
    let mut concepts = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| VocabError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let concept_id = get(id_i).parse::<i64>().map_err(|_| VocabError::Parse {
            line,
            message: format!("concept_id `{}` is not an integer", get(id_i)),
        })?;
        let domain = Domain::from_athena(get(domain_i)).ok_or_else(|| VocabError::Parse {
            line,
            message: format!("unsupported domain_id `{}`", get(domain_i)),
        })?;
        concepts.push(Concept {
            concept_id,
            concept_name: get(name_i).to_string(),
            vocabulary: get(vocab_i).to_string(),
            concept_code: get(code_i).to_string(),
            domain,
        });
    }
    Ok(concepts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub concept: Concept,
    pub vector: Vec<f64>,
}

/// Embedded concepts, all with unit-norm vectors of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dimension: usize,
    entries: Vec<IndexEntry>,
}

/// Parameters of one similarity search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchRequest<'a> {
    pub query: &'a str,
    pub domain: Domain,
    /// Restrict to one classification system.
    pub vocabulary: Option<&'a str>,
    pub k: usize,
    /// Drop hits below this cosine similarity.
    pub min_similarity: Option<f64>,
}

impl<'a> SearchRequest<'a> {
    pub fn new(query: &'a str, domain: Domain) -> Self {
        SearchRequest {
            query,
            domain,
            vocabulary: None,
            k: DEFAULT_K,
            min_similarity: None,
        }
    }
}

impl EmbeddingIndex {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Embeds every concept. Concept ids and `(vocabulary, concept_code)`
    /// pairs must be unique.
    pub fn from_concepts(concepts: Vec<Concept>, embedder: &dyn Embedder) -> Result<Self, VocabError> {
        let dimension = embedder.dimension();
        if dimension == 0 {
            return Err(VocabError::Index("embedder dimension is zero".into()));
        }
        check_unique(&concepts)?;
        let mut entries = Vec::with_capacity(concepts.len());
        for concept in concepts {
            let mut vector = embedder.embed(&concept.concept_name)?;
            if vector.len() != dimension {
                return Err(VocabError::Index(format!(
                    "embedder returned {} values for concept {}, expected {dimension}",
                    vector.len(),
                    concept.concept_id
                )));
            }
            if !normalize(&mut vector) {
                return Err(VocabError::Index(format!(
                    "concept {} (`{}`) embeds to a zero vector",
                    concept.concept_id, concept.concept_name
                )));
            }
            entries.push(IndexEntry { concept, vector });
        }
        Ok(EmbeddingIndex { dimension, entries })
    }

    /// Reads a vocabulary file and embeds it.
    pub fn build(vocabulary_file: impl AsRef<Path>, embedder: &dyn Embedder) -> Result<Self, VocabError> {
        Self::from_concepts(read_vocabulary(vocabulary_file)?, embedder)
    }

    /// Top-k concepts of a domain by cosine similarity, descending, ties
    /// by ascending concept id. An empty result carries a warning.
    pub fn search(&self, request: &SearchRequest<'_>, embedder: &dyn Embedder) -> Result<CodeList, VocabError> {
        if request.k == 0 {
            return Err(VocabError::InvalidK);
        }
        let mut query = embedder.embed(request.query)?;
        if query.len() != self.dimension {
            return Err(VocabError::Index(format!(
                "query embedding has dimension {}, index has {}",
                query.len(),
                self.dimension
            )));
        }
        normalize(&mut query);
        let mut scored: Vec<(f64, &Concept)> = self
            .entries
            .iter()
            .filter(|e| e.concept.domain == request.domain)
            .filter(|e| request.vocabulary.is_none_or(|v| e.concept.vocabulary.eq_ignore_ascii_case(v)))
            .map(|e| {
                let dot: f64 = e.vector.iter().zip(&query).map(|(a, b)| a * b).sum();
                (dot.clamp(-1.0, 1.0), &e.concept)
            })
            .filter(|(s, _)| request.min_similarity.is_none_or(|m| *s >= m))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.concept_id.cmp(&b.1.concept_id)));
        scored.truncate(request.k);
        let warning = scored.is_empty().then(|| {
            format!(
                "no {} codes found for `{}`{}",
                request.domain,
                request.query,
                request.vocabulary.map(|v| format!(" in {v}")).unwrap_or_default()
            )
        });
        Ok(CodeList {
            condition: request.query.to_string(),
            domain: request.domain,
            similarities: scored.iter().map(|(s, _)| *s).collect(),
            concepts: scored.into_iter().map(|(_, c)| c.clone()).collect(),
            provenance: Provenance::SimilaritySearch,
            warning,
        })
    }

    /// Writes `dim=<d>` then one `concept_id<TAB>base64(f32 LE)` line per entry.
    pub fn save<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "dim={}", self.dimension)?;
        let engine = base64::engine::general_purpose::STANDARD;
        for e in &self.entries {
            let bytes: Vec<u8> = e.vector.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
            writeln!(out, "{}\t{}", e.concept.concept_id, engine.encode(bytes))?;
        }
        Ok(())
    }

    /// Reads a persisted index; concept details come from `concepts`.
    pub fn load<R: Read>(reader: R, concepts: &[Concept]) -> Result<Self, VocabError> {
        let by_id: HashMap<i64, &Concept> = concepts.iter().map(|c| (c.concept_id, c)).collect();
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| VocabError::Index(e.to_string()))?
            .ok_or_else(|| VocabError::Index("empty index file".into()))?;
        let dimension: usize = header
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| VocabError::Index(format!("bad index header `{header}`")))?;
        let engine = base64::engine::general_purpose::STANDARD;
        let mut entries = Vec::new();
        let mut loaded = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| VocabError::Index(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let (id, b64) = line
                .split_once('\t')
                .ok_or_else(|| VocabError::Index(format!("line {lineno}: expected two tab-separated fields")))?;
            let id: i64 = id
                .trim()
                .parse()
                .map_err(|_| VocabError::Index(format!("line {lineno}: bad concept id `{id}`")))?;
            let bytes = engine
                .decode(b64.trim())
                .map_err(|e| VocabError::Index(format!("line {lineno}: {e}")))?;
            if bytes.len() != dimension * 4 {
                return Err(VocabError::Index(format!(
                    "line {lineno}: vector has {} bytes, expected {}",
                    bytes.len(),
                    dimension * 4
                )));
            }
            let mut vector: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if !normalize(&mut vector) {
                return Err(VocabError::Index(format!("line {lineno}: zero vector")));
            }
            let concept = by_id
                .get(&id)
                .ok_or_else(|| VocabError::Index(format!("line {lineno}: concept {id} is not in the vocabulary")))?;
            loaded.push((*concept).clone());
            entries.push(IndexEntry {
                concept: (*concept).clone(),
                vector,
            });
        }
        check_unique(&loaded)?;
        Ok(EmbeddingIndex { dimension, entries })
    }

    /// Whether every vector has the index dimension and unit norm.
    pub fn is_well_formed(&self) -> bool {
        self.entries.iter().all(|e| {
            e.vector.len() == self.dimension
                && (e.vector.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= NORM_TOLERANCE
        })
    }
}

fn check_unique(concepts: &[Concept]) -> Result<(), VocabError> {
    let mut codes = HashSet::new();
    let mut ids = HashSet::new();
    for c in concepts {
        if !codes.insert((c.vocabulary.as_str(), c.concept_code.as_str())) || !ids.insert(c.concept_id) {
            return Err(VocabError::Duplicate {
                vocabulary: c.vocabulary.clone(),
                code: c.concept_code.clone(),
                concept_id: c.concept_id,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SimilaritySearch,
    UserSupplied,
}

/// Concept codes retrieved for one query (a condition, comorbidity, drug
/// or lab name) in one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeList {
    pub condition: String,
    pub domain: Domain,
    pub concepts: Vec<Concept>,
    /// Cosine similarity per concept; empty for user-supplied lists.
    #[serde(default)]
    pub similarities: Vec<f64>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl CodeList {
    pub fn user_supplied(condition: impl Into<String>, domain: Domain, concepts: Vec<Concept>) -> Self {
        CodeList {
            condition: condition.into(),
            domain,
            concepts,
            similarities: Vec::new(),
            provenance: Provenance::UserSupplied,
            warning: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Normalized codes for exact matching.
    pub fn normalized_codes(&self) -> HashSet<String> {
        self.concepts
            .iter()
            .map(|c| normalize_code(&c.concept_code))
            .collect()
    }
}

/// Trim and uppercase; no punctuation changes.
pub fn normalize_code(code: &str) -> String {
    code.trim().to_uppercase()
}

fn book_key(domain: Domain, query: &str) -> (Domain, String) {
    (domain, query.trim().to_lowercase())
}

/// Code lists keyed by `(domain, query)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodeBook {
    lists: BTreeMap<(Domain, String), CodeList>,
}

impl CodeBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the list for its `(domain, condition)`.
    pub fn insert(&mut self, list: CodeList) {
        self.lists.insert(book_key(list.domain, &list.condition), list);
    }

    pub fn get(&self, domain: Domain, query: &str) -> Option<&CodeList> {
        self.lists.get(&book_key(domain, query))
    }

    pub fn iter(&self) -> impl Iterator<Item = &CodeList> {
        self.lists.values()
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// The list of demographic values observed in the data, if present.
    pub fn demographics(&self) -> Option<&CodeList> {
        self.lists.values().find(|l| l.domain == Domain::Demographic)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&self.lists.values().collect::<Vec<_>>())
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let lists: Vec<CodeList> = serde_json::from_str(text)?;
        let mut book = CodeBook::new();
        lists.into_iter().for_each(|l| book.insert(l));
        Ok(book)
    }
}

impl FromIterator<CodeList> for CodeBook {
    fn from_iter<I: IntoIterator<Item = CodeList>>(iter: I) -> Self {
        let mut book = CodeBook::new();
        iter.into_iter().for_each(|l| book.insert(l));
        book
    }
}

/// Query text under which demographic values are filed in a [`CodeBook`].
pub const DEMOGRAPHICS_QUERY: &str = "demographics";

/// Distinct values of every demographic column, as user-supplied concepts.
/// Concept vocabulary is `table.column`, code and name are the value.
pub fn extract_demographic_codes(frames: &Frames) -> CodeList {
    let mut concepts = Vec::new();
    for frame in frames.iter() {
        for column in frame.columns_with_role(ColumnRole::Demographic) {
            let mut values: Vec<String> = column
                .values
                .iter()
                .filter_map(|v| v.as_text().map(|t| t.into_owned()))
                .filter(|s| !s.trim().is_empty())
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            values.sort();
            for value in values {
                concepts.push(Concept {
                    concept_id: concepts.len() as i64 + 1,
                    concept_name: value.clone(),
                    vocabulary: format!("{}.{}", frame.table_name(), column.schema.name),
                    concept_code: value,
                    domain: Domain::Demographic,
                });
            }
        }
    }
    CodeList::user_supplied(DEMOGRAPHICS_QUERY, Domain::Demographic, concepts)
}
