//! Data pecking: statistical unit tests for structured health-record extracts.
//!
//! The pipeline has two halves. Generation turns a [`frame::StudySpec`] plus
//! grounded reference statistics ([`provider`]) and vocabulary code lists
//! ([`vocab`]) into a validated test matrix and a compiled
//! [`testkit::TestSuite`] ([`gensuite`]). Execution runs that suite against
//! loaded [`frame::Frame`]s ([`testkit`]), measures which columns the suite
//! exercises at each inspection level ([`coverage`]) and renders the outcome
//! ([`report`]).

pub mod coverage;
pub mod frame;
pub mod gensuite;
pub mod provider;
pub mod report;
pub mod stats;
pub mod testkit;
pub mod vocab;

pub use coverage::{compute_coverage, emit_heatmap, CoverageReport, Heatmap};
pub use frame::{
    load_schema, load_table, ColumnRole, ColumnSchema, DeclaredType, Frame, Frames, StudySpec,
    TableSchema, Value,
};
pub use gensuite::{
    compile, double_pass_validate, parse_matrix, serialize_matrix, suggest, Category,
    ComparisonType, Level, TestSuggestion,
};
pub use provider::{GroundedStat, HttpProvider, KnowledgeProvider, MockProvider, ValidationVerdict};
pub use testkit::{evaluate, extract_cohort, run_suite, Status, TestCase, TestResult, TestSuite};
pub use vocab::{CodeBook, CodeList, Concept, Domain, EmbeddingIndex, Embedder, HashingEmbedder};
