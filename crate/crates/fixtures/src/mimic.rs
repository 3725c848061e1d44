//! Small ICD-9 dataset shaped like an intensive-care export, with a switch
//! that strips the dots from every diagnosis code.

use std::path::Path;

use datapeck::frame::{parse_schema, Frame, Frames, StudySpec, TableSchema};
use datapeck::gensuite::{compile, generate, SuiteContext, DEFAULT_MIN_SIMILARITY};
use datapeck::testkit::{GenerationMetadata, TestSuite};
use datapeck::vocab::parse_vocabulary;
use datapeck::{EmbeddingIndex, HashingEmbedder, MockProvider};

pub const SCHEMA_JSON: &str = r#"[
  {
    "table_name": "patients",
    "columns": [
      { "name": "subject_id", "type": "integer", "role": "person_id", "nullable": false },
      { "name": "gender", "type": "text", "role": "demographic", "nullable": true },
      { "name": "dob", "type": "date", "role": "date", "nullable": true }
    ]
  },
  {
    "table_name": "diagnoses_icd",
    "columns": [
      { "name": "subject_id", "type": "integer", "role": "person_id", "nullable": false },
      { "name": "icd9_code", "type": "code", "role": "diagnosis_code", "nullable": false },
      { "name": "chartdate", "type": "date", "role": "date", "nullable": true }
    ]
  }
]"#;

pub const STUDY_JSON: &str = r#"{
  "condition": "Congestive heart failure",
  "region": "US",
  "coding_systems": { "diagnosis": "ICD9CM" },
  "schema_ref": "schema.json",
  "tables": { "patients": "patients.csv", "diagnoses_icd": "diagnoses_icd.csv" }
}"#;

pub const VOCABULARY_TSV: &str = "concept_id\tconcept_name\tdomain_id\tvocabulary_id\tconcept_code
44782428\tCongestive heart failure, unspecified\tCondition\tICD9CM\t428.0
44823110\tHeart failure, unspecified\tCondition\tICD9CM\t428.9
44826537\tDiabetes mellitus without mention of complication\tCondition\tICD9CM\t250.00
44830133\tUnspecified essential hypertension\tCondition\tICD9CM\t401.9
44822934\tAortocoronary bypass status\tCondition\tICD9CM\tV45.81
";

pub const PROVIDER_JSON: &str = r#"{"version": 1, "entries": [{
  "condition": "Congestive heart failure", "region": "US",
  "statistics": [
    {"statistic": "prevalence", "subject": "Congestive heart failure", "value": 20.0,
     "references": ["intensive care admission case-mix surveys"]}
  ]}]}"#;

pub const PATIENTS: usize = 200;
/// Patients carrying the heart-failure code.
pub const CHF_PATIENTS: usize = 40;

/// `(dotted code, patients)`, assigned round-robin after the CHF block.
const OTHER_CODES: &[&str] = &["250.00", "401.9", "V45.81", "428.9"];

pub fn schemas() -> Vec<TableSchema> {
    parse_schema(SCHEMA_JSON, Path::new("schema.json")).expect("bundled schema")
}

pub fn spec() -> StudySpec {
    serde_json::from_str(STUDY_JSON).expect("bundled study spec")
}

pub fn provider() -> MockProvider {
    MockProvider::from_json("chf", PROVIDER_JSON).expect("bundled provider fixture")
}

pub fn index() -> EmbeddingIndex {
    let concepts = parse_vocabulary(VOCABULARY_TSV.as_bytes()).expect("bundled vocabulary");
    EmbeddingIndex::from_concepts(concepts, &HashingEmbedder::default()).expect("index builds")
}

fn strip(code: &str, dotted: bool) -> String {
    if dotted {
        code.to_string()
    } else {
        code.replace('.', "")
    }
}

/// Diagnosis codes keep their dots when `dotted`, as the classification
/// prints them; otherwise they are stored dot-free.
pub fn frames(dotted: bool) -> Frames {
    let schemas = schemas();
    let patients: Vec<Vec<String>> = (1..=PATIENTS)
        .map(|i| {
            vec![
                i.to_string(),
                if i % 2 == 0 { "F" } else { "M" }.to_string(),
                format!("{}-{:02}-15", 1930 + i % 50, 1 + i % 12),
            ]
        })
        .collect();
    let mut diagnoses = Vec::new();
    for i in 1..=PATIENTS {
        let code = if i <= CHF_PATIENTS {
            "428.0"
        } else {
            OTHER_CODES[i % OTHER_CODES.len()]
        };
        diagnoses.push(vec![
            i.to_string(),
            strip(code, dotted),
            format!("2150-{:02}-{:02}", 1 + i % 12, 1 + i % 28),
        ]);
    }
    Frames::new(vec![
        Frame::from_records(&schemas[0], &patients).expect("patients fit the schema"),
        Frame::from_records(&schemas[1], &diagnoses).expect("diagnoses fit the schema"),
    ])
}

/// Suite generated from the bundled provider and vocabulary.
pub fn suite() -> TestSuite {
    let spec = spec();
    let index = index();
    let g = generate(
        &spec,
        &provider(),
        &index,
        &HashingEmbedder::default(),
        None,
        DEFAULT_MIN_SIMILARITY,
    )
    .expect("generation succeeds");
    compile(
        &g.suggestions,
        &g.codes,
        &schemas(),
        SuiteContext::from_spec(&spec, GenerationMetadata::default()),
    )
    .expect("suite compiles")
}
