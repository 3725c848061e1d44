//! Synthetic type 2 diabetes dataset engineered to known proportions.
//!
//! 100,000 persons, 11,800 of them diagnosed. Marginal counts below are
//! exact; everything else (dates, lab values, assignment of attributes to
//! persons) comes from a seeded generator.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use datapeck::frame::{parse_schema, Frame, Frames, StudySpec, TableSchema};
use datapeck::gensuite::{compile, parse_matrix, SuiteContext};
use datapeck::testkit::{GenerationMetadata, TestSuite};
use datapeck::{CodeBook, MockProvider};

pub const SCHEMA_JSON: &str = include_str!("../data/t2d/schema.json");
pub const STUDY_JSON: &str = include_str!("../data/t2d/study.json");
pub const VOCABULARY_TSV: &str = include_str!("../data/t2d/vocabulary.tsv");
pub const PROVIDER_JSON: &str = include_str!("../data/t2d/provider.json");
pub const ANNOTATIONS_CSV: &str = include_str!("../data/t2d/annotations.csv");
pub const SUITE_PSV: &str = include_str!("../data/t2d/suite.psv");
pub const CODES_JSON: &str = include_str!("../data/t2d/codes.json");

pub const SEED: u64 = 0x7d2_2022;
pub const POPULATION: usize = 100_000;
pub const COHORT: usize = 11_800;
/// Cohort members first diagnosed in the last 365 days.
pub const NEW_CASES: usize = 5_490;
pub const MALFORMED_BIRTH_DATES: usize = 4;
pub const T2D_CODE: &str = "44054006";

/// `(value, persons, of which in the cohort)`.
pub const GENDER: &[(&str, usize, usize)] = &[
    ("Female", 59_850, 6_531),
    ("Male", 37_080, 4_969),
    ("Other / Skipped", 3_070, 300),
];

pub const RACE: &[(&str, usize, usize)] = &[
    ("White", 55_220, 5_351),
    ("Black or African American", 19_090, 3_129),
    ("None indicated", 15_750, 2_035),
    ("Skip", 5_660, 731),
    ("More than one population", 1_880, 243),
    ("None of these", 1_100, 142),
    ("Another single population", 700, 90),
    ("Prefer not to answer", 600, 79),
];

pub const ETHNICITY: &[(&str, usize, usize)] = &[
    ("Hispanic or Latino", 18_020, 2_591),
    ("Not Hispanic or Latino", 78_070, 8_720),
    ("Skip", 2_200, 275),
    ("None of these", 1_100, 138),
    ("Prefer not to answer", 600, 75),
    ("No matching concept", 10, 1),
];

/// `(code, cohort persons, other persons)`.
pub const CONDITIONS: &[(&str, usize, usize)] = &[
    ("55822004", 8_770, 9_000),
    ("29555009", 59, 25),
    ("38341003", 0, 2_000),
    ("46635009", 0, 400),
];

pub const DRUGS: &[(&str, usize, usize)] = &[("6809", 5_900, 300), ("5856", 1_500, 200)];

/// `(code, cohort persons, other persons, value range)`.
pub const LABS: &[(&str, usize, usize, (f64, f64))] = &[
    ("4548-4", 7_155, 3_000, (5.0, 11.0)),
    ("2075-0", 1_194, 500, (95.0, 110.0)),
    ("2093-3", 927, 800, (120.0, 280.0)),
    ("2345-7", 10_060, 20_000, (70.0, 300.0)),
    ("2085-9", 5_697, 4_000, (25.0, 80.0)),
    ("13457-7", 6_235, 4_000, (50.0, 190.0)),
    ("14957-5", 8_804, 1_000, (2.0, 300.0)),
];

/// Raw cell text per table, in schema column order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Records {
    pub tables: BTreeMap<String, Vec<Vec<String>>>,
}

pub fn schemas() -> Vec<TableSchema> {
    parse_schema(SCHEMA_JSON, Path::new("schema.json")).expect("bundled schema")
}

pub fn provider() -> MockProvider {
    MockProvider::from_json("t2d", PROVIDER_JSON).expect("bundled provider fixture")
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn random_date(rng: &mut StdRng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = (to - from).num_days() as u64;
    from + Days::new(rng.random_range(0..=span))
}

/// Deals `value` to persons so that each value reaches its cohort and
/// non-cohort counts exactly.
fn deal<'a>(
    rng: &mut StdRng,
    table: &[(&'a str, usize, usize)],
    cohort: &[usize],
    others: &[usize],
    out: &mut [&'a str],
) {
    let mut inside: Vec<&str> = table.iter().flat_map(|(v, _, c)| std::iter::repeat_n(*v, *c)).collect();
    let mut outside: Vec<&str> = table
        .iter()
        .flat_map(|(v, total, c)| std::iter::repeat_n(*v, total - c))
        .collect();
    assert_eq!(inside.len(), cohort.len());
    assert_eq!(outside.len(), others.len());
    inside.shuffle(rng);
    outside.shuffle(rng);
    for (p, v) in cohort.iter().zip(inside).chain(others.iter().zip(outside)) {
        out[*p] = v;
    }
}

fn pick(rng: &mut StdRng, from: &[usize], n: usize) -> Vec<usize> {
    let mut v = from.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v
}

fn id(p: usize) -> String {
    (p + 1).to_string()
}

/// Generates every table deterministically from [`SEED`].
pub fn records() -> Records {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut persons: Vec<usize> = (0..POPULATION).collect();
    persons.shuffle(&mut rng);
    let (cohort, others) = persons.split_at(COHORT);

    let mut gender = vec![""; POPULATION];
    let mut race = vec![""; POPULATION];
    let mut ethnicity = vec![""; POPULATION];
    deal(&mut rng, GENDER, cohort, others, &mut gender);
    deal(&mut rng, RACE, cohort, others, &mut race);
    deal(&mut rng, ETHNICITY, cohort, others, &mut ethnicity);

    let window_start = date(2022, 1, 1);
    let last = date(2022, 12, 31);
    let mut conditions: Vec<(usize, String, NaiveDate)> = Vec::new();
    let mut first = vec![None; POPULATION];
    for (i, &p) in cohort.iter().enumerate() {
        let d = if i == 0 {
            last
        } else if i < NEW_CASES {
            random_date(&mut rng, window_start, last)
        } else {
            random_date(&mut rng, date(2005, 1, 1), date(2021, 12, 31))
        };
        first[p] = Some(d);
        conditions.push((p, T2D_CODE.into(), d));
        if rng.random_bool(0.3) {
            conditions.push((p, T2D_CODE.into(), random_date(&mut rng, d, last)));
        }
    }
    for (code, inside, outside) in CONDITIONS {
        for p in pick(&mut rng, cohort, *inside).into_iter().chain(pick(&mut rng, others, *outside)) {
            conditions.push((p, code.to_string(), random_date(&mut rng, date(2008, 1, 1), last)));
        }
    }

    let mut birth: Vec<String> = (0..POPULATION)
        .map(|p| match first[p] {
            Some(d) => (d - Days::new(rng.random_range(35 * 365..85 * 365))).to_string(),
            None => random_date(&mut rng, date(1935, 1, 1), date(2005, 12, 31)).to_string(),
        })
        .collect();
    for (k, p) in others.iter().take(MALFORMED_BIRTH_DATES).enumerate() {
        birth[*p] = format!("19{}-02-30", 70 + k);
    }

    let mut drugs: Vec<(usize, String, NaiveDate)> = Vec::new();
    for (code, inside, outside) in DRUGS {
        for p in pick(&mut rng, cohort, *inside).into_iter().chain(pick(&mut rng, others, *outside)) {
            drugs.push((p, code.to_string(), random_date(&mut rng, date(2010, 1, 1), last)));
        }
    }

    let mut labs: Vec<(usize, String, f64, NaiveDate)> = Vec::new();
    for (code, inside, outside, (lo, hi)) in LABS {
        for p in pick(&mut rng, cohort, *inside).into_iter().chain(pick(&mut rng, others, *outside)) {
            for _ in 0..rng.random_range(1..=2) {
                let v = (rng.random_range(*lo..*hi) * 10.0_f64).round() / 10.0;
                labs.push((p, code.to_string(), v, random_date(&mut rng, date(2015, 1, 1), last)));
            }
        }
    }

    conditions.sort();
    drugs.sort();
    labs.sort_by(|a, b| (a.0, &a.1, a.3).cmp(&(b.0, &b.1, b.3)));

    let mut tables = BTreeMap::new();
    tables.insert(
        "person".to_string(),
        (0..POPULATION)
            .map(|p| {
                vec![
                    id(p),
                    gender[p].to_string(),
                    race[p].to_string(),
                    ethnicity[p].to_string(),
                    birth[p].clone(),
                ]
            })
            .collect(),
    );
    tables.insert(
        "condition_occurrence".to_string(),
        conditions.into_iter().map(|(p, c, d)| vec![id(p), c, d.to_string()]).collect(),
    );
    tables.insert(
        "drug_exposure".to_string(),
        drugs.into_iter().map(|(p, c, d)| vec![id(p), c, d.to_string()]).collect(),
    );
    tables.insert(
        "measurement".to_string(),
        labs.into_iter()
            .map(|(p, c, v, d)| vec![id(p), c, v.to_string(), d.to_string()])
            .collect(),
    );
    Records { tables }
}

/// Typed frames of the generated records, in schema order.
pub fn frames() -> Frames {
    let records = records();
    let frames = schemas()
        .iter()
        .map(|s| Frame::from_records(s, &records.tables[&s.table_name]).expect("generated rows fit the schema"))
        .collect();
    Frames::new(frames)
}

/// Writes the CSV tables and every bundled file (study spec, schema,
/// vocabulary, provider fixture, annotations, suite matrix, code lists).
pub fn write_to(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, text) in [
        ("schema.json", SCHEMA_JSON),
        ("study.json", STUDY_JSON),
        ("vocabulary.tsv", VOCABULARY_TSV),
        ("provider.json", PROVIDER_JSON),
        ("annotations.csv", ANNOTATIONS_CSV),
        ("suite.psv", SUITE_PSV),
        ("codes.json", CODES_JSON),
    ] {
        fs::write(dir.join(name), text)?;
    }
    for frame in frames().iter() {
        let file = fs::File::create(dir.join(format!("{}.csv", frame.table_name())))?;
        frame.write_csv(io::BufWriter::new(file)).map_err(io::Error::other)?;
    }
    Ok(())
}

pub fn spec() -> StudySpec {
    serde_json::from_str(STUDY_JSON).expect("bundled study spec")
}

pub fn codes() -> CodeBook {
    CodeBook::from_json(CODES_JSON).expect("bundled code lists")
}

/// The bundled suite matrix compiled against the bundled code lists.
pub fn suite() -> TestSuite {
    let suggestions = parse_matrix(SUITE_PSV).expect("bundled matrix");
    let ctx = SuiteContext::from_spec(&spec(), GenerationMetadata::default());
    compile(&suggestions, &codes(), &schemas(), ctx).expect("bundled suite compiles")
}
