//! Column coverage per inspection level.
//!
//! A case covers the columns it binds, at the level it declares. The
//! data-types check covers every declared column at metadata level. No
//! Reference cases read nothing and cover nothing. Percentages are over all
//! columns of all declared tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::frame::TableSchema;
use crate::gensuite::Level;
use crate::testkit::{ColumnRef, ReferenceStatus, Target, TestSuite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Every declared column, in schema order.
    pub columns: Vec<ColumnRef>,
    pub per_level: BTreeMap<Level, BTreeSet<ColumnRef>>,
    pub per_level_percent: BTreeMap<Level, f64>,
    pub overall_percent: f64,
    pub per_table_percent: BTreeMap<String, f64>,
    /// Number of cases declared at each level.
    pub tests_per_level: BTreeMap<Level, usize>,
}

fn percent(covered: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * covered as f64 / total as f64
    }
}

impl CoverageReport {
    pub fn covered(&self) -> BTreeSet<&ColumnRef> {
        self.per_level.values().flatten().collect()
    }
}

/// Coverage of `schemas` by the bindings of `suite`. Cell values play no part.
pub fn compute_coverage(suite: &TestSuite, schemas: &[TableSchema]) -> CoverageReport {
    let columns: Vec<ColumnRef> = schemas
        .iter()
        .flat_map(|t| t.columns.iter().map(move |c| ColumnRef::new(&t.table_name, &c.name)))
        .collect();
    let declared: BTreeSet<&ColumnRef> = columns.iter().collect();
    let mut per_level: BTreeMap<Level, BTreeSet<ColumnRef>> = Level::ALL.iter().map(|l| (*l, BTreeSet::new())).collect();
    let mut tests_per_level: BTreeMap<Level, usize> = Level::ALL.iter().map(|l| (*l, 0)).collect();

    for case in &suite.cases {
        *tests_per_level.entry(case.level).or_default() += 1;
        if case.reference_status == ReferenceStatus::NoReference {
            continue;
        }
        let bucket = per_level.entry(case.level).or_default();
        if let Target::Schema { .. } = case.target {
            bucket.extend(columns.iter().cloned());
        } else {
            bucket.extend(
                case.bound_columns()
                    .into_iter()
                    .filter(|c| declared.contains(c))
                    .cloned(),
            );
        }
    }

    let per_level_percent = per_level
        .iter()
        .map(|(l, set)| (*l, percent(set.len(), columns.len())))
        .collect();
    let covered: BTreeSet<&ColumnRef> = per_level.values().flatten().collect();
    let per_table_percent = schemas
        .iter()
        .map(|t| {
            let n = covered.iter().filter(|c| c.table == t.table_name).count();
            (t.table_name.clone(), percent(n, t.columns.len()))
        })
        .collect();
    CoverageReport {
        overall_percent: percent(covered.len(), columns.len()),
        columns,
        per_level,
        per_level_percent,
        per_table_percent,
        tests_per_level,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub column: ColumnRef,
    pub covered: bool,
    /// Levels contributing to `covered`.
    pub levels: Vec<Level>,
}

/// Covered/uncovered flag per declared column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heatmap {
    pub include_metadata: bool,
    pub cells: Vec<HeatmapCell>,
}

impl Heatmap {
    /// `column,covered` with `table.column` row labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("column,covered\n");
        for cell in &self.cells {
            let _ = writeln!(out, "{},{}", cell.column, u8::from(cell.covered));
        }
        out
    }

    /// `column,level,covered`, one row per column and level.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("column,level,covered\n");
        let levels = Level::ALL.iter().filter(|l| self.include_metadata || **l != Level::Metadata);
        for cell in &self.cells {
            for level in levels.clone() {
                let _ = writeln!(out, "{},{level},{}", cell.column, u8::from(cell.levels.contains(level)));
            }
        }
        out
    }
}

/// One cell per declared column; without metadata, only distribution and
/// subpopulation bindings count.
pub fn emit_heatmap(report: &CoverageReport, include_metadata: bool) -> Heatmap {
    let cells = report
        .columns
        .iter()
        .map(|c| {
            let levels: Vec<Level> = report
                .per_level
                .iter()
                .filter(|(l, set)| (include_metadata || **l != Level::Metadata) && set.contains(c))
                .map(|(l, _)| *l)
                .collect();
            HeatmapCell {
                column: c.clone(),
                covered: !levels.is_empty(),
                levels,
            }
        })
        .collect();
    Heatmap {
        include_metadata,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{ColumnRole, ColumnSchema, DeclaredType};
    use crate::gensuite::{Category, ComparisonType};
    use crate::provider::Unit;
    use crate::testkit::{CohortScope, Expected, GenerationMetadata, TestCase};
    use crate::vocab::{CodeList, Domain};
    use proptest::prelude::*;

    fn schema() -> Vec<TableSchema> {
        let col = |n: &str, role| ColumnSchema {
            name: n.into(),
            declared_type: DeclaredType::Text,
            role,
            nullable: true,
        };
        vec![TableSchema {
            table_name: "person".into(),
            columns: vec![
                col("person_id", ColumnRole::PersonId),
                col("gender", ColumnRole::Demographic),
                col("race", ColumnRole::Demographic),
                col("ethnicity", ColumnRole::Demographic),
                col("birth_date", ColumnRole::Date),
            ],
        }]
    }

    fn case(name: &str, level: Level, target: Target) -> TestCase {
        let dtype = matches!(target, Target::Schema { .. });
        TestCase {
            name: name.into(),
            category: Category::Demography,
            level,
            comparison_type: if dtype { ComparisonType::DtypeCheck } else { ComparisonType::Point },
            expected: (!dtype).then_some(Expected::Value(50.0)),
            unit: Unit::Percent,
            cohort_scope: CohortScope::Population,
            target,
            cohort: None,
            references: vec!["r".into()],
            reference_status: ReferenceStatus::Referenced,
            note: None,
        }
    }

    fn dtype() -> TestCase {
        case("check data types", Level::Metadata, Target::Schema { code_formats: vec![] })
    }

    fn demo(name: &str, column: &str, level: Level) -> TestCase {
        case(
            name,
            level,
            Target::Demographic {
                column: ColumnRef::new("person", column),
                value: "x".into(),
            },
        )
    }

    fn suite(cases: Vec<TestCase>) -> TestSuite {
        TestSuite {
            condition: "c".into(),
            region: "r".into(),
            cases,
            cohort_codes: CodeList::user_supplied("c", Domain::Condition, vec![]),
            generation_metadata: GenerationMetadata::default(),
            warnings: vec![],
        }
    }

    #[test]
    fn metadata_only_suite() {
        let r = compute_coverage(&suite(vec![dtype()]), &schema());
        assert_eq!(r.per_level_percent[&Level::Metadata], 100.0);
        assert_eq!(r.per_level_percent[&Level::Distribution], 0.0);
        assert_eq!(r.per_level_percent[&Level::Subpopulation], 0.0);
        assert_eq!(r.overall_percent, 100.0);
        let h = emit_heatmap(&r, false);
        assert!(h.cells.iter().all(|c| !c.covered));
        assert!(emit_heatmap(&r, true).cells.iter().all(|c| c.covered));
    }

    #[test]
    fn distribution_test_adds_gender() {
        let a = compute_coverage(&suite(vec![dtype()]), &schema());
        let b = compute_coverage(&suite(vec![dtype(), demo("Female", "gender", Level::Distribution)]), &schema());
        assert!(b.per_level[&Level::Distribution].contains(&ColumnRef::new("person", "gender")));
        assert!(b.overall_percent >= a.overall_percent);
        assert_eq!(b.per_level_percent[&Level::Distribution], 20.0);
    }

    #[test]
    fn empty_suite_is_uncovered() {
        let r = compute_coverage(&suite(vec![]), &schema());
        assert_eq!(r.overall_percent, 0.0);
        let csv = emit_heatmap(&r, true).to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
    }

    #[test]
    fn no_reference_cases_cover_nothing() {
        let mut c = demo("Asian", "race", Level::Distribution);
        c.reference_status = ReferenceStatus::NoReference;
        c.expected = None;
        let r = compute_coverage(&suite(vec![c]), &schema());
        assert_eq!(r.overall_percent, 0.0);
        assert_eq!(r.tests_per_level[&Level::Distribution], 1);
    }

    #[test]
    fn long_format_lists_each_level() {
        let r = compute_coverage(
            &suite(vec![dtype(), demo("Female diagnosed", "gender", Level::Subpopulation)]),
            &schema(),
        );
        let long = emit_heatmap(&r, true).to_long_csv();
        assert_eq!(long.lines().count(), 1 + 5 * 3);
        assert!(long.contains("person.gender,subpopulation,1"));
        assert!(long.contains("person.race,subpopulation,0"));
        assert!(long.contains("person.race,metadata,1"));
        let short = emit_heatmap(&r, false).to_long_csv();
        assert_eq!(short.lines().count(), 1 + 5 * 2);
    }

    proptest! {
        #[test]
        fn coverage_is_monotone(picks in prop::collection::vec((0usize..5, 0usize..3), 0..8), extra in (0usize..5, 0usize..3)) {
            let names = ["person_id", "gender", "race", "ethnicity", "birth_date"];
            let make = |i: usize, (c, l): (usize, usize)| {
                if l == 0 { let mut d = dtype(); d.name = format!("t{i}"); d }
                else { demo(&format!("t{i}"), names[c], Level::ALL[l]) }
            };
            let base: Vec<TestCase> = picks.iter().enumerate().map(|(i, p)| make(i, *p)).collect();
            let mut bigger = base.clone();
            bigger.push(make(99, extra));
            let a = compute_coverage(&suite(base), &schema());
            let b = compute_coverage(&suite(bigger), &schema());
            for l in Level::ALL {
                prop_assert!(a.per_level[l].is_subset(&b.per_level[l]));
            }
            prop_assert!(b.overall_percent >= a.overall_percent);
            let union: BTreeSet<&ColumnRef> = a.per_level.values().flatten().collect();
            prop_assert_eq!(union, a.covered());
        }
    }
}
