use serde::{Deserialize, Serialize};

use super::dataset::{ColumnValues, Dataset};
use super::design::DesignMatrix;
use crate::error::Result;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ColumnSummary {
    Numeric {
        name: String,
        n: usize,
        missing: usize,
        mean: Option<f64>,
        sd: Option<f64>,
        median: Option<f64>,
        min: Option<f64>,
        max: Option<f64>,
    },
    Categorical {
        name: String,
        missing: usize,
        counts: Vec<(String, usize)>,
    },
}

impl ColumnSummary {
    pub fn name(&self) -> &str {
        match self {
            ColumnSummary::Numeric { name, .. } | ColumnSummary::Categorical { name, .. } => name,
        }
    }

    fn numeric(name: &str, values: &[f64], missing: usize) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        let sorted = stats::sorted_copy(values);
        ColumnSummary::Numeric {
            name: name.to_string(),
            n: values.len(),
            missing,
            mean: finite(stats::mean(values)),
            sd: finite(stats::sd(values)),
            median: finite(stats::quantile_sorted(&sorted, 0.5)),
            min: sorted.first().copied(),
            max: sorted.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    /// Group label when the table covers one group only.
    pub group: Option<String>,
    pub n_rows: usize,
    pub columns: Vec<ColumnSummary>,
}

fn summarize_rows(data: &Dataset, rows: &[usize], group: Option<String>) -> SummaryTable {
    let columns = data
        .columns()
        .iter()
        .map(|col| match col.values() {
            ColumnValues::Numeric(v) => {
                let present: Vec<f64> = rows.iter().filter_map(|&r| v[r]).collect();
                ColumnSummary::numeric(col.name(), &present, rows.len() - present.len())
            }
            ColumnValues::Categorical { levels, codes } => {
                let mut counts = vec![0usize; levels.len()];
                let mut missing = 0;
                for &r in rows {
                    match codes[r] {
                        Some(c) => counts[c as usize] += 1,
                        None => missing += 1,
                    }
                }
                ColumnSummary::Categorical {
                    name: col.name().to_string(),
                    missing,
                    counts: levels.iter().cloned().zip(counts).collect(),
                }
            }
        })
        .collect();
    SummaryTable {
        group,
        n_rows: rows.len(),
        columns,
    }
}

/// Per-column summary statistics, optionally one table per level of
/// `group_by` (rows with a missing group value are left out).
pub fn summarize(data: &Dataset, group_by: Option<&str>) -> Result<Vec<SummaryTable>> {
    match group_by {
        None => {
            let rows: Vec<usize> = (0..data.n_rows()).collect();
            Ok(vec![summarize_rows(data, &rows, None)])
        }
        Some(name) => {
            let col = data.require(name)?;
            Ok(col
                .distinct_labels(0..data.n_rows())
                .into_iter()
                .map(|level| {
                    let rows: Vec<usize> = (0..data.n_rows())
                        .filter(|&r| col.label(r).as_deref() == Some(level.as_str()))
                        .collect();
                    summarize_rows(data, &rows, Some(level))
                })
                .collect())
        }
    }
}

/// Control and treatment group summaries over the encoded confounders and
/// the outcome, in the user's original group orientation.
pub fn summarize_design(dm: &DesignMatrix) -> Vec<SummaryTable> {
    let reported = dm.reported_treated();
    [("control", false), ("treatment", true)]
        .into_iter()
        .map(|(label, flag)| {
            let rows: Vec<usize> = (0..dm.n()).filter(|&i| reported[i] == flag).collect();
            let mut columns: Vec<ColumnSummary> = dm
                .columns()
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let vals: Vec<f64> = rows.iter().map(|&i| dm.x()[(i, j)]).collect();
                    ColumnSummary::numeric(&c.name, &vals, 0)
                })
                .collect();
            let y: Vec<f64> = rows.iter().map(|&i| dm.y()[i]).collect();
            columns.push(ColumnSummary::numeric(dm.outcome_name(), &y, 0));
            SummaryTable {
                group: Some(label.to_string()),
                n_rows: rows.len(),
                columns,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{load_csv, ParseOptions};
    use crate::error::Error;

    #[test]
    fn numeric_column_statistics() {
        let d = load_csv(b"a,b\n1,5\n2,5\n3,NA", &ParseOptions::default()).unwrap();
        let t = &summarize(&d, None).unwrap()[0];
        match &t.columns[0] {
            ColumnSummary::Numeric {
                mean, sd, median, min, max, ..
            } => {
                assert_eq!(*mean, Some(2.0));
                assert_eq!(*sd, Some(1.0));
                assert_eq!(*median, Some(2.0));
                assert_eq!(*min, Some(1.0));
                assert_eq!(*max, Some(3.0));
            }
            _ => panic!(),
        }
        match &t.columns[1] {
            ColumnSummary::Numeric { sd, missing, .. } => {
                assert_eq!(*sd, Some(0.0));
                assert_eq!(*missing, 1);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn empty_group_reports_missing_statistics() {
        let d = load_csv(b"g,x\na,NA\nb,1\nb,2", &ParseOptions::default()).unwrap();
        let tables = summarize(&d, Some("g")).unwrap();
        assert_eq!(tables.len(), 2);
        match &tables[0].columns[1] {
            ColumnSummary::Numeric { mean, sd, min, .. } => {
                assert_eq!((*mean, *sd, *min), (None, None, None));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn categorical_counts() {
        let d = load_csv(b"g\nb\na\nb\n", &ParseOptions::default()).unwrap();
        let t = &summarize(&d, None).unwrap()[0];
        match &t.columns[0] {
            ColumnSummary::Categorical { counts, .. } => {
                assert_eq!(counts, &[("a".to_string(), 1), ("b".to_string(), 2)]);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn unknown_group_column() {
        let d = load_csv(b"g\nb\n", &ParseOptions::default()).unwrap();
        assert!(matches!(summarize(&d, Some("nope")), Err(Error::UnknownColumn(_))));
    }
}
