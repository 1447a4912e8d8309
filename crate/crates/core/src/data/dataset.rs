use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Field separator accepted by [`load_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separator {
    #[default]
    Comma,
    Semicolon,
    Tab,
}

impl Separator {
    pub fn byte(self) -> u8 {
        match self {
            Separator::Comma => b',',
            Separator::Semicolon => b';',
            Separator::Tab => b'\t',
        }
    }
}

/// Quote character accepted by [`load_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quote {
    None,
    #[default]
    Double,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseOptions {
    pub header: bool,
    pub separator: Separator,
    pub quote: Quote,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            header: true,
            separator: Separator::Comma,
            quote: Quote::Double,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ColumnValues {
    Numeric(Vec<Option<f64>>),
    Categorical {
        levels: Vec<String>,
        codes: Vec<Option<u32>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    name: String,
    values: ColumnValues,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self {
            name: name.into(),
            values: ColumnValues::Numeric(values),
        }
    }

    /// Builds a categorical column; the level set is the sorted set of
    /// observed values.
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, values: &[Option<S>]) -> Self {
        let levels: Vec<String> = values
            .iter()
            .flatten()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let codes = values
            .iter()
            .map(|v| {
                v.as_ref().map(|s| {
                    levels
                        .binary_search_by(|l| l.as_str().cmp(s.as_ref()))
                        .expect("level present") as u32
                })
            })
            .collect();
        Self {
            name: name.into(),
            values: ColumnValues::Categorical { levels, codes },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &ColumnValues {
        &self.values
    }

    pub fn len(&self) -> usize {
        match &self.values {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.values, ColumnValues::Numeric(_))
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.values {
            ColumnValues::Numeric(_) => None,
            ColumnValues::Categorical { levels, .. } => Some(levels),
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match &self.values {
            ColumnValues::Numeric(v) => v[row].is_none(),
            ColumnValues::Categorical { codes, .. } => codes[row].is_none(),
        }
    }

    pub fn numeric_value(&self, row: usize) -> Option<f64> {
        match &self.values {
            ColumnValues::Numeric(v) => v[row],
            ColumnValues::Categorical { .. } => None,
        }
    }

    /// Text label of a cell: the level for categorical columns, the shortest
    /// round-trip rendering for numeric ones (so `1.0` becomes `"1"`).
    pub fn label(&self, row: usize) -> Option<String> {
        match &self.values {
            ColumnValues::Numeric(v) => v[row].map(format_number),
            ColumnValues::Categorical { levels, codes } => {
                codes[row].map(|c| levels[c as usize].clone())
            }
        }
    }

    /// Distinct non-missing labels, ordered numerically for numeric columns
    /// and lexically for categorical ones.
    pub fn distinct_labels(&self, rows: impl Iterator<Item = usize>) -> Vec<String> {
        match &self.values {
            ColumnValues::Numeric(v) => {
                let mut vals: Vec<f64> = rows.filter_map(|r| v[r]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                vals.into_iter().map(format_number).collect()
            }
            ColumnValues::Categorical { levels, codes } => {
                let present: BTreeSet<u32> = rows.filter_map(|r| codes[r]).collect();
                present
                    .into_iter()
                    .map(|c| levels[c as usize].clone())
                    .collect()
            }
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match &self.values {
            ColumnValues::Numeric(v) => {
                Column::numeric(self.name.clone(), rows.iter().map(|&r| v[r]).collect())
            }
            ColumnValues::Categorical { levels, codes } => {
                let labels: Vec<Option<&str>> = rows
                    .iter()
                    .map(|&r| codes[r].map(|c| levels[c as usize].as_str()))
                    .collect();
                Column::categorical(self.name.clone(), &labels)
            }
        }
    }
}

pub fn format_number(v: f64) -> String {
    format!("{v}")
}

/// Immutable rectangular table of named, typed columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    columns: Vec<Column>,
    n_rows: usize,
}

impl Dataset {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let n_rows = columns.first().map(Column::len).unwrap_or(0);
        let mut seen = HashSet::new();
        for col in &columns {
            if col.name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", col.name)));
            }
            if col.len() != n_rows {
                return Err(Error::Schema(format!(
                    "column `{}` has {} values, expected {}",
                    col.name,
                    col.len(),
                    n_rows
                )));
            }
        }
        Ok(Self { columns, n_rows })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_rows: rows.len(),
        }
    }

    /// Appends a numeric column; fails on a name clash or length mismatch.
    pub fn with_numeric_column(&self, name: &str, values: Vec<Option<f64>>) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns.push(Column::numeric(name, values));
        Dataset::new(columns)
    }

    /// First `n` rows rendered as text, with `None` for missing cells.
    pub fn head(&self, n: usize) -> Vec<Vec<Option<String>>> {
        (0..n.min(self.n_rows))
            .map(|r| self.columns.iter().map(|c| c.label(r)).collect())
            .collect()
    }
}

fn is_missing_token(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses delimited text into a typed [`Dataset`].
///
/// A column is numeric when every non-missing cell parses as a finite
/// number, categorical otherwise. Empty cells and `NA` are missing. Without a
/// header the columns are named `V1`, `V2`, ...
pub fn load_csv(bytes: &[u8], options: &ParseOptions) -> Result<Dataset> {
    let mut builder = csv::ReaderBuilder::new();
    builder
        .has_headers(false)
        .flexible(true)
        .delimiter(options.separator.byte());
    match options.quote {
        Quote::None => {
            builder.quoting(false);
        }
        Quote::Double => {
            builder.quote(b'"');
        }
        Quote::Single => {
            builder.quote(b'\'');
        }
    }
    let mut reader = builder.from_reader(bytes);

    let mut records: Vec<csv::StringRecord> = Vec::new();
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| {
            let row = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(idx + 1);
            Error::Parse {
                row,
                message: e.to_string(),
            }
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {w} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        records.push(rec);
    }

    let width = width.ok_or(Error::EmptyData)?;
    let (names, body) = if options.header {
        let header = &records[0];
        let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
        (names, &records[1..])
    } else {
        ((1..=width).map(|i| format!("V{i}")).collect(), &records[..])
    };
    if body.is_empty() {
        return Err(Error::EmptyData);
    }

    let columns = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let cells: Vec<&str> = body.iter().map(|r| &r[j]).collect();
            let numeric = cells
                .iter()
                .all(|c| is_missing_token(c) || parse_number(c).is_some());
            if numeric {
                let values = cells
                    .iter()
                    .map(|c| if is_missing_token(c) { None } else { parse_number(c) })
                    .collect();
                Column::numeric(name, values)
            } else {
                let values: Vec<Option<&str>> = cells
                    .iter()
                    .map(|c| if is_missing_token(c) { None } else { Some(*c) })
                    .collect();
                Column::categorical(name, &values)
            }
        })
        .collect();
    Dataset::new(columns)
}

/// Writes the dataset as delimited text with a header row. Missing cells are
/// written as `NA`; numbers use their shortest round-trip representation.
pub fn write_csv(data: &Dataset, separator: Separator) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(separator.byte())
        .from_writer(Vec::new());
    writer
        .write_record(data.columns.iter().map(|c| c.name.as_str()))
        .expect("write to memory");
    for r in 0..data.n_rows {
        writer
            .write_record(
                data.columns
                    .iter()
                    .map(|c| c.label(r).unwrap_or_else(|| "NA".to_string())),
            )
            .expect("write to memory");
    }
    writer.into_inner().expect("flush to memory")
}
