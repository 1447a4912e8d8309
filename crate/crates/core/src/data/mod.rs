//! Loading, typing and encoding of observational datasets.

mod dataset;
mod design;
mod spec;
mod summary;

pub use dataset::{
    format_number, load_csv, write_csv, Column, ColumnValues, Dataset, ParseOptions, Quote,
    Separator,
};
pub use design::{encode_design, model_formulas, ColumnKind, DesignColumn, DesignMatrix};
pub use spec::{AnalysisSpec, CategoricalConfounder, Estimand};
pub use summary::{summarize, summarize_design, ColumnSummary, SummaryTable};
