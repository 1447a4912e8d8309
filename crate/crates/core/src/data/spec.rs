use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, FieldError, Result};

/// Causal estimand of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "ATC")]
    Atc,
}

impl Estimand {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::Ate => "ATE",
            Estimand::Att => "ATT",
            Estimand::Atc => "ATC",
        }
    }

    /// Estimand the weighting engines actually target. ATC runs as ATT on
    /// flipped group labels.
    pub fn weighting(self) -> Estimand {
        match self {
            Estimand::Ate => Estimand::Ate,
            Estimand::Att | Estimand::Atc => Estimand::Att,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Estimand::Ate => "Average Treatment Effect on the entire population (ATE)",
            Estimand::Att => "Average Treatment Effect on the Treated population (ATT)",
            Estimand::Atc => "Average Treatment Effect on the Control population (ATC)",
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalConfounder {
    pub name: String,
    pub reference: String,
}

/// The analyst's model set-up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub treatment: String,
    pub control_label: String,
    pub treatment_label: String,
    pub outcome: String,
    #[serde(default)]
    pub numeric_confounders: Vec<String>,
    #[serde(default)]
    pub categorical_confounders: Vec<CategoricalConfounder>,
    pub estimand: Estimand,
}

impl AnalysisSpec {
    pub fn confounder_names(&self) -> impl Iterator<Item = &str> {
        self.numeric_confounders
            .iter()
            .map(String::as_str)
            .chain(self.categorical_confounders.iter().map(|c| c.name.as_str()))
    }

    /// Checks every invariant against `data`, collecting all failures.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let mut errors = Vec::new();

        let check_exists = |field: String, name: &str, errors: &mut Vec<FieldError>| {
            if data.column(name).is_none() {
                errors.push(FieldError::new(field, format!("unknown column `{name}`")));
                false
            } else {
                true
            }
        };

        if check_exists("treatment".into(), &self.treatment, &mut errors) {
            let col = data.column(&self.treatment).unwrap();
            if self.control_label == self.treatment_label {
                errors.push(FieldError::new(
                    "treatment_label",
                    "control and treatment labels must differ",
                ));
            }
            let labels = col.distinct_labels(0..data.n_rows());
            for (field, label) in [
                ("control_label", &self.control_label),
                ("treatment_label", &self.treatment_label),
            ] {
                if !labels.contains(label) {
                    errors.push(FieldError::new(
                        field,
                        format!("`{label}` does not occur in column `{}`", self.treatment),
                    ));
                }
            }
            if labels.len() > 2 {
                errors.push(FieldError::new(
                    "treatment",
                    format!(
                        "column `{}` has {} distinct values; only two treatment groups are supported",
                        self.treatment,
                        labels.len()
                    ),
                ));
            }
        }

        if check_exists("outcome".into(), &self.outcome, &mut errors)
            && !data.column(&self.outcome).unwrap().is_numeric()
        {
            errors.push(FieldError::new(
                "outcome",
                format!("outcome `{}` must be numeric", self.outcome),
            ));
        }

        for (i, name) in self.numeric_confounders.iter().enumerate() {
            let field = format!("numeric_confounders[{i}]");
            if check_exists(field.clone(), name, &mut errors)
                && !data.column(name).unwrap().is_numeric()
            {
                errors.push(FieldError::new(
                    field,
                    format!("`{name}` is not numeric; declare it as categorical"),
                ));
            }
        }
        for (i, cat) in self.categorical_confounders.iter().enumerate() {
            let field = format!("categorical_confounders[{i}]");
            if check_exists(format!("{field}.name"), &cat.name, &mut errors) {
                let col = data.column(&cat.name).unwrap();
                if !col.distinct_labels(0..data.n_rows()).contains(&cat.reference) {
                    errors.push(FieldError::new(
                        format!("{field}.reference"),
                        format!("`{}` is not a level of `{}`", cat.reference, cat.name),
                    ));
                }
            }
        }

        let mut seen = HashSet::new();
        for name in std::iter::once(self.treatment.as_str())
            .chain(std::iter::once(self.outcome.as_str()))
            .chain(self.confounder_names())
        {
            if !seen.insert(name) {
                errors.push(FieldError::new(
                    "confounders",
                    format!("column `{name}` is used in more than one role"),
                ));
            }
        }

        let total = self.numeric_confounders.len() + self.categorical_confounders.len();
        if self.numeric_confounders.is_empty() || total < 2 {
            errors.push(FieldError::new(
                "confounders",
                "At least 1 Continuous Confounders, and 2 Confounders in total, need to be chosen",
            ));
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}
