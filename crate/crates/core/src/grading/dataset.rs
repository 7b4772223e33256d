use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GradingError;

/// Gleason scores accepted in a dataset manifest.
pub const KNOWN_LABELS: [&str; 10] = ["3+3", "3+4", "4+3", "4+4", "4+5", "5+4", "5+3", "3+5", "5+5", "2+4"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Excluded,
}

/// Patch class: grade 3, or grade 4 and above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GradeClass {
    Grade3 = 0,
    Grade4 = 1,
}

impl GradeClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            GradeClass::Grade3
        } else {
            GradeClass::Grade4
        }
    }
}

/// Split of a Gleason label: "3+3" and the grade-4-and-above scores train,
/// the intermediate "3+4"/"4+3" are evaluated, the rest are discarded.
pub fn split_for_label(label: &str) -> Result<Split, GradingError> {
    match label {
        "3+3" | "4+4" | "4+5" | "5+4" | "5+5" => Ok(Split::Train),
        "3+4" | "4+3" => Ok(Split::Eval),
        "2+4" | "3+5" | "5+3" => Ok(Split::Excluded),
        other => Err(GradingError::UnknownLabel(other.to_string())),
    }
}

/// Training class of a label, `None` outside the training split.
pub fn train_class(label: &str) -> Result<Option<GradeClass>, GradingError> {
    Ok(match (split_for_label(label)?, label) {
        (Split::Train, "3+3") => Some(GradeClass::Grade3),
        (Split::Train, _) => Some(GradeClass::Grade4),
        _ => None,
    })
}

/// Class a "3+4"/"4+3" slide should be voted into.
pub fn expected_verdict(label: &str) -> Option<GradeClass> {
    match label {
        "3+4" => Some(GradeClass::Grade3),
        "4+3" => Some(GradeClass::Grade4),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub slide_path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

/// Slide counts per split, with training slides broken down by class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCensus {
    pub train_grade3: usize,
    pub train_grade4: usize,
    pub eval: usize,
    pub excluded: usize,
}

impl SplitCensus {
    pub fn train(&self) -> usize {
        self.train_grade3 + self.train_grade4
    }
}

impl DatasetManifest {
    /// Builds entries from labels alone, assigning each split by rule.
    pub fn from_labels<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, GradingError> {
        let entries = items
            .into_iter()
            .map(|(path, label)| {
                Ok(DatasetEntry { slide_path: path.to_string(), label: label.to_string(), split: split_for_label(label)? })
            })
            .collect::<Result<_, GradingError>>()?;
        Ok(Self { entries })
    }

    /// Checks every label and that each recorded split follows the rule.
    pub fn validate(&self) -> Result<(), GradingError> {
        for e in &self.entries {
            let expected = split_for_label(&e.label)?;
            if expected != e.split {
                return Err(GradingError::InvalidManifest(format!(
                    "{}: label {} belongs to split {:?}, manifest says {:?}",
                    e.slide_path, e.label, expected, e.split
                )));
            }
        }
        Ok(())
    }

    pub fn census(&self) -> Result<SplitCensus, GradingError> {
        let mut c = SplitCensus::default();
        for e in &self.entries {
            match split_for_label(&e.label)? {
                Split::Train => match train_class(&e.label)? {
                    Some(GradeClass::Grade3) => c.train_grade3 += 1,
                    _ => c.train_grade4 += 1,
                },
                Split::Eval => c.eval += 1,
                Split::Excluded => c.excluded += 1,
            }
        }
        Ok(c)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: &Path) -> Result<Self, GradingError> {
        let text = fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| GradingError::InvalidManifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), GradingError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| GradingError::InvalidManifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_exhaustive_and_exclusive() {
        let mut seen = std::collections::HashMap::new();
        for l in KNOWN_LABELS {
            *seen.entry(split_for_label(l).unwrap()).or_insert(0) += 1;
        }
        assert_eq!(seen[&Split::Train], 5);
        assert_eq!(seen[&Split::Eval], 2);
        assert_eq!(seen[&Split::Excluded], 3);
        assert!(split_for_label("3+2").is_err());
        assert!(split_for_label("benign").is_err());
    }

    #[test]
    fn validate_rejects_wrong_split() {
        let m = DatasetManifest {
            entries: vec![DatasetEntry { slide_path: "a".into(), label: "3+4".into(), split: Split::Train }],
        };
        assert!(matches!(m.validate(), Err(GradingError::InvalidManifest(_))));
    }
}
