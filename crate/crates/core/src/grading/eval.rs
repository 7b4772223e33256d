use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{slide_seed, DatasetEntry, DatasetManifest, GradingError, SlideGrade, Split, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub slide_path: String,
    pub label: String,
    pub votes_grade3: usize,
    pub votes_grade4: usize,
    pub verdict: Option<Verdict>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Slide counts by label row and verdict column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub label_3_4_verdict_3_4: usize,
    pub label_3_4_verdict_4_3: usize,
    pub label_4_3_verdict_3_4: usize,
    pub label_4_3_verdict_4_3: usize,
    /// Slides that could not be graded.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patches_per_slide: usize,
    pub seed: u64,
    pub slides: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// Recomputes every summary field from the per-slide records.
    pub fn from_records(records: Vec<EvalRecord>, patches_per_slide: usize, seed: u64) -> Self {
        let mut confusion = Confusion::default();
        for r in &records {
            match (r.label.as_str(), r.verdict) {
                (_, None) => confusion.failed += 1,
                ("3+4", Some(Verdict::ThreeFour)) => confusion.label_3_4_verdict_3_4 += 1,
                ("3+4", Some(Verdict::FourThree)) => confusion.label_3_4_verdict_4_3 += 1,
                (_, Some(Verdict::ThreeFour)) => confusion.label_4_3_verdict_3_4 += 1,
                (_, Some(Verdict::FourThree)) => confusion.label_4_3_verdict_4_3 += 1,
            }
        }
        let correct = records.iter().filter(|r| r.correct).count();
        let slides = records.len();
        let accuracy = if slides == 0 { 0.0 } else { correct as f64 / slides as f64 };
        Self { patches_per_slide, seed, slides, correct, accuracy, confusion, records }
    }

    pub fn summary(&self) -> String {
        let c = &self.confusion;
        let mut s = String::new();
        let _ = writeln!(s, "slides {}  correct {}  accuracy {:.4}", self.slides, self.correct, self.accuracy);
        let _ = writeln!(s, "             verdict 3+4*  verdict 4*+3");
        let _ = writeln!(s, "label 3+4    {:>12}  {:>12}", c.label_3_4_verdict_3_4, c.label_3_4_verdict_4_3);
        let _ = writeln!(s, "label 4+3    {:>12}  {:>12}", c.label_4_3_verdict_3_4, c.label_4_3_verdict_4_3);
        if c.failed > 0 {
            let _ = writeln!(s, "failed       {}", c.failed);
        }
        s.push_str("ties are graded 4*+3\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), GradingError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| GradingError::Format(e.to_string()))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GradingError> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| GradingError::Format(e.to_string()))
    }
}

pub fn record_for(entry: &DatasetEntry, grade: Result<SlideGrade, GradingError>) -> EvalRecord {
    let expected = Verdict::for_label(&entry.label);
    match grade {
        Ok(g) => EvalRecord {
            slide_path: entry.slide_path.clone(),
            label: entry.label.clone(),
            votes_grade3: g.votes_grade3,
            votes_grade4: g.votes_grade4,
            verdict: Some(g.verdict),
            correct: expected == Some(g.verdict),
            error: None,
        },
        Err(e) => EvalRecord {
            slide_path: entry.slide_path.clone(),
            label: entry.label.clone(),
            votes_grade3: 0,
            votes_grade4: 0,
            verdict: None,
            correct: false,
            error: Some(e.to_string()),
        },
    }
}

/// Grades every evaluation slide with `grade(entry, seed)` in parallel and
/// collects records in manifest order. A slide that fails to grade counts as
/// wrong and keeps its error message.
pub fn evaluate_with<F>(
    manifest: &DatasetManifest,
    patches_per_slide: usize,
    seed: u64,
    grade: F,
) -> Result<EvalReport, GradingError>
where
    F: Fn(&DatasetEntry, u64) -> Result<SlideGrade, GradingError> + Sync,
{
    let entries: Vec<(usize, &DatasetEntry)> =
        manifest.entries.iter().enumerate().filter(|(_, e)| e.split == Split::Eval).collect();
    if entries.is_empty() {
        return Err(GradingError::InvalidManifest("no evaluation slides".into()));
    }
    let records = entries.par_iter().map(|&(i, e)| record_for(e, grade(e, slide_seed(seed, i)))).collect();
    Ok(EvalReport::from_records(records, patches_per_slide, seed))
}
