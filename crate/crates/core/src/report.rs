//! Evaluation reports. Per-fold predictions are the stored source; every
//! accuracy cell and the confusion matrix are derived from them. JSON is the
//! canonical file format, CSV and text are renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{grain_of, Grain, GESTURES};
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix, grain_breakdown, GrainAccuracy};

/// Classifier order used throughout reports.
pub const CLASSIFIERS: [&str; 4] = ["transformer", "onlstm", "fusion", "ensemble"];
pub const FUSION: usize = 2;

/// Stage names: `cycle_1 .. cycle_n`, then `snapshot_ensemble`.
pub fn stage_names(num_cycles: usize) -> Vec<String> {
    (1..=num_cycles)
        .map(|k| format!("cycle_{k}"))
        .chain(std::iter::once("snapshot_ensemble".to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: u8,
    /// True labels of the fold's original test sequences.
    pub labels: Vec<usize>,
    /// `[classifier][stage][sample]` predicted labels.
    pub predictions: Vec<Vec<Vec<usize>>>,
}

impl FoldReport {
    pub fn accuracy(&self, classifier: usize, stage: usize) -> Result<GrainAccuracy> {
        grain_breakdown(&self.predictions[classifier][stage], &self.labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrainCell {
    pub fine: Option<f64>,
    pub coarse: Option<f64>,
    pub both: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub stage: String,
    pub classifier: String,
    /// Unweighted mean of per-fold accuracies (primary figure).
    pub mean_of_folds: GrainCell,
    /// Correct over total, pooling every fold's test records.
    pub pooled: GrainCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_classes: usize,
    pub num_cycles: usize,
    pub classifiers: Vec<String>,
    pub stages: Vec<String>,
    pub folds: Vec<FoldReport>,
    /// Stage-major: for each stage, one row per classifier.
    pub table: Vec<TableRow>,
    /// Row-normalised 14×14 matrix of the fusion snapshot ensemble, pooled
    /// over folds.
    pub confusion: Vec<Vec<f64>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(g: &GrainAccuracy) -> GrainCell {
    GrainCell { fine: g.fine, coarse: g.coarse, both: g.both }
}

impl EvaluationReport {
    pub fn from_folds(num_classes: usize, num_cycles: usize, folds: Vec<FoldReport>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one fold".into()));
        }
        let stages = stage_names(num_cycles);
        for f in &folds {
            if f.predictions.len() != CLASSIFIERS.len()
                || f.predictions.iter().any(|c| c.len() != stages.len() || c.iter().any(|p| p.len() != f.labels.len()))
            {
                return Err(Error::InvalidArgument(format!(
                    "fold {} predictions do not match {} classifiers × {} stages",
                    f.held_out,
                    CLASSIFIERS.len(),
                    stages.len()
                )));
            }
        }
        let mut table = Vec::new();
        for (s, stage) in stages.iter().enumerate() {
            for (c, name) in CLASSIFIERS.iter().enumerate() {
                let per_fold: Vec<GrainAccuracy> = folds.iter().map(|f| f.accuracy(c, s)).collect::<Result<_>>()?;
                let preds: Vec<usize> = folds.iter().flat_map(|f| f.predictions[c][s].iter().copied()).collect();
                let labels: Vec<usize> = folds.iter().flat_map(|f| f.labels.iter().copied()).collect();
                table.push(TableRow {
                    stage: stage.clone(),
                    classifier: name.to_string(),
                    mean_of_folds: GrainCell {
                        fine: mean(per_fold.iter().filter_map(|g| g.fine)),
                        coarse: mean(per_fold.iter().filter_map(|g| g.coarse)),
                        both: mean(per_fold.iter().map(|g| g.both)).expect("non-empty"),
                    },
                    pooled: cell(&grain_breakdown(&preds, &labels)?),
                });
            }
        }
        let n = num_classes.max(GESTURES.len());
        let ens = stages.len() - 1;
        let preds: Vec<usize> = folds.iter().flat_map(|f| f.predictions[FUSION][ens].iter().copied()).collect();
        let labels: Vec<usize> = folds.iter().flat_map(|f| f.labels.iter().copied()).collect();
        let confusion = confusion_matrix(&preds, &labels, n)?;
        Ok(Self {
            num_classes,
            num_cycles,
            classifiers: CLASSIFIERS.iter().map(|s| s.to_string()).collect(),
            stages,
            folds,
            table,
            confusion,
        })
    }

    pub fn row(&self, stage: &str, classifier: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.stage == stage && r.classifier == classifier)
    }

    /// Mean-of-folds accuracy of the fusion snapshot ensemble.
    pub fn headline(&self) -> f64 {
        self.row("snapshot_ensemble", "fusion").map_or(0.0, |r| r.mean_of_folds.both)
    }

    /// Structural checks: 4 × (cycles + 1) cells and row-normalised
    /// confusion rows.
    pub fn check(&self) -> Result<()> {
        if self.table.len() != CLASSIFIERS.len() * (self.num_cycles + 1) {
            return Err(Error::InvalidArgument(format!("report has {} cells", self.table.len())));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if s != 0.0 && (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("confusion row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("stage,classifier,fine_mean,coarse_mean,both_mean,fine_pooled,coarse_pooled,both_pooled\n");
        for r in &self.table {
            writeln!(
                s,
                "{},{},{},{},{:.6},{},{},{:.6}",
                r.stage,
                r.classifier,
                opt(r.mean_of_folds.fine),
                opt(r.mean_of_folds.coarse),
                r.mean_of_folds.both,
                opt(r.pooled.fine),
                opt(r.pooled.coarse),
                r.pooled.both
            )
            .unwrap();
        }
        s.push_str("\nconfusion_true\\pred");
        for g in GESTURES.iter() {
            write!(s, ",{}", g.tag).unwrap();
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(GESTURES.get(i).map_or("?", |g| g.tag));
            for v in row {
                write!(s, ",{v:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:6.2}", 100.0 * x)).unwrap_or_else(|| "     -".into());
        let mut s = String::new();
        writeln!(
            s,
            "Accuracy (%) over {} fold(s), mean of folds [pooled]",
            self.folds.len()
        )
        .unwrap();
        writeln!(s, "{:<18} {:<12} {:>6} {:>6} {:>6}   {:>8}", "stage", "classifier", "fine", "coarse", "both", "pooled").unwrap();
        for r in &self.table {
            writeln!(
                s,
                "{:<18} {:<12} {} {} {}   [{}]",
                r.stage,
                r.classifier,
                pct(r.mean_of_folds.fine),
                pct(r.mean_of_folds.coarse),
                pct(Some(r.mean_of_folds.both)),
                pct(Some(r.pooled.both)),
            )
            .unwrap();
        }
        writeln!(s, "\nPer fold, fusion snapshot ensemble:").unwrap();
        let ens = self.stages.len() - 1;
        for f in &self.folds {
            let acc = f.accuracy(FUSION, ens).map(|g| g.both).unwrap_or(f64::NAN);
            writeln!(s, "  subject {:>2}: {:6.2} ({} test sequences)", f.held_out, 100.0 * acc, f.labels.len()).unwrap();
        }
        writeln!(s, "\nConfusion matrix (%), rows = true gesture, fusion snapshot ensemble:").unwrap();
        write!(s, "{:>6}", "").unwrap();
        for g in GESTURES.iter() {
            write!(s, " {:>5}", g.tag).unwrap();
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let tag = GESTURES.get(i).map_or("?", |g| g.tag);
            let mark = match grain_of(i) {
                Some(Grain::Fine) => "*",
                _ => " ",
            };
            write!(s, "{tag:>5}{mark}").unwrap();
            for v in row {
                write!(s, " {:>5.1}", 100.0 * v).unwrap();
            }
            s.push('\n');
        }
        s.push_str("(* fine-grained gesture)\n");
        s
    }

    pub fn render(&self, format: &str) -> Result<String> {
        match format {
            "json" => self.to_json(),
            "csv" => Ok(self.to_csv()),
            "text" => Ok(self.to_text()),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }

    /// Writes `report.json`, `report.csv` and `report.txt` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(held_out: u8, labels: Vec<usize>, wrong_stage: usize) -> FoldReport {
        let predictions = (0..4)
            .map(|_| {
                (0..3)
                    .map(|s| {
                        labels
                            .iter()
                            .enumerate()
                            .map(|(i, &l)| if s == wrong_stage && i == 0 { (l + 1) % 4 } else { l })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        FoldReport { held_out, labels, predictions }
    }

    #[test]
    fn shape_and_aggregates() {
        let r = EvaluationReport::from_folds(
            4,
            2,
            vec![fold(1, vec![0, 1, 2, 3], 0), fold(2, vec![0, 1], 0)],
        )
        .unwrap();
        r.check().unwrap();
        assert_eq!(r.table.len(), 4 * 3);
        assert_eq!(r.confusion.len(), 14);
        let c1 = r.row("cycle_1", "fusion").unwrap();
        assert!((c1.mean_of_folds.both - (0.75 + 0.5) / 2.0).abs() < 1e-15);
        assert!((c1.pooled.both - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.headline(), 1.0);
        assert_eq!(r.confusion[0][0], 1.0);
        assert!(r.confusion[13].iter().all(|&v| v == 0.0));
        let back = EvaluationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_csv().lines().count() > 12);
        assert!(r.to_text().contains("snapshot_ensemble"));
        assert!(r.render("xml").is_err());
    }

    #[test]
    fn rejects_malformed_folds() {
        let mut f = fold(1, vec![0, 1], 0);
        f.predictions[0].pop();
        assert!(EvaluationReport::from_folds(4, 2, vec![f]).is_err());
        assert!(EvaluationReport::from_folds(4, 2, vec![]).is_err());
    }
}
