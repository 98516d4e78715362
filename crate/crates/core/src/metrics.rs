//! Pixel-level precision, recall and Dice, per image and over a dataset.
//!
//! Everything is counted in integers and divided once. When the prediction
//! and the ground truth are both empty all three metrics are 1.0.

use std::fmt::Write as _;
use std::io;

use crate::imaging::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Tallies two equally long foreground indicator sequences.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, g) in pairs {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        precision(self)
    }

    pub fn recall(&self) -> f64 {
        recall(self)
    }

    pub fn dice(&self) -> f64 {
        dice(self)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::arg(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(ConfusionCounts::from_pairs(
        pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p != 0, g != 0)),
    ))
}

/// `tp / (tp + fp)`. With no predicted foreground: 1.0 if the ground truth
/// is empty too, else 0.0.
pub fn precision(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp == 0 {
        if c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

/// `tp / (tp + fn)`. With no ground-truth foreground: 1.0 if the prediction
/// is empty too, else 0.0.
pub fn recall(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        if c.fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

/// `2tp / (2tp + fp + fn)`, 1.0 when all three are zero.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

impl Scores {
    pub fn of(c: &ConfusionCounts) -> Self {
        Scores {
            precision: precision(c),
            recall: recall(c),
            dice: dice(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by id.
    pub records: Vec<ImageRecord>,
    /// Arithmetic mean of the per-image scores.
    pub mean: Scores,
    /// Scores of the summed counts.
    pub pooled: Scores,
    pub pooled_counts: ConfusionCounts,
}

/// Mean of per-image scores, in the order given.
pub fn mean_scores(scores: &[Scores]) -> Scores {
    let n = scores.len() as f64;
    Scores {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
    }
}

pub fn evaluate_dataset<I, S>(pairs: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = (S, BinaryMask, BinaryMask)>,
    S: Into<String>,
{
    let mut records = Vec::new();
    for (id, pred, gt) in pairs {
        let id = id.into();
        let counts = confusion_counts(&pred, &gt).map_err(|e| Error::arg(format!("{id}: {e}")))?;
        records.push(ImageRecord {
            id,
            counts,
            scores: Scores::of(&counts),
        });
    }
    report(records)
}

/// Builds the summary rows for already-counted images.
pub fn report(mut records: Vec<ImageRecord>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::arg("cannot evaluate an empty set of images"));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let scores: Vec<Scores> = records.iter().map(|r| r.scores).collect();
    let pooled_counts = records.iter().fold(ConfusionCounts::default(), |acc, r| acc + r.counts);
    Ok(EvalReport {
        mean: mean_scores(&scores),
        pooled: Scores::of(&pooled_counts),
        pooled_counts,
        records,
    })
}

impl EvalReport {
    /// One row per image, then `mean` and `pooled` summary rows.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fail = |e: csv::Error| Error::Internal(format!("writing report CSV: {e}"));
        w.write_record(["id", "tp", "fp", "fn", "tn", "precision", "recall", "dice"])
            .map_err(fail)?;
        let row = |w: &mut csv::Writer<W>, id: &str, c: &ConfusionCounts, s: &Scores| {
            w.write_record([
                id.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.dice.to_string(),
            ])
        };
        for r in &self.records {
            row(&mut w, &r.id, &r.counts, &r.scores).map_err(fail)?;
        }
        w.write_record([
            "mean".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.mean.precision.to_string(),
            self.mean.recall.to_string(),
            self.mean.dice.to_string(),
        ])
        .map_err(fail)?;
        row(&mut w, "pooled", &self.pooled_counts, &self.pooled).map_err(fail)?;
        w.flush()
            .map_err(|e| Error::Internal(format!("writing report CSV: {e}")))?;
        Ok(())
    }

    /// Metrics as rows, aggregations as columns.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images: {}", self.records.len());
        let _ = writeln!(s, "{:<10} {:>10} {:>10}", "metric", "mean", "pooled");
        for (name, m, p) in [
            ("Precision", self.mean.precision, self.pooled.precision),
            ("Recall", self.mean.recall, self.pooled.recall),
            ("Dice", self.mean.dice, self.pooled.dice),
        ] {
            let _ = writeln!(s, "{name:<10} {:>9.2}% {:>9.2}%", m * 100.0, p * 100.0);
        }
        s
    }
}
