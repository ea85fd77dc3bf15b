//! Pixel-level precision/recall/F-measure per text class, with corpus-level
//! micro-averaged reporting next to the published reference values.
//!
//! Only pixels that are foreground in the prediction or the ground truth
//! enter the counts; the method labels ink, so scoring background pixels
//! would inflate everything.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::PageSegmentation;

/// The two text classes of a page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextClass {
    Main,
    Side,
}

impl TextClass {
    pub fn label(self) -> u8 {
        match self {
            TextClass::Main => 1,
            TextClass::Side => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TextClass::Main => "main",
            TextClass::Side => "side",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Pixel confusion counts for one class, restricted to pixels that are
/// foreground in the prediction or the ground truth.
pub fn confusion(
    pred: &PageSegmentation,
    gt: &PageSegmentation,
    class: TextClass,
) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let c = class.label();
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        if p == 0 && g == 0 {
            continue;
        }
        match (p == c, g == c) {
            (true, true) => counts.true_positives += 1,
            (true, false) => counts.false_positives += 1,
            (false, true) => counts.false_negatives += 1,
            (false, false) => {}
        }
    }
    Ok(counts)
}

/// Precision, recall, and F from raw counts; empty ratios resolve to 0.
pub fn f_measure(counts: &ConfusionCounts) -> ClassMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_positives,
    );
    let recall = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_negatives,
    );
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f_measure: f,
    }
}

/// Published F-measure reference values (percent) for the same benchmark:
/// (method, main text, side text).
pub const TABLE_BASELINES: [(&str, f64, f64); 4] = [
    ("Bukhari et al.", 95.02, 94.68),
    ("Kurar et al.", 95.00, 80.00),
    ("Alaasam et al.", 98.59, 96.89),
    ("Proposed (reference)", 98.56, 96.97),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub id: String,
    pub main: ClassMetrics,
    pub side: ClassMetrics,
}

/// Corpus evaluation: per-document metrics plus micro-averaged aggregates
/// (metrics of the summed confusion counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FMeasureReport {
    pub per_document: Vec<DocumentScores>,
    pub pooled_main: ConfusionCounts,
    pub pooled_side: ConfusionCounts,
    pub aggregate_main: ClassMetrics,
    pub aggregate_side: ClassMetrics,
    /// Ground-truth documents with no prediction; excluded from aggregates.
    pub missing_predictions: Vec<String>,
}

/// Scores every ground-truth document against its prediction. Documents
/// without a prediction are listed and excluded rather than failing the run.
pub fn evaluate_corpus(
    preds: &BTreeMap<String, PageSegmentation>,
    gts: &BTreeMap<String, PageSegmentation>,
) -> Result<FMeasureReport> {
    if gts.is_empty() {
        return Err(Error::Config("no ground-truth documents to evaluate".to_string()));
    }
    let mut per_document = Vec::new();
    let mut pooled_main = ConfusionCounts::default();
    let mut pooled_side = ConfusionCounts::default();
    let mut missing = Vec::new();
    for (id, gt) in gts {
        let Some(pred) = preds.get(id) else {
            missing.push(id.clone());
            continue;
        };
        let main = confusion(pred, gt, TextClass::Main)?;
        let side = confusion(pred, gt, TextClass::Side)?;
        pooled_main.add(&main);
        pooled_side.add(&side);
        per_document.push(DocumentScores {
            id: id.clone(),
            main: f_measure(&main),
            side: f_measure(&side),
        });
    }
    Ok(FMeasureReport {
        per_document,
        aggregate_main: f_measure(&pooled_main),
        aggregate_side: f_measure(&pooled_side),
        pooled_main,
        pooled_side,
        missing_predictions: missing,
    })
}

impl FMeasureReport {
    /// CSV rows: per-document metrics, the micro aggregate, and the published
    /// baselines for side-by-side comparison.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("kind,document,class,precision,recall,f_measure\n");
        for doc in &self.per_document {
            for (class, m) in [("main", &doc.main), ("side", &doc.side)] {
                out.push_str(&format!(
                    "document,{},{class},{},{},{}\n",
                    doc.id, m.precision, m.recall, m.f_measure
                ));
            }
        }
        for (class, m) in [
            ("main", &self.aggregate_main),
            ("side", &self.aggregate_side),
        ] {
            out.push_str(&format!(
                "aggregate,micro,{class},{},{},{}\n",
                m.precision, m.recall, m.f_measure
            ));
        }
        for (name, main, side) in TABLE_BASELINES {
            out.push_str(&format!("baseline,{name},main,,,{main}\n"));
            out.push_str(&format!("baseline,{name},side,,,{side}\n"));
        }
        for id in &self.missing_predictions {
            out.push_str(&format!("missing,{id},,,,\n"));
        }
        out
    }

    /// Human-readable table with F values in percent, alongside the
    /// published rows. Aggregates are micro-averages over pooled counts.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str("F-measure comparison (pixel-level, micro-averaged)\n");
        out.push_str(&format!(
            "{:<28}{:>12}{:>12}\n",
            "Method", "Main text", "Side text"
        ));
        out.push_str(&"-".repeat(52));
        out.push('\n');
        for (name, main, side) in TABLE_BASELINES {
            out.push_str(&format!("{name:<28}{main:>12.2}{side:>12.2}\n"));
        }
        out.push_str(&format!(
            "{:<28}{:>12.2}{:>12.2}\n",
            "This run",
            self.aggregate_main.f_measure * 100.0,
            self.aggregate_side.f_measure * 100.0
        ));
        out.push('\n');
        out.push_str(&format!(
            "{:<20}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "Document", "P(main)", "R(main)", "F(main)", "P(side)", "R(side)", "F(side)"
        ));
        for doc in &self.per_document {
            out.push_str(&format!(
                "{:<20}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>10.4}\n",
                doc.id,
                doc.main.precision,
                doc.main.recall,
                doc.main.f_measure,
                doc.side.precision,
                doc.side.recall,
                doc.side.f_measure
            ));
        }
        if !self.missing_predictions.is_empty() {
            out.push_str(&format!(
                "\nwarning: missing predictions for: {}\n",
                self.missing_predictions.join(", ")
            ));
        }
        out
    }
}
