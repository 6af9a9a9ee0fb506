//! Detection evaluation: greedy centroid matching and the four macro metrics
//! (macro precision, macro recall, macro F1, accuracy).
//!
//! A detection is a true positive when an unmatched same-class ground-truth
//! centroid lies within `tolerance_cells * cell_size` pixels. True negatives
//! are counted at cell level: cells holding no ground-truth centroid and not
//! flagged positive by the decoder. Per-class 0/0 ratios define to 0.

use crate::dataio::{GtObject, LoadedDataset, Sample};
use crate::decode::{merge_and_centroid, threshold_cells, Detection, PositiveCell};
use crate::error::{Error, Result};
use crate::model::{forward, FomoModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Foreground class count; index `i` holds class id `i + 1`.
    pub num_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Cell-level true negatives.
    pub tn_cells: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            tn_cells: 0,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_classes, other.num_classes);
        for i in 0..self.num_classes {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self.tn_cells += other.tn_cells;
    }
}

/// Everything the matcher sees for one image.
pub struct ImageObservation<'a> {
    pub detections: &'a [Detection],
    pub positive_cells: &'a [PositiveCell],
    pub ground_truth: &'a [GtObject],
}

/// Greedy matching by descending confidence: each detection claims the
/// nearest unmatched same-class ground-truth centroid within tolerance.
pub fn match_detections(
    obs: &ImageObservation,
    grid_size: usize,
    cell_size: usize,
    tolerance_cells: f64,
    num_classes: usize,
) -> Result<ConfusionCounts> {
    if !(tolerance_cells > 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tolerance_cells}"
        )));
    }
    let tol_px = tolerance_cells * cell_size as f64;
    let mut counts = ConfusionCounts::new(num_classes);

    let mut order: Vec<usize> = (0..obs.detections.len()).collect();
    order.sort_by(|&a, &b| {
        obs.detections[b]
            .confidence
            .partial_cmp(&obs.detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut gt_taken = vec![false; obs.ground_truth.len()];
    for &di in &order {
        let det = &obs.detections[di];
        if det.class_id == 0 || det.class_id > num_classes {
            return Err(Error::Config(format!(
                "detection class id {} outside 1..={num_classes}",
                det.class_id
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in obs.ground_truth.iter().enumerate() {
            if gt_taken[gi] || gt.class_id != det.class_id {
                continue;
            }
            let d = ((gt.cx - det.cx).powi(2) + (gt.cy - det.cy).powi(2)).sqrt();
            if d <= tol_px {
                let better = match best {
                    None => true,
                    Some((_, bd)) => d < bd,
                };
                if better {
                    best = Some((gi, d));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                counts.tp[det.class_id - 1] += 1;
            }
            None => counts.fp[det.class_id - 1] += 1,
        }
    }
    for (gi, gt) in obs.ground_truth.iter().enumerate() {
        if !gt_taken[gi] {
            if gt.class_id == 0 || gt.class_id > num_classes {
                return Err(Error::Config(format!(
                    "ground truth class id {} outside 1..={num_classes}",
                    gt.class_id
                )));
            }
            counts.fn_[gt.class_id - 1] += 1;
        }
    }

    // cell-level true negatives: no ground-truth centroid, not flagged
    let mut occupied = vec![false; grid_size * grid_size];
    for gt in obs.ground_truth {
        let col = ((gt.cx / cell_size as f64).floor() as usize).min(grid_size - 1);
        let row = ((gt.cy / cell_size as f64).floor() as usize).min(grid_size - 1);
        occupied[row * grid_size + col] = true;
    }
    for cell in obs.positive_cells {
        occupied[cell.row * grid_size + cell.col] = true;
    }
    counts.tn_cells = occupied.iter().filter(|&&o| !o).count() as u64;
    Ok(counts)
}

/// Eq.-style macro precision: mean over classes of `TP / (TP + FP)`.
pub fn macro_precision(counts: &ConfusionCounts) -> f64 {
    per_class_ratio_mean(counts.num_classes, &counts.tp, &counts.fp)
}

/// Macro recall: mean over classes of `TP / (TP + FN)`.
pub fn macro_recall(counts: &ConfusionCounts) -> f64 {
    per_class_ratio_mean(counts.num_classes, &counts.tp, &counts.fn_)
}

fn per_class_ratio_mean(n: usize, num: &[u64], other: &[u64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        let denom = num[i] + other[i];
        if denom > 0 {
            sum += num[i] as f64 / denom as f64;
        }
    }
    sum / n as f64
}

/// Macro F1: the mean over classes of per-class `2PR / (P + R)`.
pub fn macro_f1(counts: &ConfusionCounts) -> f64 {
    let mut sum = 0.0;
    for i in 0..counts.num_classes {
        sum += class_f1(counts, i);
    }
    sum / counts.num_classes as f64
}

fn class_precision(counts: &ConfusionCounts, i: usize) -> f64 {
    let d = counts.tp[i] + counts.fp[i];
    if d == 0 {
        0.0
    } else {
        counts.tp[i] as f64 / d as f64
    }
}

fn class_recall(counts: &ConfusionCounts, i: usize) -> f64 {
    let d = counts.tp[i] + counts.fn_[i];
    if d == 0 {
        0.0
    } else {
        counts.tp[i] as f64 / d as f64
    }
}

fn class_f1(counts: &ConfusionCounts, i: usize) -> f64 {
    let p = class_precision(counts, i);
    let r = class_recall(counts, i);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Accuracy `(TP + TN) / (TP + TN + FP + FN)` with object-level TP/FP/FN
/// summed over classes and TN taken at cell level.
pub fn accuracy(counts: &ConfusionCounts) -> Result<f64> {
    let tp: u64 = counts.tp.iter().sum();
    let fp: u64 = counts.fp.iter().sum();
    let fn_: u64 = counts.fn_.iter().sum();
    let denom = tp + counts.tn_cells + fp + fn_;
    if denom == 0 {
        return Err(Error::Config("accuracy undefined on an empty evaluation".into()));
    }
    Ok((tp + counts.tn_cells) as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, class_names: &[String]) -> Result<Self> {
        let per_class = (0..counts.num_classes)
            .map(|i| ClassMetrics {
                name: class_names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("class{}", i + 1)),
                precision: class_precision(&counts, i),
                recall: class_recall(&counts, i),
                f1: class_f1(&counts, i),
                tp: counts.tp[i],
                fp: counts.fp[i],
                fn_: counts.fn_[i],
            })
            .collect();
        Ok(MetricsReport {
            macro_precision: macro_precision(&counts),
            macro_recall: macro_recall(&counts),
            macro_f1: macro_f1(&counts),
            accuracy: accuracy(&counts)?,
            per_class,
            counts,
        })
    }

    /// Machine-readable key-value document, one metric per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("f1 {:.6}\n", self.macro_f1));
        s.push_str(&format!("recall {:.6}\n", self.macro_recall));
        s.push_str(&format!("precision {:.6}\n", self.macro_precision));
        s.push_str(&format!("accuracy {:.6}\n", self.accuracy));
        s.push_str(&format!("tn_cells {}\n", self.counts.tn_cells));
        for c in &self.per_class {
            s.push_str(&format!(
                "class {} f1 {:.6} recall {:.6} precision {:.6} tp {} fp {} fn {}\n",
                c.name, c.f1, c.recall, c.precision, c.tp, c.fp, c.fn_
            ));
        }
        s
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>9}", "class", "F1", "Recall", "Precision", "TP/FP/FN")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>3}/{}/{}",
                c.name, c.f1, c.recall, c.precision, c.tp, c.fp, c.fn_
            )?;
        }
        writeln!(
            f,
            "{:<12} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.macro_f1, self.macro_recall, self.macro_precision
        )?;
        write!(f, "accuracy     {:>9.4}", self.accuracy)
    }
}

/// Decode and match one image, returning its confusion counts.
pub fn observe_sample(
    model: &FomoModel,
    sample: &Sample,
    tau: f32,
    tolerance_cells: f64,
    num_classes: usize,
) -> Result<ConfusionCounts> {
    let heatmap = forward(model, &sample.image)?;
    let cells = threshold_cells(&heatmap, tau)?;
    let dets = merge_and_centroid(&cells, model.config.cell_size, model.config.input_size);
    match_detections(
        &ImageObservation {
            detections: &dets,
            positive_cells: &cells,
            ground_truth: &sample.objects,
        },
        model.config.grid_size(),
        model.config.cell_size,
        tolerance_cells,
        num_classes,
    )
}

/// Evaluate a model over samples already sized to the model input.
pub fn evaluate_samples(
    model: &FomoModel,
    samples: &[Sample],
    class_names: &[String],
    tau: f32,
    tolerance_cells: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let num_classes = class_names.len();
    let mut total = ConfusionCounts::new(num_classes);
    for sample in samples {
        let counts = observe_sample(model, sample, tau, tolerance_cells, num_classes)?;
        total.merge(&counts);
    }
    MetricsReport::from_counts(total, class_names)
}

/// Evaluate a model over a loaded dataset.
pub fn evaluate(
    model: &FomoModel,
    dataset: &LoadedDataset,
    tau: f32,
    tolerance_cells: f64,
) -> Result<MetricsReport> {
    if dataset.input_size != model.config.input_size {
        return Err(Error::Config(format!(
            "dataset loaded at {} but model expects {}",
            dataset.input_size, model.config.input_size
        )));
    }
    evaluate_samples(model, &dataset.samples, &dataset.classes, tau, tolerance_cells)
}
