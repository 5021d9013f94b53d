//! Confusion matrices, per-class true positive rates, balanced accuracy.
//!
//! Rows are true classes, columns predicted classes. Balanced accuracy is
//! the mean TPR over classes that have at least one true sample; classes
//! absent from the truth are excluded from the mean (and get TPR 0).

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Integer JxJ count matrix, true class x predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeMismatch(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|j| self.counts[j][j]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }
}

/// Derived per-class rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics<F> {
    /// TPR per class: `counts[j][j] / row_sum(j)`, 0 for empty rows.
    pub tpr: Vec<F>,
    /// Mean TPR over classes with at least one true sample.
    pub balanced_accuracy: F,
    /// `trace / total`.
    pub accuracy: F,
}

/// Tally a confusion matrix from parallel truth/prediction lists.
pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: t,
                n_classes,
            });
        }
        if p >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: p,
                n_classes,
            });
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Seven-class convenience wrapper over [`confusion`].
pub fn confusion_labels(truth: &[ClassLabel], pred: &[ClassLabel]) -> Result<ConfusionMatrix> {
    let t: Vec<usize> = truth.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = pred.iter().map(|l| l.index()).collect();
    confusion(&t, &p, ClassLabel::COUNT)
}

/// Row-normalize: each nonzero row sums to 1, zero rows stay zero.
pub fn normalize_rows<F: Scalar>(cm: &ConfusionMatrix) -> Array2<F> {
    let n = cm.n_classes();
    let mut real = Array2::zeros((n, n));
    for t in 0..n {
        for p in 0..n {
            real[(t, p)] = F::from(cm.count(t, p) as f64).unwrap();
        }
    }
    normalize_rows_real(&real)
}

/// Row normalization on a real matrix; idempotent.
pub fn normalize_rows_real<F: Scalar>(m: &Array2<F>) -> Array2<F> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let total: F = row.iter().copied().sum();
        if total != F::zero() {
            row.mapv_inplace(|v| v / total);
        }
    }
    out
}

/// TPRs, balanced accuracy and plain accuracy. Errors when the matrix holds
/// no samples at all.
pub fn class_metrics<F: Scalar>(cm: &ConfusionMatrix) -> Result<ClassMetrics<F>> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let n = cm.n_classes();
    let mut tpr = Vec::with_capacity(n);
    let mut ba_sum = 0.0;
    let mut present = 0usize;
    for j in 0..n {
        let row = cm.row_sum(j);
        if row == 0 {
            tpr.push(F::zero());
        } else {
            let rate = cm.count(j, j) as f64 / row as f64;
            tpr.push(F::from(rate).unwrap());
            ba_sum += rate;
            present += 1;
        }
    }
    Ok(ClassMetrics {
        tpr,
        balanced_accuracy: F::from(ba_sum / present as f64).unwrap(),
        accuracy: F::from(cm.trace() as f64 / total as f64).unwrap(),
    })
}

/// Plain-text rendering with class codes, for reports.
pub fn format_confusion(cm: &ConfusionMatrix, labels: &[&str]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:>8}", "true\\pred"));
    for l in labels {
        out.push_str(&format!("{l:>8}"));
    }
    out.push('\n');
    for (t, l) in labels.iter().enumerate() {
        out.push_str(&format!("{l:>8}"));
        for p in 0..labels.len() {
            out.push_str(&format!("{:>8}", cm.count(t, p)));
        }
        out.push('\n');
    }
    out
}

/// Render a row-normalized confusion matrix as a heatmap PNG with class-code
/// labels along both axes.
pub fn render_heatmap(cm: &ConfusionMatrix, labels: &[&str], path: &Path) -> Result<()> {
    const CELL: usize = 36;
    const MARGIN: usize = 30;
    let n = cm.n_classes();
    let norm: Array2<f64> = normalize_rows(cm);
    let side = MARGIN + n * CELL + 1;
    let mut img = ndarray::Array3::from_elem((side, side, 3), 255u8);
    for t in 0..n {
        for p in 0..n {
            let v = norm[(t, p)];
            // White -> deep blue ramp.
            let color = [
                (255.0 - 215.0 * v) as u8,
                (255.0 - 190.0 * v) as u8,
                (255.0 - 110.0 * v) as u8,
            ];
            for dy in 0..CELL {
                for dx in 0..CELL {
                    let y = MARGIN + t * CELL + dy;
                    let x = MARGIN + p * CELL + dx;
                    let border = dy == 0 || dx == 0 || dy == CELL - 1 || dx == CELL - 1;
                    for c in 0..3 {
                        img[(y, x, c)] = if border { 140 } else { color[c] };
                    }
                }
            }
        }
    }
    for (i, l) in labels.iter().enumerate() {
        draw_text(&mut img, 2, MARGIN + i * CELL + CELL / 2 - 2 * l.len(), l);
        draw_text(&mut img, MARGIN + i * CELL + CELL / 2 - 3, 2, l);
    }
    crate::raster::save_rgb8(path, &img)
}

/// 3x5 uppercase glyphs; enough for class codes on heatmap axes.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut ndarray::Array3<u8>, y: usize, x: usize, text: &str) {
    let (h, w, _) = img.dim();
    for (k, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    let yy = y + dy;
                    let xx = x + k * 4 + dx;
                    if yy < h && xx < w {
                        for c in 0..3 {
                            img[(yy, xx, c)] = 30;
                        }
                    }
                }
            }
        }
    }
}
