//! TPR-weighted combination of per-network class probabilities.
//!
//! Each network k gets a per-class weight equal to its development-set true
//! positive rate for that class. The weighted score of image i on class j is
//!
//! ```text
//! score[i][j] = sum_k w[k][j] * p[i][j][k]
//!             / sum_j sum_k w[k][j] * p[i][j][k]
//! ```
//!
//! so each image's scores are renormalized over classes; the ensemble
//! predicts the argmax, ties broken toward the lowest class index. Scaling
//! ALL weights by one positive constant cancels; per-class rescaling does
//! not.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::scalar::Scalar;

/// Per-image, per-class probabilities from each of K networks, `(I, J, K)`.
#[derive(Clone, Debug)]
pub struct ProbabilityTensor<F> {
    values: Array3<F>,
}

impl<F: Scalar> ProbabilityTensor<F> {
    /// Validates entries in [0, 1] and per-(image, network) rows summing to
    /// 1 within 1e-6.
    pub fn new(values: Array3<F>) -> Result<Self> {
        let (n_images, n_classes, n_networks) = values.dim();
        let lo = F::from(-1e-6).unwrap();
        let hi = F::from(1.0 + 1e-6).unwrap();
        if values.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::BadProbabilities("entries must lie in [0, 1]".into()));
        }
        let tol = F::from(1e-6).unwrap();
        for i in 0..n_images {
            for k in 0..n_networks {
                let mut sum = F::zero();
                for j in 0..n_classes {
                    sum += values[(i, j, k)];
                }
                if (sum - F::one()).abs() > tol {
                    return Err(Error::BadProbabilities(format!(
                        "image {i}, network {k}: class probabilities sum to {sum}"
                    )));
                }
            }
        }
        Ok(ProbabilityTensor { values })
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Stack per-network probability matrices (each `(I, J)`) along K.
    pub fn from_networks(per_network: &[Array2<F>]) -> Result<Self> {
        if per_network.is_empty() {
            return Err(Error::BadProbabilities("no networks given".into()));
        }
        let (n_images, n_classes) = per_network[0].dim();
        let mut values = Array3::zeros((n_images, n_classes, per_network.len()));
        for (k, probs) in per_network.iter().enumerate() {
            if probs.dim() != (n_images, n_classes) {
                return Err(Error::ShapeMismatch(format!(
                    "network {k} probabilities are {:?}, expected ({n_images}, {n_classes})",
                    probs.dim()
                )));
            }
            for i in 0..n_images {
                for j in 0..n_classes {
                    values[(i, j, k)] = probs[(i, j)];
                }
            }
        }
        Self::new(values)
    }
}

/// Per-network, per-class weights, `(K, J)`, nonnegative.
#[derive(Clone, Debug)]
pub struct WeightMatrix<F> {
    values: Array2<F>,
}

impl<F: Scalar> WeightMatrix<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        if values.iter().any(|&v| v < F::zero()) {
            return Err(Error::BadWeights("weights must be nonnegative".into()));
        }
        Ok(WeightMatrix { values })
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn scaled(&self, factor: F) -> Result<Self> {
        Self::new(self.values.mapv(|v| v * factor))
    }
}

/// Renormalized weighted scores per image, `(I, J)`; rows sum to 1.
#[derive(Clone, Debug)]
pub struct WeightedScoreMatrix<F> {
    values: Array2<F>,
}

impl<F: Scalar> WeightedScoreMatrix<F> {
    pub fn values(&self) -> &Array2<F> {
        &self.values
    }
}

/// Weights from development-set confusions: `w[k][j]` is the TPR of class j
/// in network k's matrix, 0 for classes with no true samples.
pub fn compute_weights<F: Scalar>(dev_confusions: &[ConfusionMatrix]) -> Result<WeightMatrix<F>> {
    if dev_confusions.is_empty() {
        return Err(Error::BadWeights("need at least one network".into()));
    }
    let n_classes = dev_confusions[0].n_classes();
    for (k, cm) in dev_confusions.iter().enumerate() {
        if cm.n_classes() != n_classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrix {k} has {} classes, expected {n_classes}",
                cm.n_classes()
            )));
        }
    }
    let mut values = Array2::zeros((dev_confusions.len(), n_classes));
    for (k, cm) in dev_confusions.iter().enumerate() {
        for j in 0..n_classes {
            let row = cm.row_sum(j);
            values[(k, j)] = if row == 0 {
                F::zero()
            } else {
                F::from(cm.count(j, j) as f64 / row as f64).unwrap()
            };
        }
    }
    WeightMatrix::new(values)
}

/// Evaluate the weighted-score formula. Errors (naming the image) when an
/// image's denominator is zero rather than emitting uniform scores.
pub fn weighted_scores<F: Scalar>(
    probs: &ProbabilityTensor<F>,
    weights: &WeightMatrix<F>,
) -> Result<WeightedScoreMatrix<F>> {
    let (n_images, n_classes, n_networks) = probs.dims();
    let (wk, wj) = weights.dims();
    if (wk, wj) != (n_networks, n_classes) {
        return Err(Error::ShapeMismatch(format!(
            "weights are {wk}x{wj}, expected {n_networks}x{n_classes}"
        )));
    }
    let p = probs.values();
    let w = weights.values();
    let mut values = Array2::zeros((n_images, n_classes));
    for i in 0..n_images {
        let mut denominator = F::zero();
        for j in 0..n_classes {
            let mut numerator = F::zero();
            for k in 0..n_networks {
                numerator += w[(k, j)] * p[(i, j, k)];
            }
            values[(i, j)] = numerator;
            denominator += numerator;
        }
        if denominator <= F::zero() {
            return Err(Error::ZeroDenominator {
                image: i.to_string(),
            });
        }
        for j in 0..n_classes {
            values[(i, j)] /= denominator;
        }
    }
    Ok(WeightedScoreMatrix { values })
}

/// Per-image argmax over classes; ties break toward the lowest index.
pub fn predict<F: Scalar>(scores: &WeightedScoreMatrix<F>) -> Vec<usize> {
    scores
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_val = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_val {
                    best = j;
                    best_val = v;
                }
            }
            best
        })
        .collect()
}

/// [`predict`] mapped to the seven canonical class labels.
pub fn predict_labels<F: Scalar>(scores: &WeightedScoreMatrix<F>) -> Result<Vec<ClassLabel>> {
    predict(scores)
        .into_iter()
        .map(ClassLabel::from_index)
        .collect()
}

/// Challenge-style probability table: `image,MEL,NV,BCC,AKIEC,BKL,DF,VASC`.
pub fn write_predictions<F: Scalar>(
    path: &Path,
    ids: &[String],
    scores: &WeightedScoreMatrix<F>,
) -> Result<()> {
    let (n_images, n_classes) = scores.values.dim();
    if n_classes != ClassLabel::COUNT || ids.len() != n_images {
        return Err(Error::ShapeMismatch(format!(
            "predictions table expects {} ids x 7 classes, got {} x {}",
            ids.len(),
            n_images,
            n_classes
        )));
    }
    let mut text = String::from("image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\n");
    for (i, id) in ids.iter().enumerate() {
        text.push_str(id);
        for j in 0..n_classes {
            text.push_str(&format!(",{:.6}", scores.values[(i, j)].to_f64().unwrap()));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Argmax labels as `image,label` rows.
pub fn write_prediction_labels<F: Scalar>(
    path: &Path,
    ids: &[String],
    scores: &WeightedScoreMatrix<F>,
) -> Result<()> {
    let labels = predict_labels(scores)?;
    let mut text = String::from("image,label\n");
    for (id, label) in ids.iter().zip(&labels) {
        text.push_str(&format!("{id},{}\n", label.code()));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything the full ensemble run produces.
pub struct EnsembleRun {
    pub weights: WeightMatrix<f64>,
    pub scores: WeightedScoreMatrix<f64>,
    pub dev_confusions: Vec<crate::metrics::ConfusionMatrix>,
    pub target_ids: Vec<String>,
    pub predictions_path: std::path::PathBuf,
    pub labels_path: std::path::PathBuf,
}

/// Load K classifier checkpoints, derive TPR weights from their
/// development-set confusions, score the target manifest, and persist the
/// predictions files under `out_dir`.
///
/// All checkpoints must share one encoder spec and class count. The target
/// manifest may be unlabeled (labels are only needed on dev).
pub fn run_ensemble(
    checkpoints: &[std::path::PathBuf],
    dev: &crate::dataset::DatasetManifest,
    target: &crate::dataset::DatasetManifest,
    out_dir: &Path,
) -> Result<EnsembleRun> {
    use crate::nets::predict_probs_batched;

    if checkpoints.is_empty() {
        return Err(Error::BadWeights("need at least one checkpoint".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut models = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let (model, _) = crate::checkpoint::load_cls::<f32>(path)?;
        models.push(model);
    }
    let spec = models[0].encoder.spec.clone();
    let n_classes = models[0].n_classes();
    for (k, model) in models.iter().enumerate() {
        if model.encoder.spec != spec || model.n_classes() != n_classes {
            return Err(Error::SpecMismatch(format!(
                "checkpoint {} disagrees with the first member's architecture",
                checkpoints[k].display()
            )));
        }
    }

    let dev_data = crate::trainer::load_cls_data::<f32>(dev)?;
    let (target_images, target_ids) = load_images_and_ids::<f32>(target)?;
    let batch = 32;

    let mut dev_confusions = Vec::with_capacity(models.len());
    let mut target_probs: Vec<Array2<f64>> = Vec::with_capacity(models.len());
    for model in &mut models {
        let dev_probs = predict_probs_batched(model, &dev_data.images, batch);
        let preds: Vec<usize> = dev_probs.rows().into_iter().map(argmax_row).collect();
        dev_confusions.push(crate::metrics::confusion(
            &dev_data.labels,
            &preds,
            n_classes,
        )?);
        let probs = predict_probs_batched(model, &target_images, batch);
        target_probs.push(renormalize_rows_f64(&probs));
    }

    let weights = compute_weights::<f64>(&dev_confusions)?;
    let tensor = ProbabilityTensor::from_networks(&target_probs)?;
    let scores = weighted_scores(&tensor, &weights).map_err(|e| match e {
        Error::ZeroDenominator { image } => {
            let idx: usize = image.parse().unwrap_or(0);
            Error::ZeroDenominator {
                image: target_ids.get(idx).cloned().unwrap_or(image),
            }
        }
        other => other,
    })?;

    let predictions_path = out_dir.join("predictions.csv");
    let labels_path = out_dir.join("predictions_labels.csv");
    write_predictions(&predictions_path, &target_ids, &scores)?;
    write_prediction_labels(&labels_path, &target_ids, &scores)?;
    Ok(EnsembleRun {
        weights,
        scores,
        dev_confusions,
        target_ids,
        predictions_path,
        labels_path,
    })
}

fn argmax_row<F: Scalar>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0usize;
    let mut best_val = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if v > best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Widen f32 softmax rows to f64 and renormalize exactly so the probability
/// tensor validation holds at its 1e-6 tolerance.
fn renormalize_rows_f64<F: Scalar>(probs: &Array2<F>) -> Array2<f64> {
    let mut out = probs.mapv(|v| v.to_f64().unwrap());
    for mut row in out.rows_mut() {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
    out
}

/// Images and ids of a (possibly unlabeled) manifest as one input tensor.
pub fn load_images_and_ids<F: Scalar>(
    manifest: &crate::dataset::DatasetManifest,
) -> Result<(ndarray::Array4<F>, Vec<String>)> {
    let mut images = Vec::with_capacity(manifest.len());
    let mut ids = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        images.push(manifest.load_pixels(rec)?);
        ids.push(rec.id.clone());
    }
    Ok((crate::raster::batch_input(&images)?, ids))
}

/// Read back an `image,label` file.
pub fn read_prediction_labels(path: &Path) -> Result<Vec<(String, ClassLabel)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("image,label") => {}
        other => {
            return Err(Error::Manifest(format!(
                "bad prediction labels header {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (id, code) = l
                .split_once(',')
                .ok_or_else(|| Error::Manifest(format!("bad prediction row '{l}'")))?;
            Ok((id.to_string(), ClassLabel::from_code(code)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Independent triple-loop evaluation of the weighted-score formula.
    pub fn oracle_scores(p: &Array3<f64>, w: &Array2<f64>) -> Array2<f64> {
        let (ni, nj, nk) = p.dim();
        let mut out = Array2::zeros((ni, nj));
        for i in 0..ni {
            let mut denom = 0.0;
            for j in 0..nj {
                for k in 0..nk {
                    denom += w[(k, j)] * p[(i, j, k)];
                }
            }
            for j in 0..nj {
                let mut num = 0.0;
                for k in 0..nk {
                    num += w[(k, j)] * p[(i, j, k)];
                }
                out[(i, j)] = num / denom;
            }
        }
        out
    }

    pub fn random_instance(
        rng: &mut ChaCha20Rng,
        ni: usize,
        nj: usize,
        nk: usize,
    ) -> (ProbabilityTensor<f64>, WeightMatrix<f64>) {
        let mut p = Array3::zeros((ni, nj, nk));
        for i in 0..ni {
            for k in 0..nk {
                let raw: Vec<f64> = (0..nj).map(|_| rng.gen_range(1e-3..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for (j, v) in raw.iter().enumerate() {
                    p[(i, j, k)] = v / total;
                }
            }
        }
        let w = Array2::from_shape_fn((nk, nj), |_| rng.gen_range(0.05..1.0));
        (
            ProbabilityTensor::new(p).unwrap(),
            WeightMatrix::new(w).unwrap(),
        )
    }

    #[test]
    fn hand_worked_two_networks() {
        // K=2, J=2, all weights 1, P_i.1=[0.6,0.4], P_i.2=[0.8,0.2]
        // numerator {1.4, 0.6}, denominator 2.0 -> [0.7, 0.3].
        let mut p = Array3::<f64>::zeros((1, 2, 2));
        p[(0, 0, 0)] = 0.6;
        p[(0, 1, 0)] = 0.4;
        p[(0, 0, 1)] = 0.8;
        p[(0, 1, 1)] = 0.2;
        let probs = ProbabilityTensor::new(p).unwrap();
        let weights = WeightMatrix::new(Array2::from_elem((2, 2), 1.0)).unwrap();
        let scores = weighted_scores(&probs, &weights).unwrap();
        assert!((scores.values()[(0, 0)] - 0.7).abs() < 1e-15);
        assert!((scores.values()[(0, 1)] - 0.3).abs() < 1e-15);
        assert_eq!(predict(&scores), vec![0]);
    }

    #[test]
    fn single_network_uniform_weights_reduce_to_probabilities() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (probs, _) = random_instance(&mut rng, 5, 7, 1);
        let weights = WeightMatrix::new(Array2::from_elem((1, 7), 0.37)).unwrap();
        let scores = weighted_scores(&probs, &weights).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                assert!((scores.values()[(i, j)] - probs.values()[(i, j, 0)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..25 {
            let (probs, weights) = random_instance(&mut rng, 5, 7, 4);
            let scores = weighted_scores(&probs, &weights).unwrap();
            let expect = oracle_scores(probs.values(), weights.values());
            for (a, b) in scores.values().iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            for row in scores.values().rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn global_rescaling_cancels() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (probs, weights) = random_instance(&mut rng, 4, 7, 3);
        let base = weighted_scores(&probs, &weights).unwrap();
        let scaled = weighted_scores(&probs, &weights.scaled(3.7).unwrap()).unwrap();
        for (a, b) in base.values().iter().zip(scaled.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(predict(&base), predict(&scaled));
    }

    #[test]
    fn per_class_rescaling_does_not_cancel() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (probs, weights) = random_instance(&mut rng, 4, 7, 3);
        let base = weighted_scores(&probs, &weights).unwrap();
        let mut skewed = weights.values().clone();
        for k in 0..3 {
            skewed[(k, 0)] *= 10.0;
        }
        let skewed_scores = weighted_scores(&probs, &WeightMatrix::new(skewed).unwrap()).unwrap();
        let max_diff = base
            .values()
            .iter()
            .zip(skewed_scores.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6);
    }

    #[test]
    fn weights_from_confusions() {
        // Perfect matrices give all-ones weights.
        let perfect = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![0, 2]]).unwrap();
        let w: WeightMatrix<f64> = compute_weights(&[perfect.clone(), perfect]).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));

        // TPR arithmetic row.
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![2, 2]]).unwrap();
        let w: WeightMatrix<f64> = compute_weights(&[cm]).unwrap();
        assert_eq!(w.values()[(0, 0)], 0.75);
        assert_eq!(w.values()[(0, 1)], 0.5);

        // Never-predicted class with true samples gets weight zero.
        let cm = ConfusionMatrix::from_counts(vec![vec![0, 4], vec![0, 2]]).unwrap();
        let w: WeightMatrix<f64> = compute_weights(&[cm]).unwrap();
        assert_eq!(w.values()[(0, 0)], 0.0);
        assert_eq!(w.values()[(0, 1)], 1.0);
    }

    #[test]
    fn zero_denominator_is_an_error_naming_the_image() {
        let mut p = Array3::zeros((2, 2, 1));
        p[(0, 0, 0)] = 1.0;
        p[(1, 1, 0)] = 1.0;
        let probs = ProbabilityTensor::new(p).unwrap();
        // Weight zero exactly where image 1 has mass.
        let mut w = Array2::zeros((1, 2));
        w[(0, 0)] = 1.0;
        let weights = WeightMatrix::new(w).unwrap();
        match weighted_scores(&probs, &weights) {
            Err(Error::ZeroDenominator { image }) => assert_eq!(image, "1"),
            other => panic!("expected zero denominator error, got {other:?}"),
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let values =
            Array2::from_shape_vec((2, 3), vec![0.5, 0.3, 0.2, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
                .unwrap();
        let scores = WeightedScoreMatrix { values };
        assert_eq!(predict(&scores), vec![0, 0]);
    }

    #[test]
    fn probability_tensor_validation() {
        let mut p = Array3::zeros((1, 2, 1));
        p[(0, 0, 0)] = 0.7;
        p[(0, 1, 0)] = 0.7;
        assert!(matches!(
            ProbabilityTensor::new(p),
            Err(Error::BadProbabilities(_))
        ));
        let mut p = Array3::zeros((1, 2, 1));
        p[(0, 0, 0)] = 1.4;
        p[(0, 1, 0)] = -0.4;
        assert!(matches!(
            ProbabilityTensor::new(p),
            Err(Error::BadProbabilities(_))
        ));
        assert!(matches!(
            WeightMatrix::new(Array2::from_elem((1, 2), -0.1)),
            Err(Error::BadWeights(_))
        ));
    }

    #[test]
    fn prediction_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (probs, weights) = random_instance(&mut rng, 3, 7, 2);
        let scores = weighted_scores(&probs, &weights).unwrap();
        let ids: Vec<String> = (0..3).map(|i| format!("img_{i}")).collect();
        let probs_path = dir.path().join("predictions.csv");
        let labels_path = dir.path().join("labels.csv");
        write_predictions(&probs_path, &ids, &scores).unwrap();
        write_prediction_labels(&labels_path, &ids, &scores).unwrap();
        let text = std::fs::read_to_string(&probs_path).unwrap();
        assert!(text.starts_with("image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\n"));
        assert_eq!(text.lines().count(), 4);
        let labels = read_prediction_labels(&labels_path).unwrap();
        assert_eq!(labels.len(), 3);
        let expect = predict_labels(&scores).unwrap();
        for ((id, label), (want_id, want)) in labels.iter().zip(ids.iter().zip(&expect)) {
            assert_eq!(id, want_id);
            assert_eq!(label, want);
        }
    }
}
