//! Classification metrics, Fréchet distance between Gaussian fits of
//! feature sets, encoder feature extraction and rank correlation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::backbone::encode_representation;
use crate::data::{stack, ImageSource};
use crate::error::{Error, Result};
use crate::tensor::{Array, Float};
use crate::training::Checkpoint;

/// Eigenvalues above this (and below zero) are treated as rounding noise.
pub const EIGEN_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub positive_class: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Set when a ratio had an empty denominator and was defined as 0.
    pub warnings: Vec<String>,
}

/// Accuracy plus precision/recall/F1 for `positive_class`.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], positive_class: usize) -> Result<ClassificationReport> {
    if y_true.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == positive_class, p == positive_class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let correct = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    let mut warnings = Vec::new();
    let ratio = |num: usize, den: usize, what: &str, warnings: &mut Vec<String>| {
        if den == 0 {
            warnings.push(format!("{what} undefined (no {what} denominator), reported as 0"));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp, "precision", &mut warnings);
    let recall = ratio(tp, tp + fn_, "recall", &mut warnings);
    if tp == 0 {
        warnings.push("no true positives".into());
    }
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationReport {
        n: y_true.len(),
        positive_class,
        accuracy: correct as f64 / y_true.len() as f64,
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        warnings,
    })
}

fn to_matrix<F: Float>(feats: &Array<F>, what: &str) -> Result<DMatrix<f64>> {
    if feats.shape.len() != 2 || feats.shape[0] == 0 {
        return Err(Error::Input(format!("{what} features must be (n, d) with n > 0, got {:?}", feats.shape)));
    }
    if !feats.is_finite() {
        return Err(Error::Input(format!("{what} features hold non-finite values")));
    }
    let (n, d) = (feats.shape[0], feats.shape[1]);
    Ok(DMatrix::from_row_iterator(n, d, feats.data.iter().map(|v| v.as_f64())))
}

/// Column means and the unbiased covariance (`n − 1`; zero when n = 1).
pub fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    let cov = centered.transpose() * &centered / denom;
    (mu, cov)
}

/// Clamp rounding-level negative eigenvalues, reject real ones.
fn clamp_eigen(values: &DVector<f64>) -> Result<DVector<f64>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(v)
            } else if v > EIGEN_FLOOR {
                Ok(0.0)
            } else {
                Err(Error::Numerical(format!("covariance product has eigenvalue {v:e}")))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// Square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = clamp_eigen(&eig.eigenvalues)?.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})` between Gaussian fits.
///
/// The trace of `(Σa Σb)^{1/2}` is taken from the eigenvalues of the
/// symmetric `Σa^{1/2} Σb Σa^{1/2}`, which is similar to `Σa Σb`.
pub fn frechet_distance<F: Float>(feats_a: &Array<F>, feats_b: &Array<F>) -> Result<f64> {
    let a = to_matrix(feats_a, "first")?;
    let b = to_matrix(feats_b, "second")?;
    if a.ncols() != b.ncols() {
        return Err(Error::Input(format!("feature dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu_a, cov_a) = mean_and_cov(&a);
    let (mu_b, cov_b) = mean_and_cov(&b);
    let root_a = sqrtm_psd(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clamp_eigen(&SymmetricEigen::new(inner).eigenvalues)?.iter().map(|v| v.sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Pooled encoder features `(n, repr_dim)` of every image in `images`.
pub fn extract_features(ckpt: &Checkpoint, images: &(impl ImageSource + ?Sized)) -> Result<Array<f32>> {
    let cfg = ckpt.config();
    if !cfg.has_encoder() {
        return Err(Error::Config(format!(
            "{} checkpoint has no representation encoder",
            cfg.conditioning
        )));
    }
    let params = ckpt.model.params.constants();
    let mut data = Vec::with_capacity(images.len() * cfg.repr_dim);
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(64) {
        let z0 = stack::<f32>(images, chunk)?;
        data.extend_from_slice(encode_representation(&params, cfg, &z0)?.data());
    }
    Ok(Array::new(vec![images.len(), cfg.repr_dim], data)?)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of the ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
