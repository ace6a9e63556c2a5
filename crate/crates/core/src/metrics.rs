//! Inception score, masked inception score and Fréchet distance.
//!
//! The classifier is abstracted behind [`ClassifierBackend`] so the scores can
//! be computed hermetically with the deterministic backends defined here.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePlane, Mask};
use crate::partition::split_foreground_with_fill;

pub const DEFAULT_SPLITS: usize = 10;
const ROW_SUM_TOL: f64 = 1e-6;
/// Eigenvalues below `-EIGEN_TOL` are treated as a numerical failure.
pub const EIGEN_TOL: f64 = 1e-8;

pub trait ClassifierBackend {
    fn name(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// One probability row per image.
    fn predict(&self, images: &[ImagePlane]) -> Result<Array2<f64>>;
    /// One feature row per image.
    fn features(&self, images: &[ImagePlane]) -> Result<Array2<f64>>;
    /// Whether `predict` may be called concurrently from several threads.
    fn reentrant(&self) -> bool {
        true
    }
}

/// Mean of each channel over a `rows × cols` grid of cells.
fn pooled(image: &ImagePlane, rows: usize, cols: usize) -> Vec<f64> {
    let (h, w) = image.shape();
    let data = image.data();
    let mut out = Vec::with_capacity(rows * cols * 3);
    for gr in 0..rows {
        let (r0, r1) = (gr * h / rows, ((gr + 1) * h / rows).max(gr * h / rows + 1).min(h));
        for gc in 0..cols {
            let (c0, c1) = (gc * w / cols, ((gc + 1) * w / cols).max(gc * w / cols + 1).min(w));
            for ch in 0..3 {
                let mut s = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        s += data[[r, c, ch]] as f64;
                    }
                }
                out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Fixed random two-layer network over pooled colour statistics.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    w1: Array2<f64>,
    w2: Array2<f64>,
}

const POOL_ROWS: usize = 4;
const POOL_COLS: usize = 2;

impl SyntheticBackend {
    pub const NAME: &'static str = "synthetic";

    pub fn new() -> Self {
        Self::with_dims(16, 10, 0x5eed)
    }

    pub fn with_dims(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = POOL_ROWS * POOL_COLS * 3;
        let mut draw = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let w1 = draw(feature_dim, inputs, 1.0 / (inputs as f64).sqrt());
        let w2 = draw(classes, feature_dim, 3.0);
        Self { w1, w2 }
    }
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ClassifierBackend for SyntheticBackend {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    fn feature_dim(&self) -> usize {
        self.w1.nrows()
    }

    fn features(&self, images: &[ImagePlane]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.feature_dim()));
        for (i, img) in images.iter().enumerate() {
            let x = ndarray::Array1::from(pooled(img, POOL_ROWS, POOL_COLS));
            let f = self.w1.dot(&x).mapv(f64::tanh);
            out.row_mut(i).assign(&f);
        }
        Ok(out)
    }

    fn predict(&self, images: &[ImagePlane]) -> Result<Array2<f64>> {
        let feats = self.features(images)?;
        let mut out = Array2::zeros((images.len(), self.num_classes()));
        for (i, f) in feats.rows().into_iter().enumerate() {
            let p = softmax(self.w2.dot(&f).as_slice().unwrap_or(&[]));
            out.row_mut(i).assign(&ArrayView1::from(&p));
        }
        Ok(out)
    }
}

/// Predicts the uniform distribution for every image.
#[derive(Debug, Clone, Copy)]
pub struct UniformBackend {
    pub classes: usize,
}

impl UniformBackend {
    pub const NAME: &'static str = "uniform";
}

impl ClassifierBackend for UniformBackend {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn feature_dim(&self) -> usize {
        3
    }

    fn predict(&self, images: &[ImagePlane]) -> Result<Array2<f64>> {
        Ok(Array2::from_elem(
            (images.len(), self.classes),
            1.0 / self.classes as f64,
        ))
    }

    fn features(&self, images: &[ImagePlane]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), 3));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&ArrayView1::from(&pooled(img, 1, 1)));
        }
        Ok(out)
    }
}

/// Looks a backend up by name.
pub fn backend_by_name(name: &str) -> Result<Box<dyn ClassifierBackend>> {
    match name {
        SyntheticBackend::NAME => Ok(Box::new(SyntheticBackend::new())),
        UniformBackend::NAME => Ok(Box::new(UniformBackend { classes: 10 })),
        other => Err(Error::invalid(format!(
            "classifier backend {other:?} is not available (known: synthetic, uniform)"
        ))),
    }
}

fn check_probs(probs: &Array2<f64>) -> Result<()> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!("probability row {i} has invalid entries")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn split_score(probs: ndarray::ArrayView2<f64>) -> f64 {
    let marginal = probs.mean_axis(Axis(0)).expect("non-empty split");
    let mut kl_sum = 0.0;
    for row in probs.rows() {
        for (p, q) in row.iter().zip(marginal.iter()) {
            if *p > 0.0 {
                kl_sum += p * (p.ln() - q.ln());
            }
        }
    }
    (kl_sum / probs.nrows() as f64).exp()
}

/// Mean and population std of `exp(E[KL(p(y|x) ‖ p(y))])` over `splits`
/// contiguous chunks of the rows.
pub fn inception_score(probs: &Array2<f64>, splits: usize) -> Result<(f64, f64)> {
    let n = probs.nrows();
    if splits == 0 || n < splits {
        return Err(Error::invalid(format!(
            "need at least {splits} rows and one split, got {n}"
        )));
    }
    check_probs(probs)?;
    let scores: Vec<f64> = (0..splits)
        .map(|k| split_score(probs.slice(ndarray::s![k * n / splits..(k + 1) * n / splits, ..])))
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Rows reordered by ascending id, so split membership does not depend on input order.
pub fn sort_rows_by_id(ids: &[String], rows: &Array2<f64>) -> Result<Array2<f64>> {
    if ids.len() != rows.nrows() {
        return Err(Error::invalid("one id per row required"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    Ok(rows.select(Axis(0), &order))
}

/// [`inception_score`] with splits drawn from the id-sorted order.
pub fn inception_score_keyed(ids: &[String], probs: &Array2<f64>, splits: usize) -> Result<(f64, f64)> {
    inception_score(&sort_rows_by_id(ids, probs)?, splits)
}

/// Zeroes the background of each image.
pub fn mask_images(images: &[ImagePlane], masks: &[Mask]) -> Result<Vec<ImagePlane>> {
    if images.len() != masks.len() {
        return Err(Error::invalid(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    images
        .iter()
        .zip(masks)
        .map(|(img, m)| split_foreground_with_fill(img, m, 0.0))
        .collect()
}

pub fn image_inception_score(
    images: &[ImagePlane],
    backend: &dyn ClassifierBackend,
    splits: usize,
) -> Result<(f64, f64)> {
    inception_score(&backend.predict(images)?, splits)
}

pub fn mask_inception_score(
    images: &[ImagePlane],
    masks: &[Mask],
    backend: &dyn ClassifierBackend,
    splits: usize,
) -> Result<(f64, f64)> {
    image_inception_score(&mask_images(images, masks)?, backend, splits)
}

/// Sample mean and unbiased covariance.
pub fn gaussian_moments(feats: &Array2<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = feats.dim();
    if n < 2 || d == 0 {
        return Err(Error::invalid(format!(
            "need at least 2 rows of dimension >= 1, got {n}x{d}"
        )));
    }
    if feats.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let mean = feats.mean_axis(Axis(0)).expect("n >= 2");
    let centered = feats - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    Ok((
        DVector::from_iterator(d, mean.iter().copied()),
        DMatrix::from_fn(d, d, |i, j| cov[[i, j]]),
    ))
}

fn clipped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIGEN_TOL {
            return Err(Error::invalid(format!(
                "{what} has eigenvalue {v:e}; not positive semi-definite"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Fréchet distance between two Gaussians.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::invalid("moment dimensions disagree"));
    }
    let ea = clipped_eigenvalues(cov_a, "first covariance")?;
    let sqrt_a =
        &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * cov_b * &sqrt_a;
    let cross: f64 = clipped_eigenvalues(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(feats_a: &Array2<f64>, feats_b: &Array2<f64>) -> Result<f64> {
    if feats_a.ncols() != feats_b.ncols() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            feats_a.ncols(),
            feats_b.ncols()
        )));
    }
    let (mu_a, cov_a) = gaussian_moments(feats_a)?;
    let (mu_b, cov_b) = gaussian_moments(feats_b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    pub n: usize,
    pub backend: String,
    pub config_hash: String,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// IS of `generated`, mask-IS when masks are given, and FID against `real`.
pub fn evaluate(
    generated: &[ImagePlane],
    real: &[ImagePlane],
    masks: Option<&[Mask]>,
    backend: &dyn ClassifierBackend,
    splits: usize,
    config_hash: &str,
) -> Result<Vec<MetricRecord>> {
    let record = |metric: &str, value: f64, std: Option<f64>, n: usize| MetricRecord {
        metric: metric.into(),
        value,
        std,
        n,
        backend: backend.name().into(),
        config_hash: config_hash.into(),
    };
    let splits = splits.min(generated.len()).max(1);
    let mut out = Vec::new();
    let (is, is_std) = image_inception_score(generated, backend, splits)?;
    out.push(record("is", is, Some(is_std), generated.len()));
    if let Some(masks) = masks {
        let (m, m_std) = mask_inception_score(generated, masks, backend, splits)?;
        out.push(record("mask_is", m, Some(m_std), generated.len()));
    }
    let fid = frechet_distance(&backend.features(generated)?, &backend.features(real)?)?;
    out.push(record("fid", fid, None, generated.len()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn is_examples() {
        let uniform = Array2::from_elem((20, 5), 0.2);
        assert_abs_diff_eq!(inception_score(&uniform, 4).unwrap().0, 1.0, epsilon = 1e-12);
        let one_hot = Array2::from_shape_fn((8, 8), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let (m, s) = inception_score(&one_hot, 1).unwrap();
        assert_abs_diff_eq!(m, 8.0, epsilon = 1e-9);
        assert_eq!(s, 0.0);
        let same = Array2::from_shape_fn((6, 4), |(_, j)| if j == 2 { 1.0 } else { 0.0 });
        assert_abs_diff_eq!(inception_score(&same, 2).unwrap().0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn is_rejects_bad_rows() {
        let bad = array![[0.5, 0.6], [0.5, 0.5]];
        assert!(inception_score(&bad, 1).is_err());
        let ok = array![[0.5, 0.5]];
        assert!(inception_score(&ok, 2).is_err());
    }

    #[test]
    fn fid_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let a = array![[-h], [h]];
        let b = array![[3.0 - h], [3.0 + h]];
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), 9.0, epsilon = 1e-9);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let d = frechet_from_moments(&DVector::zeros(2), &i2, &DVector::from_vec(vec![3.0, 4.0]), &i2).unwrap();
        assert_abs_diff_eq!(d, 25.0, epsilon = 1e-9);
        assert!(frechet_distance(&array![[1.0]], &a).is_err());
        assert!(frechet_distance(&array![[f64::NAN], [1.0]], &a).is_err());
    }

    #[test]
    fn backends_are_deterministic_and_normalized() {
        let imgs: Vec<_> = (0..3)
            .map(|k| ImagePlane::filled(16, 8, k as f32 * 0.3 - 0.3))
            .collect();
        let b = SyntheticBackend::new();
        let p = b.predict(&imgs).unwrap();
        assert_eq!(p, SyntheticBackend::new().predict(&imgs).unwrap());
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        assert!(backend_by_name("inception-v3").is_err());
    }
}
