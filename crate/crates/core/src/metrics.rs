//! Evaluation metrics: Fréchet distance between Gaussian fits of stain-matrix
//! sets, 1-D Wasserstein distance between channel intensity distributions,
//! and SSIM.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::stain::{RgbImage, StainMatrix};
use crate::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_CLIP: f64 = -1e-10;

/// Mean and unbiased covariance of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(Error::Shape(format!(
                "covariance of a {dim}-dim summary needs {} entries, got {}",
                dim * dim,
                cov.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (cov[i * dim + j], cov[j * dim + i]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(GaussianSummary { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unbiased estimate from equally sized vectors.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 samples for a covariance, got {}",
                samples.len()
            )));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Shape("samples differ in dimension".into()));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; dim * dim];
        for s in samples {
            for i in 0..dim {
                let di = s[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1.0);
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(GaussianSummary {
            mean,
            cov,
            n: samples.len(),
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Flattens 3x2 stain matrices (row-major) and summarizes them.
pub fn summarize_stain_set(matrices: &[StainMatrix]) -> Result<GaussianSummary> {
    let vecs: Vec<Vec<f64>> = matrices.iter().map(|m| m.to_row_major().to_vec()).collect();
    GaussianSummary::from_samples(&vecs)
}

/// FD between the stain sets of every client pair, as one-based
/// `(a, b, fd)` with `a < b`.
pub fn pairwise_fd(sets: &[Vec<StainMatrix>]) -> Result<Vec<(usize, usize, f64)>> {
    let summaries = sets
        .iter()
        .map(|s| summarize_stain_set(s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            out.push((
                i + 1,
                j + 1,
                frechet_distance(&summaries[i], &summaries[j])?,
            ));
        }
    }
    Ok(out)
}

/// Mean of [`pairwise_fd`]; `None` with fewer than two sets.
pub fn mean_pairwise_fd(sets: &[Vec<StainMatrix>]) -> Result<Option<f64>> {
    let pairs = pairwise_fd(sets)?;
    if pairs.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64,
    ))
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the product root is computed from the symmetric form
/// `S_a^(1/2) S_b S_a^(1/2)`, with eigenvalues clipped at zero.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "summaries have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.n < 2 || b.n < 2 {
        return Err(Error::InvalidArgument("each summary needs n >= 2".into()));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(&sa)?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = psd_eigenvalues(&inner)?.iter().map(|v| v.sqrt()).sum();
    let fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

fn psd_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    check_eigen(&eig.eigenvalues)?;
    Ok(eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect())
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    check_eigen(&eig.eigenvalues)?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn check_eigen(values: &DVector<f64>) -> Result<()> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = max.abs().max(1.0);
    if values.iter().any(|v| !v.is_finite()) || min < EIGEN_CLIP * scale {
        let condition = if min.abs() > 0.0 {
            max.abs() / min.abs()
        } else {
            f64::INFINITY
        };
        return Err(Error::MatrixSqrt { condition });
    }
    Ok(())
}

/// Mean over RGB channels of the 1-Wasserstein distance between the two
/// images' empirical intensity distributions, intensities scaled to [0, 1].
pub fn wasserstein_1d(a: &RgbImage, b: &RgbImage) -> f64 {
    (0..3)
        .map(|c| channel_wasserstein(&a.channel(c), &b.channel(c)))
        .sum::<f64>()
        / 3.0
}

/// Area between the two empirical CDFs of 8-bit samples, on the [0, 1] scale.
pub fn channel_wasserstein(a: &[u8], b: &[u8]) -> f64 {
    let (ha, hb) = (histogram(a), histogram(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ca, mut cb) = (0u64, 0u64);
    let mut area = 0.0;
    for level in 0..255 {
        ca += ha[level];
        cb += hb[level];
        area += (ca as f64 / na - cb as f64 / nb).abs();
    }
    area / 255.0
}

fn histogram(v: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &x in v {
        h[x as usize] += 1;
    }
    h
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 255.0;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_WINDOW: usize = 11;

/// Mean SSIM over every fully contained Gaussian window (11x11, sigma 1.5)
/// and over the three channels. Images narrower than the window use the
/// largest odd window that fits.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "ssim needs equal sizes, got {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let total: f64 = (0..3)
        .map(|c| channel_ssim(&a.channel(c), &b.channel(c), a.width(), a.height()))
        .sum();
    Ok(total / 3.0)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let w1: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w1.iter().sum();
    let w1: Vec<f64> = w1.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(size * size);
    for y in &w1 {
        for x in &w1 {
            w.push(y * x);
        }
    }
    w
}

fn channel_ssim(a: &[u8], b: &[u8], width: usize, height: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(width).min(height);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let window = gaussian_window(size);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - size {
        for x0 in 0..=width - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..size {
                let row = (y0 + dy) * width + x0;
                for dx in 0..size {
                    let wgt = window[dy * size + dx];
                    let (va, vb) = (a[row + dx] as f64, b[row + dx] as f64);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary_1d(mean: f64, var: f64) -> GaussianSummary {
        GaussianSummary::new(vec![mean], vec![var], 100).unwrap()
    }

    #[test]
    fn fd_closed_form_1d() {
        let fd = frechet_distance(&summary_1d(0.0, 1.0), &summary_1d(3.0, 1.0)).unwrap();
        assert!((fd - 9.0).abs() < 1e-6);
        // (mu diff)^2 + (sigma diff)^2
        let fd = frechet_distance(&summary_1d(1.0, 4.0), &summary_1d(0.0, 1.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-9);
    }

    #[test]
    fn fd_rejects_dimension_mismatch_and_small_n() {
        let a = summary_1d(0.0, 1.0);
        let b = GaussianSummary::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 10).unwrap();
        assert!(frechet_distance(&a, &b).is_err());
        let tiny = GaussianSummary::new(vec![0.0], vec![1.0], 1).unwrap();
        assert!(frechet_distance(&a, &tiny).is_err());
    }

    #[test]
    fn fd_rejects_indefinite_covariance() {
        let a = GaussianSummary::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0], 10).unwrap();
        assert!(matches!(
            frechet_distance(&a, &a),
            Err(Error::MatrixSqrt { .. })
        ));
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        assert!(GaussianSummary::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.2, 1.0], 10).is_err());
    }

    #[test]
    fn summary_needs_two_samples() {
        assert!(summarize_stain_set(&[StainMatrix::reference()]).is_err());
    }

    #[test]
    fn identical_matrices_have_zero_covariance() {
        let s = summarize_stain_set(&[StainMatrix::reference(); 5]).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert_eq!(s.mean, StainMatrix::reference().to_row_major().to_vec());
    }

    #[test]
    fn wd_endpoints() {
        let black = RgbImage::filled(4, 4, [0, 0, 0]).unwrap();
        let white = RgbImage::filled(3, 5, [255, 255, 255]).unwrap();
        assert_eq!(wasserstein_1d(&black, &white), 1.0);
        assert_eq!(wasserstein_1d(&black, &black), 0.0);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let px: Vec<u8> = (0..20 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect();
        let img = RgbImage::new(20, 16, px).unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let (w, h) = (16, 16);
        let px: Vec<u8> = (0..w * h)
            .flat_map(|p| {
                let v = if (p % w + p / w) % 2 == 0 { 230 } else { 25 };
                [v, v, v]
            })
            .collect();
        let img = RgbImage::new(w, h, px.clone()).unwrap();
        let inv = RgbImage::new(w, h, px.iter().map(|v| 255 - v).collect()).unwrap();
        assert!(ssim(&img, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_small_images_and_mismatch() {
        let a = RgbImage::filled(4, 6, [10, 20, 30]).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = RgbImage::filled(6, 4, [10, 20, 30]).unwrap();
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
    }
}
