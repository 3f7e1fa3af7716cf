//! Stain separation and reconstruction for H&E images.
//!
//! In optical-density space (`od = -ln(x / I0)`) the image is modelled as
//! `od ≈ w h` with a 3x2 non-negative stain matrix `w` (unit-norm columns)
//! and a 2xN non-negative density map `h`. [`separate`] solves
//!
//! ```text
//! min 1/2 ||od - w h||_F^2 + lambda ||h||_1   s.t. w, h >= 0, ||w(:, i)||_2 = 1
//! ```
//!
//! by alternating minimization: the `h`-step is a per-pixel non-negative
//! lasso solved by coordinate descent, the `w`-step is a blockwise projected
//! gradient step onto the non-negative part of the unit sphere. Both steps
//! are exact or majorized, so the objective never increases.
//!
//! Only foreground pixels (OD l1 mass >= [`BACKGROUND_OD_L1`]) take part in
//! the fit. Background pixels get densities from a final `h`-step against
//! the fitted basis.
//!
//! When an image carries a single dye, the free column drifts onto the
//! occupied one and the density splits arbitrarily between two copies of the
//! same color. If the fitted columns end up nearly collinear, the column
//! holding less density is reset to its reference stain before the final
//! `h`-step.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of stains (hematoxylin, eosin).
pub const NUM_STAINS: usize = 2;

/// Pixels whose optical-density l1 mass is below this are background.
pub const BACKGROUND_OD_L1: f64 = 0.15;

pub const DEFAULT_ILLUMINANT: f64 = 255.0;

/// Reference optical-density directions used to initialize the solver.
pub const HEMATOXYLIN_REF: [f64; 3] = [0.65, 0.70, 0.29];
pub const EOSIN_REF: [f64; 3] = [0.07, 0.99, 0.11];

const COLUMN_NORM_TOL: f64 = 1e-9;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    illuminant: f64,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must have at least one pixel, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
            illuminant: DEFAULT_ILLUMINANT,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        RgbImage::new(width, height, pixels)
    }

    pub fn with_illuminant(mut self, i0: f64) -> Result<Self> {
        if !(i0 > 0.0 && i0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "illuminating intensity must be positive, got {i0}"
            )));
        }
        self.illuminant = i0;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn illuminant(&self) -> f64 {
        self.illuminant
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn same_dims(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// 3x2 stain matrix with non-negative, unit-norm columns in canonical order.
///
/// The first column is the one whose first (red-channel OD) component is
/// larger, so it plays the hematoxylin role; ties go to the larger second
/// component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    columns: [[f64; 3]; NUM_STAINS],
}

impl StainMatrix {
    /// Normalizes the columns and puts them in canonical order.
    pub fn from_columns(columns: [[f64; 3]; NUM_STAINS]) -> Result<Self> {
        let mut out = [[0.0; 3]; NUM_STAINS];
        for (dst, col) in out.iter_mut().zip(&columns) {
            if col.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "stain column {col:?} must be finite and non-negative"
                )));
            }
            let norm = l2(col);
            if norm == 0.0 {
                return Err(Error::InvalidArgument("stain column is all zero".into()));
            }
            // Leave already-normalized columns untouched so that parsing a
            // serialized matrix reproduces it bit for bit.
            *dst = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
                *col
            } else {
                col.map(|v| v / norm)
            };
        }
        if needs_swap(&out[0], &out[1]) {
            out.swap(0, 1);
        }
        Ok(StainMatrix { columns: out })
    }

    /// Clamps negatives to zero and renormalizes. `None` if a column vanishes.
    pub fn project(columns: [[f64; 3]; NUM_STAINS]) -> Option<Self> {
        StainMatrix::from_columns(columns.map(|c| c.map(|v| if v > 0.0 { v } else { 0.0 }))).ok()
    }

    pub fn reference() -> Self {
        StainMatrix::from_columns([HEMATOXYLIN_REF, EOSIN_REF]).expect("valid reference stains")
    }

    pub fn columns(&self) -> &[[f64; 3]; NUM_STAINS] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> [f64; 3] {
        self.columns[i]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    /// `[w11, w12, w21, w22, w31, w32]`.
    pub fn to_row_major(&self) -> [f64; 6] {
        let c = &self.columns;
        [c[0][0], c[1][0], c[0][1], c[1][1], c[0][2], c[1][2]]
    }

    pub fn from_row_major(v: [f64; 6]) -> Result<Self> {
        StainMatrix::from_columns(split_row_major(v))
    }

    /// Column-major order `[w11, w21, w31, w12, w22, w32]`, the stain CSV layout.
    pub fn to_column_major(&self) -> [f64; 6] {
        let c = &self.columns;
        [c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2]]
    }

    pub fn from_column_major(v: [f64; 6]) -> Result<Self> {
        StainMatrix::from_columns([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
    }

    /// Checks the invariants (used on deserialized or externally built values).
    pub fn is_valid(&self) -> bool {
        self.columns.iter().all(|c| {
            c.iter().all(|v| v.is_finite() && *v >= 0.0) && (l2(c) - 1.0).abs() <= COLUMN_NORM_TOL
        }) && !needs_swap(&self.columns[0], &self.columns[1])
    }
}

pub(crate) fn split_row_major(v: [f64; 6]) -> [[f64; 3]; NUM_STAINS] {
    [[v[0], v[2], v[4]], [v[1], v[3], v[5]]]
}

fn needs_swap(first: &[f64; 3], second: &[f64; 3]) -> bool {
    second[0] > first[0] || (second[0] == first[0] && second[1] > first[1])
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-pixel stain concentrations, `NUM_STAINS` rows by N pixel columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    cols: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn new(cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_STAINS * cols {
            return Err(Error::Shape(format!(
                "density map with {cols} pixels needs {} values, got {}",
                NUM_STAINS * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "densities must be finite and non-negative".into(),
            ));
        }
        Ok(DensityMap { cols, values })
    }

    pub fn zeros(cols: usize) -> Self {
        DensityMap {
            cols,
            values: vec![0.0; NUM_STAINS * cols],
        }
    }

    pub fn rows(&self) -> usize {
        NUM_STAINS
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, stain: usize, pixel: usize) -> f64 {
        self.values[stain * self.cols + pixel]
    }
}

/// `-ln(clamp(x, 1, I0) / I0)` per pixel and channel.
pub fn to_optical_density(img: &RgbImage) -> Vec<[f64; 3]> {
    let i0 = img.illuminant();
    img.pixels()
        .chunks_exact(3)
        .map(|px| {
            let mut od = [0.0; 3];
            for (o, &v) in od.iter_mut().zip(px) {
                let x = (v as f64).clamp(1.0, i0);
                // -ln(1) is -0.0; normalize so white maps to +0.
                *o = -(x / i0).ln() + 0.0;
            }
            od
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationParams {
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop when the relative objective change drops below this.
    pub tol: f64,
}

impl Default for SeparationParams {
    fn default() -> Self {
        SeparationParams {
            lambda: 0.02,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl SeparationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tol must be >= 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Separation {
    pub stains: StainMatrix,
    pub density: DensityMap,
    /// Objective over foreground pixels: the initial value, then one entry
    /// per alternating iteration.
    pub objective: Vec<f64>,
    /// The fitted columns were collinear and one was reset (see module docs).
    pub collapsed: bool,
    pub iterations: usize,
    pub foreground_pixels: usize,
}

impl Separation {
    pub fn into_parts(self) -> (StainMatrix, DensityMap) {
        (self.stains, self.density)
    }
}

const CD_MAX_SWEEPS: usize = 100;
const CD_TOL: f64 = 1e-12;
/// Cosine above which two fitted stain columns count as the same color.
const COLLINEAR_COS: f64 = 0.99;

/// Factorizes `img` into a stain matrix and a density map.
pub fn separate(img: &RgbImage, params: &SeparationParams) -> Result<Separation> {
    params.validate()?;
    let od = to_optical_density(img);
    let fg: Vec<usize> = (0..od.len())
        .filter(|&i| od[i].iter().sum::<f64>() >= BACKGROUND_OD_L1)
        .collect();
    if fg.len() < NUM_STAINS {
        return Err(Error::DegenerateImage {
            found: fg.len(),
            needed: NUM_STAINS,
            threshold: BACKGROUND_OD_L1,
        });
    }
    let fg_od: Vec<[f64; 3]> = fg.iter().map(|&i| od[i]).collect();
    let lambda = params.lambda;

    let mut w = *StainMatrix::reference().columns();
    let mut h = vec![[0.0; NUM_STAINS]; fg_od.len()];
    let mut objective = vec![objective_value(&w, &fg_od, &h, lambda)];
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        h_step(&w, &fg_od, &mut h, lambda);
        w_step(&mut w, &fg_od, &h);
        let prev = *objective.last().unwrap();
        let cur = objective_value(&w, &fg_od, &h, lambda);
        objective.push(cur);
        if (prev - cur).abs() <= params.tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let collapsed = dot3(&w[0], &w[1]) > COLLINEAR_COS;
    if collapsed {
        let mass = |s: usize| h.iter().map(|hp| hp[s]).sum::<f64>();
        let reference = StainMatrix::reference();
        let minor = if mass(0) >= mass(1) { 1 } else { 0 };
        // The surviving column takes whichever role its color fits.
        let major_is_h = w[1 - minor][0] >= reference.columns[1][0];
        w[minor] = reference.columns[if major_is_h { 1 } else { 0 }];
        h_step(&w, &fg_od, &mut h, lambda);
    }

    if needs_swap(&w[0], &w[1]) {
        w.swap(0, 1);
        h.iter_mut().for_each(|hp| hp.swap(0, 1));
    }

    // Final densities for every pixel against the fitted basis; foreground
    // pixels warm-start from the fit.
    let mut all_h = vec![[0.0; NUM_STAINS]; od.len()];
    for (&i, hp) in fg.iter().zip(&h) {
        all_h[i] = *hp;
    }
    h_step(&w, &od, &mut all_h, lambda);

    let n = od.len();
    let mut values = vec![0.0; NUM_STAINS * n];
    for (p, hp) in all_h.iter().enumerate() {
        for (s, &v) in hp.iter().enumerate() {
            values[s * n + p] = v;
        }
    }
    Ok(Separation {
        stains: StainMatrix { columns: w },
        density: DensityMap { cols: n, values },
        objective,
        collapsed,
        iterations,
        foreground_pixels: fg.len(),
    })
}

fn objective_value(
    w: &[[f64; 3]; NUM_STAINS],
    od: &[[f64; 3]],
    h: &[[f64; NUM_STAINS]],
    lambda: f64,
) -> f64 {
    let mut fit = 0.0;
    let mut l1 = 0.0;
    for (v, hp) in od.iter().zip(h) {
        for c in 0..3 {
            let r = v[c] - w[0][c] * hp[0] - w[1][c] * hp[1];
            fit += r * r;
        }
        l1 += hp[0] + hp[1];
    }
    0.5 * fit + lambda * l1
}

/// Per-pixel non-negative lasso by cyclic coordinate descent, warm-started from `h`.
fn h_step(w: &[[f64; 3]; NUM_STAINS], od: &[[f64; 3]], h: &mut [[f64; NUM_STAINS]], lambda: f64) {
    let mut gram = [[0.0; NUM_STAINS]; NUM_STAINS];
    for i in 0..NUM_STAINS {
        for j in 0..NUM_STAINS {
            gram[i][j] = dot3(&w[i], &w[j]);
        }
    }
    for (v, hp) in od.iter().zip(h.iter_mut()) {
        let corr = [dot3(&w[0], v), dot3(&w[1], v)];
        for _ in 0..CD_MAX_SWEEPS {
            let mut change: f64 = 0.0;
            for i in 0..NUM_STAINS {
                let mut r = corr[i] - lambda;
                for j in 0..NUM_STAINS {
                    if j != i {
                        r -= gram[i][j] * hp[j];
                    }
                }
                let next = (r / gram[i][i]).max(0.0);
                change = change.max((next - hp[i]).abs());
                hp[i] = next;
            }
            if change <= CD_TOL {
                break;
            }
        }
    }
}

/// One Gauss-Seidel pass of projected gradient over the columns of `w`.
///
/// With step `1 / ||h_i||^2` (the blockwise Lipschitz constant) the step
/// lands on the unconstrained column minimizer; projecting onto the
/// non-negative unit sphere (clamp, then renormalize) is exact for that set,
/// so the fit term cannot increase.
fn w_step(w: &mut [[f64; 3]; NUM_STAINS], od: &[[f64; 3]], h: &[[f64; NUM_STAINS]]) {
    let mut hht = [[0.0; NUM_STAINS]; NUM_STAINS];
    let mut vht = [[0.0; 3]; NUM_STAINS];
    for (v, hp) in od.iter().zip(h) {
        for i in 0..NUM_STAINS {
            for j in 0..NUM_STAINS {
                hht[i][j] += hp[i] * hp[j];
            }
            for c in 0..3 {
                vht[i][c] += v[c] * hp[i];
            }
        }
    }
    for i in 0..NUM_STAINS {
        let lipschitz = hht[i][i];
        if lipschitz <= 0.0 {
            continue;
        }
        let mut next = [0.0; 3];
        for c in 0..3 {
            let model: f64 = (0..NUM_STAINS).map(|j| w[j][c] * hht[j][i]).sum();
            let grad = model - vht[i][c];
            next[c] = (w[i][c] - grad / lipschitz).max(0.0);
        }
        let norm = l2(&next);
        if norm > 0.0 {
            w[i] = next.map(|v| v / norm);
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Renders `I0 exp(-w h)` as an 8-bit image of the given size.
pub fn reconstruct(
    w: &StainMatrix,
    h: &DensityMap,
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    reconstruct_with_illuminant(w, h, width, height, DEFAULT_ILLUMINANT)
}

pub fn reconstruct_with_illuminant(
    w: &StainMatrix,
    h: &DensityMap,
    width: usize,
    height: usize,
    i0: f64,
) -> Result<RgbImage> {
    if width * height != h.cols() {
        return Err(Error::Shape(format!(
            "density map has {} pixels, image is {width}x{height}",
            h.cols()
        )));
    }
    let n = h.cols();
    let mut pixels = Vec::with_capacity(n * 3);
    for p in 0..n {
        let (h0, h1) = (h.get(0, p), h.get(1, p));
        for c in 0..3 {
            let od = w.get(c, 0) * h0 + w.get(c, 1) * h1;
            pixels.push((i0 * (-od).exp()).round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::new(width, height, pixels)?.with_illuminant(i0)
}

/// Optical density of the model `w h` for each pixel (no quantization).
pub fn model_optical_density(w: &StainMatrix, h: &DensityMap) -> Vec<[f64; 3]> {
    (0..h.cols())
        .map(|p| {
            let mut od = [0.0; 3];
            for (c, o) in od.iter_mut().enumerate() {
                *o = w.get(c, 0) * h.get(0, p) + w.get(c, 1) * h.get(1, p);
            }
            od
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from_od(w: &StainMatrix, h: &DensityMap, width: usize, height: usize) -> RgbImage {
        reconstruct(w, h, width, height).unwrap()
    }

    #[test]
    fn white_pixel_has_zero_density() {
        let img = RgbImage::filled(1, 1, [255, 255, 255]).unwrap();
        let od = to_optical_density(&img);
        assert_eq!(od[0], [0.0, 0.0, 0.0]);
        assert!(od[0].iter().all(|v| v.is_sign_positive()));
    }

    #[test]
    fn od_of_known_levels() {
        let img = RgbImage::filled(1, 1, [94, 0, 94]).unwrap();
        let od = to_optical_density(&img)[0];
        // -ln(94/255) and the clamp rule -ln(1/255).
        assert!((od[0] - 0.997_968_8).abs() < 1e-6, "{}", od[0]);
        assert!((od[1] - 5.541_263_5).abs() < 1e-6, "{}", od[1]);
    }

    #[test]
    fn od_respects_custom_illuminant() {
        let img = RgbImage::filled(1, 1, [250, 200, 100])
            .unwrap()
            .with_illuminant(200.0)
            .unwrap();
        let od = to_optical_density(&img)[0];
        assert_eq!(od[0], 0.0);
        assert_eq!(od[1], 0.0);
        assert!((od[2] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stain_matrix_canonical_order() {
        let m = StainMatrix::from_columns([EOSIN_REF, HEMATOXYLIN_REF]).unwrap();
        assert!(m.get(0, 0) > m.get(0, 1));
        assert!(m.is_valid());
        let rm = m.to_row_major();
        assert_eq!(StainMatrix::from_row_major(rm).unwrap(), m);
        let cm = m.to_column_major();
        assert_eq!(StainMatrix::from_column_major(cm).unwrap(), m);
    }

    #[test]
    fn stain_matrix_rejects_bad_columns() {
        assert!(StainMatrix::from_columns([[0.0; 3], EOSIN_REF]).is_err());
        assert!(StainMatrix::from_columns([[-0.1, 0.5, 0.5], EOSIN_REF]).is_err());
        assert!(StainMatrix::project([[-0.1, -0.5, -0.5], EOSIN_REF]).is_none());
        let p = StainMatrix::project([[0.5, -0.5, 0.5], EOSIN_REF]).unwrap();
        assert!(p.is_valid());
        assert_eq!(p.get(1, 0), 0.0);
    }

    #[test]
    fn zero_density_reconstructs_white() {
        let img = reconstruct(&StainMatrix::reference(), &DensityMap::zeros(12), 4, 3).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn reconstruct_dimension_mismatch() {
        let err = reconstruct(&StainMatrix::reference(), &DensityMap::zeros(12), 5, 3);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn all_background_is_degenerate() {
        let img = RgbImage::filled(8, 8, [250, 250, 252]).unwrap();
        match separate(&img, &SeparationParams::default()) {
            Err(Error::DegenerateImage { threshold, .. }) => {
                assert_eq!(threshold, BACKGROUND_OD_L1)
            }
            other => panic!("expected degenerate image, got {other:?}"),
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let img = RgbImage::filled(2, 2, [100, 50, 120]).unwrap();
        let params = SeparationParams {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            separate(&img, &params),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn two_stain_fixture() -> (StainMatrix, DensityMap, RgbImage) {
        let truth = StainMatrix::from_columns([[0.60, 0.75, 0.28], [0.10, 0.95, 0.20]]).unwrap();
        let (width, height) = (24, 24);
        let n = width * height;
        let mut values = vec![0.0; 2 * n];
        for p in 0..n {
            let (x, y) = ((p % width) as f64, (p / width) as f64);
            match p % 3 {
                0 => values[p] = 0.3 + 0.6 * ((x * 0.3).sin().abs()),
                1 => values[n + p] = 0.2 + 0.5 * ((y * 0.2).cos().abs()),
                _ => {
                    values[p] = 0.4 * ((x + y) * 0.1).sin().abs();
                    values[n + p] = 0.3;
                }
            }
        }
        let h = DensityMap::new(n, values).unwrap();
        let img = image_from_od(&truth, &h, width, height);
        (truth, h, img)
    }

    #[test]
    fn objective_is_monotone() {
        let (_, _, img) = two_stain_fixture();
        let sep = separate(&img, &SeparationParams::default()).unwrap();
        for pair in sep.objective.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
        }
        assert!(sep.stains.is_valid());
        assert!(sep.density.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn separation_is_deterministic() {
        let (_, _, img) = two_stain_fixture();
        let a = separate(&img, &SeparationParams::default()).unwrap();
        let b = separate(&img, &SeparationParams::default()).unwrap();
        assert_eq!(a.stains, b.stains);
        assert_eq!(a.density, b.density);
    }

    #[test]
    fn recovers_generating_basis() {
        let (truth, _, img) = two_stain_fixture();
        let sep = separate(&img, &SeparationParams::default()).unwrap();
        assert!(!sep.collapsed);
        for i in 0..2 {
            let cos = dot3(&truth.column(i), &sep.stains.column(i));
            assert!(cos > 0.99, "column {i}: cosine {cos}");
        }
    }

    #[test]
    fn single_stain_leaves_second_row_empty() {
        let truth = [0.62, 0.72, 0.31];
        let (width, height) = (16, 16);
        let pixels: Vec<u8> = (0..width * height)
            .flat_map(|p| {
                let density = 0.2 + 1.2 * (p as f64 / (width * height) as f64);
                truth.map(|w| (255.0 * (-w / l2(&truth) * density).exp()).round() as u8)
            })
            .collect();
        let img = RgbImage::new(width, height, pixels).unwrap();
        let sep = separate(&img, &SeparationParams::default()).unwrap();
        let row1: f64 = sep.density.row(0).iter().sum();
        let row2: f64 = sep.density.row(1).iter().sum();
        assert!(row2 < 1e-3 * row1, "row sums {row1} {row2}");
        assert!(sep.collapsed);
    }

    #[test]
    fn reconstruction_depends_only_on_product() {
        let (_, h, _) = two_stain_fixture();
        let w = StainMatrix::from_columns([[0.6, 0.7, 0.3], [0.1, 0.9, 0.2]]).unwrap();
        // Scale w columns by D and h rows by 1/D, then renormalize columns
        // (which multiplies h rows back by D).
        let d = [2.5, 0.4];
        let scaled_cols = [0, 1].map(|i| w.column(i).map(|v| v * d[i]));
        let mut scaled_h: Vec<f64> = h.values().to_vec();
        for (i, di) in d.iter().enumerate() {
            let norm = l2(&scaled_cols[i]);
            for v in &mut scaled_h[i * h.cols()..(i + 1) * h.cols()] {
                *v = *v / di * norm;
            }
        }
        let w2 = StainMatrix::from_columns(scaled_cols).unwrap();
        let h2 = DensityMap::new(h.cols(), scaled_h).unwrap();
        let a = model_optical_density(&w, &h);
        let b = model_optical_density(&w2, &h2);
        for (x, y) in a.iter().zip(&b) {
            for c in 0..3 {
                assert!((x[c] - y[c]).abs() < 1e-12);
            }
        }
        assert_eq!(
            reconstruct(&w, &h, 24, 24).unwrap(),
            reconstruct(&w2, &h2, 24, 24).unwrap()
        );
    }
}
