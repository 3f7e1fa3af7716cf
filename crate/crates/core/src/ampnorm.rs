//! Fourier amplitude normalization baseline.
//!
//! Each client folds the amplitude spectra of its images into an
//! exponential moving average over batches. The server averages the client
//! amplitudes, and every image is rebuilt from that average amplitude and
//! its own phase.
//!
//! The batch update is `A <- (1 - v) A + (v / B) sum_batch |F(x)|`, starting
//! from `A = 0`. A trailing partial batch is still divided by `B`.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::stain::RgbImage;
use crate::{Error, Result};

/// Per-channel row-major planes of an image-sized spectrum.
pub type Planes = [Vec<f64>; 3];

pub const DEFAULT_DECAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub amplitude: Planes,
    pub phase: Planes,
}

struct Fft2 {
    width: usize,
    height: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(width: usize, height: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let (row, col) = if inverse {
            (
                planner.plan_fft_inverse(width),
                planner.plan_fft_inverse(height),
            )
        } else {
            (
                planner.plan_fft_forward(width),
                planner.plan_fft_forward(height),
            )
        };
        Fft2 {
            width,
            height,
            row,
            col,
        }
    }

    /// In-place unnormalized 2-D transform of a row-major plane.
    fn run(&self, data: &mut [Complex<f64>]) {
        let (w, h) = (self.width, self.height);
        self.row.process(data);
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            self.col.process(&mut column);
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
    }
}

/// Amplitude and phase of the 2-D DFT of each channel.
pub fn fft_decompose(img: &RgbImage) -> Spectrum {
    let (w, h) = (img.width(), img.height());
    let fft = Fft2::new(w, h, false);
    let mut amplitude: Planes = Default::default();
    let mut phase: Planes = Default::default();
    for c in 0..3 {
        let mut data: Vec<Complex<f64>> = img
            .channel(c)
            .into_iter()
            .map(|v| Complex::new(v as f64, 0.0))
            .collect();
        fft.run(&mut data);
        amplitude[c] = data.iter().map(|z| z.norm()).collect();
        phase[c] = data.iter().map(|z| z.arg()).collect();
    }
    Spectrum {
        width: w,
        height: h,
        amplitude,
        phase,
    }
}

/// Inverse transform of `amplitude * exp(i phase)`; real part, unquantized.
pub fn compose(amplitude: &Planes, phase: &Planes, width: usize, height: usize) -> Result<Planes> {
    let n = width * height;
    if amplitude.iter().chain(phase).any(|p| p.len() != n) {
        return Err(Error::Shape(format!(
            "spectrum planes do not match {width}x{height}"
        )));
    }
    let fft = Fft2::new(width, height, true);
    let mut out: Planes = Default::default();
    for c in 0..3 {
        let mut data: Vec<Complex<f64>> = amplitude[c]
            .iter()
            .zip(&phase[c])
            .map(|(&a, &p)| Complex::from_polar(a, p))
            .collect();
        fft.run(&mut data);
        out[c] = data.iter().map(|z| z.re / n as f64).collect();
    }
    Ok(out)
}

/// Rounds and clamps float planes into an 8-bit image.
pub fn quantize(planes: &Planes, width: usize, height: usize) -> Result<RgbImage> {
    let n = width * height;
    let mut pixels = Vec::with_capacity(3 * n);
    for p in 0..n {
        for plane in planes {
            pixels.push(plane[p].round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::new(width, height, pixels)
}

/// One client's moving-average amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeState {
    pub width: usize,
    pub height: usize,
    pub avg_amplitude: Planes,
    pub decay: f64,
    pub batch_size: usize,
}

/// Folds a client's images, in order, into the batch-wise moving average.
pub fn client_amplitude(
    images: &[RgbImage],
    batch_size: usize,
    decay: f64,
) -> Result<AmplitudeState> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "decay must be in (0, 1], got {decay}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let first = images.first().ok_or(Error::EmptyBatch)?;
    if let Some(bad) = images.iter().find(|i| !i.same_dims(first)) {
        return Err(Error::Shape(format!(
            "mixed image sizes {}x{} and {}x{}",
            first.width(),
            first.height(),
            bad.width(),
            bad.height()
        )));
    }
    let n = first.num_pixels();
    let mut avg: Planes = std::array::from_fn(|_| vec![0.0; n]);
    for batch in images.chunks(batch_size) {
        let spectra: Vec<Spectrum> = batch.par_iter().map(fft_decompose).collect();
        let scale = decay / batch_size as f64;
        for (c, plane) in avg.iter_mut().enumerate() {
            for (i, a) in plane.iter_mut().enumerate() {
                let sum: f64 = spectra.iter().map(|s| s.amplitude[c][i]).sum();
                *a = (1.0 - decay) * *a + scale * sum;
            }
        }
    }
    Ok(AmplitudeState {
        width: first.width(),
        height: first.height(),
        avg_amplitude: avg,
        decay,
        batch_size,
    })
}

/// Plain mean of the client amplitudes.
pub fn federated_amplitude(states: &[AmplitudeState]) -> Result<AmplitudeState> {
    let first = states.first().ok_or(Error::EmptyBatch)?;
    if let Some(bad) = states
        .iter()
        .find(|s| (s.width, s.height) != (first.width, first.height))
    {
        return Err(Error::Shape(format!(
            "amplitude {}x{} does not match {}x{}",
            bad.width, bad.height, first.width, first.height
        )));
    }
    let k = states.len() as f64;
    let avg: Planes = std::array::from_fn(|c| {
        (0..first.avg_amplitude[c].len())
            .map(|i| states.iter().map(|s| s.avg_amplitude[c][i]).sum::<f64>() / k)
            .collect()
    });
    Ok(AmplitudeState {
        avg_amplitude: avg,
        ..first.clone()
    })
}

/// Rebuilds `img` from `amplitude` and the image's own phase, before quantization.
pub fn normalize_planes(img: &RgbImage, amplitude: &AmplitudeState) -> Result<Planes> {
    if (img.width(), img.height()) != (amplitude.width, amplitude.height) {
        return Err(Error::Shape(format!(
            "image {}x{} does not match amplitude {}x{}",
            img.width(),
            img.height(),
            amplitude.width,
            amplitude.height
        )));
    }
    let spec = fft_decompose(img);
    compose(
        &amplitude.avg_amplitude,
        &spec.phase,
        img.width(),
        img.height(),
    )
}

pub fn normalize_image(img: &RgbImage, amplitude: &AmplitudeState) -> Result<RgbImage> {
    quantize(
        &normalize_planes(img, amplitude)?,
        img.width(),
        img.height(),
    )
}

/// Runs the whole baseline: per-client amplitudes, federation average, and
/// per-image replacement. Output mirrors the input nesting.
pub fn normalize_corpus(
    corpora: &[Vec<RgbImage>],
    batch_size: usize,
    decay: f64,
) -> Result<Vec<Vec<RgbImage>>> {
    let states = corpora
        .iter()
        .map(|imgs| client_amplitude(imgs, batch_size, decay))
        .collect::<Result<Vec<_>>>()?;
    let global = federated_amplitude(&states)?;
    corpora
        .iter()
        .map(|imgs| {
            imgs.par_iter()
                .map(|img| normalize_image(img, &global))
                .collect()
        })
        .collect()
}
