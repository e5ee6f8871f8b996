//! Centered 2-D Fourier transforms, annular band decomposition and the
//! mid-frequency band-pass filter.
//!
//! Conventions: the forward transform is unnormalized, the inverse carries the
//! `1/H²` factor, and spectra are stored shifted so that the zero-frequency
//! coefficient sits at `(⌊H/2⌋, ⌊H/2⌋)`.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::image::Image;

/// Relative bound on the imaginary residue accepted when converting a
/// spectrum back to a real plane.
pub const REALNESS_TOLERANCE: f64 = 1e-8;

struct Workspace {
    planner: FftPlanner<f64>,
    scratch: Vec<Complex64>,
    tmp: Vec<Complex64>,
}

thread_local! {
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace {
        planner: FftPlanner::new(),
        scratch: Vec::new(),
        tmp: Vec::new(),
    });
}

/// A centered `size × size` complex spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    size: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(size: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Dimension(format!(
                "spectrum of size {size} needs {} coefficients, got {}",
                size * size,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![Complex64::new(0.0, 0.0); size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.size + col]
    }

    /// Index of the zero-frequency coefficient along each axis.
    pub fn center(&self) -> usize {
        self.size / 2
    }

    /// `self - other`, coefficientwise.
    pub fn sub(&self, other: &Spectrum) -> Result<Spectrum> {
        if self.size != other.size {
            return Err(Error::Dimension("spectrum sizes differ".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Spectrum {
            size: self.size,
            data,
        })
    }

    /// Keeps coefficients where `keep[idx]` holds and zeroes the rest.
    pub fn masked(&self, keep: impl Fn(usize) -> bool) -> Spectrum {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &z)| if keep(i) { z } else { Complex64::new(0.0, 0.0) })
            .collect();
        Spectrum {
            size: self.size,
            data,
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    for (r, row) in src.chunks_exact(n).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            dst[c * n + r] = v;
        }
    }
}

/// In-place 2-D transform of a row-major `n × n` buffer (no normalization).
fn fft2_in_place(buf: &mut [Complex64], n: usize, direction: FftDirection) {
    WORKSPACE.with(|ws| {
        let ws = &mut *ws.borrow_mut();
        let fft = ws.planner.plan_fft(n, direction);
        ws.scratch
            .resize(fft.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        ws.tmp.resize(n * n, Complex64::new(0.0, 0.0));
        fft.process_with_scratch(buf, &mut ws.scratch);
        transpose(buf, &mut ws.tmp, n);
        fft.process_with_scratch(&mut ws.tmp, &mut ws.scratch);
        transpose(&ws.tmp, buf, n);
    });
}

#[inline]
fn shift_index(i: usize, n: usize) -> usize {
    (i + n / 2) % n
}

#[inline]
fn unshift_index(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

/// Forward transform of one square real plane into a centered spectrum.
pub fn fft2_plane(plane: &[f64], size: usize) -> Result<Spectrum> {
    if plane.len() != size * size {
        return Err(Error::Dimension(format!(
            "plane of {} values is not {size}x{size}",
            plane.len()
        )));
    }
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, size, FftDirection::Forward);
    let mut data = vec![Complex64::new(0.0, 0.0); size * size];
    for r in 0..size {
        let sr = shift_index(r, size);
        for c in 0..size {
            data[sr * size + shift_index(c, size)] = buf[r * size + c];
        }
    }
    Ok(Spectrum { size, data })
}

/// Inverse transform of a centered spectrum, keeping the complex result.
pub fn ifft2_complex(spectrum: &Spectrum) -> Vec<Complex64> {
    let n = spectrum.size;
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..n {
        let ur = unshift_index(r, n);
        for c in 0..n {
            buf[ur * n + unshift_index(c, n)] = spectrum.data[r * n + c];
        }
    }
    fft2_in_place(&mut buf, n, FftDirection::Inverse);
    let norm = 1.0 / (n * n) as f64;
    for v in &mut buf {
        *v *= norm;
    }
    buf
}

/// Inverse transform to a real plane, failing if the discarded imaginary
/// residue exceeds [`REALNESS_TOLERANCE`] relative to the real part.
pub fn ifft2_plane(spectrum: &Spectrum) -> Result<Vec<f64>> {
    let complex = ifft2_complex(spectrum);
    let (max_re, max_im) = complex.iter().fold((0.0f64, 0.0f64), |(re, im), z| {
        (re.max(z.re.abs()), im.max(z.im.abs()))
    });
    if max_im > REALNESS_TOLERANCE * max_re.max(1e-6) {
        return Err(Error::Numeric(format!(
            "inverse transform is not real: max |Im| {max_im:e} vs max |Re| {max_re:e}"
        )));
    }
    Ok(complex.into_iter().map(|z| z.re).collect())
}

/// Per-channel forward transform of a square image.
pub fn dft2(image: &Image) -> Result<Vec<Spectrum>> {
    if !image.is_square() {
        return Err(Error::Dimension(format!(
            "dft2 needs a square image, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    image
        .planes()
        .map(|p| fft2_plane(p, image.height()))
        .collect()
}

/// Inverse transform of a single-channel spectrum. The result is not clamped.
pub fn idft2(spectrum: &Spectrum) -> Result<Image> {
    let n = spectrum.size;
    Image::new(n, n, 1, ifft2_plane(spectrum)?)
}

/// Inverse transform of one spectrum per channel.
pub fn idft2_channels(spectra: &[Spectrum]) -> Result<Image> {
    let n = spectra
        .first()
        .ok_or_else(|| Error::Dimension("no spectra".into()))?
        .size;
    let mut planes = Vec::with_capacity(spectra.len());
    for s in spectra {
        if s.size != n {
            return Err(Error::Dimension("spectra sizes differ".into()));
        }
        planes.push(ifft2_plane(s)?);
    }
    Image::from_planes(n, n, planes)
}

/// Normalized distance of every centered grid index from the zero-frequency
/// coefficient; the farthest index (a corner) maps to exactly 1.
pub fn normalized_radius(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let d_max = (2.0 * c * c).sqrt();
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            out.push((di * di + dj * dj).sqrt() / d_max);
        }
    }
    out
}

/// `true` when normalized radius `d` falls in `(lo, hi]`; the zero-frequency
/// point is in range exactly when `lo == 0`.
#[inline]
pub fn in_radial_band(d: f64, lo: f64, hi: f64) -> bool {
    (d > lo && d <= hi) || (d == 0.0 && lo == 0.0)
}

/// Parses a `lo:hi` radial band with `0 <= lo < hi <= 1`.
pub fn parse_band(text: &str) -> Result<(f64, f64)> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| Error::Format(format!("expected lo:hi, got {text:?}")))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad lower edge {lo:?}")))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad upper edge {hi:?}")))?;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Format(format!(
            "band edges must satisfy 0 <= lo < hi <= 1, got {lo}:{hi}"
        )));
    }
    Ok((lo, hi))
}

/// Assignment of every grid index of a `size × size` spectrum to one of
/// `n_bands` annuli of equal radial width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandPartition {
    size: usize,
    n_bands: usize,
    /// Zero-based band index per grid index.
    assignment: Vec<usize>,
}

impl BandPartition {
    pub fn new(size: usize, n_bands: usize) -> Result<Self> {
        if n_bands < 1 {
            return Err(Error::Parameter("band count must be at least 1".into()));
        }
        let nb = n_bands as f64;
        let assignment = normalized_radius(size)
            .into_iter()
            .map(|d| {
                // band n (1-based) holds d in ((n-1)/N, n/N]; DC goes to band 1
                let mut n = ((d * nb).ceil() as usize).clamp(1, n_bands);
                while n > 1 && d <= (n - 1) as f64 / nb {
                    n -= 1;
                }
                while n < n_bands && d > n as f64 / nb {
                    n += 1;
                }
                n - 1
            })
            .collect();
        Ok(Self {
            size,
            n_bands,
            assignment,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    /// Zero-based band of the coefficient at flat index `idx`.
    pub fn band_of(&self, idx: usize) -> usize {
        self.assignment[idx]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Number of grid indices in each band.
    pub fn band_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_bands];
        for &b in &self.assignment {
            counts[b] += 1;
        }
        counts
    }

    fn check(&self, spectrum: &Spectrum) -> Result<()> {
        if spectrum.size != self.size {
            return Err(Error::Dimension(format!(
                "partition is for size {}, spectrum has size {}",
                self.size, spectrum.size
            )));
        }
        Ok(())
    }

    /// Spectrum restricted to zero-based band `band`.
    pub fn band(&self, spectrum: &Spectrum, band: usize) -> Result<Spectrum> {
        self.check(spectrum)?;
        Ok(spectrum.masked(|i| self.assignment[i] == band))
    }

    pub fn decompose(&self, spectrum: &Spectrum) -> Result<BandStack> {
        self.check(spectrum)?;
        let mut bands = vec![Spectrum::zeros(self.size); self.n_bands];
        for (i, &z) in spectrum.data.iter().enumerate() {
            bands[self.assignment[i]].data[i] = z;
        }
        Ok(BandStack { bands })
    }
}

/// The `N` band-limited spectra produced by [`decompose`].
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    bands: Vec<Spectrum>,
}

impl BandStack {
    pub fn from_bands(bands: Vec<Spectrum>) -> Result<Self> {
        let first = bands
            .first()
            .ok_or_else(|| Error::Dimension("band stack is empty".into()))?;
        if bands.iter().any(|b| b.size != first.size) {
            return Err(Error::Dimension("bands have different sizes".into()));
        }
        Ok(Self { bands })
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[Spectrum] {
        &self.bands
    }

    pub fn into_bands(self) -> Vec<Spectrum> {
        self.bands
    }
}

/// Splits a centered spectrum into `n_bands` annular bands.
pub fn decompose(spectrum: &Spectrum, n_bands: usize) -> Result<BandStack> {
    BandPartition::new(spectrum.size, n_bands)?.decompose(spectrum)
}

/// Sums a stack of bands back into one spectrum.
pub fn compose(stack: &BandStack) -> Result<Spectrum> {
    compose_bands(stack.bands())
}

pub fn compose_bands(bands: &[Spectrum]) -> Result<Spectrum> {
    let first = bands
        .first()
        .ok_or_else(|| Error::Dimension("cannot compose zero bands".into()))?;
    let mut out = Spectrum::zeros(first.size);
    for b in bands {
        if b.size != first.size {
            return Err(Error::Dimension("bands have different sizes".into()));
        }
        for (o, z) in out.data.iter_mut().zip(&b.data) {
            *o += z;
        }
    }
    Ok(out)
}

fn check_band_edges(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Parameter(format!(
            "band edges must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

/// Radial band-pass filter keeping normalized radii in `(lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPass {
    size: usize,
    lo: f64,
    hi: f64,
    keep: Vec<bool>,
}

impl BandPass {
    pub fn new(size: usize, lo: f64, hi: f64) -> Result<Self> {
        check_band_edges(lo, hi)?;
        let keep = normalized_radius(size)
            .into_iter()
            .map(|d| in_radial_band(d, lo, hi))
            .collect();
        Ok(Self { size, lo, hi, keep })
    }

    pub fn edges(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn keeps(&self, idx: usize) -> bool {
        self.keep[idx]
    }

    pub fn apply_spectrum(&self, spectrum: &Spectrum) -> Spectrum {
        spectrum.masked(|i| self.keep[i])
    }

    pub fn apply_plane(&self, plane: &[f64]) -> Result<Vec<f64>> {
        let z = fft2_plane(plane, self.size)?;
        ifft2_plane(&self.apply_spectrum(&z))
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        if !image.is_square() || image.height() != self.size {
            return Err(Error::Dimension(format!(
                "band-pass built for {0}x{0}, image is {1}x{2}",
                self.size,
                image.height(),
                image.width()
            )));
        }
        let planes = image
            .planes()
            .map(|p| self.apply_plane(p))
            .collect::<Result<Vec<_>>>()?;
        Image::from_planes(self.size, self.size, planes)
    }
}

/// Keeps only spectral content with normalized radius in `(lo, hi]`.
/// Non-square inputs are resized to square and back.
pub fn bandpass(image: &Image, lo: f64, hi: f64) -> Result<Image> {
    check_band_edges(lo, hi)?;
    let (square, dims) = resize_to_square(image);
    let filtered = BandPass::new(square.height(), lo, hi)?.apply(&square)?;
    Ok(restore_size(&filtered, dims))
}

/// Original `(height, width)` recorded by [`resize_to_square`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OriginalDims {
    pub height: usize,
    pub width: usize,
}

fn bilinear_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    // align-corners sampling: endpoints map to endpoints
    let scale = |d: usize, s: usize| {
        if d > 1 {
            (s - 1) as f64 / (d - 1) as f64
        } else {
            0.0
        }
    };
    let (ry, rx) = (scale(dh, sh), scale(dw, sw));
    let mut out = Vec::with_capacity(dh * dw);
    for i in 0..dh {
        let y = i as f64 * ry;
        let y0 = (y.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fy = y - y0 as f64;
        for j in 0..dw {
            let x = j as f64 * rx;
            let x0 = (x.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    if image.height() == height && image.width() == width {
        return image.clone();
    }
    let planes = image
        .planes()
        .map(|p| bilinear_plane(p, image.height(), image.width(), height, width))
        .collect();
    Image::from_planes(height, width, planes).expect("bilinear resize preserves validity")
}

/// Bilinearly up-samples the short side to match the long side.
pub fn resize_to_square(image: &Image) -> (Image, OriginalDims) {
    let dims = OriginalDims {
        height: image.height(),
        width: image.width(),
    };
    let side = dims.height.max(dims.width);
    (resize_bilinear(image, side, side), dims)
}

/// Bilinearly resamples back to the dimensions recorded by [`resize_to_square`].
pub fn restore_size(image: &Image, dims: OriginalDims) -> Image {
    resize_bilinear(image, dims.height, dims.width)
}
