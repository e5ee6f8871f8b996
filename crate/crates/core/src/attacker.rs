//! Fourier attacker: swaps gated frequency bands of an input with the
//! corresponding bands of a reference image drawn from the target domain.
//!
//! For a square image `x` and reference `x_ref` with centered spectra `z` and
//! `z_ref`, band `n` is replaced when `g_n = 1`:
//!
//! ```text
//! ẑ^n = (1 - g_n) z^n + g_n z_ref^n,   x^FAA = idft2(Σ_n ẑ^n)
//! ```
//!
//! which is linear in the gate: `x^FAA = x + Σ_n g_n Δ_n` with
//! `Δ_n = idft2(z_ref^n - z^n)`. Samples keep `z_ref - z`, from which the
//! gate gradient `⟨∂L/∂x, Δ_n⟩` is read off in the frequency domain.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gate::{gate_forward, GateParams, GateSample};
use crate::image::Image;
use crate::spectral::{
    self, fft2_plane, ifft2_plane, resize_to_square, restore_size, BandPartition, BandPass,
    OriginalDims, Spectrum,
};

/// Default band-pass edges for the semantic-consistency filter.
pub const DEFAULT_REC_BAND: (f64, f64) = (1.0 / 6.0, 0.5);

/// Learnable and fixed settings of the attacker.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerParams {
    pub gate: GateParams,
    /// Fraction `p` of bands that may be perturbed before the budget hinge fires.
    pub budget: f64,
    /// `(lo, hi]` normalized-radius passband of the consistency filter.
    pub rec_band: (f64, f64),
}

impl AttackerParams {
    pub fn new(gate: GateParams, budget: f64, rec_band: (f64, f64)) -> Result<Self> {
        if !(budget > 0.0 && budget <= 1.0) {
            return Err(Error::Parameter(format!(
                "budget must be in (0, 1], got {budget}"
            )));
        }
        let (lo, hi) = rec_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Parameter(format!(
                "rec band must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(Self {
            gate,
            budget,
            rec_band,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.gate.n_bands()
    }
}

/// Attacker parameters bound to a working resolution, with the band partition
/// and consistency filter precomputed.
#[derive(Debug, Clone)]
pub struct Attacker {
    params: AttackerParams,
    partition: BandPartition,
    rec_filter: BandPass,
}

impl Attacker {
    /// `size` is the side of the square working grid.
    pub fn new(params: AttackerParams, size: usize) -> Result<Self> {
        let partition = BandPartition::new(size, params.n_bands())?;
        let rec_filter = BandPass::new(size, params.rec_band.0, params.rec_band.1)?;
        Ok(Self {
            params,
            partition,
            rec_filter,
        })
    }

    pub fn params(&self) -> &AttackerParams {
        &self.params
    }

    pub fn gate(&self) -> &GateParams {
        &self.params.gate
    }

    pub fn gate_mut(&mut self) -> &mut GateParams {
        &mut self.params.gate
    }

    pub fn partition(&self) -> &BandPartition {
        &self.partition
    }

    pub fn rec_filter(&self) -> &BandPass {
        &self.rec_filter
    }

    pub fn size(&self) -> usize {
        self.partition.size()
    }

    pub fn n_bands(&self) -> usize {
        self.params.n_bands()
    }

    pub fn budget(&self) -> f64 {
        self.params.budget
    }

    /// Draws a gate sample and a reference, then perturbs `x`.
    pub fn attack<R: Rng + ?Sized>(
        &self,
        x: &Image,
        pool: &ReferencePool,
        rng: &mut R,
    ) -> Result<AdversarialSample> {
        let reference = pool.pick(rng)?;
        let gate = gate_forward(&self.params.gate, rng)?;
        self.attack_with(x, pool, reference, gate)
    }

    /// Perturbs `x` with a given reference index and gate draw.
    pub fn attack_with(
        &self,
        x: &Image,
        pool: &ReferencePool,
        reference: usize,
        gate: GateSample,
    ) -> Result<AdversarialSample> {
        let ref_spectra = pool
            .spectra(reference)
            .ok_or_else(|| Error::Parameter(format!("reference {reference} out of range")))?;
        if pool.channels() != x.channels() {
            return Err(Error::Dimension(format!(
                "input has {} channels, references have {}",
                x.channels(),
                pool.channels()
            )));
        }
        let n = self.size();
        let (square, dims) = resize_to_square(x);
        if square.height() != n || pool.size() != n {
            return Err(Error::Dimension(format!(
                "attacker works at {n}x{n}, input squares to {0}x{0}, references are {1}x{1}",
                square.height(),
                pool.size()
            )));
        }
        if gate.n_bands() != self.n_bands() {
            return Err(Error::Dimension(format!(
                "gate sample has {} bands, attacker has {}",
                gate.n_bands(),
                self.n_bands()
            )));
        }
        let spectra = square
            .planes()
            .map(|p| fft2_plane(p, n))
            .collect::<Result<Vec<_>>>()?;
        let diff = BandDiff {
            spectra: spectra
                .iter()
                .zip(ref_spectra)
                .map(|(z, zr)| zr.sub(z))
                .collect::<Result<Vec<_>>>()?,
            dims,
        };
        if !gate.hard().iter().any(|&g| g) {
            // nothing swapped: the spectrum is untouched, so is the image
            return Ok(AdversarialSample {
                image: x.clamped(),
                raw: x.clone(),
                gate,
                reference,
                diff: Some(diff),
            });
        }
        let attacked_sq = self.swap_bands(&spectra, ref_spectra, gate.hard())?;
        let raw = if dims.height == n && dims.width == n {
            attacked_sq
        } else {
            // perturbation is computed on the square grid and resampled back
            let shift = sub_images(&attacked_sq, &square)?;
            add_images(x, &restore_size(&shift, dims))?
        };
        Ok(AdversarialSample {
            image: raw.clamped(),
            raw,
            gate,
            reference,
            diff: Some(diff),
        })
    }

    /// `idft2` of the spectrum whose gated bands come from the reference.
    fn swap_bands(
        &self,
        spectra: &[Spectrum],
        ref_spectra: &[Spectrum],
        hard: &[bool],
    ) -> Result<Image> {
        let n = self.size();
        let mut planes = Vec::with_capacity(spectra.len());
        for (z, zr) in spectra.iter().zip(ref_spectra) {
            let mixed: Vec<_> = z
                .data()
                .iter()
                .zip(zr.data())
                .enumerate()
                .map(|(i, (&a, &b))| {
                    if hard[self.partition.band_of(i)] {
                        b
                    } else {
                        a
                    }
                })
                .collect();
            planes.push(ifft2_plane(&Spectrum::new(n, mixed)?)?);
        }
        Image::from_planes(n, n, planes)
    }

    fn diff_of<'s>(&self, sample: &'s AdversarialSample) -> Result<&'s BandDiff> {
        let diff = sample
            .diff
            .as_ref()
            .ok_or_else(|| Error::State("adversarial sample carries no band differences".into()))?;
        if diff.spectra.first().map(Spectrum::size) != Some(self.size()) {
            return Err(Error::Dimension(
                "sample was not produced at this attacker's resolution".into(),
            ));
        }
        Ok(diff)
    }

    /// `Δ_n` for every band, in the input's resolution.
    pub fn band_deltas(&self, sample: &AdversarialSample) -> Result<Vec<Image>> {
        let diff = self.diff_of(sample)?;
        let n = self.size();
        let sizes = self.partition.band_sizes();
        let mut deltas = Vec::with_capacity(self.n_bands());
        for (band, &size) in sizes.iter().enumerate() {
            let sq = if size == 0 {
                Image::zeros(n, n, diff.spectra.len())?
            } else {
                let planes = diff
                    .spectra
                    .iter()
                    .map(|d| ifft2_plane(&d.masked(|i| self.partition.band_of(i) == band)))
                    .collect::<Result<Vec<_>>>()?;
                Image::from_planes(n, n, planes)?
            };
            deltas.push(restore_size(&sq, diff.dims));
        }
        Ok(deltas)
    }

    /// Gradient of a loss with respect to each gate value, given the loss
    /// gradient with respect to the model-facing (clamped) image.
    ///
    /// Pixels clipped by the clamp pass no gradient.
    pub fn attack_backward(
        &self,
        sample: &AdversarialSample,
        grad_wrt_input: &Image,
    ) -> Result<Vec<f64>> {
        let diff = self.diff_of(sample)?;
        sample.raw.check_same_shape(grad_wrt_input)?;
        let masked: Vec<f64> = grad_wrt_input
            .data()
            .iter()
            .zip(sample.pass_mask())
            .map(|(&g, pass)| if pass { g } else { 0.0 })
            .collect();
        let n = self.size();
        if diff.dims.height != n || diff.dims.width != n {
            return Ok(self
                .band_deltas(sample)?
                .iter()
                .map(|d| d.data().iter().zip(&masked).map(|(a, b)| a * b).sum())
                .collect());
        }
        // ⟨g, idft2(M_n D)⟩ = Re Σ_{k ∈ n} G_k conj(D_k) / H²
        let mut out = vec![0.0; self.n_bands()];
        let assignment = self.partition.assignment();
        for (plane, d) in masked.chunks_exact(n * n).zip(&diff.spectra) {
            let g = fft2_plane(plane, n)?;
            for ((&band, gk), dk) in assignment.iter().zip(g.data()).zip(d.data()) {
                out[band] += (gk * dk.conj()).re;
            }
        }
        let scale = 1.0 / (n * n) as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(out)
    }

    /// Consistency loss between `x` and the unclamped `x^FAA` of `sample`,
    /// with its gradient with respect to each gate value.
    ///
    /// `R(x^FAA) - R(x) = idft2(M_R Σ_n g_n M_n D)`, so both come from the
    /// cached difference `D` without revisiting pixels of `x`.
    pub fn rec_gate_grad(&self, sample: &AdversarialSample) -> Result<(f64, Vec<f64>)> {
        let diff = self.diff_of(sample)?;
        let n = self.size();
        if diff.dims.height != n || diff.dims.width != n {
            return Err(Error::Dimension(
                "gate gradient of the consistency loss needs square inputs".into(),
            ));
        }
        let hard = sample.gate.hard();
        let assignment = self.partition.assignment();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.n_bands()];
        for d in &diff.spectra {
            let selected = d.masked(|i| self.rec_filter.keeps(i) && hard[assignment[i]]);
            let r = ifft2_plane(&selected)?;
            loss += r.iter().map(|v| v.abs()).sum::<f64>();
            let sign: Vec<f64> = r.iter().map(|&v| sign_of(v)).collect();
            let s = fft2_plane(&sign, n)?;
            for (i, (sk, dk)) in s.data().iter().zip(d.data()).enumerate() {
                if self.rec_filter.keeps(i) {
                    grad[assignment[i]] += (sk * dk.conj()).re;
                }
            }
        }
        let m = (n * n * diff.spectra.len()) as f64;
        let scale = 1.0 / (m * (n * n) as f64);
        grad.iter_mut().for_each(|v| *v *= scale);
        Ok((loss / m, grad))
    }

    /// Consistency loss on the attacker's precomputed filter.
    pub fn rec_loss(&self, x: &Image, x_faa: &Image) -> Result<f64> {
        if !x.is_square() {
            return rec_loss(x, x_faa, self.params.rec_band);
        }
        Ok(self.rec_loss_and_grad(x, x_faa)?.0)
    }

    /// Consistency loss and its gradient with respect to `x_faa`, for square
    /// images at the attacker's resolution.
    ///
    /// The filter is a real symmetric operator, so the gradient of
    /// `mean |R(x) - R(x_faa)|` is `R(sign(R(x_faa) - R(x))) / M`.
    pub fn rec_loss_and_grad(&self, x: &Image, x_faa: &Image) -> Result<(f64, Image)> {
        x.check_same_shape(x_faa)?;
        let rx = self.rec_filter.apply(x)?;
        let ra = self.rec_filter.apply(x_faa)?;
        let m = x.data().len() as f64;
        let mut loss = 0.0;
        let mut sign = Vec::with_capacity(rx.data().len());
        for (a, b) in ra.data().iter().zip(rx.data()) {
            let d = a - b;
            loss += d.abs();
            sign.push(sign_of(d));
        }
        let sign_img = Image::new(x.height(), x.width(), x.channels(), sign)?;
        let grad = self.rec_filter.apply(&sign_img)?.map(|v| v / m)?;
        Ok((loss / m, grad))
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sub_images(a: &Image, b: &Image) -> Result<Image> {
    a.check_same_shape(b)?;
    Image::new(
        a.height(),
        a.width(),
        a.channels(),
        a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect(),
    )
}

fn add_images(a: &Image, b: &Image) -> Result<Image> {
    a.check_same_shape(b)?;
    Image::new(
        a.height(),
        a.width(),
        a.channels(),
        a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect(),
    )
}

/// Target-domain images that supply replacement bands.
#[derive(Debug, Clone)]
pub struct ReferencePool {
    images: Vec<Image>,
    spectra: Vec<Vec<Spectrum>>,
    size: usize,
    channels: usize,
}

impl ReferencePool {
    /// Squares every image and caches its spectra.
    pub fn new(images: Vec<Image>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::State("reference pool is empty".into()))?;
        let (size, channels) = (first.height().max(first.width()), first.channels());
        let mut squared = Vec::with_capacity(images.len());
        let mut spectra = Vec::with_capacity(images.len());
        for img in images {
            let (sq, _) = resize_to_square(&img);
            if sq.height() != size || sq.channels() != channels {
                return Err(Error::Dimension(
                    "reference images must share one shape".into(),
                ));
            }
            spectra.push(spectral::dft2(&sq)?);
            squared.push(sq);
        }
        Ok(Self {
            images: squared,
            spectra,
            size,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The squared reference image at `idx`.
    pub fn image(&self, idx: usize) -> Option<&Image> {
        self.images.get(idx)
    }

    pub fn spectra(&self, idx: usize) -> Option<&[Spectrum]> {
        self.spectra.get(idx).map(Vec::as_slice)
    }

    /// Uniform draw with replacement.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.images.is_empty() {
            return Err(Error::State("reference pool is empty".into()));
        }
        Ok(rng.random_range(0..self.images.len()))
    }
}

/// Output of [`Attacker::attack`].
#[derive(Debug, Clone)]
pub struct AdversarialSample {
    /// `raw` clamped to `[0, 1]`; this is what the task model sees.
    pub image: Image,
    /// Unclamped `x^FAA`.
    pub raw: Image,
    pub gate: GateSample,
    pub reference: usize,
    /// `z_ref - z` on the square grid, the source of every `Δ_n`.
    pub diff: Option<BandDiff>,
}

/// Per-channel spectrum difference between the reference and the input.
#[derive(Debug, Clone)]
pub struct BandDiff {
    pub spectra: Vec<Spectrum>,
    pub dims: OriginalDims,
}

impl AdversarialSample {
    /// Pixels where clamping did not alter the raw sample.
    pub fn pass_mask(&self) -> impl Iterator<Item = bool> + '_ {
        self.raw.data().iter().map(|v| (0.0..=1.0).contains(v))
    }
}

/// Consistency loss: mean absolute difference of the band-passed images.
pub fn rec_loss(x: &Image, x_faa: &Image, rec_band: (f64, f64)) -> Result<f64> {
    x.check_same_shape(x_faa)?;
    let rx = spectral::bandpass(x, rec_band.0, rec_band.1)?;
    let ra = spectral::bandpass(x_faa, rec_band.0, rec_band.1)?;
    Ok(ra
        .data()
        .iter()
        .zip(rx.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x.data().len() as f64)
}

/// The quantity the attacker maximizes: task loss minus both penalties.
pub fn attack_objective(task_loss: f64, gate_loss: f64, rec_loss: f64) -> Result<f64> {
    if !(task_loss.is_finite() && gate_loss.is_finite() && rec_loss.is_finite()) {
        return Err(Error::Numeric(format!(
            "attack objective inputs must be finite: ({task_loss}, {gate_loss}, {rec_loss})"
        )));
    }
    Ok(task_loss - gate_loss - rec_loss)
}
