//! Seeded synthetic two-domain classification data.
//!
//! Class identity lives in smooth low-frequency shapes. Each domain adds its
//! own fixed band-limited high-frequency texture and a brightness offset,
//! so before clamping the domain gap sits in bands that carry no class
//! information.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{self, write_atomic};
use crate::seed::rng_for;
use crate::spectral::{fft2_plane, ifft2_plane, in_radial_band, normalized_radius};

/// Upper normalized radius of the band carrying class information.
pub const SEMANTIC_CUTOFF: f64 = 1.0 / 3.0;

/// Texture RMS in both domains unless configured otherwise.
pub const DEFAULT_AMPLITUDE: f64 = 0.6;

/// Pixel level under the shapes.
pub const BACKGROUND: f64 = 0.2;

/// Shapes get a contrast drawn uniformly from this range.
pub const CONTRAST: (f64, f64) = (0.5, 0.7);

/// Shape templates, in class order.
pub const SHAPES: [&str; 8] = [
    "disk", "bar", "cross", "ring", "column", "frame", "diagonal", "dots",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    /// `(lo, hi]` normalized-radius band of the texture.
    pub texture_band: (f64, f64),
    /// RMS amplitude of the texture before clamping.
    pub amplitude: f64,
    /// Seeds the domain's texture pattern, shared by all its images.
    pub texture_seed: u64,
    pub brightness: f64,
}

impl DomainSpec {
    pub fn default_source() -> Self {
        Self {
            texture_band: (0.6, 0.8),
            amplitude: DEFAULT_AMPLITUDE,
            texture_seed: 1,
            brightness: 0.0,
        }
    }

    pub fn default_target() -> Self {
        Self {
            texture_band: (0.7, 0.9),
            amplitude: DEFAULT_AMPLITUDE,
            texture_seed: 2,
            brightness: 0.05,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let (lo, hi) = self.texture_band;
        if !(lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "{name} texture band ({lo}, {hi}] is not a valid band"
            )));
        }
        if lo < SEMANTIC_CUTOFF {
            return Err(Error::Config(format!(
                "{name} texture band ({lo}, {hi}] overlaps the semantic band (0, {SEMANTIC_CUTOFF:.4}]"
            )));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("{name} amplitude must be >= 0")));
        }
        if !self.brightness.is_finite() {
            return Err(Error::Config(format!("{name} brightness must be finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub classes: usize,
    /// Images per class in every split.
    pub per_class: usize,
    pub size: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            per_class: 100,
            size: 28,
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=SHAPES.len()).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                SHAPES.len(),
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per-class count must be positive".into()));
        }
        if self.size < 8 {
            return Err(Error::Config(format!(
                "size must be >= 8, got {}",
                self.size
            )));
        }
        self.source.validate("source")?;
        self.target.validate("target")
    }
}

/// Images with optional labels; `None` marks an unlabeled item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label(&self, idx: usize) -> Option<usize> {
        self.labels[idx]
    }

    /// Copy with every label removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            labels: vec![None; self.images.len()],
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for l in self.labels.iter().flatten() {
            counts[*l] += 1;
        }
        counts
    }
}

/// The four splits of one synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source_train: Dataset,
    pub source_test: Dataset,
    /// Target training images; labels are withheld.
    pub target_train: Dataset,
    pub target_test: Dataset,
}

pub const SPLITS: [&str; 4] = ["source_train", "source_test", "target_train", "target_test"];

impl Benchmark {
    pub fn split(&self, name: &str) -> Option<&Dataset> {
        match name {
            "source_train" => Some(&self.source_train),
            "source_test" => Some(&self.source_test),
            "target_train" => Some(&self.target_train),
            "target_test" => Some(&self.target_test),
            _ => None,
        }
    }
}

fn inside(shape: usize, dx: f64, dy: f64, h: f64) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => r <= 0.30 * h,
        1 => dy.abs() <= 0.12 * h && dx.abs() <= 0.38 * h,
        2 => {
            (dx.abs() <= 0.08 * h && dy.abs() <= 0.36 * h)
                || (dy.abs() <= 0.08 * h && dx.abs() <= 0.36 * h)
        }
        3 => (0.20 * h..=0.34 * h).contains(&r),
        4 => dx.abs() <= 0.12 * h && dy.abs() <= 0.38 * h,
        5 => {
            let m = dx.abs().max(dy.abs());
            (0.22 * h..=0.34 * h).contains(&m)
        }
        6 => (dx - dy).abs() <= 0.12 * h && r <= 0.40 * h,
        _ => {
            let d1 = ((dx - 0.2 * h).powi(2) + dy * dy).sqrt();
            let d2 = ((dx + 0.2 * h).powi(2) + dy * dy).sqrt();
            d1.min(d2) <= 0.14 * h
        }
    }
}

/// Keeps only spectral content of `plane` in `(lo, hi]` (DC included when `lo == 0`).
fn band_limit(plane: &[f64], size: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let radius = normalized_radius(size);
    let z = fft2_plane(plane, size)?;
    ifft2_plane(&z.masked(|i| in_radial_band(radius[i], lo, hi)))
}

fn unit_rms(mut v: Vec<f64>) -> Vec<f64> {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
    v
}

/// Unit-RMS Gaussian noise band-limited to `band`, before amplitude scaling.
pub fn band_limited_noise<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    band: (f64, f64),
) -> Result<Vec<f64>> {
    let white: Vec<f64> = (0..size * size)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(unit_rms(band_limit(&white, size, band.0, band.1)?))
}

/// A domain's texture: its unit-RMS pattern scaled by the amplitude.
pub fn domain_texture(domain: &DomainSpec, size: usize) -> Result<Vec<f64>> {
    let mut rng = rng_for(domain.texture_seed, &[0xD0]);
    let pattern = band_limited_noise(&mut rng, size, domain.texture_band)?;
    Ok(pattern.into_iter().map(|v| domain.amplitude * v).collect())
}

/// Band-limited clean shape for `class` with a sub-pixel-free translation.
pub fn shape_plane(
    class: usize,
    size: usize,
    shift: (i32, i32),
    contrast: f64,
) -> Result<Vec<f64>> {
    let h = size as f64;
    let c = (size / 2) as f64;
    let mut raw = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c - shift.0 as f64;
            let dx = j as f64 - c - shift.1 as f64;
            if inside(class, dx, dy, h) {
                raw[i * size + j] = contrast;
            }
        }
    }
    band_limit(&raw, size, 0.0, SEMANTIC_CUTOFF)
}

fn render(
    cfg: &DataConfig,
    domain: &DomainSpec,
    texture: &[f64],
    class: usize,
    split: u64,
    idx: u64,
) -> Result<Image> {
    let mut rng = rng_for(cfg.seed, &[split, idx]);
    let jitter = (cfg.size / 14).max(1) as i32;
    let shift = (
        rng.random_range(-jitter..=jitter),
        rng.random_range(-jitter..=jitter),
    );
    let contrast = rng.random_range(CONTRAST.0..CONTRAST.1);
    let shape = shape_plane(class, cfg.size, shift, contrast)?;
    let data = shape
        .iter()
        .zip(texture)
        .map(|(s, t)| {
            let v = (BACKGROUND + s + t + domain.brightness).clamp(0.0, 1.0);
            // stored as f32 so FIMG round-trips exactly
            v as f32 as f64
        })
        .collect();
    Image::new(cfg.size, cfg.size, 1, data)
}

fn generate_split(
    cfg: &DataConfig,
    domain: &DomainSpec,
    texture: &[f64],
    split: u64,
    labeled: bool,
) -> Result<Dataset> {
    let n = cfg.classes * cfg.per_class;
    let images = (0..n)
        .into_par_iter()
        .map(|i| render(cfg, domain, texture, i % cfg.classes, split, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|i| labeled.then_some(i % cfg.classes)).collect();
    Ok(Dataset { images, labels })
}

/// Builds the source train/test and target train/test splits, each with
/// `per_class` images per class.
pub fn generate(cfg: &DataConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let src = domain_texture(&cfg.source, cfg.size)?;
    let tgt = domain_texture(&cfg.target, cfg.size)?;
    Ok(Benchmark {
        source_train: generate_split(cfg, &cfg.source, &src, 0, true)?,
        source_test: generate_split(cfg, &cfg.source, &src, 1, true)?,
        target_train: generate_split(cfg, &cfg.target, &tgt, 2, false)?,
        target_test: generate_split(cfg, &cfg.target, &tgt, 3, true)?,
    })
}

/// Parses `index.txt`: one `<path> <label|->` entry per line.
pub fn parse_index(text: &str) -> Result<Vec<(String, Option<usize>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (path, label) = line.trim_end().rsplit_once(' ').ok_or_else(|| {
                Error::Format(format!("index line {}: expected `<path> <label|->`", n + 1))
            })?;
            if path.is_empty() {
                return Err(Error::Format(format!("index line {}: empty path", n + 1)));
            }
            let label = match label {
                "-" => None,
                l => Some(l.parse::<usize>().map_err(|_| {
                    Error::Format(format!("index line {}: bad label {l:?}", n + 1))
                })?),
            };
            Ok((path.to_string(), label))
        })
        .collect()
}

pub fn format_index(entries: &[(String, Option<usize>)]) -> String {
    entries
        .iter()
        .map(|(p, l)| match l {
            Some(l) => format!("{p} {l}\n"),
            None => format!("{p} -\n"),
        })
        .collect()
}

/// Writes FIMG images and an `index.txt` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("{i:05}.fimg");
        io::save_fimg(img, &dir.join(&name))?;
        entries.push((name, *label));
    }
    write_atomic(&dir.join("index.txt"), format_index(&entries).as_bytes())
}

/// Reads `dir/index.txt` and the images it lists (paths relative to `dir`).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut ds = Dataset::default();
    for (path, label) in parse_index(&text)? {
        let p: PathBuf = dir.join(path);
        ds.images.push(io::load_image(&p)?);
        ds.labels.push(label);
    }
    Ok(ds)
}

pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    for name in SPLITS {
        save_dataset(b.split(name).expect("known split"), &dir.join(name))?;
    }
    Ok(())
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    Ok(Benchmark {
        source_train: load_dataset(&dir.join("source_train"))?,
        source_test: load_dataset(&dir.join("source_test"))?,
        target_train: load_dataset(&dir.join("target_train"))?,
        target_test: load_dataset(&dir.join("target_test"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            per_class: 3,
            size: 16,
            ..DataConfig::default()
        }
    }

    #[test]
    fn class_balance_is_exact() {
        let b = generate(&small()).unwrap();
        for name in SPLITS {
            let ds = b.split(name).unwrap();
            assert_eq!(ds.len(), 12);
        }
        assert_eq!(b.source_train.class_counts(4), vec![3; 4]);
        assert_eq!(b.target_test.class_counts(4), vec![3; 4]);
        assert!(b.target_train.labels.iter().all(Option::is_none));
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = DataConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn overlapping_texture_band_is_rejected() {
        let mut cfg = small();
        cfg.source.texture_band = (0.2, 0.5);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.target.texture_band = (0.8, 0.7);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn index_parsing() {
        let entries = parse_index("a.fimg 3\nsub dir/b.fimg -\n\n").unwrap();
        assert_eq!(
            entries,
            vec![("a.fimg".into(), Some(3)), ("sub dir/b.fimg".into(), None)]
        );
        assert_eq!(parse_index(&format_index(&entries)).unwrap(), entries);
        assert!(parse_index("a.fimg x\n").is_err());
        assert!(parse_index("nolabel\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&small()).unwrap();
        save_benchmark(&b, dir.path()).unwrap();
        assert_eq!(load_benchmark(dir.path()).unwrap(), b);
    }

    #[test]
    fn missing_image_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("index.txt"), "gone.fimg 0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
        assert!(load_dataset(&dir.path().join("nowhere")).is_err());
    }
}
