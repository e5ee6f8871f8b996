use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bandswap_core::attacker::{rec_loss, Attacker, AttackerParams, ReferencePool, DEFAULT_REC_BAND};
use bandswap_core::data::{self, DataConfig, DomainSpec};
use bandswap_core::gate::{self, gate_forward, GateParams, GateSample};
use bandswap_core::io::{self, write_atomic};
use bandswap_core::metrics::RunMetrics;
use bandswap_core::model::ModelKind;
use bandswap_core::plot::loss_curves_svg;
use bandswap_core::seed::rng_for;
use bandswap_core::spectral::{self, BandPartition};
use bandswap_core::trainer::{train, TrainConfig};
use bandswap_core::uda::{LossConfig, Mode, UnsupKind};
use bandswap_core::Image;

#[derive(Parser)]
#[command(
    name = "bandswap",
    version,
    about = "Frequency-band swap attacks for domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic two-domain benchmark.
    GenData(GenDataArgs),
    /// Split an image into annular frequency bands.
    Decompose(DecomposeArgs),
    /// Perturb an image with bands from a reference image.
    Attack(AttackArgs),
    /// Train a task model, optionally against the Fourier attacker.
    Train(TrainArgs),
    /// Plot training and target-test loss curves from metrics files.
    Curves(CurvesArgs),
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    spectral::parse_band(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 28)]
    size: usize,
    #[arg(long, value_parser = parse_band, default_value = "0.6:0.8")]
    src_band: (f64, f64),
    #[arg(long, value_parser = parse_band, default_value = "0.7:0.9")]
    tgt_band: (f64, f64),
    /// Texture RMS amplitude for both domains.
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 16)]
    bands: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = 16)]
    bands: usize,
    /// `gate.txt`-style selection to apply.
    #[arg(
        long,
        conflicts_with = "gate_random",
        required_unless_present = "gate_random"
    )]
    gate_file: Option<PathBuf>,
    /// Sample the gate with this per-band perturb probability.
    #[arg(long)]
    gate_random: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_REC_BAND.0)]
    rec_lo: f64,
    #[arg(long, default_value_t = DEFAULT_REC_BAND.1)]
    rec_hi: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "faa")]
    mode: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    wd: f64,
    #[arg(long, default_value_t = 0.9)]
    poly_power: f64,
    #[arg(long, default_value_t = 16)]
    bands: usize,
    #[arg(long, default_value_t = 0.1)]
    budget_p: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_REC_BAND.0)]
    rec_lo: f64,
    #[arg(long, default_value_t = DEFAULT_REC_BAND.1)]
    rec_hi: f64,
    #[arg(long, default_value = "self")]
    unsup: String,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.9)]
    pseudo_thresh: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mlp")]
    model: String,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long, default_value_t = 1e-2)]
    attacker_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    attacker_momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().attacker_poly_power)]
    attacker_poly_power: f64,
    /// Source-only iterations before pseudo labels are drawn.
    #[arg(long, default_value_t = TrainConfig::default().warmup)]
    warmup: usize,
    #[arg(long, default_value_t = 0.0)]
    label_smoothing: f64,
    #[arg(long)]
    flood: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_preview(img: &Image, path_stem: &Path) -> anyhow::Result<()> {
    let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
    io::save_pnm(img, &path_stem.with_extension(ext))?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = DataConfig {
        seed: args.seed,
        classes: args.classes,
        per_class: args.per_class,
        size: args.size,
        source: DomainSpec {
            texture_band: args.src_band,
            ..DomainSpec::default_source()
        },
        target: DomainSpec {
            texture_band: args.tgt_band,
            ..DomainSpec::default_target()
        },
    };
    if let Some(a) = args.amplitude {
        cfg.source.amplitude = a;
        cfg.target.amplitude = a;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let bench = data::generate(&cfg)?;
    data::save_benchmark(&bench, &args.out)?;
    let preview = args.out.join("preview");
    create_dir(&preview)?;
    for name in data::SPLITS {
        let ds = bench.split(name).expect("known split");
        for (i, img) in ds.images.iter().take(cfg.classes).enumerate() {
            save_preview(img, &preview.join(format!("{name}_{i}")))?;
        }
    }
    println!(
        "wrote {} images per split ({} classes x {}) to {}",
        cfg.classes * cfg.per_class,
        cfg.classes,
        cfg.per_class,
        args.out.display()
    );
    Ok(())
}

fn decompose(args: DecomposeArgs) -> anyhow::Result<()> {
    if args.bands == 0 {
        return Err(usage("--bands must be at least 1"));
    }
    let img = io::load_image(&args.input)?;
    let (square, dims) = spectral::resize_to_square(&img);
    let n = square.height();
    let partition = BandPartition::new(n, args.bands)?;
    let spectra = spectral::dft2(&square)?;
    let stacks = spectra
        .iter()
        .map(|z| partition.decompose(z))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&args.out)?;
    let width = args.bands.to_string().len().max(2);
    let mut sum = vec![0.0; square.data().len()];
    let mut report = String::new();
    let sizes = partition.band_sizes();
    for (b, count) in sizes.iter().enumerate() {
        let band_spectra: Vec<_> = stacks.iter().map(|s| s.bands()[b].clone()).collect();
        let band_img = spectral::idft2_channels(&band_spectra)?;
        for (s, v) in sum.iter_mut().zip(band_img.data()) {
            *s += v;
        }
        let restored = spectral::restore_size(&band_img, dims);
        let stem = args.out.join(format!("band_{:0width$}", b + 1));
        save_preview(&restored, &stem)?;
        io::save_fimg(&restored, &stem.with_extension("fimg"))?;
        report.push_str(&format!("band {} coefficients {count}\n", b + 1));
    }
    let recomposed = Image::new(n, n, square.channels(), sum)?;
    let err = recomposed.max_abs_diff(&square);
    let composed = stacks
        .iter()
        .map(spectral::compose)
        .collect::<Result<Vec<_>, _>>()?;
    let exact = composed == spectra;
    report.insert_str(
        0,
        &format!(
            "size {n}\nbands {}\nmax_recomposition_error {err:e}\nspectrum_recomposition_exact {exact}\n",
            args.bands
        ),
    );
    write_atomic(&args.out.join("report.txt"), report.as_bytes())?;
    print!("{report}");
    if !exact || err > 1e-9 {
        bail!("band recomposition check failed (max error {err:e})");
    }
    Ok(())
}

fn attack(args: AttackArgs) -> anyhow::Result<()> {
    if args.bands == 0 {
        return Err(usage("--bands must be at least 1"));
    }
    if !(0.0 <= args.rec_lo && args.rec_lo < args.rec_hi && args.rec_hi <= 1.0) {
        return Err(usage("--rec-lo/--rec-hi must satisfy 0 <= lo < hi <= 1"));
    }
    let x = io::load_image(&args.input)?;
    let reference = io::load_image(&args.reference)?;
    if !x.same_shape(&reference) {
        bail!("input and reference images differ in shape");
    }
    let mut rng = rng_for(args.seed, &[0]);
    let gate_sample = match (&args.gate_file, args.gate_random) {
        (Some(path), _) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let hard = gate::parse_gate_list(&text)?;
            if hard.len() != args.bands {
                bail!(
                    "gate file lists {} bands, --bands is {}",
                    hard.len(),
                    args.bands
                );
            }
            GateSample::fixed(hard)
        }
        (None, Some(p)) => {
            if !(0.0 < p && p < 1.0) {
                return Err(usage("--gate-random must be in (0, 1)"));
            }
            let params = GateParams::with_rate(args.bands, p, 1.0)?;
            gate_forward(&params, &mut rng)?
        }
        (None, None) => return Err(usage("one of --gate-file or --gate-random is required")),
    };
    let size = x.height().max(x.width());
    let params = AttackerParams::new(
        GateParams::uniform(args.bands, 1.0)?,
        1.0,
        (args.rec_lo, args.rec_hi),
    )?;
    let attacker = Attacker::new(params, size)?;
    let pool = ReferencePool::new(vec![reference.clone()])?;
    let sample = attacker.attack_with(&x, &pool, 0, gate_sample)?;
    create_dir(&args.out)?;
    save_preview(&x, &args.out.join("input"))?;
    save_preview(&reference, &args.out.join("reference"))?;
    save_preview(&sample.image, &args.out.join("faa"))?;
    io::save_fimg(&sample.raw, &args.out.join("faa_raw.fimg"))?;
    write_atomic(
        &args.out.join("gate.txt"),
        gate::format_gate_list(sample.gate.hard()).as_bytes(),
    )?;
    let rec = rec_loss(&x, &sample.image, (args.rec_lo, args.rec_hi))?;
    println!(
        "selected {} of {} bands; max |x_faa - x| = {:.6}; rec_loss = {rec:.6e}",
        sample.gate.count(),
        args.bands,
        sample.raw.max_abs_diff(&x)
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let mode: Mode = args
        .mode
        .parse()
        .map_err(|e: bandswap_core::Error| usage(e.to_string()))?;
    let unsup: UnsupKind = args
        .unsup
        .parse()
        .map_err(|e: bandswap_core::Error| usage(e.to_string()))?;
    let model_kind: ModelKind = args
        .model
        .parse()
        .map_err(|e: bandswap_core::Error| usage(e.to_string()))?;
    let cfg = TrainConfig {
        loss: LossConfig {
            mode,
            unsup,
            lambda: args.lambda,
            pseudo_threshold: args.pseudo_thresh,
            label_smoothing: args.label_smoothing,
            flood: args.flood,
        },
        model_kind,
        hidden: args.hidden,
        iters: args.iters,
        batch: args.batch,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.wd,
        poly_power: args.poly_power,
        bands: args.bands,
        budget: args.budget_p,
        tau: args.tau,
        rec_band: (args.rec_lo, args.rec_hi),
        attacker_lr: args.attacker_lr,
        attacker_momentum: args.attacker_momentum,
        attacker_poly_power: args.attacker_poly_power,
        warmup: args.warmup,
        seed: args.seed,
        log_every: args.log_every,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let bench = data::load_benchmark(&args.data)?;
    let out = train(cfg, &bench)?;
    out.save(&args.out)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "mode {} iter {}: train loss {:.4}, target test loss {:.4}, target acc {:.4}",
            mode.name(),
            last.iter,
            last.train_loss,
            last.tgt_test_loss,
            last.tgt_acc
        );
    }
    Ok(())
}

fn curves(args: CurvesArgs) -> anyhow::Result<()> {
    let mut runs = Vec::with_capacity(args.metrics.len());
    for path in &args.metrics {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let metrics =
            RunMetrics::from_csv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if metrics.rows().is_empty() {
            return Err(usage(format!("{} has no metrics rows", path.display())));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        runs.push((stem, metrics));
    }
    let svg = loss_curves_svg(&runs)?;
    write_atomic(&args.out, svg.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Decompose(a) => decompose(a),
        Command::Attack(a) => attack(a),
        Command::Train(a) => train_cmd(a),
        Command::Curves(a) => curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
