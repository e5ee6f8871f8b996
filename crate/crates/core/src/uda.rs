//! Domain-adaptation task losses over optionally attacked inputs.

use rayon::prelude::*;

use crate::attacker::{AdversarialSample, Attacker, ReferencePool};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{pseudo_label, LossKind, TaskModel};
use crate::seed::rng_for;

/// Which losses see adversarial inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    /// Attack the supervised source loss only.
    FaaS,
    /// Attack the unsupervised target loss only.
    FaaT,
    /// Attack both.
    FaaFull,
}

impl Mode {
    pub fn attacks_source(self) -> bool {
        matches!(self, Mode::FaaS | Mode::FaaFull)
    }

    pub fn attacks_target(self) -> bool {
        matches!(self, Mode::FaaT | Mode::FaaFull)
    }

    pub fn uses_attacker(self) -> bool {
        self != Mode::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::FaaS => "faa-s",
            Mode::FaaT => "faa-t",
            Mode::FaaFull => "faa",
        }
    }

    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::FaaS, Mode::FaaT, Mode::FaaFull];
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "faa-s" | "faa_s" => Ok(Mode::FaaS),
            "faa-t" | "faa_t" => Ok(Mode::FaaT),
            "faa" | "faa_full" | "faa-full" => Ok(Mode::FaaFull),
            _ => Err(Error::Parameter(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnsupKind {
    /// Cross-entropy against confident pseudo labels.
    SelfTrain,
    /// Mean prediction entropy.
    Entropy,
}

impl std::str::FromStr for UnsupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" | "self_train" | "self-train" => Ok(UnsupKind::SelfTrain),
            "entropy" => Ok(UnsupKind::Entropy),
            _ => Err(Error::Parameter(format!("unknown unsupervised loss {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub mode: Mode,
    pub unsup: UnsupKind,
    /// Weight of the target loss in the task loss.
    pub lambda: f64,
    pub pseudo_threshold: f64,
    /// Label smoothing on supervised cross-entropy; `0` disables it.
    pub label_smoothing: f64,
    /// Flooding level on the total task loss; `None` disables it.
    pub flood: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FaaFull,
            unsup: UnsupKind::SelfTrain,
            lambda: 1.0,
            pseudo_threshold: 0.9,
            label_smoothing: 0.0,
            flood: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold) {
            return Err(Error::Parameter(format!(
                "pseudo-label threshold must be in [0, 1], got {}",
                self.pseudo_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter("label smoothing must be in [0, 1)".into()));
        }
        if matches!(self.flood, Some(b) if !(b >= 0.0 && b.is_finite())) {
            return Err(Error::Parameter("flood level must be >= 0".into()));
        }
        Ok(())
    }
}

/// Attacker together with its reference images and a seed for per-item streams.
#[derive(Clone, Copy)]
pub struct AttackCtx<'a> {
    pub attacker: &'a Attacker,
    pub pool: &'a ReferencePool,
    pub seed: u64,
}

/// A batch item as presented to the task model.
#[derive(Debug, Clone)]
pub enum Prepared<'a> {
    Clean(&'a Image),
    Attacked(Box<AdversarialSample>),
}

impl Prepared<'_> {
    pub fn model_input(&self) -> &Image {
        match self {
            Prepared::Clean(img) => img,
            Prepared::Attacked(s) => &s.image,
        }
    }

    pub fn sample(&self) -> Option<&AdversarialSample> {
        match self {
            Prepared::Clean(_) => None,
            Prepared::Attacked(s) => Some(s),
        }
    }
}

/// Attacks every image when `attack` is given, each with its own stream
/// derived from `(seed, stream, index)`.
pub fn prepare<'a>(
    images: &[&'a Image],
    attack: Option<AttackCtx<'_>>,
    stream: u64,
) -> Result<Vec<Prepared<'a>>> {
    match attack {
        None => Ok(images.iter().map(|&i| Prepared::Clean(i)).collect()),
        Some(ctx) => images
            .par_iter()
            .enumerate()
            .map(|(i, &img)| {
                let mut rng = rng_for(ctx.seed, &[stream, i as u64]);
                let s = ctx.attacker.attack(img, ctx.pool, &mut rng)?;
                Ok(Prepared::Attacked(Box::new(s)))
            })
            .collect(),
    }
}

/// Mean loss over the counted items of a batch with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub param_grad: Vec<f64>,
    /// Gradient of the mean loss with respect to each model input (zero for
    /// items that were not counted).
    pub input_grads: Vec<Vec<f64>>,
    /// Items that contributed to the mean.
    pub counted: usize,
    /// Items that went through the attacker.
    pub attacks: usize,
}

impl LossOutput {
    /// `true` when every item abstained and the loss was defined as zero.
    pub fn is_empty_batch(&self) -> bool {
        self.counted == 0
    }
}

/// Mean of per-item losses; `None` items are skipped.
pub fn batch_loss(
    model: &TaskModel,
    inputs: &[Prepared<'_>],
    losses: &[Option<LossKind>],
) -> Result<LossOutput> {
    if inputs.len() != losses.len() {
        return Err(Error::Dimension("one loss per batch item required".into()));
    }
    let mut param_grad = vec![0.0; model.params().len()];
    let mut per_item = Vec::with_capacity(inputs.len());
    for (p, l) in inputs.iter().zip(losses) {
        per_item.push(match l {
            None => None,
            Some(kind) => {
                let cache = model.forward_cached(p.model_input())?;
                Some(model.backward_accumulate(&cache, *kind, &mut param_grad)?)
            }
        });
    }
    let counted = per_item.iter().filter(|g| g.is_some()).count();
    let attacks = inputs.iter().filter(|p| p.sample().is_some()).count();
    let mut input_grads = Vec::with_capacity(inputs.len());
    let mut loss = 0.0;
    let scale = if counted > 0 {
        1.0 / counted as f64
    } else {
        0.0
    };
    for g in per_item {
        match g {
            Some((value, input)) => {
                loss += value;
                input_grads.push(input.into_iter().map(|v| v * scale).collect());
            }
            None => input_grads.push(vec![0.0; model.input_dim()]),
        }
    }
    param_grad.iter_mut().for_each(|v| *v *= scale);
    Ok(LossOutput {
        loss: loss * scale,
        param_grad,
        input_grads,
        counted,
        attacks,
    })
}

/// Supervised cross-entropy on the source batch.
pub fn supervised_loss(
    model: &TaskModel,
    inputs: &[Prepared<'_>],
    labels: &[usize],
    smoothing: f64,
) -> Result<LossOutput> {
    let kinds: Vec<_> = labels
        .iter()
        .map(|&label| Some(LossKind::CrossEntropy { label, smoothing }))
        .collect();
    batch_loss(model, inputs, &kinds)
}

/// Self-training or entropy loss on the target batch; `pseudo` is ignored for
/// entropy.
pub fn unsupervised_loss(
    model: &TaskModel,
    inputs: &[Prepared<'_>],
    pseudo: &[Option<usize>],
    kind: UnsupKind,
) -> Result<LossOutput> {
    let kinds: Vec<_> = match kind {
        UnsupKind::SelfTrain => pseudo.iter().map(|p| p.map(LossKind::ce)).collect(),
        UnsupKind::Entropy => vec![Some(LossKind::Entropy); inputs.len()],
    };
    batch_loss(model, inputs, &kinds)
}

/// Source loss, attacking the batch iff the mode attacks source data.
pub fn source_loss<'a>(
    model: &TaskModel,
    images: &[&'a Image],
    labels: &[usize],
    attack: Option<AttackCtx<'_>>,
    cfg: &LossConfig,
    stream: u64,
) -> Result<(LossOutput, Vec<Prepared<'a>>)> {
    let attack = attack.filter(|_| cfg.mode.attacks_source());
    let inputs = prepare(images, attack, stream)?;
    let out = supervised_loss(model, &inputs, labels, cfg.label_smoothing)?;
    Ok((out, inputs))
}

/// Target loss, attacking the batch iff the mode attacks target data.
pub fn target_loss<'a>(
    model: &TaskModel,
    images: &[&'a Image],
    pseudo: &[Option<usize>],
    attack: Option<AttackCtx<'_>>,
    cfg: &LossConfig,
    stream: u64,
) -> Result<(LossOutput, Vec<Prepared<'a>>)> {
    let attack = attack.filter(|_| cfg.mode.attacks_target());
    let inputs = prepare(images, attack, stream)?;
    let out = unsupervised_loss(model, &inputs, pseudo, cfg.unsup)?;
    Ok((out, inputs))
}

pub fn total_task_loss(source: f64, target: f64, lambda: f64) -> f64 {
    source + lambda * target
}

/// Flooding: `|L - b| + b`. Returns the flooded value and the factor (`±1`)
/// applied to the gradient.
pub fn flood(loss: f64, level: Option<f64>) -> (f64, f64) {
    match level {
        Some(b) if loss < b => (2.0 * b - loss, -1.0),
        _ => (loss, 1.0),
    }
}

/// Pseudo labels for every image from clean predictions.
pub fn pseudo_labels(
    model: &TaskModel,
    images: &[Image],
    threshold: f64,
) -> Result<Vec<Option<usize>>> {
    images
        .par_iter()
        .map(|img| Ok(pseudo_label(&model.forward(img)?, threshold)))
        .collect()
}
