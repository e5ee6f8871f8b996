//! Alternating defend/attack training.
//!
//! Each iteration draws one source and one target batch. The defend phase
//! updates the task model on the (possibly attacked) task loss with the
//! attacker frozen; the attack phase then re-evaluates the same adversarial
//! inputs under the updated, frozen model and takes an ascent step on
//! `task - L_gat - L_rec` for the gate logits.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::attacker::{Attacker, AttackerParams, ReferencePool, DEFAULT_REC_BAND};
use crate::data::{Benchmark, Dataset};
use crate::error::{Error, Result};
use crate::gate::{encode_gate, gate_backward, gate_loss, gate_loss_grad, GateParams};
use crate::image::Image;
use crate::io::write_atomic;
use crate::metrics::{MetricsRow, RunMetrics};
use crate::model::{ce_loss, encode_model, ModelKind, TaskModel};
use crate::optim::{sgd_step, OptimState};
use crate::seed::{derive_seed, rng_for};
use crate::uda::{
    self, flood, pseudo_labels, supervised_loss, unsupervised_loss, AttackCtx, LossConfig,
    LossOutput, Mode, Prepared, UnsupKind,
};

/// Training loss above which a run is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

const STREAM_BATCH: u64 = 1;
const STREAM_ATTACK: u64 = 2;
const STREAM_INIT: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model_kind: ModelKind,
    pub hidden: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub bands: usize,
    pub budget: f64,
    pub tau: f64,
    pub rec_band: (f64, f64),
    pub attacker_lr: f64,
    pub attacker_momentum: f64,
    pub attacker_poly_power: f64,
    /// Source-only iterations before pseudo labels are first drawn.
    pub warmup: usize,
    pub seed: u64,
    /// Iterations between metrics rows (each row also evaluates the test splits).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            model_kind: ModelKind::Mlp,
            hidden: 64,
            iters: 5000,
            batch: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            bands: 16,
            budget: 0.1,
            tau: 1.0,
            rec_band: DEFAULT_REC_BAND,
            attacker_lr: 1e-2,
            attacker_momentum: 0.9,
            attacker_poly_power: 0.9,
            warmup: 500,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.iters == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "iters, batch and log interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean loss and accuracy of clean predictions over a labeled set.
pub fn evaluate(model: &TaskModel, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::State("cannot evaluate on an empty dataset".into()));
    }
    let per_item = dataset
        .images
        .par_iter()
        .zip(dataset.labels.par_iter())
        .map(|(img, label)| {
            let label = label.ok_or_else(|| Error::State("evaluation needs labels".into()))?;
            let pred = model.forward(img)?;
            Ok((ce_loss(&pred, label), pred.argmax() == label))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_item.len() as f64;
    let loss = per_item.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per_item.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// What the defend phase produced; the attack phase reuses the inputs.
#[derive(Debug)]
pub struct DefendOutcome<'a> {
    pub src_inputs: Vec<Prepared<'a>>,
    pub src_clean: Vec<&'a Image>,
    pub src_labels: Vec<usize>,
    pub tgt_inputs: Vec<Prepared<'a>>,
    pub tgt_clean: Vec<&'a Image>,
    pub tgt_pseudo: Vec<Option<usize>>,
    /// Task loss (before flooding).
    pub train_loss: f64,
    pub lr: f64,
    pub attacks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttackOutcome {
    pub objective: f64,
    pub task_loss: f64,
    pub gate_count: f64,
    pub l_gat: f64,
    pub l_rec: f64,
}

type AttackedItem<'o, 'a> = (
    &'a Image,
    &'o crate::attacker::AdversarialSample,
    usize,
    bool,
);

/// `(clean image, sample, batch index, is_source)` for every attacked item.
fn attacked_items<'o, 'a>(
    out: &'o DefendOutcome<'a>,
) -> impl Iterator<Item = AttackedItem<'o, 'a>> {
    let src = out
        .src_inputs
        .iter()
        .zip(&out.src_clean)
        .enumerate()
        .filter_map(|(i, (p, &c))| p.sample().map(|s| (c, s, i, true)));
    let tgt = out
        .tgt_inputs
        .iter()
        .zip(&out.tgt_clean)
        .enumerate()
        .filter_map(|(i, (p, &c))| p.sample().map(|s| (c, s, i, false)));
    src.chain(tgt)
}

/// Gradient of `task - mean L_gat - mean L_rec` with respect to the gate
/// logits (flattened), plus the objective pieces.
pub fn attack_gradient(
    attacker: &Attacker,
    out: &DefendOutcome<'_>,
    src: &LossOutput,
    tgt: &LossOutput,
    lambda: f64,
) -> Result<(Vec<f64>, AttackOutcome)> {
    let items: Vec<_> = attacked_items(out).collect();
    let mut grad = vec![0.0; 2 * attacker.n_bands()];
    let task_loss = uda::total_task_loss(src.loss, tgt.loss, lambda);
    if items.is_empty() {
        return Ok((
            grad,
            AttackOutcome {
                objective: task_loss,
                task_loss,
                ..AttackOutcome::default()
            },
        ));
    }
    let m = items.len() as f64;
    let (n, p) = (attacker.n_bands(), attacker.budget());
    let per = items
        .par_iter()
        .map(|&(clean, s, i, is_src)| {
            let (rec, rec_grad) = attacker.rec_gate_grad(s)?;
            let task_grad = if is_src {
                &src.input_grads[i]
            } else {
                &tgt.input_grads[i]
            };
            let w = if is_src { 1.0 } else { lambda };
            let weighted = Image::new(
                clean.height(),
                clean.width(),
                clean.channels(),
                task_grad.iter().map(|t| w * t).collect(),
            )?;
            let mut upstream = attacker.attack_backward(s, &weighted)?;
            for ((u, r), g) in upstream
                .iter_mut()
                .zip(&rec_grad)
                .zip(gate_loss_grad(&s.gate, n, p))
            {
                *u -= (r + g) / m;
            }
            let logits_grad = gate_backward(&s.gate, &upstream)?;
            Ok((
                logits_grad,
                s.gate.count() as f64,
                gate_loss(&s.gate, n, p),
                rec,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut count, mut gat, mut rec) = (0.0, 0.0, 0.0);
    for (lg, c, g, r) in &per {
        for (a, b) in grad.iter_mut().zip(lg.iter().flatten()) {
            *a += b;
        }
        count += c;
        gat += g;
        rec += r;
    }
    let (l_gat, l_rec) = (gat / m, rec / m);
    Ok((
        grad,
        AttackOutcome {
            objective: crate::attacker::attack_objective(task_loss, l_gat, l_rec)?,
            task_loss,
            gate_count: count / m,
            l_gat,
            l_rec,
        },
    ))
}

/// Training state for one run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    bench: &'a Benchmark,
    model: TaskModel,
    attacker: Attacker,
    pool: ReferencePool,
    model_opt: OptimState,
    attacker_opt: OptimState,
    pseudo: Vec<Option<usize>>,
    epoch_len: usize,
    src_labels: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, bench: &'a Benchmark) -> Result<Self> {
        cfg.validate()?;
        let first = bench
            .source_train
            .images
            .first()
            .ok_or_else(|| Error::State("source training set is empty".into()))?;
        if bench.target_train.is_empty() {
            return Err(Error::State("target training set is empty".into()));
        }
        let src_labels = bench
            .source_train
            .labels
            .iter()
            .map(|l| l.ok_or_else(|| Error::State("source training data must be labeled".into())))
            .collect::<Result<Vec<_>>>()?;
        let classes = bench
            .source_train
            .labels
            .iter()
            .flatten()
            .max()
            .map_or(2, |&m| (m + 1).max(2));
        let input_dim = first.data().len();
        let model = TaskModel::init(
            cfg.model_kind,
            input_dim,
            cfg.hidden,
            classes,
            derive_seed(cfg.seed, &[STREAM_INIT]),
        )?;
        let gate = GateParams::with_rate(cfg.bands, cfg.budget.min(0.5), cfg.tau)?;
        let size = first.height().max(first.width());
        let attacker = Attacker::new(AttackerParams::new(gate, cfg.budget, cfg.rec_band)?, size)?;
        let pool = ReferencePool::new(bench.target_train.images.clone())?;
        let model_opt = OptimState::new(
            cfg.lr,
            cfg.momentum,
            cfg.weight_decay,
            cfg.poly_power,
            cfg.iters,
            model.params().len(),
        )?;
        let attacker_opt = OptimState::new(
            cfg.attacker_lr,
            cfg.attacker_momentum,
            0.0,
            cfg.attacker_poly_power,
            cfg.iters,
            2 * cfg.bands,
        )?;
        let epoch_len = bench.target_train.len().div_ceil(cfg.batch);
        Ok(Self {
            pseudo: vec![None; bench.target_train.len()],
            cfg,
            bench,
            model,
            attacker,
            pool,
            model_opt,
            attacker_opt,
            epoch_len,
            src_labels,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TaskModel {
        &self.model
    }

    pub fn attacker(&self) -> &Attacker {
        &self.attacker
    }

    /// Replaces the gate logits, e.g. to pin the gate in tests.
    pub fn set_gate(&mut self, gate: GateParams) -> Result<()> {
        if gate.n_bands() != self.attacker.n_bands() {
            return Err(Error::Dimension("gate band count differs".into()));
        }
        *self.attacker.gate_mut() = gate;
        Ok(())
    }

    fn uses_pseudo_labels(&self) -> bool {
        self.cfg.loss.unsup == UnsupKind::SelfTrain && self.cfg.loss.lambda > 0.0
    }

    /// Pseudo labels are refreshed at the start of every pass over the
    /// target set and held fixed in between. Until the warm-up ends every
    /// target item abstains.
    fn refresh_pseudo_labels(&mut self, iter: usize) -> Result<()> {
        let Some(since) = iter.checked_sub(self.cfg.warmup) else {
            return Ok(());
        };
        if self.uses_pseudo_labels() && since % self.epoch_len == 0 {
            self.pseudo = pseudo_labels(
                &self.model,
                &self.bench.target_train.images,
                self.cfg.loss.pseudo_threshold,
            )?;
        }
        Ok(())
    }

    /// Updates the task model; the attacker is read-only here.
    pub fn defend_step(&mut self, iter: usize) -> Result<DefendOutcome<'a>> {
        self.refresh_pseudo_labels(iter)?;
        let bench = self.bench;
        let mut rng = rng_for(self.cfg.seed, &[STREAM_BATCH, iter as u64]);
        let src_idx: Vec<usize> = (0..self.cfg.batch)
            .map(|_| rng.random_range(0..bench.source_train.len()))
            .collect();
        let tgt_idx: Vec<usize> = (0..self.cfg.batch)
            .map(|_| rng.random_range(0..bench.target_train.len()))
            .collect();
        let src_clean: Vec<&Image> = src_idx
            .iter()
            .map(|&i| &bench.source_train.images[i])
            .collect();
        let tgt_clean: Vec<&Image> = tgt_idx
            .iter()
            .map(|&i| &bench.target_train.images[i])
            .collect();
        let src_labels: Vec<usize> = src_idx.iter().map(|&i| self.src_labels[i]).collect();
        let tgt_pseudo: Vec<Option<usize>> = tgt_idx.iter().map(|&i| self.pseudo[i]).collect();

        let ctx = AttackCtx {
            attacker: &self.attacker,
            pool: &self.pool,
            seed: derive_seed(self.cfg.seed, &[STREAM_ATTACK]),
        };
        let loss_cfg = &self.cfg.loss;
        let (src, src_inputs) = uda::source_loss(
            &self.model,
            &src_clean,
            &src_labels,
            Some(ctx),
            loss_cfg,
            2 * iter as u64,
        )?;
        let (tgt, tgt_inputs) = if loss_cfg.lambda > 0.0 {
            uda::target_loss(
                &self.model,
                &tgt_clean,
                &tgt_pseudo,
                Some(ctx),
                loss_cfg,
                2 * iter as u64 + 1,
            )?
        } else {
            let inputs = uda::prepare(&tgt_clean, None, 0)?;
            let zero = LossOutput {
                loss: 0.0,
                param_grad: vec![0.0; self.model.params().len()],
                input_grads: vec![vec![0.0; self.model.input_dim()]; inputs.len()],
                counted: 0,
                attacks: 0,
            };
            (zero, inputs)
        };
        let lambda = loss_cfg.lambda;
        let train_loss = uda::total_task_loss(src.loss, tgt.loss, lambda);
        if !train_loss.is_finite() || train_loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iter,
                loss: train_loss,
            });
        }
        let (_, sign) = flood(train_loss, loss_cfg.flood);
        let grad: Vec<f64> = src
            .param_grad
            .iter()
            .zip(&tgt.param_grad)
            .map(|(s, t)| sign * (s + lambda * t))
            .collect();
        let lr = sgd_step(self.model.params_mut(), &grad, &mut self.model_opt, iter)?;
        Ok(DefendOutcome {
            src_inputs,
            src_clean,
            src_labels,
            tgt_inputs,
            tgt_clean,
            tgt_pseudo,
            train_loss,
            lr,
            attacks: src.attacks + tgt.attacks,
        })
    }

    /// Ascent step on the attacker with the task model frozen.
    pub fn attack_step(&mut self, out: &DefendOutcome<'_>, iter: usize) -> Result<AttackOutcome> {
        if !self.cfg.loss.mode.uses_attacker() {
            return Ok(AttackOutcome {
                task_loss: out.train_loss,
                objective: out.train_loss,
                ..AttackOutcome::default()
            });
        }
        let src = supervised_loss(
            &self.model,
            &out.src_inputs,
            &out.src_labels,
            self.cfg.loss.label_smoothing,
        )?;
        let tgt = if self.cfg.loss.lambda > 0.0 {
            unsupervised_loss(
                &self.model,
                &out.tgt_inputs,
                &out.tgt_pseudo,
                self.cfg.loss.unsup,
            )?
        } else {
            LossOutput {
                loss: 0.0,
                param_grad: Vec::new(),
                input_grads: vec![vec![0.0; self.model.input_dim()]; out.tgt_inputs.len()],
                counted: 0,
                attacks: 0,
            }
        };
        let (grad, outcome) =
            attack_gradient(&self.attacker, out, &src, &tgt, self.cfg.loss.lambda)?;
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        sgd_step(
            self.attacker.gate_mut().flat_mut(),
            &descent,
            &mut self.attacker_opt,
            iter,
        )?;
        Ok(outcome)
    }

    /// Runs every iteration and returns the final state and log.
    pub fn run(mut self) -> Result<TrainOutput> {
        let mut metrics = RunMetrics::default();
        let mut window = Window::default();
        for iter in 0..self.cfg.iters {
            let out = self.defend_step(iter)?;
            let stats = self.attack_step(&out, iter)?;
            window.add(out.train_loss, stats.gate_count, stats.l_gat, stats.l_rec);
            let done = iter + 1;
            if done % self.cfg.log_every == 0 || done == self.cfg.iters {
                let (src_test_loss, _) = evaluate(&self.model, &self.bench.source_test)?;
                let (tgt_test_loss, tgt_acc) = evaluate(&self.model, &self.bench.target_test)?;
                let w = window.take();
                metrics.push(MetricsRow {
                    iter: done,
                    train_loss: w.0,
                    src_test_loss,
                    tgt_test_loss,
                    tgt_acc,
                    gate_count: w.1,
                    l_gat: w.2,
                    l_rec: w.3,
                    lr: out.lr,
                });
            }
        }
        Ok(TrainOutput {
            mode: self.cfg.loss.mode,
            model: self.model,
            gate: self.attacker.gate().clone(),
            metrics,
        })
    }
}

#[derive(Default)]
struct Window {
    n: usize,
    sums: [f64; 4],
}

impl Window {
    fn add(&mut self, loss: f64, count: f64, gat: f64, rec: f64) {
        self.n += 1;
        for (s, v) in self.sums.iter_mut().zip([loss, count, gat, rec]) {
            *s += v;
        }
    }

    fn take(&mut self) -> (f64, f64, f64, f64) {
        let n = self.n.max(1) as f64;
        let s = self.sums;
        *self = Window::default();
        (s[0] / n, s[1] / n, s[2] / n, s[3] / n)
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub mode: Mode,
    pub model: TaskModel,
    pub gate: GateParams,
    pub metrics: RunMetrics,
}

impl TrainOutput {
    /// Writes `metrics.csv`, `model.ckpt` and, when an attacker was trained,
    /// `gate.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("metrics.csv"), self.metrics.to_csv().as_bytes())?;
        write_atomic(&dir.join("model.ckpt"), &encode_model(&self.model))?;
        if self.mode.uses_attacker() {
            write_atomic(&dir.join("gate.ckpt"), &encode_gate(&self.gate))?;
        }
        Ok(())
    }
}

pub fn train(cfg: TrainConfig, bench: &Benchmark) -> Result<TrainOutput> {
    Trainer::new(cfg, bench)?.run()
}
