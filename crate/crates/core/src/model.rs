//! Small differentiable classifiers with hand-written backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{decode_f32_payload, push_f32s};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Softmax regression.
    Linear,
    /// One hidden rectifier layer.
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            _ => Err(Error::Parameter(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Classifier parameters, stored flat so optimizers can treat them as one
/// vector.
///
/// Layout: linear is `W (K×D), b (K)`; mlp is `W1 (H×D), b1 (H), W2 (K×H), b2 (K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    kind: ModelKind,
    input_dim: usize,
    hidden: usize,
    classes: usize,
    params: Vec<f64>,
    version: u64,
}

fn param_count(kind: ModelKind, d: usize, h: usize, k: usize) -> usize {
    match kind {
        ModelKind::Linear => k * d + k,
        ModelKind::Mlp => h * d + h + k * h + k,
    }
}

impl TaskModel {
    /// Seeded He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(
        kind: ModelKind,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(kind, input_dim, hidden, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for w in slice {
                *w = normal.sample(&mut rng);
            }
        };
        let (d, h, k) = (input_dim, hidden, classes);
        match kind {
            ModelKind::Linear => fill(&mut model.params[..k * d], d),
            ModelKind::Mlp => {
                fill(&mut model.params[..h * d], d);
                let w2 = h * d + h;
                fill(&mut model.params[w2..w2 + k * h], h);
            }
        }
        Ok(model)
    }

    pub fn zeros(kind: ModelKind, input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes < 2 {
            return Err(Error::Parameter(format!(
                "model needs input_dim >= 1 and at least 2 classes, got {input_dim}, {classes}"
            )));
        }
        let hidden = match kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp if hidden == 0 => {
                return Err(Error::Parameter("mlp hidden width must be positive".into()))
            }
            ModelKind::Mlp => hidden,
        };
        Ok(Self {
            kind,
            input_dim,
            hidden,
            classes,
            params: vec![0.0; param_count(kind, input_dim, hidden, classes)],
            version: 0,
        })
    }

    pub fn from_params(
        kind: ModelKind,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::zeros(kind, input_dim, hidden, classes)?;
        if params.len() != m.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters given, model needs {}",
                params.len(),
                m.params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model parameters must be finite".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Output-layer bias.
    pub fn output_bias(&self) -> &[f64] {
        &self.params[self.params.len() - self.classes..]
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.data().len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} inputs, image has {}",
                self.input_dim,
                image.data().len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<Prediction> {
        Ok(self.forward_cached(image)?.prediction)
    }

    /// Forward pass keeping what [`TaskModel::backward`] needs.
    pub fn forward_cached(&self, image: &Image) -> Result<ForwardCache> {
        self.check_input(image)?;
        let x = image.data();
        let (d, h, k) = (self.input_dim, self.hidden, self.classes);
        let p = &self.params;
        let (hidden, logits) = match self.kind {
            ModelKind::Linear => (Vec::new(), affine(&p[..k * d], &p[k * d..k * d + k], x)),
            ModelKind::Mlp => {
                let pre = affine(&p[..h * d], &p[h * d..h * d + h], x);
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let w2 = h * d + h;
                let logits = affine(&p[w2..w2 + k * h], &p[w2 + k * h..], &act);
                (act, logits)
            }
        };
        Ok(ForwardCache {
            version: self.version,
            input: x.to_vec(),
            hidden,
            prediction: Prediction::from_logits(logits),
        })
    }

    /// Exact gradients of `loss` with respect to the parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, loss: LossKind) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let (loss, input) = self.backward_accumulate(cache, loss, &mut params)?;
        Ok(Gradients {
            loss,
            params,
            input,
        })
    }

    /// Like [`TaskModel::backward`] but adds the parameter gradient into
    /// `param_acc`; returns the loss and the input gradient.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        loss: LossKind,
        param_acc: &mut [f64],
    ) -> Result<(f64, Vec<f64>)> {
        if cache.version != self.version {
            return Err(Error::State(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let p = &self.params;
        if param_acc.len() != p.len() {
            return Err(Error::Dimension(format!(
                "gradient buffer has {} entries, model has {}",
                param_acc.len(),
                p.len()
            )));
        }
        let pred = &cache.prediction;
        let (value, dlogits) = loss.value_and_logit_grad(pred)?;
        let (d, h, k) = (self.input_dim, self.hidden, self.classes);
        let x = &cache.input;
        let gp = param_acc;
        let mut gx = vec![0.0; d];
        match self.kind {
            ModelKind::Linear => {
                outer_add(&mut gp[..k * d], &dlogits, x);
                add_into(&mut gp[k * d..], &dlogits);
                transpose_matvec_into(&mut gx, &p[..k * d], &dlogits, d);
            }
            ModelKind::Mlp => {
                let w2 = h * d + h;
                outer_add(&mut gp[w2..w2 + k * h], &dlogits, &cache.hidden);
                add_into(&mut gp[w2 + k * h..], &dlogits);
                let mut dh = vec![0.0; h];
                transpose_matvec_into(&mut dh, &p[w2..w2 + k * h], &dlogits, h);
                for (g, &a) in dh.iter_mut().zip(&cache.hidden) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                outer_add(&mut gp[..h * d], &dh, x);
                add_into(&mut gp[h * d..h * d + h], &dh);
                transpose_matvec_into(&mut gx, &p[..h * d], &dh, d);
            }
        }
        Ok((value, gx))
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .zip(w.chunks_exact(n))
        .map(|(&bi, row)| bi + dot(row, x))
        .collect()
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(p, q)| p * q)
        .sum();
    for (p, q) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += p[l] * q[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn outer_add(out: &mut [f64], rows: &[f64], cols: &[f64]) {
    for (chunk, &r) in out.chunks_exact_mut(cols.len()).zip(rows) {
        if r == 0.0 {
            continue;
        }
        for (o, &c) in chunk.iter_mut().zip(cols) {
            *o += r * c;
        }
    }
}

fn add_into(out: &mut [f64], v: &[f64]) {
    for (o, &a) in out.iter_mut().zip(v) {
        *o += a;
    }
}

/// `out = Wᵀ v` for row-major `W` with `n` columns.
fn transpose_matvec_into(out: &mut [f64], w: &[f64], v: &[f64], n: usize) {
    out.fill(0.0);
    for (row, &vi) in w.chunks_exact(n).zip(v) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

/// Logits with their stabilized softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|&z| z - lse).collect();
        let probs = log_probs.iter().map(|&l| l.exp()).collect();
        Self {
            logits,
            probs,
            log_probs,
        }
    }

    /// Index of the largest probability; the first one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// State captured by [`TaskModel::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Vec<f64>,
    hidden: Vec<f64>,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Cross-entropy against `label`, optionally label-smoothed.
    CrossEntropy { label: usize, smoothing: f64 },
    /// Shannon entropy of the prediction.
    Entropy,
}

impl LossKind {
    pub fn ce(label: usize) -> Self {
        LossKind::CrossEntropy {
            label,
            smoothing: 0.0,
        }
    }

    fn value_and_logit_grad(self, pred: &Prediction) -> Result<(f64, Vec<f64>)> {
        let k = pred.probs.len();
        match self {
            LossKind::CrossEntropy { label, smoothing } => {
                if label >= k {
                    return Err(Error::Parameter(format!(
                        "label {label} out of range for {k} classes"
                    )));
                }
                if !(0.0..1.0).contains(&smoothing) {
                    return Err(Error::Parameter(format!(
                        "label smoothing {smoothing} not in [0, 1)"
                    )));
                }
                let off = smoothing / k as f64;
                let target = |j: usize| {
                    if j == label {
                        1.0 - smoothing + off
                    } else {
                        off
                    }
                };
                let value = if smoothing == 0.0 {
                    -pred.log_probs[label]
                } else {
                    -(0..k).map(|j| target(j) * pred.log_probs[j]).sum::<f64>()
                };
                let grad = (0..k).map(|j| pred.probs[j] - target(j)).collect();
                Ok((value, grad))
            }
            LossKind::Entropy => {
                let h = entropy(pred);
                // dH/dz_j = -p_j (log p_j + H)
                let grad = pred
                    .probs
                    .iter()
                    .zip(&pred.log_probs)
                    .map(|(&p, &lp)| -p * (lp + h))
                    .collect();
                Ok((h, grad))
            }
        }
    }
}

/// Result of [`TaskModel::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// `-log p_label` from the stabilized log-softmax.
pub fn ce_loss(pred: &Prediction, label: usize) -> f64 {
    -pred.log_probs[label]
}

/// `-Σ p log p`, with `0 log 0 = 0`.
pub fn entropy(pred: &Prediction) -> f64 {
    -pred
        .probs
        .iter()
        .zip(&pred.log_probs)
        .map(|(&p, &lp)| if p > 0.0 { p * lp } else { 0.0 })
        .sum::<f64>()
}

/// Argmax class when its probability reaches `threshold`, otherwise `None`.
pub fn pseudo_label(pred: &Prediction, threshold: f64) -> Option<usize> {
    let best = pred.argmax();
    (pred.probs[best] >= threshold).then_some(best)
}

/// `MODEL <kind> <dims...>\n` + little-endian `f32` parameters; dims are
/// `D K` for linear and `D H K` for mlp.
pub fn encode_model(model: &TaskModel) -> Vec<u8> {
    let header = match model.kind {
        ModelKind::Linear => format!("MODEL linear {} {}\n", model.input_dim, model.classes),
        ModelKind::Mlp => format!(
            "MODEL mlp {} {} {}\n",
            model.input_dim, model.hidden, model.classes
        ),
    };
    let mut out = header.into_bytes();
    push_f32s(&mut out, &model.params);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<TaskModel> {
    let end = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing MODEL header line".into()))?;
    let line = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("MODEL header is not ASCII".into()))?;
    let mut parts = line.split(' ');
    if parts.next() != Some("MODEL") {
        return Err(Error::Format("expected MODEL header".into()));
    }
    let kind: ModelKind = parts
        .next()
        .ok_or_else(|| Error::Format("missing model kind".into()))?
        .parse()
        .map_err(|e: Error| Error::Format(e.to_string()))?;
    let dims = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad MODEL dim {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (d, h, k) = match (kind, dims.as_slice()) {
        (ModelKind::Linear, &[d, k]) => (d, 0, k),
        (ModelKind::Mlp, &[d, h, k]) => (d, h, k),
        _ => return Err(Error::Format("wrong number of MODEL dims".into())),
    };
    let checked = || -> Option<usize> {
        match kind {
            ModelKind::Linear => k.checked_mul(d)?.checked_add(k),
            ModelKind::Mlp => h
                .checked_mul(d)?
                .checked_add(h)?
                .checked_add(k.checked_mul(h)?)?
                .checked_add(k),
        }
    };
    let count = checked().ok_or_else(|| Error::Format("MODEL dims overflow".into()))?;
    let params = decode_f32_payload(&bytes[end + 1..], count)?;
    TaskModel::from_params(kind, d, h, k, params).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: Vec<f64>) -> Image {
        let n = values.len();
        Image::new(2, n / 2, 1, values).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = TaskModel::zeros(ModelKind::Mlp, 4, 3, 5).unwrap();
        let p = m.forward(&img(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        for &q in &p.probs {
            assert!((q - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_two_class_softmax() {
        let p = Prediction::from_logits(vec![0.0, 3f64.ln()]);
        assert!((p.probs[0] - 0.25).abs() < 1e-15);
        assert!((p.probs[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn losses_on_uniform_prediction() {
        let p = Prediction::from_logits(vec![1.0; 4]);
        assert!((ce_loss(&p, 2) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&p) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_small_losses() {
        let p = Prediction::from_logits(vec![60.0, 0.0, 0.0]);
        assert!(ce_loss(&p, 0) < 1e-20);
        assert!(entropy(&p) < 1e-20);
    }

    #[test]
    fn pseudo_labels() {
        let p = |a: f64| Prediction {
            logits: vec![],
            probs: vec![a, 1.0 - a],
            log_probs: vec![],
        };
        assert_eq!(pseudo_label(&p(0.95), 0.9), Some(0));
        assert_eq!(pseudo_label(&p(0.6), 0.9), None);
        assert_eq!(pseudo_label(&p(0.4), 0.0), Some(1));
    }

    #[test]
    fn zero_image_linear_input_gradient_closed_form() {
        let m = TaskModel::init(ModelKind::Linear, 6, 0, 3, 4).unwrap();
        let x = img(vec![0.0; 6]);
        let cache = m.forward_cached(&x).unwrap();
        let g = m.backward(&cache, LossKind::ce(1)).unwrap();
        let p = &cache.prediction.probs;
        for j in 0..6 {
            let expect: f64 = (0..3)
                .map(|c| m.params()[c * 6 + j] * (p[c] - f64::from(c == 1)))
                .sum();
            assert!((g.input[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = TaskModel::init(ModelKind::Linear, 4, 0, 2, 0).unwrap();
        let cache = m.forward_cached(&img(vec![0.5; 4])).unwrap();
        m.params_mut()[0] += 1.0;
        assert!(matches!(
            m.backward(&cache, LossKind::Entropy),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn width_mismatch() {
        let m = TaskModel::zeros(ModelKind::Linear, 5, 0, 2).unwrap();
        assert!(matches!(
            m.forward(&img(vec![0.0; 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bias_shift_leaves_gradients_unchanged() {
        let m = TaskModel::init(ModelKind::Mlp, 8, 5, 4, 9).unwrap();
        let mut shifted = m.clone();
        let n = shifted.params().len();
        for b in &mut shifted.params_mut()[n - 4..] {
            *b += 3.25;
        }
        let x = img((0..8).map(|i| i as f64 / 8.0).collect());
        for loss in [LossKind::ce(2), LossKind::Entropy] {
            let a = m.backward(&m.forward_cached(&x).unwrap(), loss).unwrap();
            let b = shifted
                .backward(&shifted.forward_cached(&x).unwrap(), loss)
                .unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12);
            for (u, v) in a.input.iter().zip(&b.input) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_smoothing_matches_mixed_target() {
        let m = TaskModel::init(ModelKind::Linear, 4, 0, 3, 1).unwrap();
        let cache = m.forward_cached(&img(vec![0.2, 0.4, 0.6, 0.8])).unwrap();
        let a = m.backward(&cache, LossKind::ce(0)).unwrap();
        let b = m
            .backward(
                &cache,
                LossKind::CrossEntropy {
                    label: 0,
                    smoothing: 0.1,
                },
            )
            .unwrap();
        let lp = m.forward(&img(vec![0.2, 0.4, 0.6, 0.8])).unwrap().log_probs;
        let want = -(0.9 + 0.1 / 3.0) * lp[0] - 0.1 / 3.0 * (lp[1] + lp[2]);
        assert!((b.loss - want).abs() < 1e-12);
        assert!((a.loss + lp[0]).abs() < 1e-12);
        assert!(m.backward(&cache, LossKind::ce(3)).is_err());
    }

    #[test]
    fn deterministic_init() {
        let a = TaskModel::init(ModelKind::Mlp, 10, 4, 3, 77).unwrap();
        let b = TaskModel::init(ModelKind::Mlp, 10, 4, 3, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, TaskModel::init(ModelKind::Mlp, 10, 4, 3, 78).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        for kind in [ModelKind::Linear, ModelKind::Mlp] {
            let m = TaskModel::init(kind, 6, 3, 2, 5).unwrap();
            let bytes = encode_model(&m);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(encode_model(&back), bytes);
        }
        assert!(decode_model(b"MODEL linear 2\n").is_err());
        assert!(decode_model(b"MODEL conv 2 2\n").is_err());
        assert!(decode_model(b"MODEL linear 2 2\n\0\0").is_err());
    }
}
