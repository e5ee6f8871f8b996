//! Learnable per-band keep/perturb selector trained through a Gumbel-Softmax
//! relaxation with straight-through gradients.

use rand::Rng;
use rand_distr::{Distribution, Open01};

use crate::error::{Error, Result};
use crate::io::{decode_f32_payload, parse_numeric_header, push_f32s};

pub const KEEP: usize = 0;
pub const PERTURB: usize = 1;

/// Gate logits, one `[keep, perturb]` pair per band, plus the relaxation
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    logits: Vec<[f64; 2]>,
    temperature: f64,
}

impl GateParams {
    pub fn new(logits: Vec<[f64; 2]>, temperature: f64) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Parameter("gate needs at least one band".into()));
        }
        check_temperature(temperature)?;
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gate logits must be finite".into()));
        }
        Ok(Self {
            logits,
            temperature,
        })
    }

    /// Equal keep/perturb logits for every band.
    pub fn uniform(n_bands: usize, temperature: f64) -> Result<Self> {
        Self::new(vec![[0.0, 0.0]; n_bands], temperature)
    }

    /// Logits under which each band is perturbed with probability `p`.
    pub fn with_rate(n_bands: usize, p: f64, temperature: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Parameter(format!(
                "perturb rate must be in (0, 1), got {p}"
            )));
        }
        Self::new(vec![[0.0, (p / (1.0 - p)).ln()]; n_bands], temperature)
    }

    pub fn n_bands(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[[f64; 2]] {
        &self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(())
    }

    /// Flat view `[keep_0, perturb_0, keep_1, ...]` for the optimizer.
    pub fn flat(&self) -> &[f64] {
        self.logits.as_flattened()
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.logits.as_flattened_mut()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

/// One draw of the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    hard: Vec<bool>,
    soft: Vec<f64>,
    noise: Option<Vec<[f64; 2]>>,
    temperature: f64,
}

impl GateSample {
    /// A fixed selection with no relaxation attached; it cannot be
    /// back-propagated.
    pub fn fixed(hard: Vec<bool>) -> Self {
        let soft = hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        Self {
            hard,
            soft,
            noise: None,
            temperature: 1.0,
        }
    }

    pub fn hard(&self) -> &[bool] {
        &self.hard
    }

    /// Relaxed probability of the perturb category per band.
    pub fn soft(&self) -> &[f64] {
        &self.soft
    }

    pub fn noise(&self) -> Option<&[[f64; 2]]> {
        self.noise.as_deref()
    }

    pub fn n_bands(&self) -> usize {
        self.hard.len()
    }

    pub fn count(&self) -> usize {
        self.hard.iter().filter(|&&h| h).count()
    }

    /// Hard values as `0.0`/`1.0`.
    pub fn hard_values(&self) -> Vec<f64> {
        self.hard
            .iter()
            .map(|&h| if h { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Draws one `Gumbel(0, 1)` value.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    -(-u.ln()).ln()
}

/// Samples the gate: Gumbel noise is added to each band's logits and the
/// tempered softmax gives the relaxed values; the hard value is the argmax,
/// with ties resolved toward keep.
pub fn gate_forward<R: Rng + ?Sized>(params: &GateParams, rng: &mut R) -> Result<GateSample> {
    let noise = (0..params.n_bands())
        .map(|_| [gumbel(rng), gumbel(rng)])
        .collect();
    gate_forward_with_noise(params, noise)
}

/// Deterministic half of [`gate_forward`] for a given noise record.
pub fn gate_forward_with_noise(params: &GateParams, noise: Vec<[f64; 2]>) -> Result<GateSample> {
    check_temperature(params.temperature)?;
    if noise.len() != params.n_bands() {
        return Err(Error::Dimension(format!(
            "{} noise pairs for {} bands",
            noise.len(),
            params.n_bands()
        )));
    }
    let tau = params.temperature;
    let mut hard = Vec::with_capacity(noise.len());
    let mut soft = Vec::with_capacity(noise.len());
    for (l, g) in params.logits.iter().zip(&noise) {
        let keep = (l[KEEP] + g[KEEP]) / tau;
        let perturb = (l[PERTURB] + g[PERTURB]) / tau;
        // two-way softmax written as a logistic of the difference
        let y = 1.0 / (1.0 + (keep - perturb).exp());
        hard.push(perturb > keep);
        soft.push(y);
    }
    Ok(GateSample {
        hard,
        soft,
        noise: Some(noise),
        temperature: tau,
    })
}

/// Budget hinge: the hard count if it exceeds `n_bands * budget`, else zero.
pub fn gate_loss(sample: &GateSample, n_bands: usize, budget: f64) -> f64 {
    let count = sample.count();
    if count as f64 > n_bands as f64 * budget {
        count as f64
    } else {
        0.0
    }
}

/// Straight-through subgradient of [`gate_loss`] with respect to each gate
/// value: one for every band while the hinge is active.
pub fn gate_loss_grad(sample: &GateSample, n_bands: usize, budget: f64) -> Vec<f64> {
    let active = gate_loss(sample, n_bands, budget) > 0.0;
    vec![if active { 1.0 } else { 0.0 }; sample.n_bands()]
}

/// Maps `∂L/∂g_n` to `∂L/∂logits` by passing straight through the hard
/// argmax onto the relaxed perturb probability.
pub fn gate_backward(sample: &GateSample, upstream: &[f64]) -> Result<Vec<[f64; 2]>> {
    if sample.noise.is_none() {
        return Err(Error::State(
            "gate sample has no noise record to differentiate through".into(),
        ));
    }
    if upstream.len() != sample.n_bands() {
        return Err(Error::Dimension(format!(
            "{} upstream values for {} bands",
            upstream.len(),
            sample.n_bands()
        )));
    }
    let inv_tau = 1.0 / sample.temperature;
    Ok(sample
        .soft
        .iter()
        .zip(upstream)
        .map(|(&y, &u)| {
            // y = softmax(.)[perturb]: dy/dl_perturb = y(1-y)/tau, dy/dl_keep = -y(1-y)/tau
            let d = u * y * (1.0 - y) * inv_tau;
            [-d, d]
        })
        .collect())
}

/// `GATE <N>\n` followed by `N × 2` little-endian `f32` logits.
pub fn encode_gate(params: &GateParams) -> Vec<u8> {
    let mut out = format!("GATE {}\n", params.n_bands()).into_bytes();
    push_f32s(&mut out, params.flat());
    out
}

pub fn decode_gate(bytes: &[u8], temperature: f64) -> Result<GateParams> {
    let (fields, payload) = parse_numeric_header(bytes, "GATE", 1)?;
    let n = fields[0];
    let count = n
        .checked_mul(2)
        .ok_or_else(|| Error::Format("GATE band count overflow".into()))?;
    let flat = decode_f32_payload(payload, count)?;
    let logits = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    GateParams::new(logits, temperature).map_err(|e| Error::Format(e.to_string()))
}

/// The `gate.txt` sidecar: one `band_index 0|1` line per band, bands
/// numbered from 1.
pub fn format_gate_list(hard: &[bool]) -> String {
    hard.iter()
        .enumerate()
        .map(|(i, &h)| format!("{} {}\n", i + 1, u8::from(h)))
        .collect()
}

pub fn parse_gate_list(text: &str) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(idx), Some(val), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!(
                "gate list line {}: expected `band_index 0|1`",
                lineno + 1
            )));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::Format(format!("gate list line {}: bad index", lineno + 1)))?;
        if idx != out.len() + 1 {
            return Err(Error::Format(format!(
                "gate list line {}: expected band {}, found {idx}",
                lineno + 1,
                out.len() + 1
            )));
        }
        out.push(match val {
            "0" => false,
            "1" => true,
            _ => {
                return Err(Error::Format(format!(
                    "gate list line {}: value must be 0 or 1",
                    lineno + 1
                )))
            }
        });
    }
    if out.is_empty() {
        return Err(Error::Format("gate list is empty".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_keep_logits_never_perturb() {
        let params = GateParams::new(vec![[20.0, -20.0]; 96], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = gate_forward(&params, &mut rng).unwrap();
            assert_eq!(s.count(), 0);
        }
    }

    #[test]
    fn equal_logits_perturb_half_the_time() {
        let params = GateParams::uniform(8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let s = gate_forward(&params, &mut rng).unwrap();
            for (h, &g) in hits.iter_mut().zip(s.hard()) {
                *h += usize::from(g);
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((0.47..=0.53).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let params = GateParams::new(vec![[0.3, -0.1]; 16], 0.7).unwrap();
        let a = gate_forward(&params, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = gate_forward(&params, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_go_to_keep() {
        let params = GateParams::uniform(3, 1.0).unwrap();
        let s = gate_forward_with_noise(&params, vec![[0.5, 0.5]; 3]).unwrap();
        assert_eq!(s.hard(), &[false, false, false]);
        assert!(s.soft().iter().all(|&y| y == 0.5));
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        assert!(GateParams::uniform(4, 0.0).is_err());
        assert!(GateParams::uniform(4, -1.0).is_err());
    }

    #[test]
    fn budget_hinge_at_n96_p01() {
        let count = |k: usize| GateSample::fixed((0..96).map(|i| i < k).collect());
        assert_eq!(gate_loss(&count(9), 96, 0.1), 0.0);
        assert_eq!(gate_loss(&count(10), 96, 0.1), 10.0);
        assert_eq!(gate_loss(&count(0), 96, 0.1), 0.0);
        assert_eq!(gate_loss(&count(0), 7, 1.0), 0.0);
        assert!(gate_loss_grad(&count(10), 96, 0.1)
            .iter()
            .all(|&g| g == 1.0));
        assert!(gate_loss_grad(&count(9), 96, 0.1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_needs_noise() {
        let s = GateSample::fixed(vec![true, false]);
        assert!(matches!(
            gate_backward(&s, &[1.0, 1.0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params = GateParams::uniform(5, 1.0).unwrap();
        let s = gate_forward(&params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g = gate_backward(&s, &[0.0; 5]).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn low_temperature_soft_matches_hard() {
        let mut params = GateParams::new(
            (0..32)
                .map(|i| [0.1 * i as f64, -0.05 * i as f64])
                .collect(),
            1.0,
        )
        .unwrap();
        params.set_temperature(1e-4).unwrap();
        let s = gate_forward(&params, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let worst = s
            .soft()
            .iter()
            .zip(s.hard_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-3, "max |soft - hard| = {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = GateParams::new(vec![[0.5, -0.25], [1.0, 2.0]], 1.0).unwrap();
        let bytes = encode_gate(&params);
        assert!(bytes.starts_with(b"GATE 2\n"));
        assert_eq!(decode_gate(&bytes, 1.0).unwrap(), params);
        assert!(decode_gate(b"GATE 0\n", 1.0).is_err());
        assert!(decode_gate(b"GATE 2\n\0\0", 1.0).is_err());
    }

    #[test]
    fn gate_list_format() {
        let text = format_gate_list(&[false, true, true]);
        assert_eq!(text, "1 0\n2 1\n3 1\n");
        assert_eq!(parse_gate_list(&text).unwrap(), vec![false, true, true]);
        assert!(parse_gate_list("1 0\n3 1\n").is_err());
        assert!(parse_gate_list("1 2\n").is_err());
        assert!(parse_gate_list("").is_err());
    }
}
