use rand::Rng;
use bandswap_core::attacker::{Attacker, AttackerParams, ReferencePool, DEFAULT_REC_BAND};
use bandswap_core::gate::{
    gate_backward, gate_forward, gate_forward_with_noise, GateParams, GateSample,
};
use bandswap_core::image::Image;
use bandswap_core::model::{LossKind, ModelKind, TaskModel};
use bandswap_core::seed::rng_for;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn image(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let mut rng = rng_for(seed, &[3]);
    Image::new(
        h,
        w,
        1,
        (0..h * w).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn loss_of(model: &TaskModel, x: &Image, kind: LossKind) -> f64 {
    let cache = model.forward_cached(x).unwrap();
    model.backward(&cache, kind).unwrap().loss
}

fn check_model(kind: ModelKind, loss: LossKind, seed: u64) {
    let x = image(4, 4, seed, 0.0, 1.0);
    let mut model = TaskModel::init(kind, 16, 6, 3, seed).unwrap();
    // nudge biases off zero so entropy has a non-trivial gradient everywhere
    let mut rng = rng_for(seed, &[9]);
    model
        .params_mut()
        .iter_mut()
        .for_each(|p| *p += rng.random_range(-0.3..0.3));
    let cache = model.forward_cached(&x).unwrap();
    let g = model.backward(&cache, loss).unwrap();

    for i in 0..model.params().len() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + EPS;
        let up = loss_of(&model, &x, loss);
        model.params_mut()[i] = orig - EPS;
        let down = loss_of(&model, &x, loss);
        model.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        assert!(
            rel_err(g.params[i], fd) <= TOL || (g.params[i] - fd).abs() <= 1e-9,
            "{kind:?} {loss:?} seed {seed} param {i}: {} vs {fd}",
            g.params[i]
        );
    }
    for i in 0..16 {
        let mut data = x.data().to_vec();
        data[i] += EPS;
        let up = loss_of(&model, &Image::new(4, 4, 1, data.clone()).unwrap(), loss);
        data[i] -= 2.0 * EPS;
        let down = loss_of(&model, &Image::new(4, 4, 1, data).unwrap(), loss);
        let fd = (up - down) / (2.0 * EPS);
        assert!(
            rel_err(g.input[i], fd) <= TOL || (g.input[i] - fd).abs() <= 1e-9,
            "{kind:?} {loss:?} seed {seed} input {i}: {} vs {fd}",
            g.input[i]
        );
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..10 {
        for kind in [ModelKind::Linear, ModelKind::Mlp] {
            check_model(kind, LossKind::ce((seed % 3) as usize), seed);
            check_model(kind, LossKind::Entropy, seed);
        }
    }
}

/// Soft objective `Σ c_n y_n`.
fn soft_objective(params: &GateParams, noise: &[[f64; 2]], c: &[f64]) -> f64 {
    let s = gate_forward_with_noise(params, noise.to_vec()).unwrap();
    s.soft().iter().zip(c).map(|(y, c)| y * c).sum()
}

#[test]
fn gate_soft_path_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, &[4]);
        let n = 6;
        let logits: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let tau = rng.random_range(0.5..2.0);
        let mut params = GateParams::new(logits, tau).unwrap();
        let sample = gate_forward(&params, &mut rng).unwrap();
        let noise = sample.noise().unwrap().to_vec();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: Vec<f64> = gate_backward(&sample, &c)
            .unwrap()
            .into_iter()
            .flatten()
            .collect();
        for i in 0..2 * n {
            let orig = params.flat()[i];
            params.flat_mut()[i] = orig + EPS;
            let up = soft_objective(&params, &noise, &c);
            params.flat_mut()[i] = orig - EPS;
            let down = soft_objective(&params, &noise, &c);
            params.flat_mut()[i] = orig;
            let fd = (up - down) / (2.0 * EPS);
            assert!(
                rel_err(analytic[i], fd) <= TOL,
                "seed {seed} logit {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }
}

/// `½‖x + Σ y_n Δ_n − t‖²` on the relaxed gate values.
fn soft_attack_loss(x: &Image, deltas: &[Image], soft: &[f64], t: &Image) -> f64 {
    let mut v = x.data().to_vec();
    for (d, y) in deltas.iter().zip(soft) {
        v.iter_mut().zip(d.data()).for_each(|(a, b)| *a += y * b);
    }
    0.5 * v
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
}

fn check_attacker(seed: u64, n_bands: usize, only_band: Option<usize>) {
    let size = 12;
    let mut rng = rng_for(seed, &[5]);
    let logits: Vec<[f64; 2]> = (0..n_bands)
        .map(|b| match only_band {
            Some(k) if k != b => [30.0, -30.0],
            _ => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        })
        .collect();
    let mut params = GateParams::new(logits, 1.0).unwrap();
    let attacker = Attacker::new(
        AttackerParams::new(params.clone(), 0.5, DEFAULT_REC_BAND).unwrap(),
        size,
    )
    .unwrap();
    // narrow pixel ranges keep every mixture inside [0, 1], so no pixel is clipped
    let x = image(size, size, seed, 0.45, 0.55);
    let pool = ReferencePool::new(vec![image(size, size, seed + 100, 0.45, 0.55)]).unwrap();
    let gate = gate_forward(&params, &mut rng).unwrap();
    let noise = gate.noise().unwrap().to_vec();
    let s = attacker.attack_with(&x, &pool, 0, gate).unwrap();
    assert!(s.raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let t = image(size, size, seed + 200, 0.0, 1.0);
    let deltas = attacker.band_deltas(&s).unwrap();

    let soft = s.gate.soft().to_vec();
    let mut v = x.data().to_vec();
    for (d, y) in deltas.iter().zip(&soft) {
        v.iter_mut().zip(d.data()).for_each(|(a, b)| *a += y * b);
    }
    let grad_in = Image::new(
        size,
        size,
        1,
        v.iter().zip(t.data()).map(|(a, b)| a - b).collect(),
    )
    .unwrap();
    let upstream = attacker.attack_backward(&s, &grad_in).unwrap();
    let analytic: Vec<f64> = gate_backward(&s.gate, &upstream)
        .unwrap()
        .into_iter()
        .flatten()
        .collect();

    for i in 0..2 * n_bands {
        if let Some(k) = only_band {
            if i / 2 != k {
                continue;
            }
        }
        let orig = params.flat()[i];
        params.flat_mut()[i] = orig + EPS;
        let up = soft_attack_loss(
            &x,
            &deltas,
            gate_forward_with_noise(&params, noise.clone())
                .unwrap()
                .soft(),
            &t,
        );
        params.flat_mut()[i] = orig - EPS;
        let down = soft_attack_loss(
            &x,
            &deltas,
            gate_forward_with_noise(&params, noise.clone())
                .unwrap()
                .soft(),
            &t,
        );
        params.flat_mut()[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        assert!(
            rel_err(analytic[i], fd) <= TOL,
            "seed {seed} logit {i}: {} vs {fd}",
            analytic[i]
        );
    }
}

#[test]
fn attacker_gate_gradients_match_finite_differences() {
    for seed in 0..10 {
        check_attacker(seed, 6, None);
        check_attacker(seed, 6, Some((seed % 6) as usize));
    }
}

#[test]
fn scaling_the_input_gradient_scales_gate_gradients() {
    let size = 8;
    let attacker = Attacker::new(
        AttackerParams::new(GateParams::uniform(4, 1.0).unwrap(), 0.5, DEFAULT_REC_BAND).unwrap(),
        size,
    )
    .unwrap();
    let x = image(size, size, 1, 0.3, 0.7);
    let pool = ReferencePool::new(vec![image(size, size, 2, 0.3, 0.7)]).unwrap();
    let s = attacker
        .attack_with(
            &x,
            &pool,
            0,
            GateSample::fixed(vec![true, false, true, false]),
        )
        .unwrap();
    let g = image(size, size, 3, -1.0, 1.0);
    let base = attacker.attack_backward(&s, &g).unwrap();
    let scaled = attacker
        .attack_backward(&s, &g.map(|v| -2.5 * v).unwrap())
        .unwrap();
    for (a, b) in base.iter().zip(&scaled) {
        assert!((b + 2.5 * a).abs() <= 1e-12);
    }
    let zero = attacker
        .attack_backward(&s, &Image::zeros(size, size, 1).unwrap())
        .unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
}
