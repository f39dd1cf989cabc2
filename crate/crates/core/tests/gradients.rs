//! Analytic gradients against central finite differences.

use mrecg_core::model_io::{generate_synthetic_model, SynthConfig};
use mrecg_core::nn::{conv2d_backward, conv2d_forward, LayerSpec, ModuleInput};
use mrecg_core::quant::{
    calibrate_scale, rounding_regularizer, soft_quantize_grad, soft_quantize_weights, SoftRoundState,
};
use mrecg_core::recon::{reconstruction_loss, ModuleProblem};
use mrecg_core::{build_modules, Granularity, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` along coordinate `i` of `t`.
fn central(t: &Tensor, i: usize, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut p = t.clone();
    p.data_mut()[i] += EPS;
    let up = f(&p);
    p.data_mut()[i] -= 2.0 * EPS;
    let down = f(&p);
    (up - down) / (2.0 * EPS)
}

#[test]
fn conv_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let groups = [1, 2][case % 2];
        let cin = 2 * rng.random_range(1..=2);
        let cout = groups * rng.random_range(1..=3);
        let spec = LayerSpec::conv(cin, cout, [1, 3][case % 3 % 2], 1 + case % 2, groups);
        let x = random(&[2, cin, 5, 4], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv2d_forward(&x, &w, &bias, &spec).unwrap();
        let gy = random(y.shape(), &mut rng);
        let grads = conv2d_backward(&x, &w, &gy, &spec).unwrap();
        for _ in 0..5 {
            let i = rng.random_range(0..w.len());
            let fd = central(&w, i, |w| inner(&gy, &conv2d_forward(&x, w, &bias, &spec).unwrap()));
            assert!(rel_err(grads.grad_weights.data()[i], fd) < TOL, "{spec:?} weight {i}");
            let j = rng.random_range(0..x.len());
            let fd = central(&x, j, |x| inner(&gy, &conv2d_forward(x, &w, &bias, &spec).unwrap()));
            assert!(rel_err(grads.grad_input.data()[j], fd) < TOL, "{spec:?} input {j}");
        }
    }
}

#[test]
fn soft_rounding_and_regularizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let w = random(&[3, 2, 3, 3], &mut rng);
        let q = calibrate_scale(&w, 4, true, true).unwrap();
        let v = random(w.shape(), &mut rng).scale(2.0);
        let c = random(w.shape(), &mut rng);
        let state = SoftRoundState::new(v.clone());
        let grad = soft_quantize_grad(&w, &q, &state, &c).unwrap();
        let beta = rng.random_range(2.0..20.0);
        let mut state = SoftRoundState::new(v.clone());
        state.beta = beta;
        let (reg_value, reg_grad) = rounding_regularizer(&state);
        // Each term is 1 - |2h - 1|^beta: difference the power, which has no
        // constant to cancel against, with a step inside its length scale |v| / beta.
        let power = |v: f64| (2.0 * state.h_of(v) - 1.0).abs().powf(beta);
        let expected: f64 = v.data().iter().map(|&x| 1.0 - power(x)).sum();
        assert!(rel_err(reg_value, expected) < 1e-12);
        for _ in 0..10 {
            let i = rng.random_range(0..w.len());
            let fd = central(&v, i, |v| {
                inner(&c, &soft_quantize_weights(&w, &q, &SoftRoundState::new(v.clone())).unwrap())
            });
            assert!(rel_err(grad.data()[i], fd) < TOL);
            let vi = v.data()[i];
            let step = (1e-3 * vi.abs() / beta).min(1e-4);
            let fd = -(power(vi + step) - power(vi - step)) / (2.0 * step);
            assert!(rel_err(reg_grad.data()[i], fd) < TOL, "{} vs {fd}", reg_grad.data()[i]);
        }
    }
}

#[test]
fn regularizer_at_h_point_seven() {
    // h = 0.7 at beta = 4: d/dh [1 - |2h - 1|^4] = -4 * 0.4^3 * 2.
    let h: f64 = 0.7;
    let v = -(((1.1 - (-0.1)) / (h + 0.1)) - 1.0).ln();
    let mut s = SoftRoundState::new(Tensor::new(vec![1], vec![v]).unwrap());
    s.beta = 4.0;
    assert!((s.h().data()[0] - h).abs() < 1e-12);
    let (value, grad) = rounding_regularizer(&s);
    assert!((value - (1.0 - 0.4f64.powi(4))).abs() < 1e-12);
    let dh = -4.0 * 0.4f64.powi(3) * 2.0;
    assert!((grad.data()[0] - dh * s.h_grad_of(v)).abs() < 1e-12);
}

#[test]
fn module_reconstruction_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..6 {
        let g = generate_synthetic_model(&SynthConfig {
            num_blocks: 2,
            channels: 3,
            bottleneck_at: None,
            input_hw: 4,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let modules = build_modules(&g, Granularity::Block);
        let m = &modules[0];
        let weight_quant: Vec<_> = g.layers[m.layers()]
            .iter()
            .map(|l| calibrate_scale(&l.weights, 4, true, true).unwrap())
            .collect();
        let act_quant = vec![None; m.n_layers()];
        let problem = ModuleProblem {
            module: m,
            layers: &g.layers[m.layers()],
            weight_quant: &weight_quant,
            act_quant: &act_quant,
        };
        let x = random(&[4, 3, 4, 4], &mut rng);
        let fp_in = ModuleInput::from(x.clone());
        let q_in = ModuleInput::from(x.zip_map(&random(x.shape(), &mut rng), |a, b| a + 0.05 * b).unwrap());
        let soft: Vec<SoftRoundState> = g.layers[m.layers()]
            .iter()
            .map(|l| SoftRoundState::new(random(l.weights.shape(), &mut rng).scale(2.0)))
            .collect();
        let (_, grads) = reconstruction_loss(&problem, &soft, &fp_in, &q_in).unwrap();
        for layer in 0..soft.len() {
            for _ in 0..8 {
                let i = rng.random_range(0..soft[layer].v.len());
                let fd = central(&soft[layer].v, i, |v| {
                    let mut s = soft.clone();
                    s[layer] = SoftRoundState::new(v.clone());
                    reconstruction_loss(&problem, &s, &fp_in, &q_in).unwrap().0
                });
                assert!(rel_err(grads[layer].data()[i], fd) < TOL, "seed {seed} layer {layer} v[{i}]");
            }
        }
    }
}
