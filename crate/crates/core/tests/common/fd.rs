//! Central finite-difference checks of every analytic backward pass. Each
//! check returns the worst relative error per quantity over all seeds.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specseg::clayers::*;
use specseg::cmodel::{output_gradient, split_predictions, Mode, Model, ModelConfig};
use specseg::objectives::{cbce, cfl, rbce, rfl, OccupancyMask, PredictedSpectrum};
use specseg::ComplexTensor;

pub const STEP: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-6;
pub const SEEDS: u64 = 10;
/// Batch norm couples every activation of a channel, so a 1e-5 nudge of an
/// early weight moves enough pre-activations across a ReLU kink to spoil the
/// central difference. A smaller step keeps the probe on one linear piece.
pub const MODEL_STEP: f64 = 1e-7;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], complex: bool) -> ComplexTensor<f64> {
    let n: usize = shape.iter().product();
    let re: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if complex {
        let im = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ComplexTensor::new(shape.to_vec(), re, im).unwrap()
    } else {
        ComplexTensor::from_real(shape.to_vec(), re).unwrap()
    }
}

/// `<u, out>` over both planes; its gradient w.r.t. the output is `u`.
pub fn pair(u: &ComplexTensor<f64>, out: &ComplexTensor<f64>) -> f64 {
    let mut s: f64 = u.re().iter().zip(out.re()).map(|(a, b)| a * b).sum();
    if let (Some(a), Some(b)) = (u.im(), out.im()) {
        s += a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` with respect to every scalar of `tensors[which]`.
pub fn numeric(tensors: &[ComplexTensor<f64>], which: usize, f: &dyn Fn(&[ComplexTensor<f64>]) -> f64) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut t = tensors.to_vec();
    let n = t[which].len();
    let mut dx = vec![0.0; n];
    for i in 0..n {
        let v = t[which].re()[i];
        t[which].re_mut()[i] = v + STEP;
        let hi = f(&t);
        t[which].re_mut()[i] = v - STEP;
        let lo = f(&t);
        t[which].re_mut()[i] = v;
        dx[i] = (hi - lo) / (2.0 * STEP);
    }
    let dy = t[which].im().is_some().then(|| {
        let mut dy = vec![0.0; n];
        for i in 0..n {
            let v = t[which].im().unwrap()[i];
            t[which].im_mut().unwrap()[i] = v + STEP;
            let hi = f(&t);
            t[which].im_mut().unwrap()[i] = v - STEP;
            let lo = f(&t);
            t[which].im_mut().unwrap()[i] = v;
            dy[i] = (hi - lo) / (2.0 * STEP);
        }
        dy
    });
    (dx, dy)
}

/// Worst error per check name.
#[derive(Default)]
pub struct Errors(pub Vec<(String, f64)>);

impl Errors {
    pub fn record(&mut self, name: &str, e: f64) {
        match self.0.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = v.max(e),
            None => self.0.push((name.to_string(), e)),
        }
    }

    pub fn compare(&mut self, name: &str, analytic: (&[f64], Option<&[f64]>), numeric: &(Vec<f64>, Option<Vec<f64>>)) {
        assert_eq!(analytic.1.is_some(), numeric.1.is_some(), "{name}: plane mismatch");
        let mut a = analytic.0.to_vec();
        let mut n = numeric.0.clone();
        if let (Some(ay), Some(ny)) = (analytic.1, numeric.1.as_ref()) {
            a.extend_from_slice(ay);
            n.extend_from_slice(ny);
        }
        self.record(name, rel_err(&a, &n));
    }

    pub fn worst(&self) -> f64 {
        self.0.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

pub fn tensor_grad(t: &ComplexTensor<f64>) -> (&[f64], Option<&[f64]>) {
    (t.re(), t.im())
}

pub fn wgrad(g: &WirtingerGrad<f64>) -> (&[f64], Option<&[f64]>) {
    (&g.d_x, g.d_y.as_deref())
}

pub fn conv_gradients() -> Errors {
    let mut errs = Errors::default();
    for seed in 0..SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (stride, kernel) = [(1, 3), (2, 3), (2, 7), (2, 1)][seed as usize % 4];
        for complex in [true, false] {
            let x = rand_tensor(&mut r, &[2, 3, 16], complex);
            let w = rand_tensor(&mut r, &[4, 3, kernel], complex);
            let b = rand_tensor(&mut r, &[4], complex);
            let p = ConvParams::new(w.clone(), b.clone(), stride, kernel / 2).unwrap();
            let out = cconv1d_forward(&x, &p).unwrap();
            let u = rand_tensor(&mut r, out.shape(), complex);
            let (dx, g) = cconv1d_backward(&x, &p, &u).unwrap();
            let f = |t: &[ComplexTensor<f64>]| {
                let p = ConvParams::new(t[1].clone(), t[2].clone(), stride, kernel / 2).unwrap();
                pair(&u, &cconv1d_forward(&t[0], &p).unwrap())
            };
            let ts = [x, w, b];
            errs.compare("conv input", tensor_grad(&dx), &numeric(&ts, 0, &f));
            errs.compare("conv weight", wgrad(&g.weight), &numeric(&ts, 1, &f));
            errs.compare("conv bias", wgrad(&g.bias), &numeric(&ts, 2, &f));
        }
    }
    errs
}

pub fn activation_and_pool_gradients() -> Errors {
    let mut errs = Errors::default();
    for seed in 0..SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let z = rand_tensor(&mut r, &[2, 3, 8], true);
        let u = rand_tensor(&mut r, &[2, 3, 8], true);
        let ts = [z.clone()];

        let f = |t: &[ComplexTensor<f64>]| pair(&u, &crelu(&t[0]));
        errs.compare("crelu", tensor_grad(&crelu_backward(&z, &u).unwrap()), &numeric(&ts, 0, &f));

        let f = |t: &[ComplexTensor<f64>]| pair(&u, &csigmoid(&t[0]));
        errs.compare("csigmoid", tensor_grad(&csigmoid_backward(&z, &u).unwrap()), &numeric(&ts, 0, &f));

        let up = rand_tensor(&mut r, &[2, 3, 2], true);
        let f = |t: &[ComplexTensor<f64>]| pair(&up, &cavgpool(&t[0], 4).unwrap());
        errs.compare("cavgpool", tensor_grad(&cavgpool_backward(&z, 4, &up).unwrap()), &numeric(&ts, 0, &f));
    }
    errs
}

pub fn linear_gradients() -> Errors {
    let mut errs = Errors::default();
    for seed in 0..SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
        for complex in [true, false] {
            let x = rand_tensor(&mut r, &[3, 6], complex);
            let w = rand_tensor(&mut r, &[5, 6], complex);
            let b = rand_tensor(&mut r, &[5], complex);
            let p = LinearParams::new(w.clone(), b.clone()).unwrap();
            let u = rand_tensor(&mut r, &[3, 5], complex);
            let (dx, g) = clinear_backward(&x, &p, &u).unwrap();
            let f = |t: &[ComplexTensor<f64>]| {
                let p = LinearParams::new(t[1].clone(), t[2].clone()).unwrap();
                pair(&u, &clinear_forward(&t[0], &p).unwrap())
            };
            let ts = [x, w, b];
            errs.compare("linear input", tensor_grad(&dx), &numeric(&ts, 0, &f));
            errs.compare("linear weight", wgrad(&g.weight), &numeric(&ts, 1, &f));
            errs.compare("linear bias", wgrad(&g.bias), &numeric(&ts, 2, &f));
        }
    }
    errs
}

pub fn batchnorm_gradients() -> Errors {
    let mut errs = Errors::default();
    for seed in 0..SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(300 + seed);
        for complex in [true, false] {
            let mut x = rand_tensor(&mut r, &[4, 2, 5], complex);
            if complex {
                // correlate the planes so the off-diagonal whitening path is exercised
                let re = x.re().to_vec();
                for (y, v) in x.im_mut().unwrap().iter_mut().zip(re) {
                    *y += 0.7 * v;
                }
            }
            let mut p = if complex { BnParams::complex(2) } else { BnParams::real(2) };
            p.gamma = rand_tensor(&mut r, &[2], complex);
            p.beta = rand_tensor(&mut r, &[2], complex);
            let u = rand_tensor(&mut r, x.shape(), complex);
            let (dx, g) = cbatchnorm_backward(&x, &p, &u).unwrap();
            let base = p.clone();
            let f = |t: &[ComplexTensor<f64>]| {
                let mut p = base.clone();
                p.gamma = t[1].clone();
                p.beta = t[2].clone();
                pair(&u, &cbatchnorm_forward(&t[0], &p, BnMode::Train).unwrap().0)
            };
            let ts = [x, p.gamma.clone(), p.beta.clone()];
            errs.compare("bn input", tensor_grad(&dx), &numeric(&ts, 0, &f));
            errs.compare("bn gamma", wgrad(&g.gamma), &numeric(&ts, 1, &f));
            errs.compare("bn beta", wgrad(&g.beta), &numeric(&ts, 2, &f));
        }
    }
    errs
}

pub fn random_pred(r: &mut ChaCha8Rng, n: usize) -> (PredictedSpectrum<f64>, OccupancyMask) {
    let p_x = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
    let p_y = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
    let o_x = (0..n).map(|_| r.gen_bool(0.3)).collect();
    let o_y = (0..n).map(|_| r.gen_bool(0.3)).collect();
    (PredictedSpectrum { p_x, p_y }, OccupancyMask { o_x, o_y })
}

pub fn loss_numeric(p: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + STEP;
            let hi = f(&q);
            q[i] = p[i] - STEP;
            let lo = f(&q);
            q[i] = p[i];
            (hi - lo) / (2.0 * STEP)
        })
        .collect()
}

pub fn loss_gradients() -> Errors {
    let mut errs = Errors::default();
    for seed in 0..SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(400 + seed);
        let (pred, mask) = random_pred(&mut r, 32);
        for (gamma, alpha) in [(0.0, 1.0), (2.0, 0.25), (1.5, 0.5), (1.0, 3.0)] {
            let g = cfl(&pred, &mask, gamma, alpha).unwrap();
            let fx = |q: &[f64]| cfl(&PredictedSpectrum { p_x: q.to_vec(), p_y: pred.p_y.clone() }, &mask, gamma, alpha).unwrap().loss;
            let fy = |q: &[f64]| cfl(&PredictedSpectrum { p_x: pred.p_x.clone(), p_y: q.to_vec() }, &mask, gamma, alpha).unwrap().loss;
            errs.record("cfl", rel_err(&g.d_px, &loss_numeric(&pred.p_x, &fx)));
            errs.record("cfl", rel_err(&g.d_py, &loss_numeric(&pred.p_y, &fy)));

            let g = rfl(&pred.p_x, &mask.o_x, gamma, alpha).unwrap();
            let f = |q: &[f64]| rfl(q, &mask.o_x, gamma, alpha).unwrap().loss;
            errs.record("rfl", rel_err(&g.d_px, &loss_numeric(&pred.p_x, &f)));
        }
        let g = cbce(&pred, &mask).unwrap();
        let fx = |q: &[f64]| cbce(&PredictedSpectrum { p_x: q.to_vec(), p_y: pred.p_y.clone() }, &mask).unwrap().loss;
        let fy = |q: &[f64]| cbce(&PredictedSpectrum { p_x: pred.p_x.clone(), p_y: q.to_vec() }, &mask).unwrap().loss;
        errs.record("cbce", rel_err(&g.d_px, &loss_numeric(&pred.p_x, &fx)));
        errs.record("cbce", rel_err(&g.d_py, &loss_numeric(&pred.p_y, &fy)));
        let g = rbce(&pred.p_y, &mask.o_y).unwrap();
        let f = |q: &[f64]| rbce(q, &mask.o_y).unwrap().loss;
        errs.record("rbce", rel_err(&g.d_px, &loss_numeric(&pred.p_y, &f)));
    }
    errs
}

/// Whole miniature network in train mode, loss = complex focal loss summed over the batch.
pub fn model_loss(model: &Model<f64>, x: &ComplexTensor<f64>, masks: &[OccupancyMask]) -> f64 {
    let (out, _) = model.forward_tape(x, BnMode::Train).unwrap();
    split_predictions(&out, model.input_bins())
        .iter()
        .zip(masks)
        .map(|(p, m)| cfl(p, m, 2.0, 0.25).unwrap().loss)
        .sum()
}

/// Reads (and optionally overwrites) one scalar of parameter `pi`.
pub fn scalar(model: &mut Model<f64>, pi: usize, plane: usize, i: usize, set: Option<f64>) -> f64 {
    let mut params = model.params_mut();
    let p = &mut params[pi];
    let slot = if plane == 0 { &mut p.re_mut()[i] } else { &mut p.im_mut().unwrap()[i] };
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}

pub fn model_end_to_end_gradients() -> Errors {
    let mut errs = Errors::default();
    for (seed, mode) in [(0, Mode::Complex), (1, Mode::Complex), (2, Mode::Real)] {
        let mut r = ChaCha8Rng::seed_from_u64(500 + seed);
        let cfg = ModelConfig::miniature(256, mode).with_seed(seed);
        let mut model = Model::<f64>::build(&cfg).unwrap();
        let complex = mode == Mode::Complex;
        let x = rand_tensor(&mut r, &[4, 1, 256], complex);
        let masks: Vec<_> = (0..4).map(|_| random_pred(&mut r, 256).1).collect();

        let (out, tape) = model.forward_tape(&x, BnMode::Train).unwrap();
        let preds = split_predictions(&out, 256);
        let (mut dx, mut dy) = (Vec::new(), Vec::new());
        for (p, m) in preds.iter().zip(&masks) {
            let g = cfl(p, m, 2.0, 0.25).unwrap();
            dx.push(g.d_px);
            dy.push(g.d_py);
        }
        // a real model feeds the same probability to both channels
        let up = if complex {
            output_gradient(&dx, Some(&dy), 256)
        } else {
            let summed: Vec<Vec<f64>> = dx.iter().zip(&dy).map(|(a, b)| a.iter().zip(b).map(|(a, b)| a + b).collect()).collect();
            output_gradient(&summed, None, 256)
        };
        let grads = model.backward(&tape, &up).unwrap();
        assert_eq!(grads.len(), model.params().len());

        // probe a few coordinates of every parameter tensor
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for pi in 0..grads.len() {
            let len = model.params()[pi].len();
            for _ in 0..2 {
                let i = r.gen_range(0..len);
                let planes = if complex { 2 } else { 1 };
                for plane in 0..planes {
                    let v = scalar(&mut model, pi, plane, i, None);
                    scalar(&mut model, pi, plane, i, Some(v + MODEL_STEP));
                    let hi = model_loss(&model, &x, &masks);
                    scalar(&mut model, pi, plane, i, Some(v - MODEL_STEP));
                    let lo = model_loss(&model, &x, &masks);
                    scalar(&mut model, pi, plane, i, Some(v));
                    n.push((hi - lo) / (2.0 * MODEL_STEP));
                    a.push(if plane == 0 { grads[pi].d_x[i] } else { grads[pi].d_y.as_ref().unwrap()[i] });
                }
            }
        }
        errs.record(&format!("{mode} model"), rel_err(&a, &n));
    }
    errs
}
