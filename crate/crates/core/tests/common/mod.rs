#![allow(dead_code)]

use dan::graph::sigmoid;
use dan::layers::GruParams;
use dan::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contract an arbitrary graph output against fixed random weights so every
/// output coordinate carries a distinct upstream gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let w = random_tensor(&mut r, g.shape(out));
    let w = g.input(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Central finite differences over every coordinate of every input.
///
/// Returns the largest relative error `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    const EPS: f64 = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Tiny model layout used for gradient and structural tests.
pub fn tiny_config(decoder: dan::config::DecoderKind) -> dan::config::ModelConfig {
    let mut cfg = dan::config::ModelConfig::toy();
    cfg.decoder = decoder;
    cfg.encoder.max_width = 64;
    for s in cfg.encoder.stages.iter_mut() {
        s.channels = 3;
    }
    cfg.cam.layers = 4;
    cfg.cam.max_t = 5;
    cfg.cam.channels = 4;
    cfg.hidden = 5;
    cfg.attn_dim = 4;
    cfg
}

/// Outcome of [`model_grad_check`].
pub struct ModelGradCheck {
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates whose `±ε` interval crosses a ReLU kink; central
    /// differences are not valid there, so they are counted but not scored.
    pub kinked: usize,
}

/// Finite-difference check of the teacher-forced loss against every model
/// parameter, probing at most `per_tensor` evenly spaced coordinates of each.
pub fn model_grad_check(
    model: &mut dan::model::Recognizer,
    images: &[Tensor],
    labels: &[Vec<usize>],
    per_tensor: usize,
) -> ModelGradCheck {
    const EPS: f64 = 1e-5;
    // zero biases on blank images put activations exactly on the relu kink
    let mut r = rng(0xb1a5);
    let ids: Vec<_> = model.store().ids().collect();
    for &id in &ids {
        if model.store().name(id).ends_with(".b") {
            for v in model.store_mut().get_mut(id).data_mut() {
                *v = r.gen_range(-0.3..0.3);
            }
        }
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    let eval = |m: &dan::model::Recognizer| {
        let mut g = Graph::new();
        let l = m.loss(&mut g, &refs, labels).unwrap();
        (g.value(l).data()[0], g.relu_pattern())
    };
    let mut g = Graph::new();
    let l = model.loss(&mut g, &refs, labels).unwrap();
    let pattern = g.relu_pattern();
    g.backward(l).unwrap();
    model.store_mut().zero_grads();
    g.accumulate_param_grads(model.store_mut()).unwrap();
    let mut out = ModelGradCheck {
        worst: 0.0,
        worst_param: String::new(),
        checked: 0,
        kinked: 0,
    };
    for id in ids {
        let n = model.store().get(id).numel();
        let step = n.div_ceil(per_tensor.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let analytic = model.store().get(id).grad().map_or(0.0, |g| g[j]);
            let orig = model.store().get(id).data()[j];
            model.store_mut().get_mut(id).data_mut()[j] = orig + EPS;
            let (lp, pp) = eval(model);
            model.store_mut().get_mut(id).data_mut()[j] = orig - EPS;
            let (lm, pm) = eval(model);
            model.store_mut().get_mut(id).data_mut()[j] = orig;
            if pp != pattern || pm != pattern {
                out.kinked += 1;
                continue;
            }
            out.checked += 1;
            let numeric = (lp - lm) / (2.0 * EPS);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            if rel > out.worst {
                out.worst = rel;
                out.worst_param = model.store().name(id).to_string();
            }
        }
    }
    out
}

/// Direct cross-correlation with zero padding.
pub fn conv_oracle(
    x: &Tensor,
    k: &Tensor,
    b: &[f64],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ko, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Tensor::zeros(&[n, ko, oh, ow]);
    for bi in 0..n {
        for o in 0..ko {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.at(&[bi, ci, iy as usize, ix as usize])
                                    * k.at(&[o, ci, ky, kx]);
                            }
                        }
                    }
                    let off = out.offset(&[bi, o, oy, ox]);
                    out.data_mut()[off] = s;
                }
            }
        }
    }
    out
}

pub fn run_conv(x: &Tensor, k: &Tensor, b: Option<&Tensor>, s: (usize, usize), p: (usize, usize)) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.input(k.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv2d(xv, kv, bv, s, p).unwrap();
    g.value(y).clone()
}

pub fn gru_store(input: usize, hidden: usize, seed: u64) -> (ParamStore, GruParams) {
    let mut store = ParamStore::new();
    let p = GruParams::new(&mut store, &mut rng(seed), "gru", input, hidden).unwrap();
    (store, p)
}

pub fn run_gru(store: &ParamStore, p: &GruParams, x: &Tensor, h: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let hv = g.input(h.clone());
    let out = p.cell(&mut g, store, xv, hv).unwrap();
    g.value(out).clone()
}

/// Evaluate reset, update and candidate equations one scalar at a time.
pub fn gru_oracle(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hs = p.hidden_size;
    let w_ih = store.get(p.input_weights);
    let w_hh = store.get(p.recurrent_weights);
    let b_ih = store.get(p.input_bias).data();
    let b_hh = store.get(p.recurrent_bias).data();
    let dot_row = |w: &Tensor, row: usize, v: &[f64]| -> f64 {
        (0..v.len()).map(|j| w.at(&[row, j]) * v[j]).sum()
    };
    (0..hs)
        .map(|i| {
            let r = sigmoid(dot_row(w_ih, i, x) + b_ih[i] + dot_row(w_hh, i, h) + b_hh[i]);
            let z = sigmoid(
                dot_row(w_ih, hs + i, x) + b_ih[hs + i] + dot_row(w_hh, hs + i, h) + b_hh[hs + i],
            );
            let n = (dot_row(w_ih, 2 * hs + i, x)
                + b_ih[2 * hs + i]
                + r * (dot_row(w_hh, 2 * hs + i, h) + b_hh[2 * hs + i]))
                .tanh();
            (1.0 - z) * n + z * h[i]
        })
        .collect()
}
