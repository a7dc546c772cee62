mod common;

use common::{conv_oracle, grad_check, gru_oracle, gru_store, project, random_tensor, rng, run_conv, run_gru};
use dan::{DanError, Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn run_conv_t(
    x: &Tensor,
    k: &Tensor,
    s: (usize, usize),
    p: (usize, usize),
    op: (usize, usize),
) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.input(k.clone());
    let y = g.conv_transpose2d(xv, kv, None, s, p, op).unwrap();
    g.value(y).clone()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
    let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::zeros(&[1]);
    assert_eq!(run_conv(&x, &k, Some(&b), (1, 1), (0, 0)).data(), &[5.0]);
}

#[test]
fn conv_of_zero_input_is_zero() {
    let mut r = rng(1);
    let k = random_tensor(&mut r, &[3, 2, 3, 3]);
    let y = run_conv(&Tensor::zeros(&[1, 2, 5, 4]), &k, Some(&Tensor::zeros(&[3])), (1, 1), (1, 1));
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_matches_quadruple_loop_on_5x5() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[1, 1, 5, 5]);
    let k = random_tensor(&mut r, &[1, 1, 3, 3]);
    let y = run_conv(&x, &k, None, (1, 1), (0, 0));
    let want = conv_oracle(&x, &k, &[0.0], (1, 1), (0, 0));
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.max_abs_diff(&want) <= 1e-10);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.input(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, k, None, (1, 1), (0, 0)),
        Err(DanError::Config(_))
    ));
}

#[test]
fn conv_transpose_scalar_kernel_scales() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[1, 1, 3, 4]);
    let k = Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap();
    let y = run_conv_t(&x, &k, (1, 1), (0, 0), (0, 0));
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 2.5 * b);
    }
}

#[test]
fn conv_transpose_stride2_doubles() {
    let x = Tensor::zeros(&[1, 1, 4, 4]);
    let k = Tensor::zeros(&[1, 1, 3, 3]);
    let y = run_conv_t(&x, &k, (2, 2), (1, 1), (1, 1));
    assert_eq!(y.shape(), &[1, 1, 8, 8]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(4);
    for &(s, p, op) in &[
        ((1, 1), (0, 0), (0, 0)),
        ((2, 2), (1, 1), (1, 1)),
        ((1, 2), (1, 1), (0, 1)),
        ((2, 1), (0, 1), (1, 0)),
    ] {
        let x = random_tensor(&mut r, &[2, 3, 6, 8]);
        let k = random_tensor(&mut r, &[4, 3, 3, 3]);
        let cx = run_conv(&x, &k, None, s, p);
        let y = random_tensor(&mut r, cx.shape());
        let ty = run_conv_t(&y, &k, s, p, op);
        assert_eq!(ty.shape(), x.shape());
        let lhs = dot(&cx, &y);
        let rhs = dot(&x, &ty);
        assert!((lhs - rhs).abs() <= 1e-8, "stride {s:?}: {lhs} vs {rhs}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn conv_agrees_with_oracle(
        n in 1usize..3, c in 1usize..4, h in 1usize..7, w in 1usize..7,
        k in 1usize..4, kh in 1usize..4, kw in 1usize..4,
        sh in 1usize..3, sw in 1usize..3, ph in 0usize..2, pw in 0usize..2,
        seed in any::<u64>(),
    ) {
        prop_assume!(kh <= h + 2 * ph && kw <= w + 2 * pw);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let kt = random_tensor(&mut r, &[k, c, kh, kw]);
        let b = random_tensor(&mut r, &[k]);
        let y = run_conv(&x, &kt, Some(&b), (sh, sw), (ph, pw));
        let want = conv_oracle(&x, &kt, b.data(), (sh, sw), (ph, pw));
        prop_assert_eq!(y.shape(), want.shape());
        prop_assert!(y.max_abs_diff(&want) <= 1e-10);
    }
}

// ---- GRU -----------------------------------------------------------------

#[test]
fn gru_zero_weights_zero_state_stays_zero() {
    let (mut store, p) = gru_store(3, 4, 5);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let h = run_gru(&store, &p, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 4]));
    assert!(h.data().iter().all(|v| *v == 0.0));
}

#[test]
fn gru_saturated_update_gate_keeps_state() {
    let (mut store, p) = gru_store(3, 4, 6);
    let b = store.get_mut(p.input_bias).data_mut();
    for v in &mut b[4..8] {
        *v = 50.0;
    }
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[1, 3]);
    let h0 = Tensor::from_fn(&[1, 4], |_| r.gen_range(-0.9..0.9));
    let h1 = run_gru(&store, &p, &x, &h0);
    assert!(h1.max_abs_diff(&h0) <= 1e-3);
}

#[test]
fn gru_matches_scalar_oracle() {
    for seed in 0..5 {
        let (store, p) = gru_store(5, 3, seed);
        let mut r = rng(100 + seed);
        let x = random_tensor(&mut r, &[2, 5]);
        let h = random_tensor(&mut r, &[2, 3]);
        let got = run_gru(&store, &p, &x, &h);
        for b in 0..2 {
            let want = gru_oracle(&store, &p, &x.data()[b * 5..][..5], &h.data()[b * 3..][..3]);
            for i in 0..3 {
                assert!((got.at(&[b, i]) - want[i]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn gru_output_bounded_from_zero_state() {
    for seed in 0..10 {
        let (store, p) = gru_store(4, 6, seed);
        let h = run_gru(&store, &p, &Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 6]));
        assert!(h.data().iter().all(|v| v.abs() < 1.0));
    }
}

// ---- small ops -------------------------------------------------------------

#[test]
fn sigmoid_softmax_embedding_basics() {
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[1]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);

    let c = g.input(Tensor::full(&[2, 4], 3.0));
    let sm = g.softmax(c);
    assert!(g.value(sm).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

    let mut r = rng(8);
    let table = random_tensor(&mut r, &[5, 3]);
    let t = g.input(table.clone());
    let e = g.embedding(t, &[3, 0]).unwrap();
    assert_eq!(&g.value(e).data()[..3], &table.data()[9..12]);
    assert_eq!(&g.value(e).data()[3..], &table.data()[..3]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(9);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[6, 7], |_| r.gen_range(-30.0..30.0)));
    let s = g.softmax(x);
    for row in g.value(s).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

// ---- backward ----------------------------------------------------------------

#[test]
fn grad_of_weighted_sum_is_input() {
    let x = Tensor::new(&[1, 3], vec![0.5, -2.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let w = g.leaf(Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
    let xv = g.input(x.clone());
    let p = g.mul(w, xv).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), x.data());
}

#[test]
fn backward_twice_is_an_error_until_reset() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::full(&[2], 1.0));
    let l = g.sum(w);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(DanError::Graph(_))));
    g.reset_grads();
    g.backward(l).unwrap();
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::full(&[2], 1.0));
    assert!(g.backward(w).is_err());
}

#[test]
fn disconnected_parameter_gets_zero_grad() {
    let mut store = ParamStore::new();
    let a = store.add_anon(Tensor::full(&[2], 1.0)).unwrap();
    let b = store.add_anon(Tensor::full(&[3], 1.0)).unwrap();
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let _bv = g.param(&store, b);
    let l = g.sum(av);
    g.backward(l).unwrap();
    g.accumulate_param_grads(&mut store).unwrap();
    assert_eq!(store.get(a).grad().unwrap(), &[1.0, 1.0]);
    assert_eq!(store.get(b).grad().unwrap(), &[0.0, 0.0, 0.0]);
}

trait AddNamed {
    fn add_anon(&mut self, t: Tensor) -> dan::Result<dan::ParamId>;
}

impl AddNamed for ParamStore {
    fn add_anon(&mut self, t: Tensor) -> dan::Result<dan::ParamId> {
        let name = format!("p{}", self.len());
        ParamStore::add(self, name, t)
    }
}

// ---- finite-difference checks, one per differentiable op ----------------------

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let err = grad_check(inputs, f);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn fd_conv2d() {
    let mut r = rng(20);
    let ins = [
        random_tensor(&mut r, &[2, 2, 5, 6]),
        random_tensor(&mut r, &[3, 2, 3, 3]),
        random_tensor(&mut r, &[3]),
    ];
    check(&ins, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1)).unwrap();
        project(g, y, 1)
    });
}

#[test]
fn fd_conv_transpose2d() {
    let mut r = rng(21);
    let ins = [
        random_tensor(&mut r, &[2, 3, 3, 4]),
        random_tensor(&mut r, &[3, 2, 3, 3]),
        random_tensor(&mut r, &[2]),
    ];
    check(&ins, |g, v| {
        let y = g
            .conv_transpose2d(v[0], v[1], Some(v[2]), (2, 2), (1, 1), (1, 1))
            .unwrap();
        project(g, y, 2)
    });
}

#[test]
fn fd_linear_and_elementwise() {
    let mut r = rng(22);
    let ins = [
        random_tensor(&mut r, &[3, 4]),
        random_tensor(&mut r, &[5, 4]),
        random_tensor(&mut r, &[5]),
        random_tensor(&mut r, &[3, 5]),
    ];
    check(&ins, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        let a = g.tanh(y);
        let s = g.sigmoid(v[3]);
        let m = g.mul(a, s).unwrap();
        let d = g.sub(m, v[3]).unwrap();
        let e = g.add(d, y).unwrap();
        let rl = g.relu(e);
        let sc = g.scale(rl, -1.5);
        project(g, sc, 3)
    });
}

#[test]
fn fd_softmax_and_cross_entropy() {
    let mut r = rng(23);
    let ins = [random_tensor(&mut r, &[4, 6])];
    check(&ins, |g, v| {
        let s = g.softmax(v[0]);
        project(g, s, 4)
    });
    check(&ins, |g, v| {
        g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)])
            .unwrap()
    });
}

#[test]
fn fd_embedding_concat_slice() {
    let mut r = rng(24);
    let ins = [random_tensor(&mut r, &[5, 3]), random_tensor(&mut r, &[2, 4])];
    check(&ins, |g, v| {
        let e = g.embedding(v[0], &[4, 4]).unwrap();
        let c = g.concat(&[e, v[1]]).unwrap();
        let s = g.slice_cols(c, 2, 4).unwrap();
        project(g, s, 5)
    });
}

#[test]
fn fd_attention_ops() {
    let mut r = rng(25);
    let ins = [
        random_tensor(&mut r, &[2, 3, 2, 4]),
        Tensor::from_fn(&[2, 5, 2, 4], |_| r.gen_range(0.1..1.0)),
        random_tensor(&mut r, &[2, 3]),
    ];
    check(&ins, |g, v| {
        let a = g.channel_normalize(v[1]).unwrap();
        let c = g.context(v[0], a).unwrap();
        let s = g.select_step(c, 3).unwrap();
        project(g, s, 6)
    });
    check(&ins, |g, v| {
        let f = g.reshape(v[0], &[2, 3, 8]).unwrap();
        let q = g.query_score(v[2], f).unwrap();
        let sm = g.softmax(q);
        let ss = g.spatial_sum(v[0]).unwrap();
        let a = project(g, sm, 7);
        let b = project(g, ss, 8);
        let t = g.add(a, b).unwrap();
        g.scale(t, 1.0)
    });
}

#[test]
fn fd_broadcast_and_transpose() {
    let mut r = rng(26);
    let ins = [random_tensor(&mut r, &[2, 3, 4]), random_tensor(&mut r, &[2, 4])];
    check(&ins, |g, v| {
        let a = g.add_rows(v[0], v[1]).unwrap();
        let t = g.swap_last(a).unwrap();
        let th = g.tanh(t);
        project(g, th, 9)
    });
}

#[test]
fn fd_gru_cell() {
    let (store, p) = gru_store(3, 4, 27);
    let mut r = rng(28);
    let ins = [
        random_tensor(&mut r, &[2, 3]),
        random_tensor(&mut r, &[2, 4]),
        store.get(p.input_weights).clone(),
        store.get(p.recurrent_weights).clone(),
    ];
    check(&ins, |g, v| {
        // rebind the GRU weights to graph leaves so their gradients are checked too
        let hs = 4;
        let gi = g.linear(v[0], v[2], None).unwrap();
        let gh = g.linear(v[1], v[3], None).unwrap();
        let (ir, hr) = (g.slice_cols(gi, 0, hs).unwrap(), g.slice_cols(gh, 0, hs).unwrap());
        let (iz, hz) = (g.slice_cols(gi, hs, hs).unwrap(), g.slice_cols(gh, hs, hs).unwrap());
        let (inn, hn) = (
            g.slice_cols(gi, 2 * hs, hs).unwrap(),
            g.slice_cols(gh, 2 * hs, hs).unwrap(),
        );
        let rr = g.add(ir, hr).unwrap();
        let rg = g.sigmoid(rr);
        let zz = g.add(iz, hz).unwrap();
        let zg = g.sigmoid(zz);
        let rn = g.mul(rg, hn).unwrap();
        let nn = g.add(inn, rn).unwrap();
        let nn = g.tanh(nn);
        let d = g.sub(v[1], nn).unwrap();
        let k = g.mul(zg, d).unwrap();
        let h = g.add(nn, k).unwrap();
        project(g, h, 10)
    });
    // and the cell as packaged, through its inputs
    let ins = [random_tensor(&mut r, &[2, 3]), random_tensor(&mut r, &[2, 4])];
    check(&ins, |g, v| {
        let h = p.cell(g, &store, v[0], v[1]).unwrap();
        project(g, h, 11)
    });
}

#[test]
fn gradients_stay_finite() {
    let mut r = rng(29);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[3, 8], |_| r.gen_range(-50.0..50.0)));
    let s = g.softmax(x);
    let t = g.sigmoid(x);
    let ce = g.cross_entropy(x, &[Some(0), Some(7), Some(3)]).unwrap();
    let a = project(&mut g, s, 1);
    let b = project(&mut g, t, 2);
    let ab = g.add(a, b).unwrap();
    let l = g.add(ab, ce).unwrap();
    g.backward(l).unwrap();
    assert!(g.value(l).is_finite());
    assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn relu_pattern_tracks_input_signs() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    let z = g.scale(y, -1.0);
    let _ = g.relu(z);
    assert_eq!(g.relu_pattern(), [false, false, true, false, false, false]);
}
