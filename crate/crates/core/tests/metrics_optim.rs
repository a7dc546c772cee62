mod common;

use dan::metrics::*;
use dan::optim::Adadelta;
use dan::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Plain recursive Levenshtein over all alignments, memoised on suffixes.
fn brute_edit(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[a.len()][b.len()] {
            return v;
        }
        let v = match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = go(ra, rb, memo) + usize::from(x != y);
                let del = go(ra, b, memo) + 1;
                let ins = go(a, rb, memo) + 1;
                sub.min(del).min(ins)
            }
        };
        memo[a.len()][b.len()] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, &mut memo)
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance("abc", "abc"), 0);
    assert_eq!(edit_distance("", "abc"), 3);
    let k: Vec<char> = "kitten".chars().collect();
    let s: Vec<char> = "sitting".chars().collect();
    assert_eq!(edit_distance("kitten", "sitting"), brute_edit(&k, &s));
    assert_eq!(edit_distance("kitten", "sitting"), 3);
}

#[test]
fn edit_distance_matches_recursive_oracle_on_random_pairs() {
    let mut rng = common::rng(11);
    let alphabet: Vec<char> = "abcd".chars().collect();
    for _ in 0..1000 {
        let mut s = || -> Vec<char> {
            let n = rng.gen_range(0..9);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let (a, b) = (s(), s());
        let (sa, sb): (String, String) = (a.iter().collect(), b.iter().collect());
        assert_eq!(edit_distance(&sa, &sb), brute_edit(&a, &b), "{sa:?} vs {sb:?}");
    }
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }

    #[test]
    fn increasing_centers_never_misalign(mut xs in proptest::collection::vec(0usize..500, 0..40)) {
        xs.sort_unstable();
        xs.dedup();
        prop_assert_eq!(measure_misalignment(&xs), 0);
    }
}

#[test]
fn cer_wer_and_accuracy() {
    let gts = ["0123456789"];
    assert_eq!(cer(&gts, &gts), 0.0);
    assert!((cer(&["0123456780"], &gts) - 0.1).abs() < 1e-15);
    let preds = ["AB", "C0FE", ""];
    let labels = ["AB", "C0FFEE", "12"];
    let per_sample: usize = preds.iter().zip(&labels).map(|(p, g)| edit_distance(p, g)).sum();
    let total: usize = labels.iter().map(|g| g.len()).sum();
    assert_eq!(cer(&preds, &labels), per_sample as f64 / total as f64);
    assert!((seq_acc(&preds, &labels) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(wer(&["a b c"], &["a x c"]), 1.0 / 3.0);
    assert_eq!(wer(&["a b"], &["a b"]), 0.0);
}

#[test]
fn misalignment_counts() {
    assert_eq!(measure_misalignment(&[2, 5, 3, 7, 6]), 2);
    assert_eq!(measure_misalignment(&[9]), 0);
    assert_eq!(measure_misalignment(&[]), 0);
}

#[test]
fn mm_per_image_buckets() {
    let r = mm_per_image(&[(12, 3)], &DEFAULT_BUCKETS);
    assert_eq!(r.buckets[0].mm_per_img, Some(3.0));
    assert!(r.buckets[1..].iter().all(|b| b.mm_per_img.is_none() && b.n == 0));
    assert_eq!(
        DEFAULT_BUCKETS,
        [(0, 30), (30, 40), (40, 50), (50, 60), (60, 70)]
    );
    let samples = [(31, 1), (35, 4), (39, 0), (45, 2), (5, 1)];
    let r = mm_per_image(&samples, &DEFAULT_BUCKETS);
    assert_eq!(r.buckets[1].n, 3);
    assert_eq!(r.buckets[1].mm_per_img, Some(5.0 / 3.0));
    assert_eq!(r.overall(), Some(8.0 / 5.0));
    let csv = r.to_csv();
    assert!(csv.starts_with("bucket_lo,bucket_hi,n,mm_per_img\n"));
    assert!(csv.contains("\n50,60,0,\n"));
}

fn scalar_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(&[1], vec![value]).unwrap()).unwrap();
    s
}

#[test]
fn adadelta_two_step_closed_form() {
    let (rho, eps, lr) = (0.9, 1e-6, 1.0);
    let (g1, g2) = (0.5, -0.25);
    let mut store = scalar_store(2.0);
    let mut opt = Adadelta::new(&store, rho, eps);
    let id = store.id("p").unwrap();
    store.get_mut(id).set_grad(vec![g1]).unwrap();
    opt.step(&mut store, lr).unwrap();
    store.get_mut(id).set_grad(vec![g2]).unwrap();
    opt.step(&mut store, lr).unwrap();

    let eg1 = (1.0 - rho) * g1 * g1;
    let d1 = -(eps.sqrt() / (eg1 + eps).sqrt()) * g1;
    let ex1 = (1.0 - rho) * d1 * d1;
    let eg2 = rho * eg1 + (1.0 - rho) * g2 * g2;
    let d2 = -((ex1 + eps).sqrt() / (eg2 + eps).sqrt()) * g2;
    let expected = 2.0 + lr * d1 + lr * d2;
    assert!((store.get(id).data()[0] - expected).abs() <= 1e-12);
    assert!((opt.sq_grad(0)[0] - eg2).abs() <= 1e-12);
    assert!((opt.sq_update(0)[0] - (rho * ex1 + (1.0 - rho) * d2 * d2)).abs() <= 1e-12);
}

#[test]
fn adadelta_zero_grad_and_zero_lr() {
    let mut store = scalar_store(1.5);
    let id = store.id("p").unwrap();
    let mut opt = Adadelta::new(&store, 0.9, 1e-6);
    store.get_mut(id).set_grad(vec![0.0]).unwrap();
    opt.step(&mut store, 1.0).unwrap();
    assert_eq!(store.get(id).data()[0], 1.5);
    store.get_mut(id).set_grad(vec![3.0]).unwrap();
    opt.step(&mut store, 0.0).unwrap();
    assert_eq!(store.get(id).data()[0], 1.5);
    assert!(opt.sq_grad(0)[0] >= 0.0 && opt.sq_update(0)[0] >= 0.0);
}

#[test]
fn adadelta_is_deterministic_and_state_round_trips() {
    let run = |grads: &[f64]| {
        let mut store = scalar_store(0.3);
        let id = store.id("p").unwrap();
        let mut opt = Adadelta::new(&store, 0.95, 1e-6);
        for &g in grads {
            store.get_mut(id).set_grad(vec![g]).unwrap();
            opt.step(&mut store, 1.0).unwrap();
        }
        (store.get(id).data()[0], opt, store)
    };
    let (a, opt, store) = run(&[0.1, -0.7, 0.2]);
    let (b, _, _) = run(&[0.1, -0.7, 0.2]);
    assert_eq!(a.to_bits(), b.to_bits());
    let mut fresh = Adadelta::new(&store, 0.95, 1e-6);
    fresh.load_state(&store, &opt.state_tensors(&store)).unwrap();
    assert_eq!(fresh, opt);
}
