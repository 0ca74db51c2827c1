use conformer_core::attention::*;
use conformer_core::numcore::{grad_check, Bound, Mask, ParamStore, Tape, Tensor, DEFAULT_EPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Attention by explicit loops with an additive −∞ mask.
fn loop_attention(q: &Tensor, k: &Tensor, v: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let (l, dk, dv) = (q.shape()[0], q.shape()[1], v.shape()[1]);
    let lk = k.shape()[0];
    let mut out = Tensor::zeros([l, dv]);
    for i in 0..l {
        let logits: Vec<f64> = (0..lk)
            .map(|j| {
                if allowed(i, j) {
                    (0..dk).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (dk as f64).sqrt()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dv {
            let s: f64 = (0..lk).map(|j| e[j] / z * v.at(&[j, c])).sum();
            out.set(&[i, c], s);
        }
    }
    out
}

/// Multi-head attention by loops over an `[L, d]` input.
fn loop_mha(x: &Tensor, p: &MhaParams, store: &ParamStore, allowed: impl Fn(usize, usize) -> bool + Copy) -> Tensor {
    let q = x.matmul(store.get(p.wq)).unwrap();
    let k = x.matmul(store.get(p.wk)).unwrap();
    let v = x.matmul(store.get(p.wv)).unwrap();
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let dh = p.head_width();
    let mut cat = Tensor::zeros([l, d]);
    for h in 0..p.heads() {
        let o = loop_attention(
            &q.narrow(1, h * dh, dh).unwrap(),
            &k.narrow(1, h * dh, dh).unwrap(),
            &v.narrow(1, h * dh, dh).unwrap(),
            allowed,
        );
        for i in 0..l {
            for c in 0..dh {
                cat.set(&[i, h * dh + c], o.at(&[i, c]));
            }
        }
    }
    cat.matmul(store.get(p.wo)).unwrap()
}

fn setup(seed: u64, l: usize, d: usize, heads: usize) -> (ParamStore, MhaParams, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = MhaParams::new(&mut store, "mha", d, heads, &mut rng).unwrap();
    let x = Tensor::randn([l, d], 1.0, &mut rng);
    (store, p, x)
}

#[test]
fn single_position_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn([1, 3], 1.0, &mut rng);
    let k = Tensor::randn([1, 3], 1.0, &mut rng);
    let v = Tensor::randn([1, 5], 1.0, &mut rng);
    assert_eq!(scaled_dot_attention(&q, &k, &v, None).unwrap(), v);
}

#[test]
fn identical_keys_average_allowed_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::randn([4, 3], 1.0, &mut rng);
    let row = Tensor::randn([3], 1.0, &mut rng);
    let k = Tensor::stack(&vec![row; 5]).unwrap();
    let v = Tensor::randn([5, 2], 1.0, &mut rng);
    let mask = Mask::from_fn(4, 5, |i, j| j <= i + 1);
    let out = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
    for i in 0..4 {
        for c in 0..2 {
            let n = (i + 2).min(5);
            let mean: f64 = (0..n).map(|j| v.at(&[j, c])).sum::<f64>() / n as f64;
            assert!((out.at(&[i, c]) - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn unmasked_attention_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = Tensor::randn([8, 4], 1.0, &mut rng);
    let k = Tensor::randn([8, 4], 1.0, &mut rng);
    let v = Tensor::randn([8, 4], 1.0, &mut rng);
    let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
    assert!(out.max_abs_diff(&loop_attention(&q, &k, &v, |_, _| true)) <= 1e-12);
}

#[test]
fn all_masked_row_is_an_error() {
    let t = Tensor::zeros([2, 2]);
    let mask = Mask::from_fn(2, 2, |i, _| i == 0);
    assert!(scaled_dot_attention(&t, &t, &t, Some(&mask)).is_err());
}

#[test]
fn band_of_width_two() {
    let m = BandMask::new(2).unwrap();
    let rows: Vec<Vec<usize>> = (0..4).map(|i| (0..4).filter(|&j| m.allowed(i, j)).collect()).collect();
    assert_eq!(rows, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3]]);
    assert!(BandMask::new(3).is_err());
    assert!(BandMask::new(0).is_err());
}

#[test]
fn head_count_must_divide_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MhaParams::new(&mut ParamStore::new(), "m", 10, 4, &mut rng).is_err());
}

#[test]
fn windowed_mha_matches_masked_loop_oracle() {
    for w in [2, 4, 8] {
        let (store, p, x) = setup(10 + w as u64, 32, 16, 4);
        let band = BandMask::new(w).unwrap();
        let oracle = loop_mha(&x, &p, &store, |i, j| band.allowed(i, j));
        for path in [AttentionPath::Dense, AttentionPath::Banded] {
            let tape = Tape::new();
            let b = store.bind_constant(&tape);
            let out = sliding_window_mha(tape.constant(x.clone()), &p, &b, &band, path).unwrap();
            assert!(out.value().max_abs_diff(&oracle) <= 1e-10, "w={w} {path:?}");
        }
        assert!(banded_mha_fast(&x, &p, &store, &band).unwrap().max_abs_diff(&oracle) <= 1e-10);
        assert!(sliding_window_mha_dense(&x, &p, &store, &band).unwrap().max_abs_diff(&oracle) <= 1e-10);
    }
}

#[test]
fn wide_window_is_full_attention_bitwise() {
    let (store, p, x) = setup(5, 12, 8, 2);
    let band = BandMask::new(2 * 11).unwrap();
    let full = full_mha(&x, &p, &store).unwrap();
    assert_eq!(sliding_window_mha_dense(&x, &p, &store, &band).unwrap(), full);
    let tape = Tape::new();
    let b = store.bind_constant(&tape);
    let xv = tape.constant(x.clone());
    let a = sliding_window_mha(xv, &p, &b, &band, AttentionPath::Dense).unwrap().value();
    let f = mha(xv, xv, &p, &b, None).unwrap().value();
    assert_eq!(*a, *f);
    assert_eq!(*a, full);
}

#[test]
fn batched_equals_per_sample() {
    let (store, p, x0) = setup(6, 10, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let x1 = Tensor::randn([10, 8], 1.0, &mut rng);
    let xb = Tensor::stack(&[x0.clone(), x1.clone()]).unwrap();
    let band = BandMask::new(4).unwrap();
    let tape = Tape::new();
    let b = store.bind_constant(&tape);
    let out = sliding_window_mha(tape.constant(xb), &p, &b, &band, AttentionPath::Banded).unwrap().value();
    for (i, xi) in [x0, x1].iter().enumerate() {
        let single = banded_mha_fast(xi, &p, &store, &band).unwrap();
        assert!(out.select(0, i).max_abs_diff(&single) < 1e-13);
    }
}

#[test]
fn cross_attention_shapes() {
    let (store, p, x) = setup(7, 9, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let src = Tensor::randn([2, 13, 8], 1.0, &mut rng);
    let q = Tensor::stack(&[x.clone(), x]).unwrap();
    let tape = Tape::new();
    let b = store.bind_constant(&tape);
    let out = mha(tape.constant(q), tape.constant(src), &p, &b, None).unwrap();
    assert_eq!(out.shape(), vec![2, 9, 8]);
}

#[test]
fn windowed_mha_gradients() {
    let (store, p, x) = setup(8, 7, 8, 2);
    let band = BandMask::new(2).unwrap();
    let mut inputs = store.values().to_vec();
    inputs.push(x);
    let n = store.len();
    let target = Tensor::from_fn([7, 8], |i| (i as f64).cos());
    for path in [AttentionPath::Dense, AttentionPath::Banded] {
        let r = grad_check(
            |tape, vars| {
                let b = Bound::from_vars(vars[..n].to_vec());
                sliding_window_mha(vars[n], &p, &b, &band, path)?.mse(tape.constant(target.clone()))
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{path:?}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn band_mask_symmetric_with_diagonal(half in 1usize..10, i in 0usize..50, j in 0usize..50) {
        let m = BandMask::new(2 * half).unwrap();
        prop_assert_eq!(m.allowed(i, j), m.allowed(j, i));
        prop_assert!(m.allowed(i, i));
    }

    #[test]
    fn banded_equals_dense(seed in 0u64..100_000, l in 2usize..40, half in 1usize..5, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let (store, p, x) = setup(seed, l, 8, heads);
        let band = BandMask::new(2 * half).unwrap();
        let a = banded_mha_fast(&x, &p, &store, &band).unwrap();
        let b = sliding_window_mha_dense(&x, &p, &store, &band).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }
}
