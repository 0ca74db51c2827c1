use conformer_core::attention::AttentionPath;
use conformer_core::numcore::{grad_check, Bound, ParamStore, Tape, Tensor, DEFAULT_EPS};
use conformer_core::sirn::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Seq = Vec<Vec<f64>>;

fn to_seq(t: &Tensor) -> Seq {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn mat(t: &Tensor) -> Seq {
    to_seq(t)
}

fn vecmat(x: &[f64], w: &Seq) -> Vec<f64> {
    let n = w[0].len();
    (0..n).map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Single-layer GRU by hand.
fn ref_gru(x: &Seq, store: &ParamStore, layer: &GruLayer) -> Seq {
    let (wi, wh) = (mat(store.get(layer.w_ih)), mat(store.get(layer.w_hh)));
    let (bi, bh) = (store.get(layer.b_ih).data(), store.get(layer.b_hh).data());
    let dh = wh.len();
    let mut h = vec![0.0; dh];
    let mut out = Vec::new();
    for xt in x {
        let gi: Vec<f64> = vecmat(xt, &wi).iter().zip(bi).map(|(a, b)| a + b).collect();
        let gh: Vec<f64> = vecmat(&h, &wh).iter().zip(bh).map(|(a, b)| a + b).collect();
        let mut next = vec![0.0; dh];
        for c in 0..dh {
            let r = sig(gi[c] + gh[c]);
            let z = sig(gi[dh + c] + gh[dh + c]);
            let n = (gi[2 * dh + c] + r * gh[2 * dh + c]).tanh();
            next[c] = (1.0 - z) * n + z * h[c];
        }
        h = next;
        out.push(h.clone());
    }
    out
}

fn ref_avg(x: &Seq, k: usize) -> Seq {
    let l = x.len() as isize;
    let hw = (k / 2) as isize;
    (0..l)
        .map(|t| {
            (0..x[0].len())
                .map(|c| (-hw..=hw).map(|j| x[(t + j).clamp(0, l - 1) as usize][c]).sum::<f64>() / k as f64)
                .collect()
        })
        .collect()
}

fn ref_conv(x: &Seq, w: &Tensor, b: &Tensor) -> Seq {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let l = x.len() as isize;
    (0..l)
        .map(|t| {
            (0..co)
                .map(|o| {
                    let mut s = b.data()[o];
                    for j in 0..k {
                        let src = t + j as isize - (k / 2) as isize;
                        if src >= 0 && src < l {
                            for i in 0..ci {
                                s += w.at(&[o, i, j]) * x[src as usize][i];
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn ref_band_mha(x: &Seq, store: &ParamStore, p: &SirnLayerParams) -> Seq {
    let m = &p.mha;
    let (q, k, v) = (
        x.iter().map(|r| vecmat(r, &mat(store.get(m.wq)))).collect::<Seq>(),
        x.iter().map(|r| vecmat(r, &mat(store.get(m.wk)))).collect::<Seq>(),
        x.iter().map(|r| vecmat(r, &mat(store.get(m.wv)))).collect::<Seq>(),
    );
    let l = x.len();
    let dh = m.head_width();
    let hw = p.band.half_width();
    let mut cat = vec![vec![0.0; m.width()]; l];
    for h in 0..m.heads() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let keys: Vec<usize> = (0..l).filter(|&j| i.abs_diff(j) <= hw).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|s| (s - mx).exp()).sum();
            for c in cols.clone() {
                cat[i][c] = keys.iter().zip(&logits).map(|(&j, s)| (s - mx).exp() / z * v[j][c]).sum();
            }
        }
    }
    cat.iter().map(|r| vecmat(r, &mat(store.get(m.wo)))).collect()
}

fn add(a: &Seq, b: &Seq) -> Seq {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn sub(a: &Seq, b: &Seq) -> Seq {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect()).collect()
}

/// The whole layer, unrolled on one sample.
fn ref_layer(x: &Seq, store: &ParamStore, p: &SirnLayerParams) -> (Seq, Seq) {
    let k = p.config.decomp_kernel.min(2 * x.len() - 1);
    let g_raw = ref_gru(x, store, &p.rnn1.layers[0]);
    let g: Seq = g_raw
        .iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            r.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect();
    let gx: Seq = g.iter().zip(x).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).collect()).collect();
    let x1 = add(&add(&gx, &ref_band_mha(x, store, p)), x);
    let mut trend = ref_avg(&x1, k);
    let mut seasonal = sub(&x1, &trend);
    let local = ref_band_mha(&x1, store, p);
    for &(w, b) in &p.seasonal {
        let input = add(&ref_conv(&seasonal, store.get(w), store.get(b)), &local);
        let t = ref_avg(&input, k);
        seasonal = sub(&input, &t);
        trend = add(&trend, &t);
    }
    let agg = ref_gru(&trend, store, &p.rnn2.layers[0]);
    let out = add(&seasonal, &agg).iter().map(|r| vecmat(r, &mat(store.get(p.w_out)))).collect();
    (out, g_raw)
}

fn config(d: usize, heads: usize, eta: usize, kernel: usize) -> SirnConfig {
    SirnConfig {
        d,
        heads,
        window: 2,
        eta,
        decomp_kernel: kernel,
        seasonal_kernel: 3,
        rnn1_layers: 1,
        rnn2_layers: 1,
        attention: AttentionPath::Banded,
    }
}

#[test]
fn gru_zero_stays_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let g = GruParams::new(&mut store, "g", 3, 4, 2, &mut rng).unwrap();
    for l in &g.layers {
        for id in [l.b_ih, l.b_hh] {
            store.set(id, Tensor::zeros([12])).unwrap();
        }
    }
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let out = gru_forward(tape.constant(Tensor::zeros([2, 5, 3])), &g, &p, None).unwrap();
    assert!(out.outputs.value().data().iter().all(|&v| v == 0.0));
    assert_eq!(out.states.len(), 2);
}

#[test]
fn gru_single_step_matches_gate_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let g = GruParams::new(&mut store, "g", 2, 3, 1, &mut rng).unwrap();
    let x = Tensor::randn([1, 1, 2], 1.0, &mut rng);
    let h0 = Tensor::uniform([1, 3], 0.9, &mut rng);
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let out = gru_forward(tape.constant(x.clone()), &g, &p, Some(tape.constant(h0.clone()))).unwrap();
    let l = &g.layers[0];
    let (wi, wh) = (store.get(l.w_ih), store.get(l.w_hh));
    let (bi, bh) = (store.get(l.b_ih), store.get(l.b_hh));
    for c in 0..3 {
        let gi = |k: usize| (0..2).map(|i| x.data()[i] * wi.at(&[i, k * 3 + c])).sum::<f64>() + bi.data()[k * 3 + c];
        let gh = |k: usize| (0..3).map(|i| h0.data()[i] * wh.at(&[i, k * 3 + c])).sum::<f64>() + bh.data()[k * 3 + c];
        let r = sig(gi(0) + gh(0));
        let z = sig(gi(1) + gh(1));
        let n = (gi(2) + r * gh(2)).tanh();
        let h = (1.0 - z) * n + z * h0.data()[c];
        assert!((out.outputs.value().data()[c] - h).abs() < 1e-14);
    }
}

#[test]
fn gru_stack_feeds_layers_upward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let g = GruParams::new(&mut store, "g", 3, 4, 2, &mut rng).unwrap();
    let x = Tensor::randn([1, 6, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let out = gru_forward(tape.constant(x.clone()), &g, &p, None).unwrap();
    let l0 = ref_gru(&to_seq(&x), &store, &g.layers[0]);
    let l1 = ref_gru(&l0, &store, &g.layers[1]);
    let flat = |s: &Seq| s.concat();
    let d0 = out.states[0].value().data().iter().zip(flat(&l0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let d1 = out.outputs.value().data().iter().zip(flat(&l1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d0 < 1e-13 && d1 < 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gru_outputs_bounded(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = GruParams::new(&mut store, "g", 3, 5, 1, &mut rng).unwrap();
        let x = Tensor::randn([2, 9, 3], scale, &mut rng);
        let h0 = Tensor::uniform([2, 5], 0.99, &mut rng);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = gru_forward(tape.constant(x), &g, &p, Some(tape.constant(h0))).unwrap();
        prop_assert!(out.outputs.value().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn decomposition_reconstructs(seed in 0u64..10_000, l in 1usize..40, k in prop::sample::select(vec![1usize, 3, 5, 25])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([2, l, 3], 2.0, &mut rng);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (t, s) = series_decompose(xv, k).unwrap();
        let back = t.value().zip_map(&s.value(), |a, b| a + b).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-14);
    }

    #[test]
    fn constant_has_zero_seasonal(c in -100.0f64..100.0, l in 1usize..30) {
        let tape = Tape::new();
        let (t, s) = series_decompose(tape.constant(Tensor::full([1, l, 2], c)), 25).unwrap();
        prop_assert!(s.value().data().iter().all(|&v| v == 0.0));
        prop_assert!(t.value().data().iter().all(|&v| v == c));
    }
}

#[test]
fn fast_sinusoid_has_small_trend() {
    let l = 200;
    let x = Tensor::from_fn([1, l, 1], |t| (std::f64::consts::TAU * t as f64 / 5.0).sin());
    let tape = Tape::new();
    let (t, _) = series_decompose(tape.constant(x.clone()), 25).unwrap();
    let oracle = ref_avg(&to_seq(&x.reshape([l, 1]).unwrap()), 25);
    for i in 12..l - 12 {
        let v = t.value().data()[i];
        assert!((v - oracle[i][0]).abs() < 1e-12);
        assert!(v.abs() <= 0.1);
    }
}

fn layer(seed: u64, cfg: SirnConfig) -> (ParamStore, SirnLayerParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = SirnLayerParams::new(&mut store, "sirn", cfg, &mut rng).unwrap();
    for &(_, b) in &p.seasonal {
        store.set(b, Tensor::randn([p.config.d], 0.3, &mut rng)).unwrap();
    }
    (store, p)
}

#[test]
fn layer_shapes_and_step_count() {
    for eta in 1..=3 {
        let (store, p) = layer(4, config(16, 4, eta, 25));
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = Tensor::randn([1, 24, 16], 1.0, &mut rng);
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let out = sirn_layer_forward(tape.constant(x), &p, &b).unwrap();
        assert_eq!(out.x_out.shape(), vec![1, 24, 16]);
        assert_eq!(out.flow_states.len(), 1);
        assert_eq!(out.flow_states[0].shape(), vec![1, 24, 16]);
        assert_eq!(out.decompositions.len(), eta + 1);
    }
}

#[test]
fn layer_matches_unrolled_reference() {
    for (eta, path) in [(1, AttentionPath::Dense), (2, AttentionPath::Banded), (3, AttentionPath::Banded)] {
        let mut cfg = config(8, 2, eta, 5);
        cfg.attention = path;
        let (store, p) = layer(5 + eta as u64, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = Tensor::randn([2, 11, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let out = sirn_layer_forward(tape.constant(x.clone()), &p, &b).unwrap();
        for s in 0..2 {
            let (expect, gate) = ref_layer(&to_seq(&x.select(0, s)), &store, &p);
            let got = out.x_out.value().select(0, s);
            let diff = got.data().iter().zip(expect.concat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "eta {eta}: {diff}");
            let fs = out.flow_states[0].value().select(0, s);
            let diff = fs.data().iter().zip(gate.concat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12);
        }
    }
}

#[test]
fn collapsed_layer_reduces_to_double_seasonal() {
    let (mut store, p) = layer(9, config(4, 1, 1, 3));
    let d = 4;
    store.set(p.mha.wo, Tensor::zeros([d, d])).unwrap();
    store.set(p.w_out, Tensor::eye(d)).unwrap();
    let (kern, bias) = p.seasonal[0];
    let delta = Tensor::from_fn([d, d, 3], |i| {
        let (o, rest) = (i / (3 * d), i % (3 * d));
        if rest / 3 == o && rest % 3 == 1 { 1.0 } else { 0.0 }
    });
    store.set(kern, delta).unwrap();
    store.set(bias, Tensor::zeros([d])).unwrap();
    for l in &p.rnn2.layers {
        for id in [l.w_ih, l.w_hh, l.b_ih, l.b_hh] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let x = Tensor::randn([1, 10, d], 1.0, &mut rng);
    let tape = Tape::new();
    let b = store.bind_constant(&tape);
    let out = sirn_layer_forward(tape.constant(x.clone()), &p, &b).unwrap();
    // x1 = g ⊙ x + x; s0 = x1 - avg(x1); x_out = s0 - avg(s0)
    let xs = to_seq(&x.select(0, 0));
    let g = ref_gru(&xs, &store, &p.rnn1.layers[0]);
    let x1: Seq = xs
        .iter()
        .zip(&g)
        .map(|(xr, gr)| {
            let m = gr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = gr.iter().map(|v| (v - m).exp()).sum();
            xr.iter().zip(gr).map(|(a, v)| (v - m).exp() / z * a + a).collect()
        })
        .collect();
    let s0 = sub(&x1, &ref_avg(&x1, 3));
    let s1 = sub(&s0, &ref_avg(&s0, 3));
    let diff = out.x_out.value().data().iter().zip(s1.concat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn decompositions_reconstruct_inside_layer() {
    for eta in 1..=3 {
        let (store, p) = layer(11, config(8, 2, eta, 7));
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let x = Tensor::randn([2, 16, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let out = sirn_layer_forward(tape.constant(x), &p, &b).unwrap();
        for dcmp in &out.decompositions {
            let back = dcmp.trend.value().zip_map(&dcmp.seasonal.value(), |a, b| a + b).unwrap();
            assert!(back.max_abs_diff(&dcmp.input.value()) <= 1e-14);
        }
    }
}

#[test]
fn layer_gradients() {
    let (store, p) = layer(12, config(4, 2, 1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let x = Tensor::randn([1, 5, 4], 1.0, &mut rng);
    let target = Tensor::randn([1, 5, 4], 1.0, &mut rng);
    let mut inputs = store.values().to_vec();
    inputs.push(x);
    let n = store.len();
    let r = grad_check(
        |tape, vars| {
            let b = Bound::from_vars(vars[..n].to_vec());
            sirn_layer_forward(vars[n], &p, &b)?.x_out.mse(tape.constant(target.clone()))
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn invalid_configs_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    assert!(SirnLayerParams::new(&mut store, "a", config(8, 2, 0, 25), &mut rng).is_err());
    assert!(SirnLayerParams::new(&mut store, "b", config(8, 2, 1, 24), &mut rng).is_err());
    assert!(SirnLayerParams::new(&mut store, "c", config(8, 3, 1, 25), &mut rng).is_err());
}
