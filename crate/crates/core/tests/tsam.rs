mod common;

use common::*;
use evmamba_core::autograd::gradcheck::GradCheck;
use evmamba_core::params::{Initializer, ParamStore};
use evmamba_core::tsam::*;
use evmamba_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn block(c: usize, heads: usize, k: usize, seed: u64) -> (Tsam, ParamStore) {
    let t = Tsam::new("t", TsamConfig::new(c, heads, k).unwrap()).unwrap();
    let mut store = ParamStore::new();
    t.init(&mut Initializer::new(seed), &mut store).unwrap();
    (t, store)
}

/// Random unit-norm rows `[h, n, d]`.
fn unit_rows(h: usize, n: usize, d: usize, seed: u64) -> Tensor {
    let t = rand_t(&[h, n, d], seed);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(&[h, n, d], data).unwrap()
}

fn temps(h: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..h).map(|_| r.random_range(0.3..4.0)).collect()
}

/// Attention weights themselves: with identity values each output row is the
/// row's probability vector.
fn weights(q: &Tensor, k: &Tensor, topk: usize, temp: &[f64]) -> Tensor {
    let (h, m) = (k.shape()[0], k.shape()[1]);
    let mut eye = vec![0.0; h * m * m];
    for head in 0..h {
        for j in 0..m {
            eye[(head * m + j) * m + j] = 1.0;
        }
    }
    sparse_attention_forward(q, k, &Tensor::new(&[h, m, m], eye).unwrap(), topk, temp).unwrap()
}

#[test]
fn project_qkv_shapes_zero_queries_and_unit_rows() {
    let (t, mut store) = block(8, 2, 4, 1);
    randomize(&mut store, 2, 0.5);
    for name in ["t.q_pw.bias", "t.q_dw.bias"] {
        *store.get_mut(name).unwrap() = Tensor::zeros(&[8, 1, 1]);
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let zero = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
    let evt = tape.constant(rand_t(&[1, 8, 4, 4], 3));
    let (q, k, v) = t.project_qkv(&mut tape, &p, zero, evt).unwrap();
    for x in [q, k, v] {
        assert_eq!(tape.shape(x), &[2, 16, 4]);
    }
    assert!(tape.value(q).data().iter().all(|&x| x == 0.0));
    for row in tape.value(k).data().chunks(4) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    let bad = tape.constant(Tensor::zeros(&[1, 8, 4, 2]));
    assert!(t.project_qkv(&mut tape, &p, zero, bad).is_err());
}

#[test]
fn one_hot_values_copy_the_argmax_row() {
    for seed in 0..20 {
        let (q, k) = (unit_rows(2, 6, 3, seed), unit_rows(2, 6, 3, seed + 100));
        let out = weights(&q, &k, 1, &[1.0, 1.0]);
        for head in 0..2 {
            for r in 0..6 {
                let sims: Vec<f64> = (0..6)
                    .map(|j| (0..3).map(|c| q.data()[(head * 6 + r) * 3 + c] * k.data()[(head * 6 + j) * 3 + c]).sum())
                    .collect();
                let best = topk_oracle(&sims, 1)[0];
                let row = &out.data()[(head * 6 + r) * 6..][..6];
                let expect: Vec<f64> = (0..6).map(|j| if j == best { 1.0 } else { 0.0 }).collect();
                assert_eq!(row, expect.as_slice());
            }
        }
    }
}

#[test]
fn full_k_equals_dense_attention() {
    for seed in 0..20 {
        let (q, k, v) = (unit_rows(2, 9, 4, seed), unit_rows(2, 9, 4, seed + 1), rand_t(&[2, 9, 5], seed + 2));
        let tau = temps(2, seed);
        let got = sparse_attention_forward(&q, &k, &v, 9, &tau).unwrap();
        assert!(max_abs_diff(got.data(), dense_attention_oracle(&q, &k, &v, &tau).data()) < 1e-9);
    }
}

#[test]
fn sparse_equals_masked_dense_oracle() {
    for seed in 0..20 {
        let (q, k, v) = (rand_t(&[2, 7, 4], seed), rand_t(&[2, 10, 4], seed + 1), rand_t(&[2, 10, 3], seed + 2));
        let tau = temps(2, seed);
        let got = sparse_attention_forward(&q, &k, &v, 3, &tau).unwrap();
        assert!(max_abs_diff(got.data(), masked_attention_oracle(&q, &k, &v, 3, &tau).data()) < 1e-9);
    }
}

#[test]
fn zero_event_features_leave_the_image() {
    let (t, store) = block(8, 2, 4, 4);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let img = tape.constant(rand_t(&[1, 8, 4, 6], 5));
    let evt = tape.constant(Tensor::zeros(&[1, 8, 4, 6]));
    let y = t.forward(&mut tape, &p, img, evt).unwrap();
    assert!(tape.value(y).bit_eq(tape.value(img)));
}

/// Hand composition: convolutions, per-head split, L2 normalization,
/// masked-dense attention, head merge, output projection and residual.
fn tsam_oracle(store: &ParamStore, c: usize, heads: usize, k: usize, img: &Tensor, evt: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let hw = h * w;
    let d = c / heads;
    let q = conv_layer_oracle(store, "t.q_pw", img, 1, 0, 1);
    let q = conv_layer_oracle(store, "t.q_dw", &q, 1, 1, c);
    let kv = conv_layer_oracle(store, "t.kv_pw", evt, 1, 0, 1);
    let kv = conv_layer_oracle(store, "t.kv_dw", &kv, 1, 1, 2 * c);
    let heads_of = |src: &[f64], normalize: bool| {
        let mut out = vec![0.0; heads * hw * d];
        for head in 0..heads {
            for tok in 0..hw {
                let row: Vec<f64> = (0..d).map(|j| src[(head * d + j) * hw + tok]).collect();
                let n = if normalize { row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12) } else { 1.0 };
                for j in 0..d {
                    out[(head * hw + tok) * d + j] = row[j] / n;
                }
            }
        }
        Tensor::new(&[heads, hw, d], out).unwrap()
    };
    let qh = heads_of(q.data(), true);
    let kh = heads_of(&kv.data()[..c * hw], true);
    let vh = heads_of(&kv.data()[c * hw..], false);
    let tau = store.get("t.temperature").unwrap().data().to_vec();
    let att = masked_attention_oracle(&qh, &kh, &vh, k, &tau);
    let mut merged = vec![0.0; c * hw];
    for head in 0..heads {
        for tok in 0..hw {
            for j in 0..d {
                merged[(head * d + j) * hw + tok] = att.data()[(head * hw + tok) * d + j];
            }
        }
    }
    let merged = Tensor::new(&[1, c, h, w], merged).unwrap();
    add_oracle(&conv_layer_oracle(store, "t.out", &merged, 1, 0, 1), img)
}

#[test]
fn module_equals_composition_oracle() {
    for (seed, k) in [(1, 1), (2, 3), (3, 4), (4, 20)] {
        let (t, mut store) = block(8, 2, k, seed);
        randomize(&mut store, seed + 10, 0.6);
        *store.get_mut("t.temperature").unwrap() = Tensor::new(&[2], temps(2, seed)).unwrap();
        let (img, evt) = (rand_t(&[1, 8, 4, 5], seed + 20), rand_t(&[1, 8, 4, 5], seed + 30));
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (iv, ev) = (tape.constant(img.clone()), tape.constant(evt.clone()));
        let y = t.forward(&mut tape, &p, iv, ev).unwrap();
        let o = tsam_oracle(&store, 8, 2, k, &img, &evt);
        assert!(max_abs_diff(tape.value(y).data(), o.data()) < 1e-9, "k = {k}");
    }
}

#[test]
fn dense_mode_matches_sparse_mode() {
    let (sparse, mut store) = block(8, 2, 3, 6);
    randomize(&mut store, 7, 0.6);
    *store.get_mut("t.temperature").unwrap() = Tensor::new(&[2], vec![1.5, 2.5]).unwrap();
    let mut cfg = sparse.cfg.clone();
    cfg.mode = AttentionMode::Dense;
    let dense = Tsam::new("t", cfg).unwrap();
    let (img, evt) = (rand_t(&[1, 8, 4, 4], 8), rand_t(&[1, 8, 4, 4], 9));
    let run = |m: &Tsam| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (iv, ev) = (tape.constant(img.clone()), tape.constant(evt.clone()));
        let y = m.forward(&mut tape, &p, iv, ev).unwrap();
        let loss = weighted_sum(&mut tape, y, &rand_t(&[1, 8, 4, 4], 10)).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(y).clone(), p.grads(&tape))
    };
    let (ys, gs) = run(&sparse);
    let (yd, gd) = run(&dense);
    assert!(max_abs_diff(ys.data(), yd.data()) < 1e-12);
    for (name, g) in &gs {
        assert!(max_abs_diff(g.data(), gd[name].data()) < 1e-12, "{name}");
    }
}

#[test]
fn tsam_forward_gradient_check_at_four_by_four() {
    let (t, mut store) = block(4, 2, 4, 11);
    randomize(&mut store, 12, 0.6);
    *store.get_mut("t.temperature").unwrap() = Tensor::new(&[2], vec![1.2, 2.0]).unwrap();
    let extra = [rand_t(&[1, 4, 4, 4], 13), rand_t(&[1, 4, 4, 4], 14)];
    let w = rand_t(&[1, 4, 4, 4], 15);
    let report = check_module(&store, &extra, GradCheck::default(), |tape, p, x| {
        let y = t.forward(tape, p, x[0], x[1])?;
        weighted_sum(tape, y, &w)
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn temperature_starts_at_inverse_sqrt_head_dim() {
    let (_, store) = block(16, 2, 4, 0);
    let t = store.get("t.temperature").unwrap();
    assert_eq!(t.shape(), &[2]);
    assert!(t.data().iter().all(|&v| v == 1.0 / 8f64.sqrt()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn support_size_is_min_k_hw(seed in 0u64..10_000, n in 1usize..12, m in 1usize..20, k in 1usize..24) {
        let (q, kk) = (unit_rows(2, n, 3, seed), unit_rows(2, m, 3, seed + 1));
        let w = weights(&q, &kk, k, &temps(2, seed));
        for row in w.data().chunks(m) {
            prop_assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), k.min(m));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn supports_are_nested_in_k(seed in 0u64..10_000, m in 2usize..20, k in 1usize..19) {
        let (q, kk) = (unit_rows(1, 5, 4, seed), unit_rows(1, m, 4, seed + 1));
        let tau = temps(1, seed);
        let small = weights(&q, &kk, k, &tau);
        let big = weights(&q, &kk, k + 1, &tau);
        for (a, b) in small.data().iter().zip(big.data()) {
            prop_assert!(*a == 0.0 || *b > 0.0);
        }
    }

    #[test]
    fn joint_key_value_permutation_is_invisible(seed in 0u64..10_000, m in 2usize..16, k in 1usize..16) {
        let (q, kk, v) = (rand_t(&[2, 4, 3], seed), rand_t(&[2, m, 3], seed + 1), rand_t(&[2, m, 2], seed + 2));
        let mut r = rng(seed);
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permute = |t: &Tensor, d: usize| {
            let mut out = vec![0.0; t.numel()];
            for head in 0..2 {
                for (dst, &src) in perm.iter().enumerate() {
                    for c in 0..d {
                        out[(head * m + dst) * d + c] = t.data()[(head * m + src) * d + c];
                    }
                }
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let tau = temps(2, seed);
        let a = sparse_attention_forward(&q, &kk, &v, k, &tau).unwrap();
        let b = sparse_attention_forward(&q, &permute(&kk, 3), &permute(&v, 2), k, &tau).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
    }
}
