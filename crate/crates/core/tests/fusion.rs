mod common;

use cmkd_core::fusion::{attend, correlation, fuse_stage, FusionStageParams};
use cmkd_core::init::Initializer;
use cmkd_core::rng::CounterRng;
use cmkd_core::{Error, Graph, ParamStore, Tensor};
use common::{assert_all_close, random_tensor};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..8)
}

/// `A[i][j] = sum_c Q[i][c] K[j][c]` for real `j`, else 0.
fn correlation_oracle(q: &[f64], k: &[f64], hw: usize, l: usize, c: usize, mask: &[bool]) -> Vec<f64> {
    let mut a = vec![0.0; hw * l];
    for i in 0..hw {
        for j in 0..l {
            if !mask[j] {
                continue;
            }
            a[i * l + j] = (0..c).map(|x| q[i * c + x] * k[j * c + x]).sum();
        }
    }
    a
}

fn stage_params(store: &mut ParamStore<f64>, visual: usize, text: usize, fusion: usize, seed: u64) -> FusionStageParams {
    let mut init = Initializer::new(store, seed);
    FusionStageParams::new(&mut init, "fusion", visual, text, fusion).unwrap()
}

#[test]
fn single_pair_correlation() {
    let s = ParamStore::new();
    let mut g = Graph::<f64>::new(&s);
    let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap()).unwrap();
    let k = g.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap()).unwrap();
    let a = correlation(&mut g, q, k, &[true], false).unwrap();
    assert_eq!(g.value(a).data(), &[11.0]);
}

#[test]
fn mask_length_must_match_tokens() {
    let s = ParamStore::new();
    let mut g = Graph::<f64>::new(&s);
    let q = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let k = g.constant(Tensor::zeros(&[4, 2])).unwrap();
    let err = correlation(&mut g, q, k, &[true; 3], false).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { op: "correlation", .. }));
}

#[test]
fn zero_output_projection_leaves_visual_features_unchanged() {
    let mut rng = CounterRng::new(3);
    let mut store = ParamStore::new();
    let p = stage_params(&mut store, 5, 4, 3, 11);
    let v = random_tensor(&mut rng, &[3, 2, 5], 1.0);
    let t = random_tensor(&mut rng, &[6, 4], 1.0);
    let mask = [true, true, false, true, false, false];
    let mut g = Graph::new(&store);
    let vn = g.constant(v.clone()).unwrap();
    let tn = g.constant(t).unwrap();
    let state = fuse_stage(&mut g, vn, tn, &mask, &p, false).unwrap();
    assert_eq!(g.value(state.fused), &v);
    assert_eq!(g.shape(state.a), &[6, 6]);
    assert_eq!(g.shape(state.o), &[6, 3]);
}

#[test]
fn fused_output_matches_manual_composition() {
    let mut rng = CounterRng::new(4);
    let mut store = ParamStore::new();
    let p = stage_params(&mut store, 3, 2, 2, 5);
    for id in [p.out.w, p.out.b] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = random_tensor(&mut rng, &shape, 1.0);
    }
    let v = random_tensor(&mut rng, &[2, 2, 3], 1.0);
    let t = random_tensor(&mut rng, &[3, 2], 1.0);
    let mask = [true, false, true];

    let affine = |x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>| {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let mut y = common::matmul_oracle(x, w.data(), rows, din, dout);
        for r in 0..rows {
            for c in 0..dout {
                y[r * dout + c] += b.data()[c];
            }
        }
        y
    };
    let q = affine(v.data(), 4, store.value(p.query.w), store.value(p.query.b));
    let k = affine(t.data(), 3, store.value(p.key.w), store.value(p.key.b));
    let val = affine(t.data(), 3, store.value(p.value.w), store.value(p.value.b));
    let a = correlation_oracle(&q, &k, 4, 3, 2, &mask);
    let o = common::matmul_oracle(&a, &val, 4, 3, 2);
    let upd = affine(&o, 4, store.value(p.out.w), store.value(p.out.b));
    let want: Vec<f64> = v.data().iter().zip(&upd).map(|(x, u)| x + u).collect();

    let mut g = Graph::new(&store);
    let vn = g.constant(v).unwrap();
    let tn = g.constant(t).unwrap();
    let state = fuse_stage(&mut g, vn, tn, &mask, &p, false).unwrap();
    assert_all_close(g.value(state.a).data(), &a, 1e-12);
    assert_all_close(g.value(state.fused).data(), &want, 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn correlation_matches_brute_force(hw in 1usize..10, c in 1usize..6, mask in mask_strategy(), seed in any::<u64>()) {
        let l = mask.len();
        let mut rng = CounterRng::new(seed);
        let q = random_tensor(&mut rng, &[hw, c], 2.0);
        let k = random_tensor(&mut rng, &[l, c], 2.0);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (qn, kn) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap());
        let a = correlation(&mut g, qn, kn, &mask, false).unwrap();
        let want = correlation_oracle(q.data(), k.data(), hw, l, c, &mask);
        assert_all_close(g.value(a).data(), &want, 1e-12);
        for i in 0..hw {
            for (j, &m) in mask.iter().enumerate() {
                if !m {
                    prop_assert_eq!(g.value(a).data()[i * l + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn attend_matches_brute_force(hw in 1usize..10, l in 1usize..8, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let a = random_tensor(&mut rng, &[hw, l], 2.0);
        let v = random_tensor(&mut rng, &[l, c], 2.0);
        let mut want = vec![0.0; hw * c];
        for i in 0..hw {
            for x in 0..c {
                for j in 0..l {
                    want[i * c + x] += a.data()[i * l + j] * v.data()[j * c + x];
                }
            }
        }
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (an, vn) = (g.constant(a).unwrap(), g.constant(v).unwrap());
        let o = attend(&mut g, an, vn).unwrap();
        assert_all_close(g.value(o).data(), &want, 1e-12);
    }

    #[test]
    fn correlation_is_bilinear(hw in 1usize..6, c in 1usize..5, mask in mask_strategy(),
                               alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
        let l = mask.len();
        let mut rng = CounterRng::new(seed);
        let q1 = random_tensor(&mut rng, &[hw, c], 1.0);
        let q2 = random_tensor(&mut rng, &[hw, c], 1.0);
        let k = random_tensor(&mut rng, &[l, c], 1.0);
        let combo = Tensor::new(&[hw, c], q1.data().iter().zip(q2.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let kn = g.constant(k).unwrap();
        let n1 = g.constant(q1).unwrap();
        let n2 = g.constant(q2).unwrap();
        let nc = g.constant(combo).unwrap();
        let a1 = correlation(&mut g, n1, kn, &mask, false).unwrap();
        let a2 = correlation(&mut g, n2, kn, &mask, false).unwrap();
        let ac = correlation(&mut g, nc, kn, &mask, false).unwrap();
        for i in 0..hw * l {
            let want = alpha * g.value(a1).data()[i] + beta * g.value(a2).data()[i];
            prop_assert!((g.value(ac).data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn padded_keys_do_not_affect_real_columns(hw in 1usize..6, c in 1usize..5, mask in mask_strategy(),
                                              softmax in any::<bool>(), seed in any::<u64>()) {
        let l = mask.len();
        let mut rng = CounterRng::new(seed);
        let q = random_tensor(&mut rng, &[hw, c], 1.0);
        let k1 = random_tensor(&mut rng, &[l, c], 1.0);
        let mut k2 = k1.clone();
        for (j, &m) in mask.iter().enumerate() {
            if !m {
                for x in 0..c {
                    k2.data_mut()[j * c + x] = rng.uniform(-5.0, 5.0);
                }
            }
        }
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let qn = g.constant(q).unwrap();
        let n1 = g.constant(k1).unwrap();
        let n2 = g.constant(k2).unwrap();
        let a1 = correlation(&mut g, qn, n1, &mask, softmax).unwrap();
        let a2 = correlation(&mut g, qn, n2, &mask, softmax).unwrap();
        prop_assert_eq!(g.value(a1).data(), g.value(a2).data());
    }

    #[test]
    fn softmax_rows_sum_to_one_over_real_tokens(hw in 1usize..6, c in 1usize..5, mask in mask_strategy(), seed in any::<u64>()) {
        prop_assume!(mask.iter().any(|&m| m));
        let l = mask.len();
        let mut rng = CounterRng::new(seed);
        let q = random_tensor(&mut rng, &[hw, c], 2.0);
        let k = random_tensor(&mut rng, &[l, c], 2.0);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (qn, kn) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap());
        let a = correlation(&mut g, qn, kn, &mask, true).unwrap();
        let raw = correlation_oracle(q.data(), k.data(), hw, l, c, &mask);
        let scale = 1.0 / (c as f64).sqrt();
        for i in 0..hw {
            let row = &g.value(a).data()[i * l..(i + 1) * l];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let z: f64 = (0..l).filter(|&j| mask[j]).map(|j| (raw[i * l + j] * scale).exp()).sum();
            for j in 0..l {
                let want = if mask[j] { (raw[i * l + j] * scale).exp() / z } else { 0.0 };
                prop_assert!((row[j] - want).abs() < 1e-12);
            }
        }
    }
}
