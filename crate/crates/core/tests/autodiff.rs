mod common;

use cmkd_core::gradcheck::grad_check;
use cmkd_core::graph::Elementwise;
use cmkd_core::rng::CounterRng;
use cmkd_core::{Error, Graph, ParamStore, Tensor};
use common::{assert_all_close, conv_oracle, matmul_oracle, random_tensor};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn store(tensors: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.add(name, t.clone()).unwrap();
    }
    s
}

fn dims() -> impl Strategy<Value = usize> {
    1usize..6
}

#[test]
fn matmul_of_known_matrices() {
    let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let (a, b) = (g.constant(a).unwrap(), g.constant(b).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn inner_dimension_mismatch_is_reported() {
    let s = ParamStore::new();
    let mut g = Graph::<f64>::new(&s);
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn backward_requires_a_scalar() {
    let s = store(&[("x", Tensor::zeros(&[2, 2]))]);
    let mut g = Graph::new(&s);
    let x = g.param(cmkd_core::ParamId(0));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let s = ParamStore::new();
    let mut g = Graph::<f64>::new(&s);
    let x = g.constant(Tensor::full(&[1], 1e300)).unwrap();
    assert!(matches!(g.mul(x, x), Err(Error::NonFinite { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let s = store(&[("w", Tensor::full(&[2], 3.0))]);
    let mut g = Graph::new(&s);
    let w = g.param(cmkd_core::ParamId(0));
    let c = g.constant(Tensor::full(&[2], 5.0)).unwrap();
    assert!(!g.requires_grad(c));
    let p = g.mul(w, c).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(cmkd_core::ParamId(0)).unwrap().data(), &[5.0, 5.0]);
}

#[test]
fn inference_graph_tracks_nothing() {
    let s = store(&[("w", Tensor::full(&[2], 3.0))]);
    let mut g = Graph::inference(&s);
    let w = g.param(cmkd_core::ParamId(0));
    let l = g.sum(w).unwrap();
    assert!(g.backward(l).unwrap().get(cmkd_core::ParamId(0)).is_none());
}

#[test]
fn mse_of_identity_against_zero_is_one_half() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.constant(Tensor::<f64>::eye(2)).unwrap();
    let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let l = g.mse_mean(a, z).unwrap();
    assert_eq!(g.value(l).item(), 0.5);
}

#[test]
fn bce_closed_forms() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let zeros = g.constant(Tensor::<f64>::zeros(&[3, 3, 1])).unwrap();
    let target = Tensor::from_f64(&[3, 3, 1], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let l = g.bce_with_logits(zeros, &target).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let sat: Vec<f64> = target.data().iter().map(|&y| if y > 0.5 { 20.0 } else { -20.0 }).collect();
    let sat = g.constant(Tensor::from_f64(&[3, 3, 1], &sat).unwrap()).unwrap();
    let l = g.bce_with_logits(sat, &target).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

#[test]
fn bce_matches_direct_formula() {
    let mut rng = CounterRng::new(7);
    for _ in 0..100 {
        let x = random_tensor(&mut rng, &[4, 4, 1], 8.0);
        let y: Vec<f64> = (0..16).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
        let oracle: f64 = x
            .data()
            .iter()
            .zip(&y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let xn = g.constant(x).unwrap();
        let l = g.bce_with_logits(xn, &Tensor::from_f64(&[4, 4, 1], &y).unwrap()).unwrap();
        assert!(common::rel_close(g.value(l).item(), oracle, 1e-9));
    }
}

#[test]
fn conv_rejects_unsupported_geometry() {
    let s = ParamStore::new();
    let mut g = Graph::<f64>::new(&s);
    let x = g.constant(Tensor::zeros(&[4, 4, 2])).unwrap();
    let w = g.constant(Tensor::zeros(&[3, 3, 2, 1])).unwrap();
    assert!(matches!(g.conv2d(x, w, 3), Err(Error::InvalidConfig(_))));
    let w = g.constant(Tensor::zeros(&[3, 3, 1, 1])).unwrap();
    assert!(matches!(g.conv2d(x, w, 1), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_matches_triple_loop(m in dims(), k in dims(), n in dims(), seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let a = random_tensor(&mut rng, &[m, k], 2.0);
        let b = random_tensor(&mut rng, &[k, n], 2.0);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (an, bn) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(an, bn).unwrap();
        assert_all_close(g.value(c).data(), &matmul_oracle(a.data(), b.data(), m, k, n), 1e-12);
    }

    #[test]
    fn matmul_is_associative_and_distributive(m in dims(), k in dims(), n in dims(), p in dims(), seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, n], 1.0);
        let b2 = random_tensor(&mut rng, &[k, n], 1.0);
        let c = random_tensor(&mut rng, &[n, p], 1.0);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (a, b, b2, c) = (g.constant(a).unwrap(), g.constant(b).unwrap(), g.constant(b2).unwrap(), g.constant(c).unwrap());
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        assert_all_close(g.value(left).data(), g.value(right).data(), 1e-9);

        let sum = g.add(b, b2).unwrap();
        let lhs = g.matmul(a, sum).unwrap();
        let r1 = g.matmul(a, b).unwrap();
        let r2 = g.matmul(a, b2).unwrap();
        let rhs = g.add(r1, r2).unwrap();
        for (x, y) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn softmax_rows_match_exp_ratio_and_ignore_shifts(m in dims(), n in dims(), shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let a = random_tensor(&mut rng, &[m, n], 5.0);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let an = g.constant(a.clone()).unwrap();
        let sm = g.softmax_rows(an).unwrap();
        let mut oracle = Vec::new();
        for row in a.data().chunks(n) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle.extend(row.iter().map(|v| v.exp() / z));
        }
        assert_all_close(g.value(sm).data(), &oracle, 1e-12);
        let shifted = g.constant(a.map(|v| v + shift)).unwrap();
        let sm2 = g.softmax_rows(shifted).unwrap();
        assert_all_close(g.value(sm2).data(), g.value(sm).data(), 1e-9);
    }

    #[test]
    fn conv_matches_direct_loops(h in 1usize..7, w in 1usize..7, cin in 1usize..4, cout in 1usize..4,
                                 k3 in any::<bool>(), s2 in any::<bool>(), seed in any::<u64>()) {
        let ks = if k3 { 3 } else { 1 };
        let stride = if s2 { 2 } else { 1 };
        let mut rng = CounterRng::new(seed);
        let x = random_tensor(&mut rng, &[h, w, cin], 1.0);
        let k = random_tensor(&mut rng, &[ks, ks, cin, cout], 1.0);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (xn, kn) = (g.constant(x.clone()).unwrap(), g.constant(k.clone()).unwrap());
        let y = g.conv2d(xn, kn, stride).unwrap();
        let (oracle, ho, wo) = conv_oracle(x.data(), h, w, cin, k.data(), ks, cout, stride);
        prop_assert_eq!(g.shape(y), &[ho, wo, cout]);
        assert_all_close(g.value(y).data(), &oracle, 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_loss(m in dims(), n in dims(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let s = store(&[("x", random_tensor(&mut rng, &[m, n], 1.0)), ("y", random_tensor(&mut rng, &[n, m], 1.0))]);
        let build = |g: &mut Graph<'_, f64>, which: u8| {
            let x = g.param(cmkd_core::ParamId(0));
            let y = g.param(cmkd_core::ParamId(1));
            let xy = g.matmul(x, y).unwrap();
            let f = g.sum(xy).unwrap();
            let sx = g.sigmoid(x).unwrap();
            let sq = g.mul(sx, sx).unwrap();
            let h = g.sum(sq).unwrap();
            match which {
                0 => f,
                1 => h,
                _ => {
                    let a = g.scale(f, alpha).unwrap();
                    let b = g.scale(h, beta).unwrap();
                    g.add(a, b).unwrap()
                }
            }
        };
        let grads: Vec<_> = (0..3u8).map(|w| {
            let mut g = Graph::new(&s);
            let l = build(&mut g, w);
            g.backward(l).unwrap()
        }).collect();
        for p in 0..2 {
            let id = cmkd_core::ParamId(p);
            let f = grads[0].get(id).unwrap().data();
            let h = grads[1].get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; f.len()]);
            let combined = grads[2].get(id).unwrap().data();
            for i in 0..f.len() {
                let want = alpha * f[i] + beta * h[i];
                prop_assert!((combined[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn dense_ops_pass_grad_check(m in dims(), k in dims(), n in dims(), seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let mut s = store(&[
            ("a", random_tensor(&mut rng, &[m, k], 1.0)),
            ("b", random_tensor(&mut rng, &[k, n], 1.0)),
            ("bias", random_tensor(&mut rng, &[n], 1.0)),
            ("gain", random_tensor(&mut rng, &[n], 1.0)),
            ("t", random_tensor(&mut rng, &[m, n], 1.0)),
        ]);
        let report = grad_check(&mut s, EPS, |g| {
            let ids: Vec<_> = (0..5).map(|i| g.param(cmkd_core::ParamId(i))).collect();
            let ab = g.matmul(ids[0], ids[1])?;
            let ab = g.add_bias(ab, ids[2])?;
            let ab = g.mul_channels(ab, ids[3])?;
            let sm = g.softmax_rows(ab)?;
            let tt = g.transpose(ids[4])?;
            let tt = g.transpose(tt)?;
            let sig = g.sigmoid(tt)?;
            let mix = g.elementwise(Elementwise::Mul, &[sm, sig])?;
            let d = g.sub(mix, ids[4])?;
            let r = g.reshape(d, &[m * n])?;
            let r = g.reshape(r, &[m, n])?;
            let norm = g.normalize_columns(r, 1e-12)?;
            let z = g.constant(Tensor::zeros(&[m, n]))?;
            g.mse_mean(norm, z)
        }).unwrap();
        prop_assert!(report.max_rel_error < TOL * 1e3, "{:?}", report);
    }

    #[test]
    fn spatial_ops_pass_grad_check(h in 1usize..5, w in 1usize..5, cin in 1usize..3, cout in 1usize..3,
                                   k3 in any::<bool>(), s2 in any::<bool>(), seed in any::<u64>()) {
        let ks = if k3 { 3 } else { 1 };
        let stride = if s2 { 2 } else { 1 };
        let mut rng = CounterRng::new(seed);
        let mut s = store(&[
            ("x", random_tensor(&mut rng, &[h, w, cin], 1.0)),
            ("k", random_tensor(&mut rng, &[ks, ks, cin, cout], 1.0)),
        ]);
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let target: Vec<f64> = (0..4 * ho * wo * cout).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
        let target = Tensor::from_f64(&[2 * ho, 2 * wo, cout], &target).unwrap();
        let report = grad_check(&mut s, EPS, |g| {
            let x = g.param(cmkd_core::ParamId(0));
            let k = g.param(cmkd_core::ParamId(1));
            let y = g.conv2d(x, k, stride)?;
            let y = g.upsample_nearest2x(y)?;
            g.bce_with_logits(y, &target)
        }).unwrap();
        prop_assert!(report.max_rel_error < TOL * 1e3, "{:?}", report);
    }

    #[test]
    fn gather_and_relu_pass_grad_check(rows in 2usize..6, d in dims(), seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let mut s = store(&[("table", random_tensor(&mut rng, &[rows, d], 1.0))]);
        let ids: Vec<usize> = (0..7).map(|_| rng.below(rows)).collect();
        let report = grad_check(&mut s, EPS, |g| {
            let t = g.param(cmkd_core::ParamId(0));
            let r = g.gather_rows(t, &ids)?;
            let r2 = g.mul(r, r)?;
            let r = g.relu(r)?;
            let m = g.mul(r, r2)?;
            g.sum(m)
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-3, "{:?}", report);
    }
}
