#![allow(dead_code)]

use cmkd_core::rng::CounterRng;
use cmkd_core::Tensor;

pub fn random_tensor(rng: &mut CounterRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

pub fn assert_all_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len(), "length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!(rel_close(g, w, tol), "index {i}: {g} vs {w}");
    }
}

/// Row-major triple-loop product.
pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct "same" cross-correlation: output `ceil(H / s)`, leading pad
/// `floor(total_pad / 2)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    k: &[f64],
    ks: usize,
    cout: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let pad_h = ((ho - 1) * stride + ks).saturating_sub(h) / 2;
    let pad_w = ((wo - 1) * stride + ks).saturating_sub(w) / 2;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = 0.0;
                for ky in 0..ks {
                    for kx in 0..ks {
                        let y = (oy * stride + ky) as isize - pad_h as isize;
                        let xx = (ox * stride + kx) as isize - pad_w as isize;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x[(y as usize * w + xx as usize) * cin + ci] * k[((ky * ks + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = s;
            }
        }
    }
    (out, ho, wo)
}
