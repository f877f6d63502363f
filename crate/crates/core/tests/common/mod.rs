#![allow(dead_code)]

use clutter4d::ops4d::Conv4d;
use clutter4d::tensor::{strides, Shape6};
use clutter4d::{Fill, Tensor6D};

pub fn normal(shape: Shape6, seed: u64) -> Tensor6D {
    Tensor6D::seeded_fill(shape, Fill::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
}

/// `max |a - b| / max |b|`: error relative to the scale of the reference.
pub fn max_rel_err(a: &Tensor6D, b: &Tensor6D) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.data().iter().map(|v| v.abs() as f64).fold(0.0, f64::max).max(1e-30);
    let err = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max);
    err / scale
}

/// Direct evaluation of
/// `out(b,o,x,y,z,t) = bias[o] + sum_{c,i,j,k,l} w[o,c,i,j,k,l] * x[b,c,x+i-hx,y+j-hy,z+k-hz,t+l-ht]`
/// with zero padding, accumulated in f64.
pub fn conv4d_direct(x: &Tensor6D, w: &Tensor6D, bias: &Tensor6D) -> Tensor6D {
    let [b, ci, lx, ly, lz, lt] = x.shape();
    let [co, _, kx, ky, kz, kt] = w.shape();
    let mut out = Tensor6D::zeros([b, co, lx, ly, lz, lt]);
    let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    for bi in 0..b {
        for o in 0..co {
            for px in 0..lx {
                for py in 0..ly {
                    for pz in 0..lz {
                        for pt in 0..lt {
                            let mut acc = bias.data()[o] as f64;
                            for c in 0..ci {
                                for i in 0..kx {
                                    for j in 0..ky {
                                        for k in 0..kz {
                                            for l in 0..kt {
                                                let sx = px as isize + i as isize - (kx / 2) as isize;
                                                let sy = py as isize + j as isize - (ky / 2) as isize;
                                                let sz = pz as isize + k as isize - (kz / 2) as isize;
                                                let st = pt as isize + l as isize - (kt / 2) as isize;
                                                if inside(sx, lx) && inside(sy, ly) && inside(sz, lz) && inside(st, lt) {
                                                    acc += w.get([o, c, i, j, k, l]) as f64
                                                        * x.get([bi, c, sx as usize, sy as usize, sz as usize, st as usize]) as f64;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            out.set([bi, o, px, py, pz, pt], acc as f32);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Plain 3D convolution of every time slice with the `l = 0` kernel slice.
pub fn conv3d_direct(x: &Tensor6D, w: &Tensor6D) -> Tensor6D {
    let [b, ci, lx, ly, lz, lt] = x.shape();
    let [co, _, kx, ky, kz, _] = w.shape();
    let mut out = Tensor6D::zeros([b, co, lx, ly, lz, lt]);
    for bi in 0..b {
        for o in 0..co {
            for t in 0..lt {
                for px in 0..lx {
                    for py in 0..ly {
                        for pz in 0..lz {
                            let mut acc = 0.0f64;
                            for c in 0..ci {
                                for i in 0..kx {
                                    for j in 0..ky {
                                        for k in 0..kz {
                                            let sx = px as isize + i as isize - (kx / 2) as isize;
                                            let sy = py as isize + j as isize - (ky / 2) as isize;
                                            let sz = pz as isize + k as isize - (kz / 2) as isize;
                                            if sx < 0 || sy < 0 || sz < 0 {
                                                continue;
                                            }
                                            let (sx, sy, sz) = (sx as usize, sy as usize, sz as usize);
                                            if sx >= lx || sy >= ly || sz >= lz {
                                                continue;
                                            }
                                            acc += w.get([o, c, i, j, k, 0]) as f64
                                                * x.get([bi, c, sx, sy, sz, t]) as f64;
                                        }
                                    }
                                }
                            }
                            out.set([bi, o, px, py, pz, t], acc as f32);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn maxpool4d_direct(x: &Tensor6D, w: [usize; 4]) -> Tensor6D {
    let [b, c, lx, ly, lz, lt] = x.shape();
    let os = [b, c, lx / w[0], ly / w[1], lz / w[2], lt / w[3]];
    let mut out = Tensor6D::zeros(os);
    for bi in 0..b {
        for ci in 0..c {
            for px in 0..os[2] {
                for py in 0..os[3] {
                    for pz in 0..os[4] {
                        for pt in 0..os[5] {
                            let mut m = f32::NEG_INFINITY;
                            for i in 0..w[0] {
                                for j in 0..w[1] {
                                    for k in 0..w[2] {
                                        for l in 0..w[3] {
                                            m = m.max(x.get([
                                                bi,
                                                ci,
                                                px * w[0] + i,
                                                py * w[1] + j,
                                                pz * w[2] + k,
                                                pt * w[3] + l,
                                            ]));
                                        }
                                    }
                                }
                            }
                            out.set([bi, ci, px, py, pz, pt], m);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel normalization over all five non-channel axes, computed
/// directly on the 6D index space.
pub fn batchnorm_direct(x: &Tensor6D, gamma: &[f32], beta: &[f32], eps: f32) -> Tensor6D {
    let s = x.shape();
    let st = strides(&s);
    let mut out = Tensor6D::zeros(s);
    for c in 0..s[1] {
        let mut idx = Vec::new();
        for b in 0..s[0] {
            for i in 0..st[1] {
                idx.push(b * st[0] + c * st[1] + i);
            }
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| x.data()[i] as f64).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (x.data()[i] as f64 - mean).powi(2)).sum::<f64>() / n;
        for &i in &idx {
            out.data_mut()[i] =
                (gamma[c] as f64 * (x.data()[i] as f64 - mean) / (var + eps as f64).sqrt() + beta[c] as f64) as f32;
        }
    }
    out
}

/// Random small convolution case with at most 10^4 output scalars.
pub fn random_conv_case(seed: u64) -> (Tensor6D, Conv4d) {
    let dims = Tensor6D::seeded_fill([1, 1, 1, 1, 1, 10], Fill::Uniform { low: 0.0, high: 1.0 }, seed).unwrap();
    let pick = |i: usize, lo: usize, hi: usize| lo + ((dims.data()[i] * (hi - lo + 1) as f32) as usize).min(hi - lo);
    let odd = |i: usize| [1usize, 3][pick(i, 0, 1)];
    loop {
        let shape = [pick(0, 1, 2), pick(1, 1, 3), pick(2, 1, 6), pick(3, 1, 6), pick(4, 1, 6), pick(5, 1, 5)];
        let co = pick(6, 1, 3);
        let out = shape[0] * co * shape[2] * shape[3] * shape[4] * shape[5];
        if out <= 10_000 {
            let x = normal(shape, seed * 7 + 1);
            let w = normal([co, shape[1], odd(7), odd(8), 3, odd(9)], seed * 7 + 2);
            let bias = normal([co, 1, 1, 1, 1, 1], seed * 7 + 3);
            return (x, Conv4d::new(w, bias).unwrap());
        }
    }
}

/// Central finite differences of `loss` at every element of `at`.
pub fn numeric_gradient(at: &Tensor6D, loss: impl Fn(&Tensor6D) -> f64, step: f32) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut p = at.clone();
            p.data_mut()[i] += step;
            let lp = loss(&p);
            p.data_mut()[i] -= 2.0 * step;
            let lm = loss(&p);
            (lp - lm) / (2.0 * step as f64)
        })
        .collect()
}

/// `||a - n|| / max(||a||, ||n||)` over a whole gradient tensor.
pub fn gradient_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-30)
}

/// Finite-difference check of a full gradient tensor.
pub fn check_gradient(
    at: &Tensor6D,
    analytic: &Tensor6D,
    loss: impl Fn(&Tensor6D) -> f64,
    step: f32,
    tol: f64,
    what: &str,
) {
    assert_eq!(at.shape(), analytic.shape(), "{what}");
    let numeric = numeric_gradient(at, loss, step);
    let rel = gradient_rel_err(analytic.data(), &numeric);
    assert!(rel < tol, "{what}: relative error {rel}");
}
