//! 4D max-pooling and nearest-neighbour upsampling.
//!
//! Pooling runs in two stages: a 3D spatial pool on every time slice, then
//! a 1D pool along time for every pooled voxel. Max is separable, so the
//! result equals a single 4D window max. Remainder voxels are discarded.

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor6D};

/// Flat input offset of the element selected by each pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    pub input_shape: [usize; 6],
    pub indices: Vec<usize>,
}

pub fn maxpool4d(x: &Tensor6D, window: [usize; 4]) -> Result<(Tensor6D, ArgmaxMap)> {
    let [b, c, lx, ly, lz, lt] = x.shape();
    let [wx, wy, wz, wt] = window;
    if window.contains(&0) {
        return Err(Error::arg("pooling window extents must be positive"));
    }
    if wx > lx || wy > ly || wz > lz || wt > lt {
        return Err(Error::shape(format!(
            "pooling window {window:?} larger than input {:?}",
            x.shape()
        )));
    }
    let (ox, oy, oz, ot) = (lx / wx, ly / wy, lz / wz, lt / wt);
    let xs = strides(&x.shape());
    let data = x.data();

    // stage 1: spatial pooling of every time slice
    let mid_shape = [b, c, ox, oy, oz, lt];
    let mut mid_val = vec![0.0f32; b * c * ox * oy * oz * lt];
    let mut mid_idx = vec![0usize; mid_val.len()];
    let mut k = 0;
    for bi in 0..b {
        for ci in 0..c {
            let base = bi * xs[0] + ci * xs[1];
            for px in 0..ox {
                for py in 0..oy {
                    for pz in 0..oz {
                        for t in 0..lt {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_i = usize::MAX;
                            for dx in 0..wx {
                                for dy in 0..wy {
                                    for dz in 0..wz {
                                        let i = base
                                            + (px * wx + dx) * xs[2]
                                            + (py * wy + dy) * xs[3]
                                            + (pz * wz + dz) * xs[4]
                                            + t;
                                        if data[i] > best || best_i == usize::MAX {
                                            best = data[i];
                                            best_i = i;
                                        }
                                    }
                                }
                            }
                            mid_val[k] = best;
                            mid_idx[k] = best_i;
                            k += 1;
                        }
                    }
                }
            }
        }
    }

    // stage 2: temporal pooling; ties resolve to the smallest input offset,
    // i.e. the first element of the 4D window in row-major order
    let mut out = Tensor6D::zeros([b, c, ox, oy, oz, ot]);
    let mut indices = vec![0usize; out.len()];
    let od = out.data_mut();
    for (row, (vals, idxs)) in mid_val
        .chunks_exact(mid_shape[5].max(1))
        .zip(mid_idx.chunks_exact(mid_shape[5].max(1)))
        .enumerate()
    {
        for pt in 0..ot {
            let mut best = f32::NEG_INFINITY;
            let mut best_i = usize::MAX;
            for dt in 0..wt {
                let v = vals[pt * wt + dt];
                let i = idxs[pt * wt + dt];
                if best_i == usize::MAX || v > best || (v == best && i < best_i) {
                    best = v;
                    best_i = i;
                }
            }
            od[row * ot + pt] = best;
            indices[row * ot + pt] = best_i;
        }
    }
    Ok((
        out,
        ArgmaxMap {
            input_shape: x.shape(),
            indices,
        },
    ))
}

/// Routes each pooled gradient to the input element that won the max.
pub fn maxpool4d_backward(grad_out: &Tensor6D, argmax: &ArgmaxMap) -> Result<Tensor6D> {
    if grad_out.len() != argmax.indices.len() {
        return Err(Error::shape(format!(
            "gradient {:?} does not match pooled output",
            grad_out.shape()
        )));
    }
    let mut g = Tensor6D::zeros(argmax.input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.indices.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    Ok(g)
}

/// Nearest-neighbour upsampling: every 3D slice is expanded by `(i, j, k)`,
/// then each expanded slice is repeated `l` times along time.
pub fn upsample4d(x: &Tensor6D, factors: [usize; 4]) -> Result<Tensor6D> {
    if factors.contains(&0) {
        return Err(Error::arg("upsampling factors must be positive"));
    }
    let [b, c, lx, ly, lz, lt] = x.shape();
    let [fx, fy, fz, ft] = factors;
    let out_shape = [b, c, lx * fx, ly * fy, lz * fz, lt * ft];
    let mut out = Tensor6D::zeros(out_shape);
    let os = strides(&out_shape);
    let xs = strides(&x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for bc in 0..b * c {
        let sb = bc * xs[1];
        let db = bc * os[1];
        for ux in 0..lx * fx {
            for uy in 0..ly * fy {
                for uz in 0..lz * fz {
                    let s = sb + (ux / fx) * xs[2] + (uy / fy) * xs[3] + (uz / fz) * xs[4];
                    let d = db + ux * os[2] + uy * os[3] + uz * os[4];
                    for t in 0..lt {
                        let v = src[s + t];
                        dst[d + t * ft..d + (t + 1) * ft].fill(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample4d`]: sums every replicated block.
pub fn upsample4d_backward(grad_out: &Tensor6D, factors: [usize; 4]) -> Result<Tensor6D> {
    if factors.contains(&0) {
        return Err(Error::arg("upsampling factors must be positive"));
    }
    let [b, c, ux, uy, uz, ut] = grad_out.shape();
    let [fx, fy, fz, ft] = factors;
    if ux % fx != 0 || uy % fy != 0 || uz % fz != 0 || ut % ft != 0 {
        return Err(Error::shape(format!(
            "gradient {:?} is not a multiple of factors {factors:?}",
            grad_out.shape()
        )));
    }
    let in_shape = [b, c, ux / fx, uy / fy, uz / fz, ut / ft];
    let mut g = Tensor6D::zeros(in_shape);
    let gs = strides(&in_shape);
    let os = strides(&grad_out.shape());
    let src = grad_out.data();
    let dst = g.data_mut();
    for bc in 0..b * c {
        for x in 0..ux {
            for y in 0..uy {
                for z in 0..uz {
                    let s = bc * os[1] + x * os[2] + y * os[3] + z * os[4];
                    let d = bc * gs[1] + (x / fx) * gs[2] + (y / fy) * gs[3] + (z / fz) * gs[4];
                    for t in 0..ut {
                        dst[d + t / ft] += src[s + t];
                    }
                }
            }
        }
    }
    Ok(g)
}
