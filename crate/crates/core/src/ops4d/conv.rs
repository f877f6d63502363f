//! 4D convolution, stride 1, zero-filled `same` padding.
//!
//! The forward pass is evaluated as a sum of 3D convolutions, one per
//! temporal kernel tap:
//!
//! ```text
//! out[t] = bias + sum_{dt = -l/2}^{l/2} conv3d(x[t + dt], w[.., dt])
//! ```
//!
//! Frames are copied once into a zero-padded channels-last buffer, and the
//! 3D convolutions run as a register-blocked direct kernel over blocks of
//! [`LANES`] output channels. The input gradient is the same operation with
//! the kernel flipped and its channel axes swapped.

use crate::error::{Error, Result};
use crate::tensor::Tensor6D;

/// Output channels computed together by the inner kernel.
pub const LANES: usize = 8;
type Lane = [f32; LANES];

#[derive(Clone, Debug, PartialEq)]
pub struct Conv4d {
    /// `(C_out, C_in, kx, ky, kz, kt)`
    pub weight: Tensor6D,
    /// `(C_out, 1, 1, 1, 1, 1)`
    pub bias: Tensor6D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv4dGrads {
    pub input: Tensor6D,
    pub weight: Tensor6D,
    pub bias: Tensor6D,
}

impl Conv4d {
    pub fn new(weight: Tensor6D, bias: Tensor6D) -> Result<Self> {
        let ws = weight.shape();
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::arg(format!(
                "kernel extents must be odd, got {:?}",
                &ws[2..]
            )));
        }
        if bias.shape() != [ws[0], 1, 1, 1, 1, 1] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {} output channels",
                bias.shape(),
                ws[0]
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, kernel: [usize; 4]) -> Result<Self> {
        let [kx, ky, kz, kt] = kernel;
        Self::new(
            Tensor6D::zeros([c_out, c_in, kx, ky, kz, kt]),
            Tensor6D::zeros([c_out, 1, 1, 1, 1, 1]),
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 4] {
        let s = self.weight.shape();
        [s[2], s[3], s[4], s[5]]
    }

    fn check_input(&self, x: &Tensor6D) -> Result<()> {
        let s = x.shape();
        if s[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, layer expects {}",
                s[1],
                self.in_channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor6D) -> Result<Tensor6D> {
        self.check_input(x)?;
        let packed = PackedKernel::new(&self.weight);
        Ok(correlate(x, &packed, self.bias.data()))
    }

    /// Adjoint of [`Conv4d::forward`] evaluated at the cached input `x`.
    pub fn backward(&self, grad_out: &Tensor6D, x: &Tensor6D) -> Result<Conv4dGrads> {
        let (weight, bias) = self.param_grads(grad_out, x)?;
        let adjoint = PackedKernel::new(&flip_transpose(&self.weight));
        let zero_bias = vec![0.0f32; self.in_channels()];
        Ok(Conv4dGrads {
            input: correlate(grad_out, &adjoint, &zero_bias),
            weight,
            bias,
        })
    }

    /// Weight and bias gradients only.
    pub fn param_grads(&self, grad_out: &Tensor6D, x: &Tensor6D) -> Result<(Tensor6D, Tensor6D)> {
        self.check_input(x)?;
        let [b, _, lx, ly, lz, lt] = x.shape();
        let co = self.out_channels();
        if grad_out.shape() != [b, co, lx, ly, lz, lt] {
            return Err(Error::shape(format!(
                "gradient {:?} does not match forward output of input {:?}",
                grad_out.shape(),
                x.shape()
            )));
        }

        let mut grad_bias = vec![0.0f64; co];
        let vol = lx * ly * lz * lt;
        for bi in 0..b {
            for (o, gb) in grad_bias.iter_mut().enumerate() {
                let s = (bi * co + o) * vol;
                *gb += grad_out.data()[s..s + vol].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let grad_bias = Tensor6D::from_vec(
            self.bias.shape(),
            grad_bias.into_iter().map(|v| v as f32).collect(),
        )?;
        Ok((weight_gradient(x, grad_out, self.kernel()), grad_bias))
    }
}

/// Kernel with output and input channels swapped and every spatial and
/// temporal axis reversed.
fn flip_transpose(w: &Tensor6D) -> Tensor6D {
    let [co, ci, kx, ky, kz, kt] = w.shape();
    let mut out = Tensor6D::zeros([ci, co, kx, ky, kz, kt]);
    for o in 0..co {
        for c in 0..ci {
            for i in 0..kx {
                for j in 0..ky {
                    for k in 0..kz {
                        for l in 0..kt {
                            out.set(
                                [c, o, kx - 1 - i, ky - 1 - j, kz - 1 - k, kt - 1 - l],
                                w.get([o, c, i, j, k, l]),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weights rearranged as `[block][l][i][j][k][c_in][LANES]`, zero-filled
/// past the last output channel.
struct PackedKernel {
    data: Vec<f32>,
    c_out: usize,
    c_in: usize,
    kernel: [usize; 4],
}

impl PackedKernel {
    fn new(w: &Tensor6D) -> Self {
        let [co, ci, kx, ky, kz, kt] = w.shape();
        let blocks = co.div_ceil(LANES);
        let mut data = vec![0.0f32; blocks * kt * kx * ky * kz * ci * LANES];
        for o in 0..co {
            let (blk, lane) = (o / LANES, o % LANES);
            for c in 0..ci {
                for i in 0..kx {
                    for j in 0..ky {
                        for k in 0..kz {
                            for l in 0..kt {
                                let idx = (((((blk * kt + l) * kx + i) * ky + j) * kz + k) * ci + c)
                                    * LANES
                                    + lane;
                                data[idx] = w.get([o, c, i, j, k, l]);
                            }
                        }
                    }
                }
            }
        }
        Self {
            data,
            c_out: co,
            c_in: ci,
            kernel: [kx, ky, kz, kt],
        }
    }

    fn tap_len(&self) -> usize {
        let [kx, ky, kz, _] = self.kernel;
        kx * ky * kz * self.c_in * LANES
    }

    fn tap(&self, block: usize, l: usize) -> &[f32] {
        let n = self.tap_len();
        let start = (block * self.kernel[3] + l) * n;
        &self.data[start..start + n]
    }
}

/// Zero-padded channels-last copy of every frame of one batch entry:
/// `[t][x + hx][y + hy][z + hz][c]`.
struct PaddedFrames {
    data: Vec<f32>,
    channels: usize,
    dims: [usize; 3],
    frame_len: usize,
}

impl PaddedFrames {
    fn new(x: &Tensor6D, b: usize, halo: [usize; 3]) -> Self {
        let [_, c, lx, ly, lz, lt] = x.shape();
        let dims = [lx + 2 * halo[0], ly + 2 * halo[1], lz + 2 * halo[2]];
        let frame_len = dims.iter().product::<usize>() * c;
        let mut data = vec![0.0f32; frame_len * lt];
        let vol = lx * ly * lz * lt;
        let src = &x.data()[b * c * vol..(b + 1) * c * vol];
        for ch in 0..c {
            for vx in 0..lx {
                for vy in 0..ly {
                    for vz in 0..lz {
                        let s = (((ch * lx + vx) * ly + vy) * lz + vz) * lt;
                        let p = ((vx + halo[0]) * dims[1] + vy + halo[1]) * dims[2] + vz + halo[2];
                        for t in 0..lt {
                            data[t * frame_len + p * c + ch] = src[s + t];
                        }
                    }
                }
            }
        }
        Self {
            data,
            channels: c,
            dims,
            frame_len,
        }
    }

    fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len..(t + 1) * self.frame_len]
    }
}

fn halo(kernel: [usize; 4]) -> [usize; 3] {
    [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2]
}

/// `same` cross-correlation of `x` with a packed kernel plus bias.
fn correlate(x: &Tensor6D, kernel: &PackedKernel, bias: &[f32]) -> Tensor6D {
    let [b, _, lx, ly, lz, lt] = x.shape();
    let co = kernel.c_out;
    let mut out = Tensor6D::zeros([b, co, lx, ly, lz, lt]);
    if out.is_empty() {
        return out;
    }
    let half_t = (kernel.kernel[3] / 2) as isize;
    let vox = lx * ly * lz;
    let mut acc: Vec<Lane> = vec![[0.0; LANES]; vox];
    for bi in 0..b {
        let frames = PaddedFrames::new(x, bi, halo(kernel.kernel));
        for blk in 0..co.div_ceil(LANES) {
            let mut init = [0.0f32; LANES];
            for (lane, v) in init.iter_mut().enumerate() {
                *v = bias.get(blk * LANES + lane).copied().unwrap_or(0.0);
            }
            for t in 0..lt {
                acc.fill(init);
                for l in 0..kernel.kernel[3] {
                    let s = t as isize + l as isize - half_t;
                    if s < 0 || s >= lt as isize {
                        continue;
                    }
                    conv3d_accumulate(
                        frames.frame(s as usize),
                        frames.channels,
                        frames.dims,
                        kernel.tap(blk, l),
                        kernel.kernel,
                        [lx, ly, lz],
                        &mut acc,
                    );
                }
                let lanes = (co - blk * LANES).min(LANES);
                let od = out.data_mut();
                for lane in 0..lanes {
                    let base = (bi * co + blk * LANES + lane) * vox * lt;
                    for (v, a) in acc.iter().enumerate() {
                        od[base + v * lt + t] = a[lane];
                    }
                }
            }
        }
    }
    out
}

#[inline(always)]
fn fmadd<const FMA: bool>(a: f32, b: f32, c: f32) -> f32 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Accumulates one 3D convolution (one temporal tap) into `acc`.
fn conv3d_accumulate(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    w: &[f32],
    kernel: [usize; 4],
    size: [usize; 3],
    acc: &mut [Lane],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            unsafe { conv3d_accumulate_avx2(src, channels, dims, w, kernel, size, acc) };
            return;
        }
    }
    conv3d_accumulate_generic::<false>(src, channels, dims, w, kernel, size, acc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv3d_accumulate_avx2(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    w: &[f32],
    kernel: [usize; 4],
    size: [usize; 3],
    acc: &mut [Lane],
) {
    conv3d_accumulate_generic::<true>(src, channels, dims, w, kernel, size, acc);
}

#[inline(always)]
fn conv3d_accumulate_generic<const FMA: bool>(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    w: &[f32],
    kernel: [usize; 4],
    size: [usize; 3],
    acc: &mut [Lane],
) {
    let [lx, ly, lz] = size;
    for x in 0..lx {
        for y in 0..ly {
            let row = &mut acc[(x * ly + y) * lz..(x * ly + y + 1) * lz];
            let mut z0 = 0;
            while z0 + 8 <= lz {
                conv_block::<8, FMA>(src, channels, dims, w, kernel, [x, y, z0], &mut row[z0..z0 + 8]);
                z0 += 8;
            }
            while z0 + 4 <= lz {
                conv_block::<4, FMA>(src, channels, dims, w, kernel, [x, y, z0], &mut row[z0..z0 + 4]);
                z0 += 4;
            }
            while z0 < lz {
                conv_block::<1, FMA>(src, channels, dims, w, kernel, [x, y, z0], &mut row[z0..z0 + 1]);
                z0 += 1;
            }
        }
    }
}

/// `U` consecutive output voxels along z, all lanes, kept in registers.
#[inline(always)]
fn conv_block<const U: usize, const FMA: bool>(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    w: &[f32],
    kernel: [usize; 4],
    at: [usize; 3],
    out: &mut [Lane],
) {
    let [kx, ky, kz, _] = kernel;
    let [_, py, pz] = dims;
    let [x, y, z0] = at;
    let mut acc = [[0.0f32; LANES]; U];
    acc.copy_from_slice(&out[..U]);
    let mut wi = 0;
    for i in 0..kx {
        for j in 0..ky {
            let row = ((x + i) * py + y + j) * pz + z0;
            for k in 0..kz {
                let base = (row + k) * channels;
                let xs = &src[base..base + U * channels];
                let ws = &w[wi..wi + channels * LANES];
                wi += channels * LANES;
                for c in 0..channels {
                    // SAFETY: c < channels and u < U, so every index stays
                    // inside the slices bounded above.
                    let wv: &Lane = unsafe { &*(ws.as_ptr().add(c * LANES) as *const Lane) };
                    for u in 0..U {
                        let xv = unsafe { *xs.get_unchecked(u * channels + c) };
                        for o in 0..LANES {
                            acc[u][o] = fmadd::<FMA>(xv, wv[o], acc[u][o]);
                        }
                    }
                }
            }
        }
    }
    out[..U].copy_from_slice(&acc);
}

/// `dL/dw[o, c, i, j, k, l] = sum_{b, voxel, t} g[b, o, v, t] * x[b, c, v + (i, j, k) - h, t + l - h_t]`.
fn weight_gradient(x: &Tensor6D, grad_out: &Tensor6D, kernel: [usize; 4]) -> Tensor6D {
    let [b, ci, lx, ly, lz, lt] = x.shape();
    let co = grad_out.shape()[1];
    let [kx, ky, kz, kt] = kernel;
    let blocks = co.div_ceil(LANES);
    let tap_len = kx * ky * kz * ci * LANES;
    // [block][l][i][j][k][c_in][LANES], same packing as the forward kernel
    let mut packed = vec![0.0f32; blocks * kt * tap_len];
    let vox = lx * ly * lz;
    let half_t = (kt / 2) as isize;
    let mut g: Vec<Lane> = vec![[0.0; LANES]; vox * lt];
    for bi in 0..b {
        let frames = PaddedFrames::new(x, bi, halo(kernel));
        for blk in 0..blocks {
            // channels-last gradient block: [t][voxel][lane]
            g.fill([0.0; LANES]);
            let lanes = (co - blk * LANES).min(LANES);
            for lane in 0..lanes {
                let base = (bi * co + blk * LANES + lane) * vox * lt;
                let src = &grad_out.data()[base..base + vox * lt];
                for v in 0..vox {
                    for t in 0..lt {
                        g[t * vox + v][lane] = src[v * lt + t];
                    }
                }
            }
            for l in 0..kt {
                let dst = &mut packed[(blk * kt + l) * tap_len..(blk * kt + l + 1) * tap_len];
                for t in 0..lt {
                    let s = t as isize + l as isize - half_t;
                    if s < 0 || s >= lt as isize {
                        continue;
                    }
                    weight_grad_accumulate(
                        frames.frame(s as usize),
                        frames.channels,
                        frames.dims,
                        &g[t * vox..(t + 1) * vox],
                        kernel,
                        [lx, ly, lz],
                        dst,
                    );
                }
            }
        }
    }
    let mut out = Tensor6D::zeros([co, ci, kx, ky, kz, kt]);
    for o in 0..co {
        let (blk, lane) = (o / LANES, o % LANES);
        for c in 0..ci {
            for i in 0..kx {
                for j in 0..ky {
                    for k in 0..kz {
                        for l in 0..kt {
                            let idx = (((((blk * kt + l) * kx + i) * ky + j) * kz + k) * ci + c)
                                * LANES
                                + lane;
                            out.set([o, c, i, j, k, l], packed[idx]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn weight_grad_accumulate(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    g: &[Lane],
    kernel: [usize; 4],
    size: [usize; 3],
    dst: &mut [f32],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            unsafe { weight_grad_accumulate_avx2(src, channels, dims, g, kernel, size, dst) };
            return;
        }
    }
    weight_grad_accumulate_generic::<false>(src, channels, dims, g, kernel, size, dst);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_accumulate_avx2(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    g: &[Lane],
    kernel: [usize; 4],
    size: [usize; 3],
    dst: &mut [f32],
) {
    weight_grad_accumulate_generic::<true>(src, channels, dims, g, kernel, size, dst);
}

#[inline(always)]
fn weight_grad_accumulate_generic<const FMA: bool>(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    g: &[Lane],
    kernel: [usize; 4],
    size: [usize; 3],
    dst: &mut [f32],
) {
    let [kx, ky, kz, _] = kernel;
    let mut tap = 0;
    for i in 0..kx {
        for j in 0..ky {
            for k in 0..kz {
                let out = &mut dst[tap * channels * LANES..(tap + 1) * channels * LANES];
                let mut c0 = 0;
                while c0 + 8 <= channels {
                    weight_grad_block::<8, FMA>(src, channels, dims, g, [i, j, k], size, c0, out);
                    c0 += 8;
                }
                while c0 + 4 <= channels {
                    weight_grad_block::<4, FMA>(src, channels, dims, g, [i, j, k], size, c0, out);
                    c0 += 4;
                }
                while c0 < channels {
                    weight_grad_block::<1, FMA>(src, channels, dims, g, [i, j, k], size, c0, out);
                    c0 += 1;
                }
                tap += 1;
            }
        }
    }
}

/// Reduction over all voxels for `C` input channels and one spatial tap.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn weight_grad_block<const C: usize, const FMA: bool>(
    src: &[f32],
    channels: usize,
    dims: [usize; 3],
    g: &[Lane],
    offset: [usize; 3],
    size: [usize; 3],
    c0: usize,
    out: &mut [f32],
) {
    let [lx, ly, lz] = size;
    let [_, py, pz] = dims;
    let mut acc = [[0.0f32; LANES]; C];
    for x in 0..lx {
        for y in 0..ly {
            let prow = ((x + offset[0]) * py + y + offset[1]) * pz + offset[2];
            let grow = &g[(x * ly + y) * lz..(x * ly + y + 1) * lz];
            let xs = &src[prow * channels..(prow + lz) * channels];
            assert!(c0 + C <= channels);
            for (z, gv) in grow.iter().enumerate() {
                for c in 0..C {
                    // SAFETY: z < lz and c0 + c < channels index inside xs.
                    let xv = unsafe { *xs.get_unchecked(z * channels + c0 + c) };
                    for o in 0..LANES {
                        acc[c][o] = fmadd::<FMA>(xv, gv[o], acc[c][o]);
                    }
                }
            }
        }
    }
    for c in 0..C {
        for o in 0..LANES {
            out[(c0 + c) * LANES + o] += acc[c][o];
        }
    }
}
