//! Classical clutter filters: rolling-mean high-pass, Casorati SVD, and
//! temporal accumulation.

use std::ops::Range;

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{ComplexVolume, Tensor6D, T};

pub const DEFAULT_WINDOW: usize = 11;
pub const DEFAULT_CUTOFF: usize = 20;
pub const DEFAULT_BLOCK: usize = 256;

fn check_window(window: usize, frames: usize) -> Result<()> {
    if window % 2 == 0 {
        return Err(Error::arg(format!("high-pass window {window} must be odd")));
    }
    if window > frames {
        return Err(Error::arg(format!(
            "high-pass window {window} exceeds {frames} frames"
        )));
    }
    Ok(())
}

/// `out[t] = row[t] - mean(row[t-h ..= t+h])`, window truncated at the ends.
fn highpass_row(row: &[f32], half: usize, prefix: &mut Vec<f64>, out: &mut [f32]) {
    let n = row.len();
    prefix.clear();
    prefix.push(0.0);
    let mut acc = 0.0f64;
    for &v in row {
        acc += v as f64;
        prefix.push(acc);
    }
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        out[t] = (row[t] as f64 - mean) as f32;
    }
}

/// Centered rolling-mean subtraction along the time axis of every
/// `(b, c, x, y, z)` series.
pub fn highpass_rolling_mean(x: &Tensor6D, window: usize) -> Result<Tensor6D> {
    let lt = x.shape()[T];
    if x.is_empty() {
        return Ok(x.clone());
    }
    check_window(window, lt)?;
    let mut out = Tensor6D::zeros(x.shape());
    let mut prefix = Vec::with_capacity(lt + 1);
    for (src, dst) in x.data().chunks_exact(lt).zip(out.data_mut().chunks_exact_mut(lt)) {
        highpass_row(src, window / 2, &mut prefix, dst);
    }
    Ok(out)
}

/// Real and imaginary parts are filtered independently.
pub fn highpass_complex(v: &ComplexVolume, window: usize) -> Result<ComplexVolume> {
    let re = highpass_rolling_mean(&v.re_tensor(), window)?;
    let im = highpass_rolling_mean(&v.im_tensor(), window)?;
    ComplexVolume::from_tensors(&re, &im)
}

/// `M (I - V_c V_c^H)`: removes the span of the `cutoff` leading right
/// singular vectors of the Casorati matrix `M` (voxels x frames). The
/// singular vectors are the eigenvectors of `M^H M`.
fn remove_leading_subspace<N>(m: &DMatrix<N>, cutoff: usize) -> Result<DMatrix<N>>
where
    N: ComplexField<RealField = f64> + Copy,
{
    let (rows, cols) = m.shape();
    if cutoff >= rows.min(cols) {
        return Err(Error::arg(format!(
            "cutoff {cutoff} must be below min({rows}, {cols})"
        )));
    }
    if cutoff == 0 {
        return Ok(m.clone());
    }
    let gram = m.adjoint() * m;
    let eig = gram
        .try_symmetric_eigen(f64::EPSILON, 100_000)
        .ok_or_else(|| Error::numeric("eigendecomposition of the Casorati Gram matrix did not converge"))?;
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vc = DMatrix::from_fn(cols, cutoff, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(m - (m * &vc) * vc.adjoint())
}

/// Casorati SVD filter on a complex block: leading `cutoff` singular
/// components zeroed.
pub fn svd_clutter_filter(block: &ComplexVolume, cutoff: usize) -> Result<ComplexVolume> {
    let [lx, ly, lz, lt] = block.shape();
    let rows = lx * ly * lz;
    let m = DMatrix::from_fn(rows, lt, |r, t| {
        let c = block.get(r * lt + t);
        Complex64::new(c.re as f64, c.im as f64)
    });
    let f = remove_leading_subspace(&m, cutoff)?;
    let mut re = vec![0.0f32; rows * lt];
    let mut im = vec![0.0f32; rows * lt];
    for r in 0..rows {
        for t in 0..lt {
            let c = f[(r, t)];
            re[r * lt + t] = c.re as f32;
            im[r * lt + t] = c.im as f32;
        }
    }
    ComplexVolume::from_parts(block.shape(), re, im)
}

/// Real Casorati SVD filter; rows are every `(b, c, x, y, z)` series.
pub fn svd_clutter_filter_real(block: &Tensor6D, cutoff: usize) -> Result<Tensor6D> {
    let lt = block.shape()[T];
    let rows = if lt == 0 { 0 } else { block.len() / lt };
    let m = DMatrix::from_fn(rows, lt, |r, t| block.data()[r * lt + t] as f64);
    let f = remove_leading_subspace(&m, cutoff)?;
    Ok(Tensor6D::from_fn(block.shape(), |i| f[(i / lt, i % lt)] as f32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockFilterOutput {
    pub volume: ComplexVolume,
    /// Trailing blocks too short to filter, copied through unchanged.
    pub passed_through: Vec<Range<usize>>,
}

/// Applies [`svd_clutter_filter`] over consecutive blocks of `block` frames.
/// A final partial block is filtered when it holds more than `2 * cutoff`
/// frames and passed through otherwise.
pub fn svd_filter_blocks(v: &ComplexVolume, cutoff: usize, block: usize) -> Result<BlockFilterOutput> {
    if block == 0 {
        return Err(Error::arg("SVD block length must be positive"));
    }
    let [lx, ly, lz, lt] = v.shape();
    let mut out = ComplexVolume::zeros(v.shape());
    let mut passed_through = Vec::new();
    let vox = lx * ly * lz;
    let mut start = 0;
    while start < lt {
        let len = block.min(lt - start);
        let chunk = v.frames(start, len)?;
        let filtered = if len == block || len > 2 * cutoff {
            svd_clutter_filter(&chunk, cutoff)?
        } else {
            passed_through.push(start..start + len);
            chunk
        };
        let (ore, oim) = out.parts_mut();
        for r in 0..vox {
            for t in 0..len {
                ore[r * lt + start + t] = filtered.re()[r * len + t];
                oim[r * lt + start + t] = filtered.im()[r * len + t];
            }
        }
        start += len;
    }
    Ok(BlockFilterOutput {
        volume: out,
        passed_through,
    })
}

/// `acc[p] = sum over t with t mod block == p of v[t]`, for every series.
/// Output has `block` frames on the time axis.
pub fn temporal_accumulate(v: &Tensor6D, block: usize) -> Result<Tensor6D> {
    let s = v.shape();
    let lt = s[T];
    if block == 0 || block > lt {
        return Err(Error::arg(format!(
            "accumulation block {block} must be in 1..={lt}"
        )));
    }
    let mut shape = s;
    shape[T] = block;
    let mut out = Tensor6D::zeros(shape);
    for (src, dst) in v.data().chunks_exact(lt).zip(out.data_mut().chunks_exact_mut(block)) {
        let mut acc = vec![0.0f64; block];
        for (t, &x) in src.iter().enumerate() {
            acc[t % block] += x as f64;
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    }
    Ok(out)
}

/// Population standard deviation over the block positions of
/// [`temporal_accumulate`]; one frame out.
pub fn temporal_accumulate_std(v: &Tensor6D, block: usize) -> Result<Tensor6D> {
    let lt = v.shape()[T];
    if lt < 2 {
        return Err(Error::arg(format!("accumulation needs at least 2 frames, got {lt}")));
    }
    if block < 2 {
        return Err(Error::arg(format!("accumulation block {block} must be at least 2")));
    }
    let acc = temporal_accumulate(v, block)?;
    let mut shape = v.shape();
    shape[T] = 1;
    let data = acc
        .data()
        .chunks_exact(block)
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() as f32
        })
        .collect();
    Tensor6D::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn window_validation() {
        let x = Tensor6D::zeros([1, 1, 2, 2, 2, 10]);
        assert!(highpass_rolling_mean(&x, 4).is_err());
        assert!(highpass_rolling_mean(&x, 11).is_err());
        assert!(highpass_rolling_mean(&x, 9).is_ok());
    }

    #[test]
    fn window_one_is_zero() {
        let x = Tensor6D::seeded_fill([1, 1, 2, 1, 1, 5], Fill::Normal { mean: 0.0, std: 1.0 }, 1).unwrap();
        let y = highpass_rolling_mean(&x, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cutoff_limits() {
        let v = ComplexVolume::zeros([2, 2, 1, 6]);
        assert!(svd_clutter_filter(&v, 4).is_err());
        assert!(svd_clutter_filter(&v, 3).is_ok());
    }

    #[test]
    fn short_tail_passes_through() {
        let mut v = ComplexVolume::zeros([3, 3, 3, 10]);
        for (i, r) in v.parts_mut().0.iter_mut().enumerate() {
            *r = (i % 7) as f32;
        }
        let out = svd_filter_blocks(&v, 2, 8).unwrap();
        assert_eq!(out.passed_through, vec![8..10]);
        for r in 0..27 {
            for t in 8..10 {
                assert_eq!(out.volume.re()[r * 10 + t], v.re()[r * 10 + t]);
            }
        }
    }

    #[test]
    fn accumulate_block_positions() {
        let v = Tensor6D::from_vec([1, 1, 1, 1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let acc = temporal_accumulate(&v, 3).unwrap();
        assert_eq!(acc.data(), &[5.0, 7.0, 9.0]);
        assert!(temporal_accumulate_std(&v.crop([0, 0, 0, 0], [1, 1, 1, 1]).unwrap(), 1).is_err());
    }
}
