//! Dense 6-axis tensors and complex 3D+t volumes.
//!
//! Every tensor is laid out row-major over `(B, C, Lx, Ly, Lz, T)`, so the
//! time axis is the fastest-varying one. Reshapes are pure index arithmetic
//! and never move data.

use num_complex::Complex32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub const B: usize = 0;
pub const C: usize = 1;
pub const X: usize = 2;
pub const Y: usize = 3;
pub const Z: usize = 4;
pub const T: usize = 5;

pub type Shape6 = [usize; 6];

/// Row-major strides for a 6D shape.
pub fn strides(shape: &Shape6) -> Shape6 {
    let mut s = [1usize; 6];
    for i in (0..5).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn numel(shape: &Shape6) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor6D {
    shape: Shape6,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor6D),
    Scalar(f32),
}

/// Distribution used by [`Tensor6D::seeded_fill`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Uniform { low: f32, high: f32 },
    Normal { mean: f32, std: f32 },
}

impl Tensor6D {
    pub fn zeros(shape: Shape6) -> Self {
        Self {
            shape,
            data: vec![0.0; numel(&shape)],
        }
    }

    pub fn full(shape: Shape6, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn from_vec(shape: Shape6, data: Vec<f32>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    /// Tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(shape: Shape6, f: impl FnMut(usize) -> f32) -> Self {
        Self {
            shape,
            data: (0..numel(&shape)).map(f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape6 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: Shape6) -> usize {
        let s = strides(&self.shape);
        idx.iter().zip(s.iter()).map(|(i, s)| i * s).sum()
    }

    #[inline]
    pub fn get(&self, idx: Shape6) -> f32 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: Shape6, v: f32) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Reinterprets the data under a new shape of at most six extents.
    ///
    /// Shorter shapes are padded with trailing unit axes, so a 5D shape
    /// `(B, C, Lx, Ly, Lz*T)` is stored as `(B, C, Lx, Ly, Lz*T, 1)`.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor6D> {
        if new_shape.len() > 6 {
            return Err(Error::shape(format!(
                "rank {} exceeds 6",
                new_shape.len()
            )));
        }
        let mut shape = [1usize; 6];
        shape[..new_shape.len()].copy_from_slice(new_shape);
        if numel(&shape) != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.len(),
                new_shape
            )));
        }
        Ok(Tensor6D {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_>) -> Result<Tensor6D> {
        let apply = |a: f32, b: f32| -> Result<f32> {
            Ok(match op {
                ElementwiseOp::Add => a + b,
                ElementwiseOp::Sub => a - b,
                ElementwiseOp::Mul => a * b,
                ElementwiseOp::Div => {
                    if b == 0.0 {
                        return Err(Error::numeric("division by zero"));
                    }
                    a / b
                }
            })
        };
        let data = match rhs {
            Operand::Scalar(s) => self
                .data
                .iter()
                .map(|&a| apply(a, s))
                .collect::<Result<Vec<_>>>()?,
            Operand::Tensor(other) => {
                if other.shape != self.shape {
                    return Err(Error::shape(format!(
                        "elementwise operands differ: {:?} vs {:?}",
                        self.shape, other.shape
                    )));
                }
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| apply(a, b))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Tensor6D {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor6D) -> Result<Tensor6D> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor6D) -> Result<Tensor6D> {
        self.elementwise(ElementwiseOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor6D) -> Result<Tensor6D> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(other))
    }

    pub fn div(&self, other: &Tensor6D) -> Result<Tensor6D> {
        self.elementwise(ElementwiseOp::Div, Operand::Tensor(other))
    }

    pub fn scale(&self, s: f32) -> Tensor6D {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor6D {
        Tensor6D {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Deterministic random tensor: the same `(shape, fill, seed)` always
    /// yields the same values.
    pub fn seeded_fill(shape: Shape6, fill: Fill, seed: u64) -> Result<Tensor6D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = numel(&shape);
        let data = match fill {
            Fill::Uniform { low, high } => {
                if !(low <= high) {
                    return Err(Error::arg(format!("uniform bounds {low} > {high}")));
                }
                if low == high {
                    vec![low; n]
                } else {
                    let d = Uniform::new(low, high).map_err(|e| Error::arg(e.to_string()))?;
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            }
            Fill::Normal { mean, std } => {
                if !(std >= 0.0) {
                    return Err(Error::arg(format!("negative standard deviation {std}")));
                }
                let d = Normal::new(mean, std).map_err(|e| Error::arg(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor6D { shape, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of a single channel, keeping a unit channel axis.
    pub fn channel(&self, c: usize) -> Result<Tensor6D> {
        self.channels(c, c + 1)
    }

    /// Copy of channels `start..end`.
    pub fn channels(&self, start: usize, end: usize) -> Result<Tensor6D> {
        let [b, ch, x, y, z, t] = self.shape;
        if start > end || end > ch {
            return Err(Error::shape(format!(
                "channel range {start}..{end} out of {ch}"
            )));
        }
        let vol = x * y * z * t;
        let mut data = Vec::with_capacity(b * (end - start) * vol);
        for bi in 0..b {
            let base = bi * ch * vol;
            data.extend_from_slice(&self.data[base + start * vol..base + end * vol]);
        }
        Ok(Tensor6D {
            shape: [b, end - start, x, y, z, t],
            data,
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&self, other: &Tensor6D) -> Result<Tensor6D> {
        let [b, c1, x, y, z, t] = self.shape;
        let [b2, c2, x2, y2, z2, t2] = other.shape;
        if (b, x, y, z, t) != (b2, x2, y2, z2, t2) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.shape, other.shape
            )));
        }
        let vol = x * y * z * t;
        let mut data = Vec::with_capacity(self.len() + other.len());
        for bi in 0..b {
            data.extend_from_slice(&self.data[bi * c1 * vol..(bi + 1) * c1 * vol]);
            data.extend_from_slice(&other.data[bi * c2 * vol..(bi + 1) * c2 * vol]);
        }
        Ok(Tensor6D {
            shape: [b, c1 + c2, x, y, z, t],
            data,
        })
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor6D]) -> Result<Tensor6D> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("cannot stack an empty list"))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for it in items {
            let mut s = it.shape;
            s[B] = shape[B];
            if s != shape {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, it.shape
                )));
            }
            data.extend_from_slice(&it.data);
        }
        shape[B] = items.iter().map(|t| t.shape[B]).sum();
        Ok(Tensor6D { shape, data })
    }

    /// Copy of batch entry `b`, keeping a unit batch axis.
    pub fn batch_item(&self, b: usize) -> Result<Tensor6D> {
        if b >= self.shape[B] {
            return Err(Error::shape(format!("batch index {b} out of {}", self.shape[B])));
        }
        let per = self.len() / self.shape[B];
        let mut shape = self.shape;
        shape[B] = 1;
        Ok(Tensor6D {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        })
    }

    /// Copy of the window starting at `origin` with extent `size` over the
    /// four spatio-temporal axes, for all batches and channels.
    pub fn crop(&self, origin: [usize; 4], size: [usize; 4]) -> Result<Tensor6D> {
        let [b, c, lx, ly, lz, lt] = self.shape;
        for (a, ext) in [lx, ly, lz, lt].iter().enumerate() {
            if origin[a] + size[a] > *ext {
                return Err(Error::shape(format!(
                    "window {:?}+{:?} exceeds {:?}",
                    origin, size, self.shape
                )));
            }
        }
        let mut out = Tensor6D::zeros([b, c, size[0], size[1], size[2], size[3]]);
        let mut k = 0;
        for bi in 0..b {
            for ci in 0..c {
                for x in 0..size[0] {
                    for y in 0..size[1] {
                        for z in 0..size[2] {
                            let src = self.offset([
                                bi,
                                ci,
                                origin[0] + x,
                                origin[1] + y,
                                origin[2] + z,
                                origin[3],
                            ]);
                            out.data[k..k + size[3]]
                                .copy_from_slice(&self.data[src..src + size[3]]);
                            k += size[3];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Complex-valued 3D+t volume with shape `(Lx, Ly, Lz, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    shape: [usize; 4],
    re: Vec<f32>,
    im: Vec<f32>,
}

impl ComplexVolume {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_parts(shape: [usize; 4], re: Vec<f32>, im: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::shape(format!(
                "complex parts of length {}/{} do not match {:?}",
                re.len(),
                im.len(),
                shape
            )));
        }
        Ok(Self { shape, re, im })
    }

    /// Builds a volume from real and imaginary tensors of shape `(1,1,Lx,Ly,Lz,T)`.
    pub fn from_tensors(re: &Tensor6D, im: &Tensor6D) -> Result<Self> {
        let s = re.shape();
        if s != im.shape() || s[B] != 1 || s[C] != 1 {
            return Err(Error::shape(format!(
                "complex parts must share a (1,1,..) shape, got {:?} and {:?}",
                s,
                im.shape()
            )));
        }
        Self::from_parts(
            [s[X], s[Y], s[Z], s[T]],
            re.data().to_vec(),
            im.data().to_vec(),
        )
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn tensor_shape(&self) -> Shape6 {
        let [x, y, z, t] = self.shape;
        [1, 1, x, y, z, t]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.re.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f32] {
        &self.re
    }

    pub fn im(&self) -> &[f32] {
        &self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.re, &mut self.im)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, t: usize) -> usize {
        let [_, ly, lz, lt] = self.shape;
        ((x * ly + y) * lz + z) * lt + t
    }

    #[inline]
    pub fn get(&self, i: usize) -> Complex32 {
        Complex32::new(self.re[i], self.im[i])
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, v: Complex32) {
        self.re[i] += v.re;
        self.im[i] += v.im;
    }

    pub fn re_tensor(&self) -> Tensor6D {
        Tensor6D {
            shape: self.tensor_shape(),
            data: self.re.clone(),
        }
    }

    pub fn im_tensor(&self) -> Tensor6D {
        Tensor6D {
            shape: self.tensor_shape(),
            data: self.im.clone(),
        }
    }

    pub fn magnitude(&self) -> Tensor6D {
        Tensor6D {
            shape: self.tensor_shape(),
            data: self
                .re
                .iter()
                .zip(&self.im)
                .map(|(&r, &i)| r.hypot(i))
                .collect(),
        }
    }

    /// Root mean square of the complex magnitude.
    pub fn rms(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let e: f64 = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2))
            .sum();
        (e / self.len() as f64).sqrt()
    }

    pub fn scale(&self, s: f32) -> ComplexVolume {
        ComplexVolume {
            shape: self.shape,
            re: self.re.iter().map(|v| v * s).collect(),
            im: self.im.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &ComplexVolume) -> Result<ComplexVolume> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "complex volumes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(ComplexVolume {
            shape: self.shape,
            re: self.re.iter().zip(&other.re).map(|(a, b)| a + b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    /// Frames `start..start+len` as a new volume.
    pub fn frames(&self, start: usize, len: usize) -> Result<ComplexVolume> {
        let [lx, ly, lz, lt] = self.shape;
        if start + len > lt {
            return Err(Error::shape(format!(
                "frames {start}..{} out of {lt}",
                start + len
            )));
        }
        let mut out = ComplexVolume::zeros([lx, ly, lz, len]);
        for v in 0..lx * ly * lz {
            let src = v * lt + start;
            out.re[v * len..(v + 1) * len].copy_from_slice(&self.re[src..src + len]);
            out.im[v * len..(v + 1) * len].copy_from_slice(&self.im[src..src + len]);
        }
        Ok(out)
    }
}
