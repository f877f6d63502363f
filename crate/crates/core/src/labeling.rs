//! Ground-truth targets from trajectories: window-restricted magnitude,
//! edge-bubble removal, dilation normalization, patch tiling, augmentation
//! and channel standardization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::KeyValues;
use crate::tensor::{Tensor6D, B, C, T, X, Y, Z};
use crate::tracking::Trajectory;

pub const PATCH_EXTENT: [usize; 4] = [16, 16, 16, 8];
pub const DILATION_RADIUS: usize = 2;
pub const EDGE_MARGIN: usize = 2;

/// Window in `(x, y, z, t)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchSpec {
    pub origin: [usize; 4],
    pub extent: [usize; 4],
}

impl PatchSpec {
    fn crop_args(&self) -> ([usize; 4], [usize; 4]) {
        (self.origin, self.extent)
    }

    /// Patch-local spatial coordinates of a parent-volume position.
    pub fn local(&self, pos: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| pos[a] - self.origin[a] as f64)
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        t >= self.origin[3] && t < self.origin[3] + self.extent[3]
    }
}

/// Tile starts along one axis; a partial last tile is shifted inward.
pub fn axis_starts(len: usize, extent: usize, stride: usize) -> Result<Vec<usize>> {
    if extent == 0 || stride == 0 {
        return Err(Error::arg("patch extent and stride must be positive"));
    }
    if len < extent {
        return Err(Error::shape(format!("axis of {len} is smaller than the patch extent {extent}")));
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + extent <= len).collect();
    let last = len - extent;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Tiles a `(x, y, z, t)` volume; patches are ordered with time outermost.
pub fn patch_grid(shape: [usize; 4], extent: [usize; 4], stride: [usize; 4]) -> Result<Vec<PatchSpec>> {
    let s: Vec<Vec<usize>> = (0..4)
        .map(|a| axis_starts(shape[a], extent[a], stride[a]))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &t in &s[3] {
        for &x in &s[0] {
            for &y in &s[1] {
                for &z in &s[2] {
                    out.push(PatchSpec {
                        origin: [x, y, z, t],
                        extent,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn crop_patch(v: &Tensor6D, spec: &PatchSpec) -> Result<Tensor6D> {
    let (o, e) = spec.crop_args();
    v.crop(o, e)
}

/// Writes patches back at their origins; later patches overwrite earlier ones.
pub fn reassemble(patches: &[(PatchSpec, Tensor6D)], shape: [usize; 6]) -> Result<Tensor6D> {
    let mut out = Tensor6D::zeros(shape);
    for (spec, p) in patches {
        let ps = p.shape();
        if ps[B] != shape[B] || ps[C] != shape[C] || ps[2..] != spec.extent {
            return Err(Error::shape(format!("patch {ps:?} does not match {spec:?}")));
        }
        for a in 0..4 {
            if spec.origin[a] + spec.extent[a] > shape[a + 2] {
                return Err(Error::shape(format!("patch {spec:?} exceeds {shape:?}")));
            }
        }
        for b in 0..ps[B] {
            for c in 0..ps[C] {
                for x in 0..ps[X] {
                    for y in 0..ps[Y] {
                        for z in 0..ps[Z] {
                            let src = p.offset([b, c, x, y, z, 0]);
                            let dst = out.offset([
                                b,
                                c,
                                x + spec.origin[0],
                                y + spec.origin[1],
                                z + spec.origin[2],
                                spec.origin[3],
                            ]);
                            let row = p.data()[src..src + ps[T]].to_vec();
                            out.data_mut()[dst..dst + ps[T]].copy_from_slice(&row);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Running maximum over `[-r, r]` along one spatial axis of every frame.
fn max_along(v: &Tensor6D, axis: usize, r: usize) -> Tensor6D {
    let s = v.shape();
    let stride: usize = s[axis + 1..].iter().product();
    let len = s[axis];
    let outer: usize = s[..axis].iter().product();
    let mut out = v.clone();
    let src = v.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(len);
                let mut m = f32::NEG_INFINITY;
                for j in lo..hi {
                    m = m.max(src[base + j * stride]);
                }
                dst[base + i * stride] = m;
            }
        }
    }
    out
}

/// Grey dilation of every frame by a `(2r + 1)^3` cube.
pub fn dilate(v: &Tensor6D, radius: usize) -> Tensor6D {
    let a = max_along(v, X, radius);
    let b = max_along(&a, Y, radius);
    max_along(&b, Z, radius)
}

/// `gt / dilate(gt)` with `0 / 0 = 0`.
pub fn dilation_normalize(gt: &Tensor6D, radius: usize) -> Result<Tensor6D> {
    if gt.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::arg("dilation normalization needs a finite non-negative volume"));
    }
    let d = dilate(gt, radius);
    Ok(Tensor6D::from_fn(gt.shape(), |i| {
        let m = d.data()[i];
        if m > 0.0 {
            gt.data()[i] / m
        } else {
            0.0
        }
    }))
}

fn window_range(c: f64, r: usize, len: usize) -> std::ops::Range<usize> {
    let c = c.round();
    let lo = (c - r as f64).max(0.0) as usize;
    let hi = ((c + r as f64 + 1.0).max(0.0) as usize).min(len);
    lo..hi.max(lo)
}

fn for_window(
    shape: [usize; 6],
    pos: [f64; 3],
    r: [usize; 3],
    mut f: impl FnMut(usize, usize, usize),
) {
    for x in window_range(pos[0], r[0], shape[X]) {
        for y in window_range(pos[1], r[1], shape[Y]) {
            for z in window_range(pos[2], r[2], shape[Z]) {
                f(x, y, z);
            }
        }
    }
}

/// Magnitude kept only within the diameter window of every track point.
/// `magnitude` is `(1, 1, Lx, Ly, Lz, T)`.
pub fn window_restricted(magnitude: &Tensor6D, trajs: &[Trajectory], diameter: [usize; 3]) -> Result<Tensor6D> {
    let s = magnitude.shape();
    if s[B] != 1 || s[C] != 1 {
        return Err(Error::shape(format!("expected a single-channel magnitude volume, got {s:?}")));
    }
    let r = diameter.map(|d| d / 2);
    let mut out = Tensor6D::zeros(s);
    for p in trajs.iter().flat_map(|t| &t.points) {
        if p.frame >= s[T] {
            return Err(Error::arg(format!("track frame {} beyond {} frames", p.frame, s[T])));
        }
        for_window(s, p.pos, r, |x, y, z| {
            let i = magnitude.offset([0, 0, x, y, z, p.frame]);
            out.data_mut()[i] = magnitude.data()[i];
        });
    }
    Ok(out)
}

fn near_face(local: [f64; 3], extent: [usize; 4], margin: usize) -> bool {
    (0..3).any(|a| local[a] < margin as f64 || local[a] > (extent[a] - 1 - margin.min(extent[a] - 1)) as f64)
}

/// Whether any point of the trajectory inside the patch's frames lies
/// within `margin` voxels of a spatial face, or outside the patch.
pub fn touches_edge(traj: &Trajectory, spec: &PatchSpec, margin: usize) -> bool {
    traj.points
        .iter()
        .filter(|p| spec.contains_frame(p.frame))
        .any(|p| near_face(spec.local(p.pos), spec.extent, margin))
}

/// Which footprints an edge bubble loses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EdgeRule {
    /// Every frame of the patch, once the bubble touches the margin anywhere.
    #[default]
    Patch,
    /// Only the frames in which the centre lies within the margin.
    Frame,
}

impl std::str::FromStr for EdgeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(EdgeRule::Patch),
            "frame" => Ok(EdgeRule::Frame),
            other => Err(Error::arg(format!("unknown edge rule `{other}` (patch|frame)"))),
        }
    }
}

impl std::fmt::Display for EdgeRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeRule::Patch => "patch",
            EdgeRule::Frame => "frame",
        })
    }
}

/// Zeroes, for the whole patch, the footprint of every bubble touching the
/// margin in any of the patch's frames.
pub fn remove_edge_bubbles(
    gt_patch: &Tensor6D,
    trajs: &[Trajectory],
    spec: &PatchSpec,
    diameter: [usize; 3],
    margin: usize,
) -> Result<Tensor6D> {
    remove_edge_bubbles_with(gt_patch, trajs, spec, diameter, margin, EdgeRule::Patch)
}

pub fn remove_edge_bubbles_with(
    gt_patch: &Tensor6D,
    trajs: &[Trajectory],
    spec: &PatchSpec,
    diameter: [usize; 3],
    margin: usize,
    rule: EdgeRule,
) -> Result<Tensor6D> {
    let s = gt_patch.shape();
    if s[2..] != spec.extent {
        return Err(Error::shape(format!("target {s:?} does not match {spec:?}")));
    }
    let r = diameter.map(|d| d / 2);
    let mut out = gt_patch.clone();
    for t in trajs {
        let whole = rule == EdgeRule::Patch && touches_edge(t, spec, margin);
        for p in t.points.iter().filter(|p| spec.contains_frame(p.frame)) {
            let local = spec.local(p.pos);
            if !whole && !near_face(local, spec.extent, margin) {
                continue;
            }
            let lt = p.frame - spec.origin[3];
            for_window(s, local, r, |x, y, z| {
                for b in 0..s[B] {
                    for c in 0..s[C] {
                        let i = out.offset([b, c, x, y, z, lt]);
                        out.data_mut()[i] = 0.0;
                    }
                }
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelParams {
    pub extent: [usize; 4],
    pub stride: [usize; 4],
    pub diameter: [usize; 3],
    pub margin: usize,
    pub dilation_radius: usize,
    pub edge_rule: EdgeRule,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            extent: PATCH_EXTENT,
            stride: PATCH_EXTENT,
            diameter: [5, 5, 5],
            margin: EDGE_MARGIN,
            dilation_radius: DILATION_RADIUS,
            edge_rule: EdgeRule::Patch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub spec: PatchSpec,
    pub input: Tensor6D,
    pub target: Tensor6D,
}

/// Target for one patch: cropped window-restricted magnitude, edge bubbles
/// removed, dilation normalized.
pub fn ground_truth_patch(
    restricted: &Tensor6D,
    trajs: &[Trajectory],
    spec: &PatchSpec,
    params: &LabelParams,
) -> Result<Tensor6D> {
    let crop = crop_patch(restricted, spec)?;
    let kept = remove_edge_bubbles_with(&crop, trajs, spec, params.diameter, params.margin, params.edge_rule)?;
    dilation_normalize(&kept, params.dilation_radius)
}

/// Tiles `channels` and pairs every tile with its target. `magnitude` is the
/// bubble-only magnitude, `trajs` the retained trajectories.
pub fn label_volume(
    channels: &Tensor6D,
    magnitude: &Tensor6D,
    trajs: &[Trajectory],
    params: &LabelParams,
) -> Result<Vec<LabeledPatch>> {
    let cs = channels.shape();
    let ms = magnitude.shape();
    if cs[B] != 1 || cs[2..] != ms[2..] {
        return Err(Error::shape(format!("channels {cs:?} and magnitude {ms:?} disagree")));
    }
    let restricted = window_restricted(magnitude, trajs, params.diameter)?;
    let shape = [cs[X], cs[Y], cs[Z], cs[T]];
    patch_grid(shape, params.extent, params.stride)?
        .into_iter()
        .map(|spec| {
            Ok(LabeledPatch {
                spec,
                input: crop_patch(channels, &spec)?,
                target: ground_truth_patch(&restricted, trajs, &spec, params)?,
            })
        })
        .collect()
}

/// Spatial axis permutation followed by optional x and y reversals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// Output spatial axis `a` reads input axis `perm[a]`.
    pub perm: [usize; 3],
    pub flip_x: bool,
    pub flip_y: bool,
}

pub const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        perm: [0, 1, 2],
        flip_x: false,
        flip_y: false,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            perm: PERMUTATIONS[rng.random_range(0..6)],
            flip_x: rng.random(),
            flip_y: rng.random(),
        }
    }

    pub fn apply(&self, v: &Tensor6D) -> Result<Tensor6D> {
        let s = v.shape();
        let sp = [s[X], s[Y], s[Z]];
        if self.perm != [0, 1, 2] && !(sp[0] == sp[1] && sp[1] == sp[2]) {
            return Err(Error::shape(format!("axis permutation needs equal spatial extents, got {sp:?}")));
        }
        let lt = s[T];
        let mut out = Tensor6D::zeros(s);
        for b in 0..s[B] {
            for c in 0..s[C] {
                for x in 0..sp[0] {
                    for y in 0..sp[1] {
                        for z in 0..sp[2] {
                            let o = [x, y, z];
                            let mut i = [0; 3];
                            for a in 0..3 {
                                i[self.perm[a]] = o[a];
                            }
                            let xs = if self.flip_x { sp[0] - 1 - x } else { x };
                            let ys = if self.flip_y { sp[1] - 1 - y } else { y };
                            let dst = out.offset([b, c, xs, ys, z, 0]);
                            let src = v.offset([b, c, i[0], i[1], i[2], 0]);
                            let row = v.data()[src..src + lt].to_vec();
                            out.data_mut()[dst..dst + lt].copy_from_slice(&row);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Applies one random augmentation to input and target alike.
pub fn augment(input: &Tensor6D, target: &Tensor6D, seed: u64) -> Result<(Tensor6D, Tensor6D, Augmentation)> {
    let aug = Augmentation::draw(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((aug.apply(input)?, aug.apply(target)?, aug))
}

/// Per-channel mean and standard deviation of the standardized channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

pub const STANDARDIZED_CHANNELS: usize = 2;

impl ChannelStats {
    /// Population statistics over a corpus of `(B, 4, ...)` tensors.
    pub fn compute<'a>(corpus: impl IntoIterator<Item = &'a Tensor6D>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut shift: [Option<f64>; 2] = [None; 2];
        for t in corpus {
            let s = t.shape();
            if s[C] < STANDARDIZED_CHANNELS {
                return Err(Error::shape(format!("expected at least 2 channels, got {s:?}")));
            }
            let per: usize = s[X] * s[Y] * s[Z] * s[T];
            for b in 0..s[B] {
                for c in 0..STANDARDIZED_CHANNELS {
                    let start = t.offset([b, c, 0, 0, 0, 0]);
                    let k = *shift[c].get_or_insert(t.data()[start] as f64);
                    for &v in &t.data()[start..start + per] {
                        let d = v as f64 - k;
                        sum[c] += d;
                        sq[c] += d * d;
                    }
                }
                n += per;
            }
        }
        if n == 0 {
            return Err(Error::arg("channel statistics need a non-empty corpus"));
        }
        let shift = shift.map(|k| k.unwrap_or(0.0));
        let mean = [shift[0] + sum[0] / n as f64, shift[1] + sum[1] / n as f64];
        let var = |c: usize| (sq[c] / n as f64 - (sum[c] / n as f64).powi(2)).max(0.0);
        let stats = Self {
            mean,
            std: [var(0).sqrt(), var(1).sqrt()],
        };
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<()> {
        for c in 0..STANDARDIZED_CHANNELS {
            if !(self.std[c] > 0.0) || !self.mean[c].is_finite() {
                return Err(Error::numeric(format!(
                    "channel {c} has standard deviation {} and cannot be standardized",
                    self.std[c]
                )));
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for c in 0..STANDARDIZED_CHANNELS {
            kv.set(&format!("channel{c}.mean"), format!("{:e}", self.mean[c]));
            kv.set(&format!("channel{c}.std"), format!("{:e}", self.std[c]));
        }
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut s = Self {
            mean: [0.0; 2],
            std: [0.0; 2],
        };
        for c in 0..STANDARDIZED_CHANNELS {
            s.mean[c] = kv.parse_value(&format!("channel{c}.mean"))?;
            s.std[c] = kv.parse_value(&format!("channel{c}.std"))?;
        }
        s.check()?;
        Ok(s)
    }
}

/// Channels 0 and 1 to `(x - mean) / std`; other channels untouched.
pub fn standardize(channels: &Tensor6D, stats: &ChannelStats) -> Result<Tensor6D> {
    stats.check()?;
    let s = channels.shape();
    if s[C] < STANDARDIZED_CHANNELS {
        return Err(Error::shape(format!("expected at least 2 channels, got {s:?}")));
    }
    let per = s[X] * s[Y] * s[Z] * s[T];
    let mut out = channels.clone();
    for b in 0..s[B] {
        for c in 0..STANDARDIZED_CHANNELS {
            let start = out.offset([b, c, 0, 0, 0, 0]);
            let (m, sd) = (stats.mean[c], stats.std[c]);
            for v in &mut out.data_mut()[start..start + per] {
                *v = ((*v as f64 - m) / sd) as f32;
            }
        }
    }
    Ok(out)
}
