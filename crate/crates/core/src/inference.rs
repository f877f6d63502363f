//! Overlapped patch inference with Gaussian blending, detection on model
//! outputs and precision/recall scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{axis_starts, crop_patch, ChannelStats, PatchSpec, PATCH_EXTENT};
use crate::synth::{synthesize, SynthConfig, TrackPoint};
use crate::tensor::{Tensor6D, B, T, X, Y, Z};
use crate::tracking::{detect_frame, frames_of, Detection, DetectionParams};
use crate::unet::UNet4D;

pub const DEFAULT_OVERLAP: usize = 6;
pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const BORDER: usize = 3;
pub const MATCH_RADIUS: f64 = 2.0;

/// Anything mapping a `(1, C, extent)` patch to a `(1, 1, extent)` patch.
pub trait PatchModel {
    fn predict_patch(&self, x: &Tensor6D) -> Result<Tensor6D>;
}

impl PatchModel for UNet4D {
    fn predict_patch(&self, x: &Tensor6D) -> Result<Tensor6D> {
        self.predict(x)
    }
}

impl<F: Fn(&Tensor6D) -> Result<Tensor6D>> PatchModel for F {
    fn predict_patch(&self, x: &Tensor6D) -> Result<Tensor6D> {
        self(x)
    }
}

/// Separable Gaussian over the patch, `sigma = extent / 4` per axis,
/// laid out like a `(x, y, z, t)` patch.
pub fn blend_weights(extent: [usize; 4]) -> Vec<f64> {
    let axis = |len: usize| -> Vec<f64> {
        let c = (len as f64 - 1.0) / 2.0;
        let s = len as f64 / 4.0;
        (0..len).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * s * s)).exp()).collect()
    };
    let (wx, wy, wz, wt) = (axis(extent[0]), axis(extent[1]), axis(extent[2]), axis(extent[3]));
    let mut w = Vec::with_capacity(extent.iter().product());
    for a in &wx {
        for b in &wy {
            for c in &wz {
                for d in &wt {
                    w.push(a * b * c * d);
                }
            }
        }
    }
    w
}

/// Patch grid for inference: spatial stride `extent - overlap`, temporal
/// windows without overlap.
pub fn inference_grid(shape: [usize; 4], extent: [usize; 4], overlap: usize) -> Result<Vec<PatchSpec>> {
    for a in 0..3 {
        if overlap >= extent[a] {
            return Err(Error::arg(format!("overlap {overlap} must be below the patch extent {:?}", extent)));
        }
    }
    let stride = [extent[0] - overlap, extent[1] - overlap, extent[2] - overlap, extent[3]];
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

/// `sum_p w_p * model(patch_p) / sum_p w_p`, accumulated in patch order.
pub fn infer_volume(
    model: &impl PatchModel,
    channels: &Tensor6D,
    extent: [usize; 4],
    overlap: usize,
) -> Result<Tensor6D> {
    let s = channels.shape();
    if s[B] != 1 {
        return Err(Error::shape(format!("inference expects a single volume, got {s:?}")));
    }
    let shape = [s[X], s[Y], s[Z], s[T]];
    let grid = inference_grid(shape, extent, overlap)?;
    let w = blend_weights(extent);
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0f64; n];
    let mut norm = vec![0.0f64; n];
    let [ex, ey, ez, et] = extent;
    for spec in &grid {
        let out = model.predict_patch(&crop_patch(channels, spec)?)?;
        if out.shape() != [1, 1, ex, ey, ez, et] {
            return Err(Error::shape(format!("model returned {:?} for a {:?} patch", out.shape(), extent)));
        }
        let o = spec.origin;
        let mut k = 0;
        for x in 0..ex {
            for y in 0..ey {
                for z in 0..ez {
                    let base = (((o[0] + x) * shape[1] + o[1] + y) * shape[2] + o[2] + z) * shape[3] + o[3];
                    for t in 0..et {
                        acc[base + t] += w[k] * out.data()[k] as f64;
                        norm[base + t] += w[k];
                        k += 1;
                    }
                }
            }
        }
    }
    let data = acc.iter().zip(&norm).map(|(a, n)| (a / n) as f32).collect();
    Tensor6D::from_vec([1, 1, shape[0], shape[1], shape[2], shape[3]], data)
}

fn inside_border(pos: [f64; 3], dims: [usize; 3], border: usize) -> bool {
    (0..3).all(|a| pos[a] >= border as f64 && pos[a] <= dims[a] as f64 - 1.0 - border as f64)
}

/// Per-frame local maxima with peak at least `threshold`, dropping centres
/// closer than `border` voxels to a spatial face.
pub fn detect_model_output(
    out: &Tensor6D,
    threshold: f32,
    params: &DetectionParams,
    border: usize,
) -> Result<Vec<Vec<Detection>>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let p = DetectionParams {
        threshold,
        minmass: f64::MIN_POSITIVE,
        ..params.clone()
    };
    p.validate()?;
    Ok(frames_of(out)?
        .iter()
        .map(|f| {
            detect_frame(f, &p)
                .into_iter()
                .filter(|d| inside_border(d.pos, f.dims, border))
                .collect()
        })
        .collect())
}

/// Generator track points grouped by frame, with the same border rule.
pub fn truths_by_frame(tracks: &[TrackPoint], shape: [usize; 4], border: usize) -> Vec<Vec<[f64; 3]>> {
    let mut out = vec![Vec::new(); shape[3]];
    for tp in tracks {
        if tp.frame < shape[3] && inside_border(tp.pos, [shape[0], shape[1], shape[2]], border) {
            out[tp.frame].push(tp.pos);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Greedy one-to-one matching by ascending distance within `radius`.
pub fn match_frame(dets: &[[f64; 3]], truths: &[[f64; 3]], radius: f64) -> Counts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let dist = (0..3).map(|a| (d[a] - t[a]).powi(2)).sum::<f64>().sqrt();
            if dist <= radius {
                pairs.push((dist, i, j));
            }
        }
    }
    // ties broken by coordinates so the result does not depend on list order
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| dets[a.1].partial_cmp(&dets[b.1]).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| truths[a.2].partial_cmp(&truths[b.2]).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut used_d = vec![false; dets.len()];
    let mut used_t = vec![false; truths.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: dets.len() - tp,
        fn_: truths.len() - tp,
    }
}

pub fn score_detections(dets: &[Vec<Detection>], truths: &[Vec<[f64; 3]>], radius: f64) -> Result<Counts> {
    if !(radius > 0.0) {
        return Err(Error::arg(format!("match radius {radius} must be positive")));
    }
    if dets.len() != truths.len() {
        return Err(Error::shape(format!("{} detection frames against {} truth frames", dets.len(), truths.len())));
    }
    Ok(dets.iter().zip(truths).fold(Counts::default(), |acc, (d, t)| {
        let pos: Vec<[f64; 3]> = d.iter().map(|x| x.pos).collect();
        acc.add(match_frame(&pos, t, radius))
    }))
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub lambda: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f32,
    pub seed_count: usize,
}

impl DetectionReport {
    pub fn new(lambda: f64, counts: Counts, threshold: f32, seed_count: usize) -> Self {
        Self {
            lambda,
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            threshold,
            seed_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalParams {
    pub extent: [usize; 4],
    pub overlap: usize,
    pub threshold: f32,
    pub detection: DetectionParams,
    pub border: usize,
    pub radius: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            extent: PATCH_EXTENT,
            overlap: DEFAULT_OVERLAP,
            threshold: DEFAULT_THRESHOLD,
            detection: DetectionParams::default(),
            border: BORDER,
            radius: MATCH_RADIUS,
        }
    }
}

/// Standardizes, infers and returns the blended model output.
pub fn model_output(model: &impl PatchModel, channels: &Tensor6D, stats: &ChannelStats, params: &EvalParams) -> Result<Tensor6D> {
    let x = crate::labeling::standardize(channels, stats)?;
    infer_volume(model, &x, params.extent, params.overlap)
}

pub fn evaluate_output(out: &Tensor6D, tracks: &[TrackPoint], threshold: f32, params: &EvalParams) -> Result<Counts> {
    let s = out.shape();
    let dets = detect_model_output(out, threshold, &params.detection, params.border)?;
    let truths = truths_by_frame(tracks, [s[X], s[Y], s[Z], s[T]], params.border);
    score_detections(&dets, &truths, params.radius)
}

/// Threshold with the best F1 on the given outputs; ties keep the lower value.
pub fn calibrate_threshold(
    outputs: &[(Tensor6D, Vec<TrackPoint>)],
    candidates: &[f32],
    params: &EvalParams,
) -> Result<(f32, f64)> {
    if candidates.is_empty() || outputs.is_empty() {
        return Err(Error::arg("threshold calibration needs candidates and at least one volume"));
    }
    let mut best = (candidates[0], f64::MIN);
    for &th in candidates {
        let mut c = Counts::default();
        for (out, tracks) in outputs {
            c = c.add(evaluate_output(out, tracks, th, params)?);
        }
        if c.f1() > best.1 {
            best = (th, c.f1());
        }
    }
    Ok(best)
}

/// Scores `model` on freshly generated volumes for every `lambda`, pooling
/// counts over `seeds`. Only `lambda` and `seed` of `base` are overridden.
pub fn lambda_sweep(
    model: &impl PatchModel,
    stats: &ChannelStats,
    base: &SynthConfig,
    lambdas: &[f64],
    seeds: &[u64],
    params: &EvalParams,
) -> Result<Vec<DetectionReport>> {
    if seeds.is_empty() {
        return Err(Error::arg("a sweep needs at least one seed"));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            if !(lambda > 0.0) {
                return Err(Error::arg(format!("sweep lambda {lambda} must be positive")));
            }
            let mut counts = Counts::default();
            for &seed in seeds {
                let data = synthesize(&SynthConfig {
                    lambda,
                    seed,
                    ..base.clone()
                })?;
                let out = model_output(model, &data.channels, stats, params)?;
                counts = counts.add(evaluate_output(&out, &data.tracks, params.threshold, params)?);
            }
            Ok(DetectionReport::new(lambda, counts, params.threshold, seeds.len()))
        })
        .collect()
}

/// Ranks with ties averaged.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Mean map value within `radius` voxels of any track point over mean value
/// farther than `guard` voxels from every track point. `map` is
/// `(1, 1, Lx, Ly, Lz, 1)`.
pub fn track_contrast(map: &Tensor6D, tracks: &[TrackPoint], radius: f64, guard: f64) -> Result<f64> {
    let s = map.shape();
    if s[B] != 1 || s[1] != 1 || s[T] != 1 || guard < radius {
        return Err(Error::arg(format!("contrast needs a single-frame map and guard >= radius, got {s:?}")));
    }
    let dims = [s[X], s[Y], s[Z]];
    let n = dims.iter().product::<usize>();
    // squared distance to the nearest track point, capped at guard
    let cap = guard * guard;
    let mut d2 = vec![f64::INFINITY; n];
    let g = guard.ceil() as isize;
    for tp in tracks {
        let c = tp.pos.map(|v| v.round() as isize);
        for x in (c[0] - g).max(0)..(c[0] + g + 1).min(dims[0] as isize) {
            for y in (c[1] - g).max(0)..(c[1] + g + 1).min(dims[1] as isize) {
                for z in (c[2] - g).max(0)..(c[2] + g + 1).min(dims[2] as isize) {
                    let d = (x as f64 - tp.pos[0]).powi(2) + (y as f64 - tp.pos[1]).powi(2) + (z as f64 - tp.pos[2]).powi(2);
                    let i = (x as usize * dims[1] + y as usize) * dims[2] + z as usize;
                    if d < d2[i] {
                        d2[i] = d;
                    }
                }
            }
        }
    }
    let (mut on, mut non, mut off, mut noff) = (0.0, 0usize, 0.0, 0usize);
    for (i, &v) in map.data().iter().enumerate() {
        if d2[i] <= radius * radius {
            on += v as f64;
            non += 1;
        } else if d2[i] > cap {
            off += v as f64;
            noff += 1;
        }
    }
    if non == 0 || noff == 0 {
        return Err(Error::arg("contrast needs both on-track and off-track voxels"));
    }
    let off_mean = off / noff as f64;
    if off_mean <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((on / non as f64) / off_mean)
}
