//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every call regenerates a small synthetic volume from `(lambda, seed)`, so
//! the page holds no state beyond its controls.

use clutter4d::filters::{svd_filter_blocks, temporal_accumulate_std};
use clutter4d::inference::{match_frame, truths_by_frame};
use clutter4d::report::{max_projection, Image};
use clutter4d::synth::{synthesize, BubbleParams, SynthConfig, SynthOutput};
use clutter4d::tensor::Z;
use clutter4d::tracking::{auto_candidates, detect_frame, frames_of, select_minmass_by_elbow, DetectionParams};
use clutter4d::Tensor6D;
use wasm_bindgen::prelude::*;

const SHAPE: [usize; 4] = [24, 24, 24, 32];
const BORDER: usize = 3;
const RADIUS: f64 = 2.0;

fn err(e: clutter4d::Error) -> String {
    e.to_string()
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn generate(lambda: f64, seed: u32) -> Result<SynthOutput, String> {
    synthesize(&SynthConfig {
        shape: SHAPE,
        bubbles: BubbleParams {
            count: 12,
            ..BubbleParams::default()
        },
        lambda,
        seed: seed as u64,
        ..SynthConfig::default()
    })
    .map_err(err)
}

/// Grayscale RGBA projection along z, scaled to the image range.
#[wasm_bindgen]
#[derive(Debug)]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn picture(img: &Image) -> Picture {
    let lo = img.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rgba = img
        .data
        .iter()
        .flat_map(|&v| {
            let g = ((v - lo) / span * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect();
    Picture {
        width: img.width,
        height: img.height,
        rgba,
    }
}

fn project(v: &Tensor6D) -> Result<Picture, String> {
    Ok(picture(&max_projection(v, Z).map_err(err)?))
}

/// Maximum projection of one of `composite`, `filtered` or `bubbles`.
#[wasm_bindgen]
pub fn composite_projection(view: &str, lambda: f64, seed: u32) -> Result<Picture, JsError> {
    view_projection(view, lambda, seed).map_err(js)
}

fn view_projection(view: &str, lambda: f64, seed: u32) -> Result<Picture, String> {
    let d = generate(lambda, seed)?;
    let v = match view {
        "composite" => d.composite.magnitude(),
        "filtered" => d.filtered.magnitude(),
        "bubbles" => d.mbs.magnitude(),
        other => return Err(format!("unknown view `{other}`")),
    };
    project(&v)
}

/// Projection of the per-voxel temporal standard deviation after the
/// `highpass` or `svd` baseline.
#[wasm_bindgen]
pub fn baseline_std_map(filter: &str, lambda: f64, seed: u32, cutoff: usize) -> Result<Picture, JsError> {
    std_map(filter, lambda, seed, cutoff).map_err(js)
}

fn std_map(filter: &str, lambda: f64, seed: u32, cutoff: usize) -> Result<Picture, String> {
    let d = generate(lambda, seed)?;
    let filtered = match filter {
        "highpass" => d.filtered,
        "svd" => svd_filter_blocks(&d.composite, cutoff, SHAPE[3]).map_err(err)?.volume,
        other => return Err(format!("unknown filter `{other}`")),
    };
    let std = temporal_accumulate_std(&filtered.magnitude(), SHAPE[3]).map_err(err)?;
    project(&std)
}

/// Detection on the high-passed magnitude with an elbow-selected minmass,
/// scored against the generator's tracks.
#[wasm_bindgen]
#[derive(Debug)]
pub struct DetectionScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub minmass: f64,
    positions: Vec<f64>,
}

#[wasm_bindgen]
impl DetectionScore {
    /// Flattened `(frame, x, y, z)` per detection.
    pub fn positions(&self) -> Vec<f64> {
        self.positions.clone()
    }
}

#[wasm_bindgen]
pub fn detect(lambda: f64, seed: u32) -> Result<DetectionScore, JsError> {
    detect_and_score(lambda, seed).map_err(js)
}

fn detect_and_score(lambda: f64, seed: u32) -> Result<DetectionScore, String> {
    let d = generate(lambda, seed)?;
    let frames = frames_of(&d.filtered.magnitude()).map_err(err)?;
    let base = DetectionParams::default();
    let cands = auto_candidates(&frames, &base, 16).map_err(err)?;
    let elbow = select_minmass_by_elbow(&frames, &base, &cands).map_err(err)?;
    let params = DetectionParams {
        minmass: elbow.minmass,
        ..base
    };
    let truths = truths_by_frame(&d.tracks, SHAPE, BORDER);
    let inside = |p: [f64; 3]| (0..3).all(|a| p[a] >= BORDER as f64 && p[a] <= (SHAPE[a] - 1 - BORDER) as f64);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut positions = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        let dets: Vec<[f64; 3]> = detect_frame(f, &params).into_iter().map(|d| d.pos).filter(|&p| inside(p)).collect();
        let c = match_frame(&dets, &truths[t], RADIUS);
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
        for p in dets {
            positions.extend([t as f64, p[0], p[1], p[2]]);
        }
    }
    Ok(DetectionScore {
        tp,
        fp,
        fn_,
        minmass: elbow.minmass,
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_have_the_volume_footprint() {
        let p = view_projection("filtered", 2.0, 1).unwrap();
        assert_eq!((p.width, p.height), (24, 24));
        assert_eq!(p.rgba.len(), 24 * 24 * 4);
        assert!(view_projection("sideways", 2.0, 1).unwrap_err().contains("sideways"));
    }

    #[test]
    fn std_maps_for_both_filters() {
        for f in ["highpass", "svd"] {
            let p = std_map(f, 2.0, 3, 4).unwrap();
            assert!(p.rgba.chunks(4).any(|px| px[0] == 255));
        }
    }

    #[test]
    fn strong_bubbles_are_mostly_found() {
        let s = detect_and_score(20.0, 5).unwrap();
        assert!(s.tp > 0);
        assert!(s.tp * 2 > s.fn_, "{} {} {}", s.tp, s.fp, s.fn_);
        assert_eq!(s.positions().len(), 4 * (s.tp + s.fp));
    }
}
