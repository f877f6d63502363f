//! Stage glue shared by the command line and the tests: ground truth from
//! the bubble-only volume and training samples from labeled patches.

use crate::error::Result;
use crate::labeling::{augment, standardize, Augmentation, ChannelStats, LabeledPatch};
use crate::synth::sub_seed;
use crate::tensor::Tensor6D;
use crate::tracking::{
    auto_candidates, detect_frame, filter_short, frames_of, link_trajectories, select_minmass_by_elbow, DetectionParams,
    Elbow, Trajectory,
};
use crate::unet::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthParams {
    pub detection: DetectionParams,
    /// Fixed minmass; `None` picks it at the elbow of the count curve.
    pub minmass: Option<f64>,
    pub candidates: usize,
    pub max_disp: f64,
    pub min_len: usize,
}

impl Default for GroundTruthParams {
    fn default() -> Self {
        Self {
            detection: DetectionParams::default(),
            minmass: None,
            candidates: 16,
            max_disp: 4.0,
            min_len: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub minmass: f64,
    pub elbow: Option<Elbow>,
    pub trajectories: Vec<Trajectory>,
}

/// Detect, link and prune on a single-channel magnitude volume.
pub fn ground_truth(magnitude: &Tensor6D, params: &GroundTruthParams) -> Result<GroundTruth> {
    params.detection.validate()?;
    let frames = frames_of(magnitude)?;
    let (minmass, elbow) = match params.minmass {
        Some(m) => (m, None),
        None => {
            let cands = auto_candidates(&frames, &params.detection, params.candidates)?;
            let e = select_minmass_by_elbow(&frames, &params.detection, &cands)?;
            (e.minmass, Some(e))
        }
    };
    let det = DetectionParams {
        minmass,
        ..params.detection.clone()
    };
    det.validate()?;
    let per_frame: Vec<_> = frames.iter().map(|f| detect_frame(f, &det)).collect();
    let trajectories = filter_short(link_trajectories(&per_frame, params.max_disp)?, params.min_len);
    Ok(GroundTruth {
        minmass,
        elbow,
        trajectories,
    })
}

/// Replaces every patch by a random augmentation of itself, patch `i`
/// drawing from `sub_seed(seed, i)`.
pub fn augment_patches(patches: Vec<LabeledPatch>, seed: u64) -> Result<Vec<(LabeledPatch, Augmentation)>> {
    patches
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let (input, target, aug) = augment(&p.input, &p.target, sub_seed(seed, i as u64))?;
            Ok((
                LabeledPatch {
                    spec: p.spec,
                    input,
                    target,
                },
                aug,
            ))
        })
        .collect()
}

pub fn standardized_samples<'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor6D, &'a Tensor6D)>,
    stats: &ChannelStats,
) -> Result<Vec<Sample>> {
    pairs
        .into_iter()
        .map(|(input, target)| {
            Ok(Sample {
                input: standardize(input, stats)?,
                target: target.clone(),
            })
        })
        .collect()
}
