use std::path::Path;

use serde::{Deserialize, Serialize};

use clutter4d::io::{read_complex, read_csv, read_t6d, write_csv, write_t6d};
use clutter4d::labeling::{label_volume, ChannelStats, EdgeRule, LabelParams, LabeledPatch};
use clutter4d::pipeline::{augment_patches, ground_truth, GroundTruthParams};
use clutter4d::synth::sub_seed;
use clutter4d::tracking::write_trajectories;
use clutter4d::Tensor6D;

use super::{detection_keys, detection_params, out_dir, out_key};
use crate::config::{opt, req, Key, RunConfig};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const STATS: &str = "stats.txt";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub input: String,
    pub target: String,
    pub volume: usize,
    pub x0: usize,
    pub y0: usize,
    pub z0: usize,
    pub t0: usize,
    pub perm: String,
    pub flip_x: bool,
    pub flip_y: bool,
}

#[derive(Serialize)]
struct GroundTruthRow {
    volume: usize,
    source: String,
    minmass: f64,
    trajectories: usize,
    points: usize,
    elbow_found: bool,
}

pub fn keys() -> Vec<Key> {
    let mut k = vec![
        req("inputs", "comma-separated synth output directories"),
        out_key(),
        opt("seed", "0", "augmentation seed"),
        opt("augment", "true", "replace each patch by a random axis swap and flip"),
        opt("minmass", "auto", "detection minmass, or auto for the elbow rule"),
        opt("candidates", "16", "minmass candidates for the elbow rule"),
        opt("max-disp", "4", "largest frame-to-frame displacement when linking, voxels"),
        opt("min-len", "2", "shortest kept trajectory, frames"),
        opt("extent", "16,16,16,8", "patch extent x,y,z,t"),
        opt("stride", "", "tiling stride x,y,z,t; empty for the extent"),
        opt("margin", "2", "edge margin, voxels"),
        opt("dilation-radius", "2", "dilation half width, voxels"),
        opt("edge-rule", "patch", "patch: drop edge bubbles from all frames; frame: only where at the edge"),
    ];
    k.extend(detection_keys());
    k
}

fn gt_params(c: &RunConfig) -> Result<GroundTruthParams> {
    let minmass = match c.str("minmass") {
        "auto" => None,
        _ => Some(c.get::<f64>("minmass")?),
    };
    Ok(GroundTruthParams {
        detection: detection_params(c)?,
        minmass,
        candidates: c.get("candidates")?,
        max_disp: c.get("max-disp")?,
        min_len: c.get("min-len")?,
    })
}

fn label_params(c: &RunConfig) -> Result<LabelParams> {
    let extent: [usize; 4] = c.array("extent")?;
    let stride = if c.str("stride").is_empty() { extent } else { c.array("stride")? };
    Ok(LabelParams {
        extent,
        stride,
        diameter: c.array("diameter")?,
        margin: c.get("margin")?,
        dilation_radius: c.get("dilation-radius")?,
        edge_rule: c.get::<EdgeRule>("edge-rule")?,
    })
}

pub fn run(c: &RunConfig) -> Result<()> {
    let inputs: Vec<String> = c.list("inputs")?;
    if inputs.is_empty() {
        return Err(CliError::config("`inputs` lists no directories"));
    }
    let gtp = gt_params(c)?;
    let lp = label_params(c)?;
    let augment: bool = c.get("augment")?;
    let seed: u64 = c.get("seed")?;
    let out = out_dir(c)?;
    std::fs::create_dir_all(out.join("patches"))?;
    std::fs::create_dir_all(out.join("trajectories"))?;

    let mut volumes: Vec<Vec<LabeledPatch>> = Vec::new();
    let mut gt_rows = Vec::new();
    for (v, dir) in inputs.iter().enumerate() {
        let dir = Path::new(dir);
        let channels = read_t6d(dir.join("channels.t6d"))?;
        let magnitude = read_complex(dir.join("mbs"))?.magnitude();
        let gt = ground_truth(&magnitude, &gtp)?;
        write_trajectories(out.join("trajectories").join(format!("v{v:03}.csv")), &gt.trajectories)?;
        gt_rows.push(GroundTruthRow {
            volume: v,
            source: dir.display().to_string(),
            minmass: gt.minmass,
            trajectories: gt.trajectories.len(),
            points: gt.trajectories.iter().map(|t| t.len()).sum(),
            elbow_found: gt.elbow.as_ref().is_none_or(|e| !e.degenerate),
        });
        volumes.push(label_volume(&channels, &magnitude, &gt.trajectories, &lp)?);
    }
    let stats = ChannelStats::compute(volumes.iter().flatten().map(|p| &p.input))?;
    stats.to_key_values().write(out.join(STATS))?;

    let mut rows = Vec::new();
    for (v, patches) in volumes.into_iter().enumerate() {
        let tagged: Vec<(LabeledPatch, Option<[usize; 3]>, bool, bool)> = if augment {
            augment_patches(patches, sub_seed(seed, v as u64))?
                .into_iter()
                .map(|(p, a)| (p, Some(a.perm), a.flip_x, a.flip_y))
                .collect()
        } else {
            patches.into_iter().map(|p| (p, None, false, false)).collect()
        };
        for (i, (p, perm, fx, fy)) in tagged.into_iter().enumerate() {
            let input = format!("patches/v{v:03}_p{i:04}.input.t6d");
            let target = format!("patches/v{v:03}_p{i:04}.target.t6d");
            write_t6d(out.join(&input), &p.input)?;
            write_t6d(out.join(&target), &p.target)?;
            let perm = perm.unwrap_or([0, 1, 2]);
            rows.push(ManifestRow {
                input,
                target,
                volume: v,
                x0: p.spec.origin[0],
                y0: p.spec.origin[1],
                z0: p.spec.origin[2],
                t0: p.spec.origin[3],
                perm: format!("{}{}{}", perm[0], perm[1], perm[2]),
                flip_x: fx,
                flip_y: fy,
            });
        }
    }
    let labeled = rows.len();
    write_csv(out.join(MANIFEST), &rows)?;
    write_csv(out.join("ground_truth.csv"), &gt_rows)?;
    log::info!("{labeled} patches from {} volumes", inputs.len());
    c.write(&out)
}

/// Patch pairs listed in a label directory's manifest.
pub fn read_patches(dir: &Path) -> Result<Vec<(Tensor6D, Tensor6D)>> {
    let rows: Vec<ManifestRow> = read_csv(dir.join(MANIFEST))?;
    rows.iter()
        .map(|r| Ok((read_t6d(dir.join(&r.input))?, read_t6d(dir.join(&r.target))?)))
        .collect()
}
