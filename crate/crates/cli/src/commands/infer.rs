use std::path::Path;

use clutter4d::filters::{highpass_complex, svd_filter_blocks, temporal_accumulate, temporal_accumulate_std};
use clutter4d::inference::{model_output, EvalParams};
use clutter4d::io::{read_complex, read_t6d, write_t6d, KeyValues};
use clutter4d::labeling::ChannelStats;
use clutter4d::unet::{load_checkpoint, UNet4D};

use super::label::STATS;
use super::train::MODEL_DIR;
use super::{out_dir, out_key};
use crate::config::{opt, req, Key, RunConfig};
use crate::error::{CliError, Result};

pub const OUTPUT: &str = "output.t6d";

pub fn load_model(dir: &Path) -> Result<(UNet4D, ChannelStats)> {
    let (model, _) = load_checkpoint(dir.join(MODEL_DIR))?;
    let stats = ChannelStats::from_key_values(&KeyValues::read(dir.join(STATS))?)?;
    Ok((model, stats))
}

pub fn inference_keys() -> Vec<Key> {
    vec![
        opt("extent", "16,16,16,8", "patch extent x,y,z,t"),
        opt("overlap", "6", "spatial patch overlap, voxels"),
    ]
}

pub fn infer_keys() -> Vec<Key> {
    let mut k = vec![
        req("model", "train output directory"),
        req("input", "channel volume (T6D)"),
        out_key(),
    ];
    k.extend(inference_keys());
    k
}

pub fn run_infer(c: &RunConfig) -> Result<()> {
    let (model, stats) = load_model(&c.path("model"))?;
    let channels = read_t6d(c.path("input"))?;
    let params = EvalParams {
        extent: c.array("extent")?,
        overlap: c.get("overlap")?,
        ..EvalParams::default()
    };
    let out = out_dir(c)?;
    let y = model_output(&model, &channels, &stats, &params)?;
    write_t6d(out.join(OUTPUT), &y)?;
    c.write(&out)
}

pub fn baseline_keys() -> Vec<Key> {
    vec![
        req("input", "synth output directory"),
        out_key(),
        opt("filter", "highpass", "highpass or svd"),
        opt("window", "11", "high-pass rolling window, frames"),
        opt("cutoff", "20", "singular values removed per block"),
        opt("block", "256", "SVD block length, frames"),
    ]
}

pub fn run_baseline(c: &RunConfig) -> Result<()> {
    let composite = read_complex(c.path("input").join("composite"))?;
    let filtered = match c.str("filter") {
        "highpass" => highpass_complex(&composite, c.get("window")?)?,
        "svd" => {
            let r = svd_filter_blocks(&composite, c.get("cutoff")?, c.get("block")?)?;
            for span in &r.passed_through {
                log::warn!("frames {span:?} too short to filter, passed through");
            }
            r.volume
        }
        other => return Err(CliError::config(format!("unknown filter `{other}` (highpass|svd)"))),
    };
    let out = out_dir(c)?;
    write_t6d(out.join(OUTPUT), &filtered.magnitude())?;
    c.write(&out)
}

pub fn accumulate_keys() -> Vec<Key> {
    vec![
        req("input", "single-channel volume (T6D)"),
        out_key(),
        opt("block", "0", "accumulation period, frames; 0 for the whole series"),
    ]
}

pub fn run_accumulate(c: &RunConfig) -> Result<()> {
    let v = read_t6d(c.path("input"))?;
    let s = v.shape();
    if s[0] != 1 || s[1] != 1 {
        return Err(CliError::config(format!("accumulation needs a single-channel volume, got {s:?}")));
    }
    let block = match c.get::<usize>("block")? {
        0 => s[5],
        b => b,
    };
    let out = out_dir(c)?;
    write_t6d(out.join("accumulated.t6d"), &temporal_accumulate(&v, block)?)?;
    write_t6d(out.join("std.t6d"), &temporal_accumulate_std(&v, block)?)?;
    c.write(&out)
}
