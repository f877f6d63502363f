use std::path::PathBuf;

use clutter4d::synth::{BubbleParams, ClutterParams, SynthConfig};
use clutter4d::tracking::DetectionParams;

use crate::config::{opt, req, Key, RunConfig};
use crate::error::{CliError, Result};

pub mod eval;
pub mod infer;
pub mod label;
pub mod report;
pub mod synth;
pub mod train;

pub struct Command {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: fn() -> Vec<Key>,
    pub run: fn(&RunConfig) -> Result<()>,
}

pub const COMMANDS: [Command; 8] = [
    Command {
        name: "synth",
        about: "Generate a composite volume, its bubble-only and clutter parts, and the true tracks",
        keys: synth::keys,
        run: synth::run,
    },
    Command {
        name: "label",
        about: "Track bubbles in synth outputs and cut labeled training patches",
        keys: label::keys,
        run: label::run,
    },
    Command {
        name: "train",
        about: "Train the U-Net on labeled patches",
        keys: train::keys,
        run: train::run,
    },
    Command {
        name: "infer",
        about: "Run a trained model over a channel volume with blended overlapping patches",
        keys: infer::infer_keys,
        run: infer::run_infer,
    },
    Command {
        name: "baseline",
        about: "Filter a composite volume with the high-pass or SVD baseline",
        keys: infer::baseline_keys,
        run: infer::run_baseline,
    },
    Command {
        name: "eval",
        about: "Calibrate the detection threshold and score a model over a lambda sweep",
        keys: eval::keys,
        run: eval::run,
    },
    Command {
        name: "accumulate",
        about: "Per-voxel temporal accumulation and standard deviation map",
        keys: infer::accumulate_keys,
        run: infer::run_accumulate,
    },
    Command {
        name: "report",
        about: "Projections, track contrast and sweep curves",
        keys: report::keys,
        run: report::run,
    },
];

pub fn out_dir(c: &RunConfig) -> Result<PathBuf> {
    let dir = c.path("out-dir");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn out_key() -> Key {
    req("out-dir", "directory for outputs and the resolved config")
}

/// Generator keys; `mix` adds `seed` and `lambda`.
pub fn synth_keys(mix: bool) -> Vec<Key> {
    let mut k = Vec::new();
    if mix {
        k.push(opt("seed", "0", "root seed"));
        k.push(opt("lambda", "1", "bubble mixing coefficient, > 0"));
    }
    k.extend([
        opt("shape", "32,32,32,64", "volume extent x,y,z,t"),
        opt("bubbles", "6", "bubbles per volume"),
        opt("speed", "1,3", "speed range, voxels/frame"),
        opt("amplitude", "0.5,1", "amplitude range"),
        opt("psf-sigma", "1.2,1.2,1.2", "point spread sigma per axis, voxels"),
        opt("max-phase-rate", "1", "largest phase rate, rad/frame"),
        opt("bubble-separation", "7", "minimum distance at birth, voxels"),
        opt("max-lifetime", "32", "longest bubble life, frames"),
        opt("clutter-modes", "6", "smooth clutter modes"),
        opt("clutter-wavelength", "12", "shortest clutter wavelength, voxels"),
        opt("clutter-period", "128", "shortest clutter period, frames"),
        opt("noise-floor", "0.1", "white clutter floor"),
        opt("window", "11", "high-pass rolling window, frames"),
        opt("kappa", "1", "coherence proxy constant"),
    ]);
    k
}

pub fn synth_config(c: &RunConfig, seed: u64, lambda: f64) -> Result<SynthConfig> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CliError::config(format!("lambda {lambda} must be positive")));
    }
    let [s0, s1] = c.array::<f64, 2>("speed")?;
    let [a0, a1] = c.array::<f64, 2>("amplitude")?;
    Ok(SynthConfig {
        shape: c.array("shape")?,
        bubbles: BubbleParams {
            count: c.get("bubbles")?,
            speed: (s0, s1),
            amplitude: (a0, a1),
            psf_sigma: c.array("psf-sigma")?,
            max_phase_rate: c.get("max-phase-rate")?,
            separation: c.get("bubble-separation")?,
            max_lifetime: c.get("max-lifetime")?,
        },
        clutter: ClutterParams {
            modes: c.get("clutter-modes")?,
            min_wavelength: c.get("clutter-wavelength")?,
            min_period: c.get("clutter-period")?,
            noise_floor: c.get("noise-floor")?,
        },
        lambda,
        seed,
        window: c.get("window")?,
        kappa: c.get("kappa")?,
    })
}

pub fn detection_keys() -> Vec<Key> {
    vec![
        opt("diameter", "5,5,5", "odd detection window per axis"),
        opt("separation", "7,7,7", "minimum distance between detections per axis"),
    ]
}

pub fn detection_params(c: &RunConfig) -> Result<DetectionParams> {
    let p = DetectionParams {
        diameter: c.array("diameter")?,
        separation: c.array("separation")?,
        ..DetectionParams::default()
    };
    p.validate()?;
    Ok(p)
}
