use clutter4d::inference::{calibrate_threshold, lambda_sweep, model_output, spearman, EvalParams};
use clutter4d::io::{write_csv, KeyValues};
use clutter4d::synth::synthesize;

use super::infer::{inference_keys, load_model};
use super::{detection_keys, detection_params, out_dir, out_key, synth_config, synth_keys};
use crate::config::{opt, req, Key, RunConfig};
use crate::error::{CliError, Result};

pub fn keys() -> Vec<Key> {
    let mut k = vec![
        req("model", "train output directory"),
        out_key(),
        opt("lambdas", "0.05,0.1,0.2,0.5,1,2,5", "sweep coefficients"),
        opt("seeds", "1000,1001", "test volume seeds"),
        opt("calibrate", "true", "pick the threshold on calibration volumes first"),
        opt("calibration-lambda", "", "calibration coefficient; empty for the largest sweep value"),
        opt("calibration-seeds", "999", "calibration volume seeds"),
        opt("thresholds", "0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5,0.55,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.95", "calibration candidates"),
        opt("threshold", "0.5", "detection threshold when not calibrating"),
        opt("border", "3", "excluded border, voxels"),
        opt("radius", "2", "match radius, voxels"),
    ];
    k.extend(inference_keys());
    k.extend(detection_keys());
    k.extend(synth_keys(false));
    k
}

pub fn run(c: &RunConfig) -> Result<()> {
    let (model, stats) = load_model(&c.path("model"))?;
    let lambdas: Vec<f64> = c.list("lambdas")?;
    let seeds: Vec<u64> = c.list("seeds")?;
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(CliError::config("the sweep needs lambdas and seeds"));
    }
    let mut params = EvalParams {
        extent: c.array("extent")?,
        overlap: c.get("overlap")?,
        threshold: c.get("threshold")?,
        detection: detection_params(c)?,
        border: c.get("border")?,
        radius: c.get("radius")?,
    };
    let top = lambdas.iter().copied().fold(f64::MIN, f64::max);
    let out = out_dir(c)?;
    let mut summary = KeyValues::new();
    if c.get::<bool>("calibrate")? {
        let lambda = if c.str("calibration-lambda").is_empty() { top } else { c.get("calibration-lambda")? };
        let cal_seeds: Vec<u64> = c.list("calibration-seeds")?;
        if cal_seeds.iter().any(|s| seeds.contains(s)) {
            return Err(CliError::config("calibration seeds overlap the test seeds"));
        }
        let mut outputs = Vec::new();
        for &seed in &cal_seeds {
            let data = synthesize(&synth_config(c, seed, lambda)?)?;
            outputs.push((model_output(&model, &data.channels, &stats, &params)?, data.tracks));
        }
        let (th, f1) = calibrate_threshold(&outputs, &c.list("thresholds")?, &params)?;
        log::info!("calibrated threshold {th} (f1 {f1:.4} at lambda {lambda})");
        params.threshold = th;
        summary.set("calibration.lambda", lambda);
        summary.set("calibration.f1", f1);
    }
    let base = synth_config(c, 0, 1.0)?;
    let reports = lambda_sweep(&model, &stats, &base, &lambdas, &seeds, &params)?;
    write_csv(out.join("sweep.csv"), &reports)?;
    let f1: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    summary.set("threshold", params.threshold);
    if let Some(rho) = spearman(&lambdas, &f1) {
        summary.set("spearman.f1", rho);
    }
    summary.write(out.join("summary.txt"))?;
    c.write(&out)
}
