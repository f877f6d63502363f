//! Checkpoint directory: `manifest.txt` plus one T6D file per tensor.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::model::{build_unet, UNet4D, UNet4DConfig};
use crate::error::{Error, Result};
use crate::io::{read_t6d, write_t6d, KeyValues};
use crate::tensor::Tensor6D;

pub const MANIFEST: &str = "manifest.txt";

fn join4(v: [usize; 4]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse4(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("manifest", format!("bad list {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::format("manifest", format!("expected 4 values, got {s:?}")))
}

fn manifest(model: &UNet4D) -> KeyValues {
    let c = &model.config;
    let mut kv = KeyValues::new();
    kv.set("format", "clutter4d-unet 1");
    kv.set("levels", c.levels);
    kv.set("base_channels", c.base_channels);
    kv.set("in_channels", c.in_channels);
    kv.set("out_channels", c.out_channels);
    kv.set("kernel", join4(c.kernel));
    kv.set("pool", join4(c.pool));
    kv.set("slope", c.slope);
    let bn = model.batch_norms();
    kv.set("bn.eps", bn[0].eps);
    kv.set("bn.momentum", bn[0].momentum);

    let mut layer = 0;
    let mut push = |kv: &mut KeyValues, desc: String| {
        kv.set(&format!("layer.{layer:03}"), desc);
        layer += 1;
    };
    let block = |kv: &mut KeyValues, push: &mut dyn FnMut(&mut KeyValues, String), name: String, ci: usize, co: usize| {
        push(kv, format!("conv4d {name} in={ci} out={co} kernel={}", join4(c.kernel)));
        push(kv, format!("batchnorm4d {name} channels={co}"));
        push(kv, format!("leaky_relu {name} slope={}", c.slope));
    };
    let mut ci = c.in_channels;
    for level in 0..c.levels {
        let co = c.level_channels(level);
        block(&mut kv, &mut push, format!("encoder{level}.0"), ci, co);
        block(&mut kv, &mut push, format!("encoder{level}.1"), co, co);
        push(&mut kv, format!("maxpool4d encoder{level} window={}", join4(c.pool)));
        ci = co;
    }
    let cb = c.level_channels(c.levels);
    block(&mut kv, &mut push, "bottleneck.0".into(), ci, cb);
    block(&mut kv, &mut push, "bottleneck.1".into(), cb, cb);
    for level in (0..c.levels).rev() {
        let co = c.level_channels(level);
        push(&mut kv, format!("upsample4d decoder{level} factors={}", join4(c.pool)));
        push(&mut kv, format!("concat decoder{level} skip=encoder{level}"));
        block(&mut kv, &mut push, format!("decoder{level}.0"), c.level_channels(level + 1) + co, co);
        block(&mut kv, &mut push, format!("decoder{level}.1"), co, co);
    }
    push(&mut kv, format!("conv4d head in={} out={} kernel=1,1,1,1", c.base_channels, c.out_channels));
    push(&mut kv, "sigmoid head".into());
    kv
}

fn stats_tensor(v: &[f32]) -> Tensor6D {
    Tensor6D::from_vec([v.len(), 1, 1, 1, 1, 1], v.to_vec()).expect("length matches shape")
}

/// Writes the model, and the optimizer state when given, into `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &UNet4D, state: Option<&AdamState>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut kv = manifest(model);
    for (name, p) in model.param_names().iter().zip(model.params()) {
        write_t6d(dir.join("params").join(format!("{name}.t6d")), p)?;
    }
    for (name, bn) in model.block_names().iter().zip(model.batch_norms()) {
        write_t6d(dir.join("params").join(format!("{name}.bn.running_mean.t6d")), &stats_tensor(&bn.running_mean))?;
        write_t6d(dir.join("params").join(format!("{name}.bn.running_var.t6d")), &stats_tensor(&bn.running_var))?;
    }
    if let Some(state) = state {
        fs::create_dir_all(dir.join("optimizer"))?;
        kv.set("optimizer", "adam");
        kv.set("optimizer.step", state.step);
        for (i, name) in model.param_names().iter().enumerate() {
            write_t6d(dir.join("optimizer").join(format!("{name}.m.t6d")), &state.m[i])?;
            write_t6d(dir.join("optimizer").join(format!("{name}.v.t6d")), &state.v[i])?;
        }
    }
    kv.write(dir.join(MANIFEST))
}

fn read_expect(path: &Path, shape: [usize; 6]) -> Result<Tensor6D> {
    let t = read_t6d(path)?;
    if t.shape() != shape {
        return Err(Error::format(
            "checkpoint",
            format!("{} has shape {:?}, expected {:?}", path.display(), t.shape(), shape),
        ));
    }
    Ok(t)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(UNet4D, Option<AdamState>)> {
    let dir = dir.as_ref();
    let kv = KeyValues::read(dir.join(MANIFEST))?;
    if kv.get("format") != Some("clutter4d-unet 1") {
        return Err(Error::format("checkpoint", "missing or unknown format line"));
    }
    let config = UNet4DConfig {
        levels: kv.parse_value("levels")?,
        base_channels: kv.parse_value("base_channels")?,
        in_channels: kv.parse_value("in_channels")?,
        out_channels: kv.parse_value("out_channels")?,
        kernel: parse4(kv.require("kernel")?)?,
        pool: parse4(kv.require("pool")?)?,
        slope: kv.parse_value("slope")?,
    };
    let mut model = build_unet(&config, 0)?;
    let eps: f32 = kv.parse_value("bn.eps")?;
    let momentum: f32 = kv.parse_value("bn.momentum")?;
    let names = model.param_names();
    for (name, p) in names.iter().zip(model.params_mut()) {
        *p = read_expect(&dir.join("params").join(format!("{name}.t6d")), p.shape())?;
    }
    let blocks = model.block_names();
    for (name, bn) in blocks.iter().zip(model.batch_norms_mut()) {
        let shape = [bn.channels(), 1, 1, 1, 1, 1];
        bn.running_mean = read_expect(&dir.join("params").join(format!("{name}.bn.running_mean.t6d")), shape)?.into_vec();
        bn.running_var = read_expect(&dir.join("params").join(format!("{name}.bn.running_var.t6d")), shape)?.into_vec();
        bn.eps = eps;
        bn.momentum = momentum;
    }
    let state = match kv.get("optimizer") {
        Some("adam") => {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (name, p) in names.iter().zip(model.params()) {
                m.push(read_expect(&dir.join("optimizer").join(format!("{name}.m.t6d")), p.shape())?);
                v.push(read_expect(&dir.join("optimizer").join(format!("{name}.v.t6d")), p.shape())?);
            }
            Some(AdamState {
                step: kv.parse_value("optimizer.step")?,
                m,
                v,
            })
        }
        Some(other) => return Err(Error::format("checkpoint", format!("unknown optimizer {other:?}"))),
        None => None,
    };
    Ok((model, state))
}
