use serde::Serialize;

use clutter4d::io::{write_csv, KeyValues};
use clutter4d::labeling::ChannelStats;
use clutter4d::pipeline::standardized_samples;
use clutter4d::synth::sub_seed;
use clutter4d::unet::{build_unet, save_checkpoint, train, AdamConfig, TrainConfig, UNet4DConfig};

use super::label::{read_patches, STATS};
use super::{out_dir, out_key};
use crate::config::{opt, req, Key, RunConfig};
use crate::error::{CliError, Result};

pub const MODEL_DIR: &str = "model";

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    step: u64,
    train_mse: f64,
    val_mse: f64,
    lr: f32,
}

pub fn keys() -> Vec<Key> {
    vec![
        req("patches", "label output directory"),
        out_key(),
        opt("seed", "0", "initialization and shuffling seed"),
        opt("levels", "2", "pooling levels"),
        opt("base-channels", "8", "feature maps at the first level"),
        opt("epochs", "10", "training epochs; 0 saves the initial model"),
        opt("batch-size", "4", "patches per step"),
        opt("lr", "0.001", "initial learning rate"),
        opt("weight-decay", "0.0001", "L2 weight decay"),
        opt("val-fraction", "0.1", "held-out share of patches"),
        opt("patience", "5", "plateau epochs before the rate drops"),
        opt("factor", "0.5", "rate multiplier on a plateau"),
        opt("constant-epochs", "0", "epochs before the plateau rule applies"),
    ]
}

pub fn run(c: &RunConfig) -> Result<()> {
    let src = c.path("patches");
    let stats_kv = KeyValues::read(src.join(STATS))?;
    let stats = ChannelStats::from_key_values(&stats_kv)?;
    let pairs = read_patches(&src)?;
    let Some((first, _)) = pairs.first() else {
        return Err(CliError::config("the manifest lists no patches"));
    };
    let s = first.shape();
    let seed: u64 = c.get("seed")?;
    let net_cfg = UNet4DConfig {
        levels: c.get("levels")?,
        base_channels: c.get("base-channels")?,
        in_channels: s[1],
        ..UNet4DConfig::default()
    };
    net_cfg.validate()?;
    net_cfg.check_patch([s[2], s[3], s[4], s[5]])?;
    let samples = standardized_samples(pairs.iter().map(|(i, t)| (i, t)), &stats)?;
    drop(pairs);

    let tc = TrainConfig {
        adam: AdamConfig {
            lr: c.get("lr")?,
            weight_decay: c.get("weight-decay")?,
            ..AdamConfig::default()
        },
        epochs: c.get("epochs")?,
        batch_size: c.get("batch-size")?,
        seed: sub_seed(seed, 2),
        val_fraction: c.get("val-fraction")?,
        plateau_patience: c.get("patience")?,
        plateau_factor: c.get("factor")?,
        constant_epochs: c.get("constant-epochs")?,
    };
    let out = out_dir(c)?;
    let mut model = build_unet(&net_cfg, sub_seed(seed, 1))?;
    log::info!("{} samples, {} parameters", samples.len(), model.param_count());
    let report = train(&mut model, &samples, &tc, |r| {
        log::info!(
            "epoch {} step {} train {:.6} val {:.6} lr {}",
            r.epoch,
            r.step,
            r.train_mse,
            r.val_mse,
            r.lr
        )
    })?;
    let rows: Vec<LossRow> = report
        .history
        .iter()
        .map(|r| LossRow {
            epoch: r.epoch,
            step: r.step,
            train_mse: r.train_mse,
            val_mse: r.val_mse,
            lr: r.lr,
        })
        .collect();
    write_csv(out.join("loss_history.csv"), &rows)?;
    if let Some(why) = report.diverged {
        c.write(&out)?;
        return Err(CliError::numeric(format!("training diverged: {why}")));
    }
    save_checkpoint(out.join(MODEL_DIR), &model, Some(&report.state))?;
    stats_kv.write(out.join(STATS))?;
    c.write(&out)
}
