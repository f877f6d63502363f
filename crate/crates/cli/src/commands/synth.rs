use clutter4d::io::{write_complex, write_t6d};
use clutter4d::synth::{synthesize, write_tracks};

use super::{out_dir, out_key, synth_config, synth_keys};
use crate::config::{Key, RunConfig};
use crate::error::Result;

pub fn keys() -> Vec<Key> {
    let mut k = vec![out_key()];
    k.extend(synth_keys(true));
    k
}

pub fn run(c: &RunConfig) -> Result<()> {
    let cfg = synth_config(c, c.get("seed")?, c.get("lambda")?)?;
    let out = out_dir(c)?;
    let data = synthesize(&cfg)?;
    write_t6d(out.join("channels.t6d"), &data.channels)?;
    write_complex(out.join("mbs"), &data.mbs)?;
    write_complex(out.join("clutter"), &data.clutter)?;
    write_complex(out.join("composite"), &data.composite)?;
    write_tracks(out.join("tracks.csv"), &data.tracks)?;
    log::info!(
        "{} track points, filtered clutter rms {:.4}",
        data.tracks.len(),
        data.clutter_rms
    );
    c.write(&out)
}
