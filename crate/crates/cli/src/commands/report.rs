use serde::Serialize;

use clutter4d::inference::{spearman, track_contrast, DetectionReport};
use clutter4d::io::{read_csv, read_t6d, write_csv, KeyValues};
use clutter4d::report::{max_projection, write_pgm16};
use clutter4d::synth::read_tracks;
use clutter4d::tensor::{X, Y, Z};

use super::{out_dir, out_key};
use crate::config::{opt, Key, RunConfig};
use crate::error::{CliError, Result};

#[derive(Serialize)]
struct ContrastRow {
    name: String,
    contrast: f64,
}

#[derive(Serialize)]
struct CurveRow {
    lambda: f64,
    precision: f64,
    recall: f64,
    f1: f64,
}

pub fn keys() -> Vec<Key> {
    vec![
        out_key(),
        opt("maps", "", "comma-separated single-channel volumes (T6D)"),
        opt("names", "", "labels for the maps; empty for map0, map1, ..."),
        opt("tracks", "", "tracks.csv for the contrast table; empty to skip"),
        opt("radius", "1.5", "on-track radius, voxels"),
        opt("guard", "4", "off-track guard distance, voxels"),
        opt("sweep", "", "sweep.csv to turn into curves; empty to skip"),
    ]
}

pub fn run(c: &RunConfig) -> Result<()> {
    let maps: Vec<String> = c.list("maps")?;
    let mut names: Vec<String> = c.list("names")?;
    if names.is_empty() {
        names = (0..maps.len()).map(|i| format!("map{i}")).collect();
    }
    if names.len() != maps.len() {
        return Err(CliError::config(format!("{} names for {} maps", names.len(), maps.len())));
    }
    let tracks = c.optional_path("tracks").map(read_tracks).transpose()?;
    let (radius, guard): (f64, f64) = (c.get("radius")?, c.get("guard")?);
    let out = out_dir(c)?;

    let mut contrast = Vec::new();
    for (path, name) in maps.iter().zip(&names) {
        let v = read_t6d(path)?;
        for (axis, tag) in [(X, "x"), (Y, "y"), (Z, "z")] {
            write_pgm16(out.join(format!("{name}_mip_{tag}.pgm")), &max_projection(&v, axis)?)?;
        }
        if let Some(tr) = &tracks {
            contrast.push(ContrastRow {
                name: name.clone(),
                contrast: track_contrast(&v, tr, radius, guard)?,
            });
        }
    }
    if tracks.is_some() {
        write_csv(out.join("contrast.csv"), &contrast)?;
    }

    if let Some(sweep) = c.optional_path("sweep") {
        let rows: Vec<DetectionReport> = read_csv(sweep)?;
        let curve: Vec<CurveRow> = rows
            .iter()
            .map(|r| CurveRow {
                lambda: r.lambda,
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
            })
            .collect();
        write_csv(out.join("curves.csv"), &curve)?;
        let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
        let mut trend = KeyValues::new();
        for (key, vals) in [
            ("spearman.precision", rows.iter().map(|r| r.precision).collect::<Vec<_>>()),
            ("spearman.recall", rows.iter().map(|r| r.recall).collect()),
            ("spearman.f1", rows.iter().map(|r| r.f1).collect()),
        ] {
            trend.set(key, spearman(&lambdas, &vals).map_or("undefined".to_string(), |r| r.to_string()));
        }
        trend.write(out.join("trend.txt"))?;
    }
    c.write(&out)
}
