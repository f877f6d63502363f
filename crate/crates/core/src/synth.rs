//! Procedural composite data: moving microbubble PSFs over slowly varying
//! clutter, mixed with a coefficient `lambda`, rendered into four input
//! channels.

use std::f64::consts::PI;

use num_complex::Complex32;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{highpass_complex, DEFAULT_WINDOW};
use crate::tensor::{ComplexVolume, Tensor6D};

/// Independent seed for a named stage derived from a root seed.
pub fn sub_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BubbleParams {
    pub count: usize,
    /// Speed magnitudes are drawn uniformly from this range, voxels/frame.
    pub speed: (f64, f64),
    pub amplitude: (f64, f64),
    pub psf_sigma: [f64; 3],
    /// Phase rates are drawn uniformly from `[-max, max]`, radians/frame.
    pub max_phase_rate: f64,
    /// Minimum distance to every bubble alive at a new bubble's birth.
    pub separation: f64,
    /// Frames a bubble stays alive at most; it also dies on leaving the volume.
    pub max_lifetime: usize,
}

impl Default for BubbleParams {
    fn default() -> Self {
        Self {
            count: 6,
            speed: (1.0, 3.0),
            amplitude: (0.5, 1.0),
            psf_sigma: [1.2, 1.2, 1.2],
            max_phase_rate: 1.0,
            separation: 7.0,
            max_lifetime: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bubble {
    pub id: usize,
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub amplitude: f64,
    pub phase0: f64,
    pub phase_rate: f64,
    pub birth: usize,
    /// First frame at which the bubble is gone.
    pub death: usize,
}

impl Bubble {
    pub fn position(&self, frame: usize) -> [f64; 3] {
        let dt = frame as f64 - self.birth as f64;
        [
            self.start[0] + self.velocity[0] * dt,
            self.start[1] + self.velocity[1] * dt,
            self.start[2] + self.velocity[2] * dt,
        ]
    }

    pub fn speed(&self) -> f64 {
        self.velocity.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackPoint {
    pub bubble_id: usize,
    pub frame: usize,
    pub pos: [f64; 3],
    pub amplitude: f64,
}

/// Row of `tracks.csv` as written by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub bubble_id: usize,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub amplitude: f64,
}

pub fn write_tracks(path: impl AsRef<std::path::Path>, tracks: &[TrackPoint]) -> Result<()> {
    let rows: Vec<TrackRow> = tracks
        .iter()
        .map(|t| TrackRow {
            bubble_id: t.bubble_id,
            frame: t.frame,
            x: t.pos[0],
            y: t.pos[1],
            z: t.pos[2],
            amplitude: t.amplitude,
        })
        .collect();
    crate::io::write_csv(path, &rows)
}

pub fn read_tracks(path: impl AsRef<std::path::Path>) -> Result<Vec<TrackPoint>> {
    Ok(crate::io::read_csv::<TrackRow>(path)?
        .into_iter()
        .map(|r| TrackPoint {
            bubble_id: r.bubble_id,
            frame: r.frame,
            pos: [r.x, r.y, r.z],
            amplitude: r.amplitude,
        })
        .collect())
}

fn inside(p: [f64; 3], shape: [usize; 4]) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= (shape[a] - 1) as f64)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Draws bubbles by rejection sampling on the birth separation rule.
pub fn sample_bubbles(params: &BubbleParams, shape: [usize; 4], seed: u64) -> Result<Vec<Bubble>> {
    let [lx, ly, lz, lt] = shape;
    if lt < 2 {
        return Err(Error::arg(format!("bubble simulation needs at least 2 frames, got {lt}")));
    }
    if params.count == 0 {
        return Ok(Vec::new());
    }
    if lx == 0 || ly == 0 || lz == 0 {
        return Err(Error::arg("bubble simulation needs a non-empty volume"));
    }
    let (s0, s1) = params.speed;
    if !(s0 >= 0.0 && s1 >= s0) {
        return Err(Error::arg(format!("speed range {:?} is invalid", params.speed)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bubbles: Vec<Bubble> = Vec::with_capacity(params.count);
    let max_attempts = 1000 * params.count;
    let mut attempts = 0;
    while bubbles.len() < params.count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::arg(format!(
                "cannot place {} bubbles {} voxels apart in {:?}",
                params.count, params.separation, shape
            )));
        }
        let birth = rng.random_range(0..lt - 1);
        let start = [
            rng.random_range(0.0..(lx - 1) as f64 + f64::EPSILON),
            rng.random_range(0.0..(ly - 1) as f64 + f64::EPSILON),
            rng.random_range(0.0..(lz - 1) as f64 + f64::EPSILON),
        ];
        let crowded = bubbles
            .iter()
            .filter(|b| b.birth <= birth && birth < b.death)
            .any(|b| dist(b.position(birth), start) < params.separation);
        if crowded {
            continue;
        }
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let speed = if s1 > s0 { rng.random_range(s0..s1) } else { s0 };
        let velocity = [dir[0] * speed, dir[1] * speed, dir[2] * speed];
        let amplitude = rng.random_range(params.amplitude.0..=params.amplitude.1);
        let phase0 = rng.random_range(-PI..PI);
        let phase_rate = if params.max_phase_rate > 0.0 {
            rng.random_range(-params.max_phase_rate..params.max_phase_rate)
        } else {
            0.0
        };
        let mut b = Bubble {
            id: bubbles.len(),
            start,
            velocity,
            amplitude,
            phase0,
            phase_rate,
            birth,
            death: birth + 1,
        };
        let end = (birth + params.max_lifetime.max(1)).min(lt);
        while b.death < end && inside(b.position(b.death), shape) {
            b.death += 1;
        }
        bubbles.push(b);
    }
    Ok(bubbles)
}

/// Sums Gaussian PSFs at continuous bubble centres with a coherent phase
/// `phase0 + phase_rate * (t - birth)`. Track points are the centres of
/// every live frame.
pub fn render_bubbles(bubbles: &[Bubble], shape: [usize; 4], sigma: [f64; 3]) -> (ComplexVolume, Vec<TrackPoint>) {
    let mut vol = ComplexVolume::zeros(shape);
    let mut tracks = Vec::new();
    let reach = [4.0 * sigma[0], 4.0 * sigma[1], 4.0 * sigma[2]];
    for b in bubbles {
        for t in b.birth..b.death {
            let p = b.position(t);
            tracks.push(TrackPoint {
                bubble_id: b.id,
                frame: t,
                pos: p,
                amplitude: b.amplitude,
            });
            let phase = b.phase0 + b.phase_rate * (t - b.birth) as f64;
            let range = |a: usize| {
                let lo = (p[a] - reach[a]).ceil().max(0.0) as usize;
                let hi = ((p[a] + reach[a]).floor() as isize).min(shape[a] as isize - 1);
                lo..(hi + 1).max(0) as usize
            };
            let (rx, ry, rz) = (range(0), range(1), range(2));
            let (s, c) = phase.sin_cos();
            for x in rx {
                let gx = (x as f64 - p[0]).powi(2) / (2.0 * sigma[0] * sigma[0]);
                for y in ry.clone() {
                    let gy = (y as f64 - p[1]).powi(2) / (2.0 * sigma[1] * sigma[1]);
                    for z in rz.clone() {
                        let gz = (z as f64 - p[2]).powi(2) / (2.0 * sigma[2] * sigma[2]);
                        let a = b.amplitude * (-(gx + gy + gz)).exp();
                        vol.add_at(vol.index(x, y, z, t), Complex32::new((a * c) as f32, (a * s) as f32));
                    }
                }
            }
        }
    }
    (vol, tracks)
}

pub fn simulate_bubbles(params: &BubbleParams, shape: [usize; 4], seed: u64) -> Result<(ComplexVolume, Vec<TrackPoint>)> {
    let bubbles = sample_bubbles(params, shape, seed)?;
    Ok(render_bubbles(&bubbles, shape, params.psf_sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClutterParams {
    pub modes: usize,
    /// Shortest spatial wavelength of a mode, voxels.
    pub min_wavelength: f64,
    /// Shortest temporal period of a mode, frames.
    pub min_period: f64,
    /// RMS of the white floor relative to the mode field before normalization.
    pub noise_floor: f64,
}

impl Default for ClutterParams {
    fn default() -> Self {
        Self {
            modes: 6,
            min_wavelength: 12.0,
            min_period: 128.0,
            noise_floor: 0.1,
        }
    }
}

/// Smooth low-frequency complex modes with slow drift plus a white complex
/// floor, scaled to unit RMS.
pub fn simulate_clutter(params: &ClutterParams, shape: [usize; 4], seed: u64) -> Result<ComplexVolume> {
    let [lx, ly, lz, lt] = shape;
    if params.min_wavelength <= 0.0 || params.min_period <= 0.0 || params.noise_floor < 0.0 {
        return Err(Error::arg("clutter wavelength and period must be positive, noise floor non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vox = lx * ly * lz;
    let mut vol = ComplexVolume::zeros(shape);
    let kmax = 2.0 * PI / params.min_wavelength;
    let wmax = 2.0 * PI / params.min_period;
    for _ in 0..params.modes {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let k = rng.random_range(0.0..kmax);
        let phase = rng.random_range(-PI..PI);
        let amp = rng.random_range(0.5..1.5);
        let omega = rng.random_range(-wmax..wmax);
        let drift = rng.random_range(0.0..0.3);
        let drift_w = rng.random_range(0.0..wmax);
        let temporal: Vec<num_complex::Complex64> = (0..lt)
            .map(|t| {
                let a = 1.0 + drift * (drift_w * t as f64).sin();
                num_complex::Complex64::from_polar(a, omega * t as f64)
            })
            .collect();
        let (re, im) = vol.parts_mut();
        for x in 0..lx {
            for y in 0..ly {
                for z in 0..lz {
                    let arg = k * (dir[0] * x as f64 + dir[1] * y as f64 + dir[2] * z as f64) + phase;
                    let s = num_complex::Complex64::from_polar(amp, arg);
                    let base = ((x * ly + y) * lz + z) * lt;
                    for (t, w) in temporal.iter().enumerate() {
                        let c = s * w;
                        re[base + t] += c.re as f32;
                        im[base + t] += c.im as f32;
                    }
                }
            }
        }
    }
    let field_rms = vol.rms().max(if params.modes == 0 { 1.0 } else { 0.0 });
    if params.noise_floor > 0.0 {
        let noise = Normal::new(0.0, params.noise_floor * field_rms / 2f64.sqrt()).map_err(|e| Error::arg(e.to_string()))?;
        let (re, im) = vol.parts_mut();
        for i in 0..vox * lt {
            re[i] += noise.sample(&mut rng) as f32;
            im[i] += noise.sample(&mut rng) as f32;
        }
    }
    let rms = vol.rms();
    if rms > 0.0 {
        vol = vol.scale((1.0 / rms) as f32);
    }
    Ok(vol)
}

/// `lambda * mbs + clutter`
pub fn mix_composite(mbs: &ComplexVolume, clutter: &ComplexVolume, lambda: f64) -> Result<ComplexVolume> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("mixing coefficient {lambda} must be finite and non-negative")));
    }
    mbs.scale(lambda as f32).add(clutter)
}

/// Input channels of the network, `(1, 4, Lx, Ly, Lz, T)`:
/// coherence proxy `|v|^2 / (|v|^2 + kappa * rms^2)`, `|v|`, `cos dphi`,
/// `sin dphi` with `dphi_t = arg(v_t conj(v_{t-1}))` and `dphi_0 = 0`.
pub fn make_channels(v: &ComplexVolume, clutter_rms: f64, kappa: f64) -> Result<Tensor6D> {
    if !(clutter_rms > 0.0 && kappa > 0.0) {
        return Err(Error::arg(format!(
            "coherence proxy needs positive clutter rms and kappa, got {clutter_rms} and {kappa}"
        )));
    }
    let [lx, ly, lz, lt] = v.shape();
    let n = v.len();
    let floor = kappa * clutter_rms * clutter_rms;
    let mut out = Tensor6D::zeros([1, 4, lx, ly, lz, lt]);
    let d = out.data_mut();
    for i in 0..n {
        let c = v.get(i);
        let p = (c.re as f64).powi(2) + (c.im as f64).powi(2);
        d[i] = (p / (p + floor)) as f32;
        d[n + i] = p.sqrt() as f32;
        let t = i % lt;
        let (cos, sin) = if t == 0 {
            (1.0, 0.0)
        } else {
            let prev = v.get(i - 1);
            let prod = num_complex::Complex64::new(c.re as f64, c.im as f64)
                * num_complex::Complex64::new(prev.re as f64, -prev.im as f64);
            let m = prod.norm();
            if m > 0.0 && m.is_finite() {
                (prod.re / m, prod.im / m)
            } else {
                (1.0, 0.0)
            }
        };
        d[2 * n + i] = cos as f32;
        d[3 * n + i] = sin as f32;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub shape: [usize; 4],
    pub bubbles: BubbleParams,
    pub clutter: ClutterParams,
    pub lambda: f64,
    pub seed: u64,
    pub window: usize,
    pub kappa: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32, 64],
            bubbles: BubbleParams::default(),
            clutter: ClutterParams::default(),
            lambda: 1.0,
            seed: 0,
            window: DEFAULT_WINDOW,
            kappa: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub mbs: ComplexVolume,
    pub clutter: ComplexVolume,
    pub composite: ComplexVolume,
    /// High-pass filtered composite.
    pub filtered: ComplexVolume,
    pub channels: Tensor6D,
    pub tracks: Vec<TrackPoint>,
    /// RMS of the high-pass filtered clutter alone.
    pub clutter_rms: f64,
}

pub const STREAM_BUBBLES: u64 = 1;
pub const STREAM_CLUTTER: u64 = 2;

/// Full generation: bubbles, clutter, mixture, high-pass, channels.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthOutput> {
    let (mbs, tracks) = simulate_bubbles(&cfg.bubbles, cfg.shape, sub_seed(cfg.seed, STREAM_BUBBLES))?;
    let clutter = simulate_clutter(&cfg.clutter, cfg.shape, sub_seed(cfg.seed, STREAM_CLUTTER))?;
    let composite = mix_composite(&mbs, &clutter, cfg.lambda)?;
    let filtered = highpass_complex(&composite, cfg.window)?;
    let clutter_rms = highpass_complex(&clutter, cfg.window)?.rms();
    let channels = make_channels(&filtered, clutter_rms.max(f64::MIN_POSITIVE), cfg.kappa)?;
    Ok(SynthOutput {
        mbs,
        clutter,
        composite,
        filtered,
        channels,
        tracks,
        clutter_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bubbles() {
        let p = BubbleParams {
            count: 0,
            ..BubbleParams::default()
        };
        let (v, tr) = simulate_bubbles(&p, [8, 8, 8, 4], 1).unwrap();
        assert!(tr.is_empty());
        assert!(v.re().iter().chain(v.im()).all(|&x| x == 0.0));
    }

    #[test]
    fn infeasible_separation() {
        let p = BubbleParams {
            count: 50,
            separation: 20.0,
            max_lifetime: 100,
            ..BubbleParams::default()
        };
        assert!(sample_bubbles(&p, [8, 8, 8, 2], 1).is_err());
    }

    #[test]
    fn speeds_within_range() {
        let p = BubbleParams {
            count: 40,
            separation: 0.0,
            ..BubbleParams::default()
        };
        for b in sample_bubbles(&p, [32, 32, 32, 16], 3).unwrap() {
            assert!((1.0..=3.0).contains(&b.speed()), "{}", b.speed());
        }
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, STREAM_BUBBLES), sub_seed(1, STREAM_CLUTTER));
        assert_eq!(sub_seed(1, 7), sub_seed(1, 7));
    }

    #[test]
    fn tracks_round_trip() {
        let (_, tracks) = simulate_bubbles(&BubbleParams::default(), [16, 16, 16, 8], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tracks.csv");
        write_tracks(&p, &tracks).unwrap();
        assert_eq!(read_tracks(&p).unwrap(), tracks);
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("bubble_id,frame,x,y,z,amplitude\n"));
    }

    #[test]
    fn clutter_is_unit_rms() {
        let v = simulate_clutter(&ClutterParams::default(), [8, 8, 8, 16], 2).unwrap();
        assert!((v.rms() - 1.0).abs() < 1e-5);
    }
}
