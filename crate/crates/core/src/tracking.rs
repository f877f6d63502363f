//! Particle detection on magnitude frames, minmass selection by elbow, and
//! frame-to-frame trajectory linking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor6D, B, C, T};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionParams {
    /// Odd window extents per spatial axis.
    pub diameter: [usize; 3],
    pub separation: [f64; 3],
    pub minmass: f64,
    /// Minimum peak value; 0 disables the check.
    pub threshold: f32,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            diameter: [5, 5, 5],
            separation: [7.0, 7.0, 7.0],
            minmass: f64::MIN_POSITIVE,
            threshold: 0.0,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.diameter[a] % 2 == 0 {
                return Err(Error::arg(format!("diameter {:?} must be odd on every axis", self.diameter)));
            }
            if self.separation[a] < self.diameter[a] as f64 {
                return Err(Error::arg(format!(
                    "separation {:?} must be at least the diameter {:?}",
                    self.separation, self.diameter
                )));
            }
        }
        if !(self.minmass > 0.0) {
            return Err(Error::arg(format!("minmass {} must be positive", self.minmass)));
        }
        Ok(())
    }

    fn radius(&self) -> [usize; 3] {
        [self.diameter[0] / 2, self.diameter[1] / 2, self.diameter[2] / 2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub pos: [f64; 3],
    pub mass: f64,
    pub peak: f32,
}

/// Spatial frame view: `data[(x * ly + y) * lz + z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("frame of {} values does not fit {:?}", data.len(), dims)));
        }
        Ok(Self { dims, data })
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    fn window(&self, centre: [usize; 3], r: [usize; 3]) -> [std::ops::Range<usize>; 3] {
        std::array::from_fn(|a| centre[a].saturating_sub(r[a])..(centre[a] + r[a] + 1).min(self.dims[a]))
    }
}

/// Splits a `(1, 1, Lx, Ly, Lz, T)` tensor into spatial frames.
pub fn frames_of(v: &Tensor6D) -> Result<Vec<Frame>> {
    let s = v.shape();
    if s[B] != 1 || s[C] != 1 {
        return Err(Error::shape(format!("expected a single-channel volume, got {s:?}")));
    }
    let lt = s[T];
    let dims = [s[2], s[3], s[4]];
    let vox = dims.iter().product::<usize>();
    let mut frames: Vec<Vec<f32>> = (0..lt).map(|_| Vec::with_capacity(vox)).collect();
    for row in v.data().chunks_exact(lt.max(1)) {
        for (t, &x) in row.iter().enumerate() {
            frames[t].push(x);
        }
    }
    Ok(frames.into_iter().map(|data| Frame { dims, data }).collect())
}

fn window_mass(f: &Frame, centre: [usize; 3], r: [usize; 3]) -> (f64, [f64; 3]) {
    let [rx, ry, rz] = f.window(centre, r);
    let mut mass = 0.0;
    let mut moment = [0.0; 3];
    for x in rx {
        for y in ry.clone() {
            for z in rz.clone() {
                let v = f.at(x, y, z) as f64;
                mass += v;
                moment[0] += v * x as f64;
                moment[1] += v * y as f64;
                moment[2] += v * z as f64;
            }
        }
    }
    (mass, moment)
}

fn is_local_max(f: &Frame, p: [usize; 3], r: [usize; 3]) -> bool {
    let v = f.at(p[0], p[1], p[2]);
    let [rx, ry, rz] = f.window(p, r);
    for x in rx {
        for y in ry.clone() {
            for z in rz.clone() {
                if f.at(x, y, z) > v {
                    return false;
                }
            }
        }
    }
    true
}

/// Centre of mass within the window, re-centred on the nearest voxel until
/// the offset is at most half a voxel.
fn refine(f: &Frame, peak: [usize; 3], r: [usize; 3]) -> ([f64; 3], f64) {
    let mut centre = peak;
    let mut out = ([peak[0] as f64, peak[1] as f64, peak[2] as f64], 0.0);
    for _ in 0..10 {
        let (mass, m) = window_mass(f, centre, r);
        if mass <= 0.0 {
            return out;
        }
        let com = [m[0] / mass, m[1] / mass, m[2] / mass];
        out = (com, mass);
        let next: [usize; 3] = std::array::from_fn(|a| (com[a].round().max(0.0) as usize).min(f.dims[a] - 1));
        if next == centre || (0..3).all(|a| (com[a] - centre[a] as f64).abs() <= 0.5) {
            break;
        }
        centre = next;
    }
    out
}

fn too_close(a: [f64; 3], b: [f64; 3], sep: [f64; 3]) -> bool {
    (0..3).map(|k| ((a[k] - b[k]) / sep[k]).powi(2)).sum::<f64>() < 1.0
}

/// Candidates before the minmass cut, strongest first, already separated.
fn separated_candidates(f: &Frame, params: &DetectionParams) -> Vec<Detection> {
    let r = params.radius();
    let [lx, ly, lz] = f.dims;
    let mut cands = Vec::new();
    for x in 0..lx {
        for y in 0..ly {
            for z in 0..lz {
                let v = f.at(x, y, z);
                if v <= 0.0 || v < params.threshold || !is_local_max(f, [x, y, z], r) {
                    continue;
                }
                let (pos, mass) = refine(f, [x, y, z], r);
                cands.push(Detection { pos, mass, peak: v });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.mass
            .total_cmp(&a.mass)
            .then_with(|| a.pos.partial_cmp(&b.pos).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for c in cands {
        if !kept.iter().any(|k| too_close(k.pos, c.pos, params.separation)) {
            kept.push(c);
        }
    }
    kept
}

/// Local maxima over the diameter window with integrated mass at least
/// `minmass`; the stronger of two detections closer than `separation` wins.
pub fn detect_frame(f: &Frame, params: &DetectionParams) -> Vec<Detection> {
    separated_candidates(f, params)
        .into_iter()
        .filter(|d| d.mass >= params.minmass)
        .collect()
}

pub fn detect_per_frame(v: &Tensor6D, params: &DetectionParams) -> Result<Vec<Vec<Detection>>> {
    params.validate()?;
    Ok(frames_of(v)?.iter().map(|f| detect_frame(f, params)).collect())
}

/// Total detection count over all frames for each candidate minmass.
pub fn count_by_minmass(frames: &[Frame], params: &DetectionParams, candidates: &[f64]) -> Vec<usize> {
    let masses: Vec<f64> = frames
        .iter()
        .flat_map(|f| separated_candidates(f, params))
        .map(|d| d.mass)
        .collect();
    candidates
        .iter()
        .map(|&m| masses.iter().filter(|&&x| x >= m).count())
        .collect()
}

const MASS_DECADES: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Elbow {
    pub index: usize,
    pub minmass: f64,
    pub counts: Vec<usize>,
    /// True when the count curve has no elbow and the smallest candidate was taken.
    pub degenerate: bool,
}

/// Index maximizing the distance to the chord between the end points of
/// the `(ln candidate, count)` curve, both axes scaled to the unit range.
/// `None` when the curve is straight or flat.
pub fn elbow_index(candidates: &[f64], counts: &[usize]) -> Result<Option<usize>> {
    if candidates.len() < 3 || candidates.len() != counts.len() {
        return Err(Error::arg(format!(
            "elbow detection needs at least 3 candidates with one count each, got {} and {}",
            candidates.len(),
            counts.len()
        )));
    }
    if candidates.iter().any(|&c| !(c > 0.0)) || candidates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("minmass candidates must be positive and strictly ascending"));
    }
    let xs: Vec<f64> = candidates.iter().map(|c| c.ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let n = xs.len();
    let (x0, x1) = (xs[0], xs[n - 1]);
    let (ymin, ymax) = ys.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    if ymax == ymin {
        return Ok(None);
    }
    let px: Vec<f64> = xs.iter().map(|x| (x - x0) / (x1 - x0)).collect();
    let py: Vec<f64> = ys.iter().map(|y| (y - ymin) / (ymax - ymin)).collect();
    let (dx, dy) = (px[n - 1] - px[0], py[n - 1] - py[0]);
    let norm = (dx * dx + dy * dy).sqrt();
    let mut best = (0.0, 0);
    for i in 1..n - 1 {
        let d = (dy * (px[i] - px[0]) - dx * (py[i] - py[0])).abs() / norm;
        if d > best.0 {
            best = (d, i);
        }
    }
    Ok(if best.0 > 1e-9 { Some(best.1) } else { None })
}

pub fn select_minmass_by_elbow(frames: &[Frame], params: &DetectionParams, candidates: &[f64]) -> Result<Elbow> {
    let counts = count_by_minmass(frames, params, candidates);
    let found = elbow_index(candidates, &counts)?;
    if found.is_none() {
        log::warn!("minmass count curve has no elbow; using the smallest candidate {}", candidates[0]);
    }
    let index = found.unwrap_or(0);
    Ok(Elbow {
        index,
        minmass: candidates[index],
        counts,
        degenerate: found.is_none(),
    })
}

/// `count` log-spaced minmass candidates over the three decades below the
/// largest candidate mass.
pub fn auto_candidates(frames: &[Frame], params: &DetectionParams, count: usize) -> Result<Vec<f64>> {
    let masses: Vec<f64> = frames
        .iter()
        .flat_map(|f| separated_candidates(f, params))
        .map(|d| d.mass)
        .filter(|&m| m > 0.0)
        .collect();
    let hi = masses.iter().copied().fold(0.0, f64::max);
    if hi <= 0.0 || count < 3 {
        return Err(Error::arg("no positive-mass candidates to choose a minmass from"));
    }
    let (a, b) = ((hi * MASS_DECADES).ln(), hi.ln());
    Ok((0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajPoint {
    pub frame: usize,
    pub pos: [f64; 3],
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub points: Vec<TrajPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean frame-to-frame displacement.
    pub fn mean_speed(&self) -> Option<f64> {
        if self.points.len() < 2 {
            return None;
        }
        let total: f64 = self
            .points
            .windows(2)
            .map(|w| (0..3).map(|a| (w[1].pos[a] - w[0].pos[a]).powi(2)).sum::<f64>().sqrt())
            .sum();
        Some(total / (self.points.len() - 1) as f64)
    }
}

/// Minimum-cost perfect assignment of a square cost matrix (shortest
/// augmenting paths with potentials). Returns the column of every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials and matching, column 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Links `prev` to `next` by one-to-one assignment minimizing the summed
/// squared displacement over pairs within `max_disp`. Leaving a point
/// unlinked costs `max_disp^2`.
fn link_pair(prev: &[[f64; 3]], next: &[[f64; 3]], max_disp: f64) -> Vec<Option<usize>> {
    let (n, m) = (prev.len(), next.len());
    let mut out = vec![None; n];
    if n == 0 || m == 0 {
        return out;
    }
    let limit = max_disp * max_disp;
    let forbidden = 1e6 * (limit + 1.0) * (n + m) as f64;
    let size = n + m;
    let mut cost = vec![vec![forbidden; size]; size];
    for i in 0..n {
        for j in 0..m {
            let d = sq_dist(prev[i], next[j]);
            if d <= limit {
                cost[i][j] = d;
                cost[n + j][m + i] = 0.0;
            }
        }
        cost[i][m + i] = limit;
    }
    for j in 0..m {
        cost[n + j][j] = limit;
    }
    let assign = hungarian(&cost);
    for i in 0..n {
        let j = assign[i];
        if j < m && cost[i][j] < forbidden {
            out[i] = Some(j);
        }
    }
    out
}

fn canonical(dets: &[Detection]) -> Vec<&Detection> {
    let mut v: Vec<&Detection> = dets.iter().collect();
    v.sort_by(|a, b| {
        a.pos
            .partial_cmp(&b.pos)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.mass.total_cmp(&b.mass))
    });
    v
}

/// Frame-to-frame linking without gap closing. Unmatched detections start
/// new trajectories; ids follow start frame, then position order.
pub fn link_trajectories(frames: &[Vec<Detection>], max_disp: f64) -> Result<Vec<Trajectory>> {
    if !(max_disp > 0.0) {
        return Err(Error::arg(format!("max displacement {max_disp} must be positive")));
    }
    let mut trajs: Vec<Trajectory> = Vec::new();
    // trajectory index of each detection in the previous frame
    let mut open: Vec<(usize, [f64; 3])> = Vec::new();
    for (t, dets) in frames.iter().enumerate() {
        let dets = canonical(dets);
        let prev: Vec<[f64; 3]> = open.iter().map(|o| o.1).collect();
        let next: Vec<[f64; 3]> = dets.iter().map(|d| d.pos).collect();
        let links = link_pair(&prev, &next, max_disp);
        let mut owner: Vec<Option<usize>> = vec![None; dets.len()];
        for (i, l) in links.iter().enumerate() {
            if let Some(j) = *l {
                owner[j] = Some(open[i].0);
            }
        }
        let mut next_open = Vec::with_capacity(dets.len());
        for (j, d) in dets.iter().enumerate() {
            let k = owner[j].unwrap_or_else(|| {
                trajs.push(Trajectory {
                    id: trajs.len(),
                    points: Vec::new(),
                });
                trajs.len() - 1
            });
            trajs[k].points.push(TrajPoint {
                frame: t,
                pos: d.pos,
                mass: d.mass,
            });
            next_open.push((k, d.pos));
        }
        open = next_open;
    }
    Ok(trajs)
}

/// Row of a linked `tracks.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajRow {
    pub traj_id: usize,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub mass: f64,
}

pub fn write_trajectories(path: impl AsRef<std::path::Path>, trajs: &[Trajectory]) -> Result<()> {
    let rows: Vec<TrajRow> = trajs
        .iter()
        .flat_map(|t| {
            t.points.iter().map(move |p| TrajRow {
                traj_id: t.id,
                frame: p.frame,
                x: p.pos[0],
                y: p.pos[1],
                z: p.pos[2],
                mass: p.mass,
            })
        })
        .collect();
    crate::io::write_csv(path, &rows)
}

/// Groups rows by `traj_id` in order of first appearance.
pub fn read_trajectories(path: impl AsRef<std::path::Path>) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for r in crate::io::read_csv::<TrajRow>(path)? {
        let k = *index.entry(r.traj_id).or_insert_with(|| {
            out.push(Trajectory {
                id: r.traj_id,
                points: Vec::new(),
            });
            out.len() - 1
        });
        out[k].points.push(TrajPoint {
            frame: r.frame,
            pos: [r.x, r.y, r.z],
            mass: r.mass,
        });
    }
    Ok(out)
}

/// Keeps trajectories with at least `min_len` points.
pub fn filter_short(trajs: Vec<Trajectory>, min_len: usize) -> Vec<Trajectory> {
    trajs.into_iter().filter(|t| t.len() >= min_len).collect()
}
