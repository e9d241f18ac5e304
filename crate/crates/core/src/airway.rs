//! Trachea seed detection, adaptive region growing with leak detection, and
//! skeleton-based labeling of the trachea and main bronchi.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageops::label_components;
use crate::volume::{labels, Connectivity, Grid, LabelVolume, Mask, Volume, Volume3D, VoxelIndex};

/// Air threshold for trachea candidates on the top slice.
pub const SEED_AIR_HU: f32 = -900.0;
/// Seeds at or above this intensity are rejected unless overridden.
pub const SEED_LIMIT_HU: f32 = -500.0;
pub const MIN_SEED_AREA: usize = 20;
pub const MAX_SEED_AREA: usize = 1500;
pub const MIN_CIRCULARITY: f64 = 0.5;
/// Skeleton end branches shorter than this are pruned before labeling.
pub const MIN_SPUR_LENGTH: usize = 5;

/// A dark region on the top slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedCandidate {
    pub area: usize,
    pub perimeter: usize,
    pub circularity: f64,
    pub voxel: VoxelIndex,
}

/// Dark 4-connected components of the top-most slice that satisfy the size
/// limits, with their circularity `4 pi A / P^2` (pixel-edge perimeter).
pub fn seed_candidates(vol: &Volume3D) -> Vec<SeedCandidate> {
    let [nx, ny, nz] = vol.dims();
    let k = nz - 1;
    let dark: Vec<bool> = (0..nx * ny).map(|o| vol.at(o % nx, o / nx, k) < SEED_AIR_HU).collect();
    let mut comp = vec![usize::MAX; nx * ny];
    let mut out = Vec::new();
    for start in 0..nx * ny {
        if !dark[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = start;
        let mut members = vec![start];
        comp[start] = id;
        let mut head = 0;
        while head < members.len() {
            let o = members[head];
            head += 1;
            let (i, j) = (o % nx, o / nx);
            let nbrs = [
                (i > 0).then(|| o - 1),
                (i + 1 < nx).then(|| o + 1),
                (j > 0).then(|| o - nx),
                (j + 1 < ny).then(|| o + nx),
            ];
            for n in nbrs.into_iter().flatten() {
                if dark[n] && comp[n] == usize::MAX {
                    comp[n] = id;
                    members.push(n);
                }
            }
        }
        let area = members.len();
        if !(MIN_SEED_AREA..=MAX_SEED_AREA).contains(&area) {
            continue;
        }
        let mut perimeter = 0;
        for &o in &members {
            let (i, j) = (o % nx, o / nx);
            let inside = |n: Option<usize>| n.is_some_and(|n| comp[n] == id);
            perimeter += [
                (i > 0).then(|| o - 1),
                (i + 1 < nx).then(|| o + 1),
                (j > 0).then(|| o - nx),
                (j + 1 < ny).then(|| o + nx),
            ]
            .into_iter()
            .filter(|&n| !inside(n))
            .count();
        }
        let circularity = 4.0 * std::f64::consts::PI * area as f64 / (perimeter * perimeter) as f64;
        let (ci, cj) = members
            .iter()
            .fold((0.0, 0.0), |(a, b), &o| (a + (o % nx) as f64, b + (o / nx) as f64));
        let (ci, cj) = (ci / area as f64, cj / area as f64);
        let nearest = members
            .iter()
            .min_by(|&&a, &&b| {
                let da = ((a % nx) as f64 - ci).powi(2) + ((a / nx) as f64 - cj).powi(2);
                let db = ((b % nx) as f64 - ci).powi(2) + ((b / nx) as f64 - cj).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .copied()
            .expect("non-empty component");
        out.push(SeedCandidate {
            area,
            perimeter,
            circularity,
            voxel: VoxelIndex::new(nearest % nx, nearest / nx, k),
        });
    }
    out
}

/// Centroid voxel of the most circular qualifying dark component on the top slice.
pub fn detect_trachea_seed(vol: &Volume3D) -> Result<VoxelIndex> {
    seed_candidates(vol)
        .into_iter()
        .filter(|c| c.circularity >= MIN_CIRCULARITY)
        .max_by(|a, b| a.circularity.total_cmp(&b.circularity).then(a.area.cmp(&b.area)))
        .map(|c| c.voxel)
        .ok_or(Error::NoTracheaCandidate)
}

/// Region growing parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowParams {
    pub seed: VoxelIndex,
    pub th_min: f32,
    pub th_max: f32,
    /// Threshold widening per iteration on each side, in HU.
    pub step: f32,
    pub leak_factor: f64,
    pub max_iterations: usize,
    /// Stop after this many consecutive iterations without growth.
    pub stall_iterations: usize,
    /// Reject seeds at or above [`SEED_LIMIT_HU`].
    pub require_air_seed: bool,
}

impl GrowParams {
    /// Thresholds `I(seed) -/+ 1 HU` and default growth settings.
    pub fn from_seed(vol: &Volume3D, seed: VoxelIndex) -> Result<Self> {
        if !vol.grid().contains(seed) {
            return Err(Error::OutOfSupport {
                index: seed.as_array(),
                dims: vol.dims(),
            });
        }
        let s = vol.get(seed);
        Ok(GrowParams {
            seed,
            th_min: s - 1.0,
            th_max: s + 1.0,
            step: 1.0,
            leak_factor: 3.0,
            max_iterations: 1000,
            stall_iterations: 5,
            require_air_seed: true,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.th_min <= self.th_max) {
            return Err(Error::InvalidParameter("th_min must not exceed th_max".into()));
        }
        if !(self.leak_factor > 1.0) {
            return Err(Error::InvalidParameter("leak_factor must exceed 1".into()));
        }
        if !(self.step >= 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "step must be >= 0 and max_iterations >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the growing trace.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct GrowStep {
    pub t: usize,
    pub th_min: f32,
    pub th_max: f32,
    pub voxels: usize,
    pub edge_voxels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Leak detected at the recorded iteration; the previous mask is returned.
    Leak(usize),
    Stalled,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct GrowResult {
    pub mask: Mask,
    pub trace: Vec<GrowStep>,
    pub stop: StopReason,
}

const UNSEEN: u8 = 0;
const IN_MASK: u8 = 1;
const REJECTED: u8 = 2;

fn edge_voxels(grid: &Grid, state: &[u8], members: &[usize]) -> usize {
    members
        .iter()
        .filter(|&&o| {
            let x = grid.index_of(o);
            Connectivity::N6
                .offsets()
                .iter()
                .any(|&d| match x.offset_by(d, grid.dims) {
                    Some(n) => state[grid.offset_of(n)] != IN_MASK,
                    None => true,
                })
        })
        .count()
}

/// Iterative region growing with the dual (volume, edge count) leak criterion.
pub fn grow_airway(vol: &Volume3D, params: &GrowParams) -> Result<GrowResult> {
    params.validate()?;
    let grid = *vol.grid();
    if !grid.contains(params.seed) {
        return Err(Error::OutOfSupport {
            index: params.seed.as_array(),
            dims: grid.dims,
        });
    }
    let seed_hu = vol.get(params.seed);
    if params.require_air_seed && seed_hu >= SEED_LIMIT_HU {
        return Err(Error::SeedNotAir {
            hu: seed_hu,
            limit: SEED_LIMIT_HU,
        });
    }
    let data = vol.data();
    let mut state = vec![UNSEEN; grid.len()];
    let mut members: Vec<usize> = Vec::new();
    let mut rejected: Vec<usize> = vec![grid.offset_of(params.seed)];
    state[grid.offset_of(params.seed)] = REJECTED;
    let mut trace: Vec<GrowStep> = Vec::new();
    let mut stalled = 0;

    for t in 1..=params.max_iterations {
        let widen = (t - 1) as f32 * params.step;
        let (lo, hi) = (params.th_min - widen, params.th_max + widen);
        let pass = |o: usize| data[o] > lo && data[o] < hi;

        let before = members.len();
        let mut queue: VecDeque<usize> = VecDeque::new();
        let mut still = Vec::with_capacity(rejected.len());
        for &o in &rejected {
            if pass(o) {
                state[o] = IN_MASK;
                members.push(o);
                queue.push_back(o);
            } else {
                still.push(o);
            }
        }
        rejected = still;
        while let Some(o) = queue.pop_front() {
            let x = grid.index_of(o);
            for &d in Connectivity::N6.offsets() {
                let Some(n) = x.offset_by(d, grid.dims) else {
                    continue;
                };
                let no = grid.offset_of(n);
                if state[no] != UNSEEN {
                    continue;
                }
                if pass(no) {
                    state[no] = IN_MASK;
                    members.push(no);
                    queue.push_back(no);
                } else {
                    state[no] = REJECTED;
                    rejected.push(no);
                }
            }
        }
        if members.is_empty() {
            return Err(Error::EmptySegmentation);
        }

        let step = GrowStep {
            t,
            th_min: lo,
            th_max: hi,
            voxels: members.len(),
            edge_voxels: edge_voxels(&grid, &state, &members),
        };
        if t > 1 {
            let n = trace.len() as f64;
            let mean_v = trace.iter().map(|s| s.voxels as f64).sum::<f64>() / n;
            let mean_e = trace.iter().map(|s| s.edge_voxels as f64).sum::<f64>() / n;
            if step.voxels as f64 > params.leak_factor * mean_v || step.edge_voxels as f64 > params.leak_factor * mean_e
            {
                trace.push(step);
                let mask = mask_from(&grid, &members[..before]);
                return Ok(GrowResult {
                    mask,
                    trace,
                    stop: StopReason::Leak(t),
                });
            }
        }
        stalled = if t > 1 && members.len() == before {
            stalled + 1
        } else {
            0
        };
        trace.push(step);
        if stalled >= params.stall_iterations {
            return Ok(GrowResult {
                mask: mask_from(&grid, &members),
                trace,
                stop: StopReason::Stalled,
            });
        }
    }
    Ok(GrowResult {
        mask: mask_from(&grid, &members),
        trace,
        stop: StopReason::MaxIterations,
    })
}

fn mask_from(grid: &Grid, members: &[usize]) -> Mask {
    let mut m = Volume::filled(*grid, false);
    for &o in members {
        m.data_mut()[o] = true;
    }
    m
}

/// Writes the trace with columns `t, th_min, th_max, V_t, E_t`.
pub fn write_trace_csv(trace: &[GrowStep], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    w.write_record(["t", "th_min", "th_max", "V_t", "E_t"]).map_err(io)?;
    for s in trace {
        w.write_record([
            s.t.to_string(),
            s.th_min.to_string(),
            s.th_max.to_string(),
            s.voxels.to_string(),
            s.edge_voxels.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 3x3x3 neighborhood with out-of-grid voxels as background; index
/// `(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)`.
fn neighborhood(fg: &[bool], grid: &Grid, x: VoxelIndex) -> [bool; 27] {
    let mut nb = [false; 27];
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if let Some(n) = x.offset_by([dx, dy, dz], grid.dims) {
                    nb[((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize] = fg[grid.offset_of(n)];
                }
            }
        }
    }
    nb
}

fn coords(n: usize) -> [isize; 3] {
    [(n % 3) as isize - 1, ((n / 3) % 3) as isize - 1, (n / 9) as isize - 1]
}

/// Number of connected components among `members` of the 3x3x3 cube.
fn count_components(
    members: &[bool; 27],
    adjacent: impl Fn([isize; 3], [isize; 3]) -> bool,
    seeds: Option<&[usize]>,
) -> usize {
    let mut seen = [false; 27];
    let mut count = 0;
    for start in 0..27 {
        if !members[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut hits_seed = seeds.is_none();
        while let Some(a) = stack.pop() {
            if let Some(s) = seeds {
                hits_seed |= s.contains(&a);
            }
            for b in 0..27 {
                if members[b] && !seen[b] && adjacent(coords(a), coords(b)) {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        if hits_seed {
            count += 1;
        }
    }
    count
}

const FACE_NEIGHBORS: [usize; 6] = [4, 10, 12, 14, 16, 22];

/// Simple-point test for (26, 6) topology.
fn is_simple(nb: &[bool; 27]) -> bool {
    let mut fg = *nb;
    fg[13] = false;
    let adj26 = |a: [isize; 3], b: [isize; 3]| a != b && (0..3).all(|i| (a[i] - b[i]).abs() <= 1);
    if count_components(&fg, adj26, None) != 1 {
        return false;
    }
    let mut bg = [false; 27];
    for n in 0..27 {
        let c = coords(n);
        let l1 = c.iter().map(|v| v.abs()).sum::<isize>();
        bg[n] = n != 13 && l1 <= 2 && !nb[n];
    }
    let adj6 = |a: [isize; 3], b: [isize; 3]| (0..3).map(|i| (a[i] - b[i]).abs()).sum::<isize>() == 1;
    count_components(&bg, adj6, Some(&FACE_NEIGHBORS)) == 1
}

fn fg_neighbor_count(nb: &[bool; 27]) -> usize {
    nb.iter().enumerate().filter(|&(n, &b)| n != 13 && b).count()
}

/// Curve skeleton by directional boundary peeling with simple-point and
/// endpoint preservation, followed by pruning of short end branches.
pub fn skeletonize(mask: &Mask) -> Mask {
    let grid = *mask.grid();
    let mut fg = mask.data().to_vec();
    let mut members: Vec<usize> = (0..grid.len()).filter(|&o| fg[o]).collect();
    let dirs: [[isize; 3]; 6] = [[0, 0, 1], [0, 0, -1], [0, 1, 0], [0, -1, 0], [1, 0, 0], [-1, 0, 0]];
    loop {
        let mut changed = false;
        for d in dirs {
            let removable = |fg: &[bool], o: usize| {
                let x = grid.index_of(o);
                let border = x.offset_by(d, grid.dims).is_none_or(|n| !fg[grid.offset_of(n)]);
                if !border {
                    return false;
                }
                let nb = neighborhood(fg, &grid, x);
                fg_neighbor_count(&nb) > 1 && is_simple(&nb)
            };
            let candidates: Vec<usize> = members.iter().copied().filter(|&o| removable(&fg, o)).collect();
            for o in candidates {
                let nb = neighborhood(&fg, &grid, grid.index_of(o));
                if fg_neighbor_count(&nb) > 1 && is_simple(&nb) {
                    fg[o] = false;
                    changed = true;
                }
            }
            members.retain(|&o| fg[o]);
        }
        if !changed {
            break;
        }
    }
    prune_spurs(&grid, &mut fg, MIN_SPUR_LENGTH);
    Volume::new(grid, fg).expect("grid length")
}

fn skeleton_neighbors(grid: &Grid, fg: &[bool], o: usize) -> Vec<usize> {
    crate::volume::neighbors(grid.index_of(o), Connectivity::N26, grid.dims)
        .into_iter()
        .map(|n| grid.offset_of(n))
        .filter(|&n| fg[n])
        .collect()
}

/// Removes end branches (endpoint to junction) shorter than `min_len`.
fn prune_spurs(grid: &Grid, fg: &mut [bool], min_len: usize) {
    let endpoints: Vec<usize> = (0..grid.len())
        .filter(|&o| fg[o] && skeleton_neighbors(grid, fg, o).len() == 1)
        .collect();
    let mut remove = Vec::new();
    for e in endpoints {
        let mut chain = vec![e];
        let mut prev = usize::MAX;
        let mut cur = e;
        let reached_junction = loop {
            let next: Vec<usize> = skeleton_neighbors(grid, fg, cur)
                .into_iter()
                .filter(|&n| n != prev && !chain.contains(&n))
                .collect();
            if skeleton_neighbors(grid, fg, cur).len() >= 3 && cur != e {
                chain.pop();
                break true;
            }
            match next.as_slice() {
                [n] => {
                    prev = cur;
                    cur = *n;
                    chain.push(cur);
                }
                _ => break false,
            }
            if chain.len() > min_len + 1 {
                break false;
            }
        };
        if reached_junction && chain.len() < min_len {
            remove.extend(chain);
        }
    }
    for o in remove {
        fg[o] = false;
    }
}

/// Labeled airway: trachea (1), left main bronchus subtree (2), right (3).
#[derive(Clone, Debug)]
pub struct AirwayTree {
    pub labels: LabelVolume,
    pub skeleton: Mask,
    pub carina: VoxelIndex,
}

impl AirwayTree {
    pub fn mask(&self) -> Mask {
        self.labels.volume().map(|l| l != labels::BACKGROUND)
    }

    /// Storage offsets carrying `label`.
    pub fn voxels_of(&self, label: u8) -> Vec<usize> {
        self.labels
            .data()
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == label)
            .map(|(o, _)| o)
            .collect()
    }
}

/// Skeletonizes the airway mask, finds the carina and labels the trachea
/// and the two main bronchus subtrees. Patient left is the subtree with the
/// larger centroid x unless `flip_lr` is set.
pub fn skeletonize_and_label(mask: &Mask, flip_lr: bool) -> Result<AirwayTree> {
    if mask.count() == 0 {
        return Err(Error::EmptyMask("airway"));
    }
    let grid = *mask.grid();
    let skeleton = skeletonize(mask);
    let fg = skeleton.data();
    let skel: Vec<usize> = (0..grid.len()).filter(|&o| fg[o]).collect();
    let degree = |o: usize| skeleton_neighbors(&grid, fg, o).len();
    let top = skel
        .iter()
        .copied()
        .filter(|&o| degree(o) == 1)
        .max_by(|&a, &b| grid.index_of(a).k.cmp(&grid.index_of(b).k).then(b.cmp(&a)))
        .ok_or(Error::CarinaNotFound)?;

    // BFS from the top endpoint; the first junction that splits the tree is the carina
    let mut order = vec![top];
    let mut seen = vec![false; grid.len()];
    seen[top] = true;
    let mut head = 0;
    while head < order.len() {
        let o = order[head];
        head += 1;
        for n in skeleton_neighbors(&grid, fg, o) {
            if !seen[n] {
                seen[n] = true;
                order.push(n);
            }
        }
    }
    let mut split = None;
    for &o in &order {
        if degree(o) < 3 {
            continue;
        }
        if let Some(s) = try_split(&grid, fg, o, top) {
            split = Some((o, s));
            break;
        }
    }
    let (carina, (trachea_side, mut left, mut right)) = split.ok_or(Error::CarinaNotFound)?;
    let centroid_x = |v: &[usize]| v.iter().map(|&o| grid.index_of(o).i as f64).sum::<f64>() / v.len() as f64;
    if centroid_x(&left) < centroid_x(&right) {
        std::mem::swap(&mut left, &mut right);
    }
    if flip_lr {
        std::mem::swap(&mut left, &mut right);
    }

    // skeleton labels, then geodesic nearest-skeleton propagation inside the mask
    let mut label = vec![labels::BACKGROUND; grid.len()];
    for &o in &skel {
        label[o] = labels::AIRWAY;
    }
    for &o in &left {
        label[o] = labels::LEFT;
    }
    for &o in &right {
        label[o] = labels::RIGHT;
    }
    let _ = trachea_side;
    let mut queue: VecDeque<usize> = skel.iter().copied().collect();
    let md = mask.data();
    while let Some(o) = queue.pop_front() {
        for n in crate::volume::neighbors(grid.index_of(o), Connectivity::N26, grid.dims) {
            let no = grid.offset_of(n);
            if md[no] && label[no] == labels::BACKGROUND {
                label[no] = label[o];
                queue.push_back(no);
            }
        }
    }
    for o in 0..grid.len() {
        if md[o] && label[o] == labels::BACKGROUND {
            label[o] = labels::AIRWAY;
        }
    }
    Ok(AirwayTree {
        labels: LabelVolume::from_volume(Volume::new(grid, label)?)?,
        skeleton,
        carina: grid.index_of(carina),
    })
}

/// Removes the junction cluster around `j`; succeeds when at least two
/// components of size >= 3 remain besides the one holding `top`.
fn try_split(grid: &Grid, fg: &[bool], j: usize, top: usize) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let degree = |o: usize| skeleton_neighbors(grid, fg, o).len();
    let mut cluster = vec![j];
    let mut head = 0;
    while head < cluster.len() {
        let o = cluster[head];
        head += 1;
        for n in skeleton_neighbors(grid, fg, o) {
            if degree(n) >= 3 && !cluster.contains(&n) {
                cluster.push(n);
            }
        }
    }
    let mut rest = Volume::new(*grid, fg.to_vec()).expect("grid length");
    for &o in &cluster {
        rest.data_mut()[o] = false;
    }
    if !rest.data()[top] {
        return None;
    }
    let comps = label_components(&rest, Connectivity::N26);
    let top_id = comps.labels.data()[top];
    let mut branches: Vec<(usize, u32)> = (1..=comps.count() as u32)
        .filter(|&id| id != top_id && comps.sizes[id as usize - 1] >= 3)
        .map(|id| (comps.sizes[id as usize - 1], id))
        .collect();
    if branches.len() < 2 {
        return None;
    }
    branches.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let members = |id: u32| -> Vec<usize> {
        comps
            .labels
            .data()
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == id)
            .map(|(o, _)| o)
            .collect()
    };
    Some((members(top_id), members(branches[0].1), members(branches[1].1)))
}
