//! Centerline extraction: non-maximum suppression of the medialness field,
//! fragment pruning and per-lung shortest-path reconnection to the heart.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{dilate_n, label_components, percentile};
use crate::lungs::bounding_box;
use crate::medialness::MedialnessField;
use crate::shortest_path::dijkstra_to_targets;
use crate::volume::{labels, Connectivity, Grid, LabelVolume, Mask, Volume, Volume3D, VoxelIndex};

/// Keeps voxels with `R > th_min` whose response is at least the response
/// at 8 points on a circle of radius `radius` in the cross-section plane.
pub fn non_max_suppress(field: &MedialnessField, th_min: f32, radius: f64) -> Mask {
    let grid = *field.grid();
    let plane = grid.dims[0] * grid.dims[1];
    let resp = &field.response;
    let mut out = vec![false; grid.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slice)| {
        for (po, keep) in slice.iter_mut().enumerate() {
            let o = k * plane + po;
            let r = resp.data()[o];
            if !(r > th_min) {
                continue;
            }
            let v1 = field.v1[o].map(f64::from);
            let mut v2 = field.v2(o);
            let n2 = (v2[0] * v2[0] + v2[1] * v2[1] + v2[2] * v2[2]).sqrt();
            if n2 > 0.0 {
                v2.iter_mut().for_each(|c| *c /= n2);
            }
            let x = grid.index_of(o).as_f64();
            *keep = (0..8).all(|s| {
                let (sa, ca) = (s as f64 * std::f64::consts::FRAC_PI_4).sin_cos();
                let p = [
                    x[0] + radius * (ca * v1[0] + sa * v2[0]),
                    x[1] + radius * (ca * v1[1] + sa * v2[1]),
                    x[2] + radius * (ca * v1[2] + sa * v2[2]),
                ];
                r as f64 >= resp.sample(p)
            });
        }
    });
    Volume::new(grid, out).expect("grid length")
}

/// N26-connected centerline candidate voxels, sorted by storage offset.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterlineFragment {
    pub voxels: Vec<usize>,
}

/// Clears candidates within `clear_radius` STAR6 dilations of the airway,
/// then drops N26 components smaller than `min_voxels`.
pub fn prune_fragments(
    candidates: &Mask,
    airway: &Mask,
    clear_radius: usize,
    min_voxels: usize,
) -> Result<Vec<CenterlineFragment>> {
    candidates.same_dims(airway)?;
    let near = dilate_n(airway, Connectivity::N6, clear_radius);
    let kept = Volume::new(
        *candidates.grid(),
        candidates
            .data()
            .iter()
            .zip(near.data())
            .map(|(&c, &n)| c && !n)
            .collect(),
    )?;
    let comps = label_components(&kept, Connectivity::N26);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); comps.count()];
    for (o, &id) in comps.labels.data().iter().enumerate() {
        if id > 0 {
            members[id as usize - 1].push(o);
        }
    }
    Ok(members
        .into_iter()
        .filter(|m| m.len() >= min_voxels)
        .map(|voxels| CenterlineFragment { voxels })
        .collect())
}

/// Centroid of voxels brighter than `heart_hu` in the mediastinal box between
/// the lungs (x gap between the bounding boxes, union y range, middle third
/// of the union z range), excluding lung voxels.
pub fn detect_heart_center(vol: &Volume3D, lungs: &LabelVolume, heart_hu: f32) -> Result<VoxelIndex> {
    vol.same_dims(lungs.volume())?;
    let grid = *vol.grid();
    let lb = bounding_box(&lungs.mask_of(labels::LEFT)).ok_or(Error::EmptyMask("left lung"))?;
    let rb = bounding_box(&lungs.mask_of(labels::RIGHT)).ok_or(Error::EmptyMask("right lung"))?;
    let (a, b) = if lb[0][0] <= rb[0][0] { (lb, rb) } else { (rb, lb) };
    let (x0, x1) = if a[1][0] < b[0][0] {
        (a[1][0] + 1, b[0][0].saturating_sub(1))
    } else {
        // overlapping boxes: use the centroid span
        let cx = |l: u8| {
            let v = lungs.mask_of(l).indices();
            (v.iter().map(|x| x.i as f64).sum::<f64>() / v.len() as f64).round() as usize
        };
        let (p, q) = (cx(labels::LEFT), cx(labels::RIGHT));
        (p.min(q), p.max(q))
    };
    let y0 = lb[0][1].min(rb[0][1]);
    let y1 = lb[1][1].max(rb[1][1]);
    let z0 = lb[0][2].min(rb[0][2]);
    let z1 = lb[1][2].max(rb[1][2]);
    let third = (z1 - z0 + 1) / 3;
    let (zl, zh) = (z0 + third, z1 - third);
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for k in zl..=zh {
        for j in y0..=y1 {
            for i in x0..=x1.min(grid.dims[0] - 1) {
                let o = grid.offset(i, j, k);
                if vol.data()[o] > heart_hu && lungs.data()[o] == labels::BACKGROUND {
                    sum[0] += i as f64;
                    sum[1] += j as f64;
                    sum[2] += k as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::NoHeartCandidate);
    }
    let c = sum.map(|s| (s / n as f64).round() as usize);
    Ok(VoxelIndex::new(c[0], c[1], c[2]))
}

/// Reconnection cost parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconnectParams {
    pub epsilon: f64,
    pub lambda: f64,
    /// Dilation of the heart-to-lung corridor, in voxels.
    pub corridor_radius: usize,
}

impl Default for ReconnectParams {
    fn default() -> Self {
        ReconnectParams {
            epsilon: 0.05,
            lambda: 0.5,
            corridor_radius: 2,
        }
    }
}

/// One centerline node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub ijk: [usize; 3],
    pub xyz_mm: [f64; 3],
    pub radius_mm: Option<f64>,
    pub response: f32,
}

/// Rooted forest of centerline voxels for one lung. Edges are
/// `[parent, child]` node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterlineTree {
    pub lung: u8,
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<[usize; 2]>,
    pub roots: Vec<usize>,
    /// Fragments that could not be reached from the heart; they are kept as
    /// separately rooted subtrees.
    #[serde(default)]
    pub orphans: usize,
}

impl CenterlineTree {
    pub fn empty(lung: u8) -> Self {
        CenterlineTree {
            lung,
            nodes: Vec::new(),
            edges: Vec::new(),
            roots: Vec::new(),
            orphans: 0,
        }
    }

    /// Builds the tree from a parent map over storage offsets.
    fn from_parents(lung: u8, grid: &Grid, field: &MedialnessField, parents: &[(usize, Option<usize>)]) -> Self {
        let mut order: Vec<usize> = parents.iter().map(|&(o, _)| o).collect();
        order.sort_unstable();
        order.dedup();
        let id_of = |o: usize| order.binary_search(&o).expect("node present");
        let nodes = order
            .iter()
            .enumerate()
            .map(|(id, &o)| {
                let x = grid.index_of(o);
                TreeNode {
                    id,
                    ijk: x.as_array(),
                    xyz_mm: grid.to_physical(x),
                    radius_mm: None,
                    response: field.response.data()[o],
                }
            })
            .collect();
        let mut edges = Vec::new();
        let mut roots = Vec::new();
        let mut seen = vec![false; order.len()];
        for &(o, p) in parents {
            let c = id_of(o);
            if seen[c] {
                continue;
            }
            seen[c] = true;
            match p {
                Some(p) => edges.push([id_of(p), c]),
                None => roots.push(c),
            }
        }
        edges.sort_unstable_by_key(|e| (e[1], e[0]));
        roots.sort_unstable();
        CenterlineTree {
            lung,
            nodes,
            edges,
            roots,
            orphans: 0,
        }
    }

    pub fn parent_of(&self) -> Vec<Option<usize>> {
        let mut p = vec![None; self.nodes.len()];
        for e in &self.edges {
            p[e[1]] = Some(e[0]);
        }
        p
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut c = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            c[e[0]].push(e[1]);
        }
        c
    }

    /// Nodes with two or more children.
    pub fn branch_points(&self) -> Vec<usize> {
        self.children()
            .iter()
            .enumerate()
            .filter(|(_, c)| c.len() >= 2)
            .map(|(i, _)| i)
            .collect()
    }

    /// Node-id paths between consecutive branch points, roots or endpoints;
    /// every interior node has tree degree 2.
    pub fn branches(&self) -> Vec<Vec<usize>> {
        let children = self.children();
        let parent = self.parent_of();
        let degree = |n: usize| children[n].len() + usize::from(parent[n].is_some());
        let mut out = Vec::new();
        for start in 0..self.nodes.len() {
            // roots always start branches
            if degree(start) == 2 && parent[start].is_some() {
                continue;
            }
            for &c in &children[start] {
                let mut path = vec![start, c];
                let mut cur = c;
                while degree(cur) == 2 {
                    cur = children[cur][0];
                    path.push(cur);
                }
                out.push(path);
            }
        }
        out
    }

    pub fn offsets(&self, grid: &Grid) -> Vec<usize> {
        self.nodes
            .iter()
            .map(|n| grid.offset(n.ijk[0], n.ijk[1], n.ijk[2]))
            .collect()
    }
}

/// Writes all trees as a JSON array.
pub fn save_trees(trees: &[CenterlineTree], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(trees)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_trees(path: impl AsRef<Path>) -> Result<Vec<CenterlineTree>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Flat node table: `lung,id,i,j,k,x_mm,y_mm,z_mm,radius_mm,response,parent`.
pub fn save_nodes_csv(trees: &[CenterlineTree], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "lung",
        "id",
        "i",
        "j",
        "k",
        "x_mm",
        "y_mm",
        "z_mm",
        "radius_mm",
        "response",
        "parent",
    ])
    .map_err(err)?;
    for t in trees {
        let parent = t.parent_of();
        for n in &t.nodes {
            w.write_record([
                t.lung.to_string(),
                n.id.to_string(),
                n.ijk[0].to_string(),
                n.ijk[1].to_string(),
                n.ijk[2].to_string(),
                n.xyz_mm[0].to_string(),
                n.xyz_mm[1].to_string(),
                n.xyz_mm[2].to_string(),
                n.radius_mm.map(|r| r.to_string()).unwrap_or_default(),
                n.response.to_string(),
                parent[n.id].map(|p| p.to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Voxels on the segment from `a` to `b`, sampled at quarter-voxel steps.
fn line_voxels(grid: &Grid, a: VoxelIndex, b: VoxelIndex) -> Vec<usize> {
    let (pa, pb) = (a.as_f64(), b.as_f64());
    let len = a.distance(&b);
    let n = (len * 4.0).ceil().max(1.0) as usize;
    let mut out: Vec<usize> = (0..=n)
        .map(|s| {
            let t = s as f64 / n as f64;
            let p = [0, 1, 2].map(|d| (pa[d] + t * (pb[d] - pa[d])).round() as usize);
            grid.offset(p[0], p[1], p[2])
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Normalized response `R / P99(R > 0)`, clipped to 1.
pub fn normalized_response(field: &MedialnessField) -> Vec<f64> {
    let mut pos: Vec<f32> = field.response.data().iter().cloned().filter(|&r| r > 0.0).collect();
    let p99 = percentile(&mut pos, 99.0).unwrap_or(0.0) as f64;
    field
        .response
        .data()
        .iter()
        .map(|&r| if p99 > 0.0 { (r as f64 / p99).min(1.0) } else { 0.0 })
        .collect()
}

/// Connects the fragments of `lung` to `root` by the shortest-path tree over
/// the lung plus a corridor from the root. Fragment voxels are grouped by the
/// lung label they lie in.
pub fn reconnect_lung(
    fragments: &[CenterlineFragment],
    field: &MedialnessField,
    grad_norm: &[f64],
    lungs: &LabelVolume,
    lung: u8,
    root: VoxelIndex,
    params: &ReconnectParams,
) -> Result<CenterlineTree> {
    let grid = *field.grid();
    field.response.same_dims(lungs.volume())?;
    if grad_norm.len() != grid.len() {
        return Err(Error::InvalidParameter(
            "gradient field size does not match the grid".into(),
        ));
    }
    if !grid.contains(root) {
        return Err(Error::OutOfSupport {
            index: root.as_array(),
            dims: grid.dims,
        });
    }
    let lab = lungs.data();
    let targets: Vec<usize> = fragments
        .iter()
        .flat_map(|f| f.voxels.iter().copied())
        .filter(|&o| lab[o] == lung)
        .collect();
    if targets.is_empty() {
        return Ok(CenterlineTree::empty(lung));
    }

    // graph: lung voxels plus a corridor from the root to the nearest lung voxel
    let rp = root.as_f64();
    let entry = (0..grid.len())
        .filter(|&o| lab[o] == lung)
        .min_by(|&a, &b| {
            let d = |o: usize| {
                let x = grid.index_of(o).as_f64();
                (x[0] - rp[0]).powi(2) + (x[1] - rp[1]).powi(2) + (x[2] - rp[2]).powi(2)
            };
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        })
        .ok_or(Error::EmptyMask("lung"))?;
    let mut corridor = Volume::filled(grid, false);
    for o in line_voxels(&grid, root, grid.index_of(entry)) {
        corridor.data_mut()[o] = true;
    }
    let corridor = dilate_n(&corridor, Connectivity::N6, params.corridor_radius);
    let r_hat = normalized_response(field);
    let root_o = grid.offset_of(root);
    let cost: Vec<f64> = (0..grid.len())
        .map(|o| {
            let inside = lab[o] == lung
                || (corridor.data()[o] && (lab[o] == labels::BACKGROUND || lab[o] == lung))
                || o == root_o;
            if inside {
                1.0 / (params.epsilon + r_hat[o]) + params.lambda * grad_norm[o]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let sp = dijkstra_to_targets(&grid, &cost, &[(root_o, 0)], Connectivity::N26, &targets);

    let mut parents: Vec<(usize, Option<usize>)> = Vec::new();
    let mut in_tree = vec![false; grid.len()];
    let mut orphan_voxels = Vec::new();
    for &t in &targets {
        if !sp.reached(t) {
            orphan_voxels.push(t);
            continue;
        }
        let mut cur = t;
        while !in_tree[cur] {
            in_tree[cur] = true;
            let p = sp.parent[cur];
            parents.push((cur, (p != usize::MAX).then_some(p)));
            if p == usize::MAX {
                break;
            }
            cur = p;
        }
    }

    // unreachable fragments become separately rooted BFS trees
    let mut orphans = 0;
    if !orphan_voxels.is_empty() {
        let mut is_orphan = vec![false; grid.len()];
        orphan_voxels.iter().for_each(|&o| is_orphan[o] = true);
        for &start in &orphan_voxels {
            if in_tree[start] {
                continue;
            }
            orphans += 1;
            in_tree[start] = true;
            parents.push((start, None));
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(o) = queue.pop_front() {
                for n in crate::volume::neighbors(grid.index_of(o), Connectivity::N26, grid.dims) {
                    let no = grid.offset_of(n);
                    if is_orphan[no] && !in_tree[no] {
                        in_tree[no] = true;
                        parents.push((no, Some(o)));
                        queue.push_back(no);
                    }
                }
            }
        }
        log::warn!("lung {lung}: {orphans} centerline fragments could not be connected to the root");
    }
    let mut tree = CenterlineTree::from_parents(lung, &grid, field, &parents);
    tree.orphans = orphans;
    Ok(tree)
}

/// Reconnects the left and right lung independently (in parallel).
pub fn reconnect(
    fragments: &[CenterlineFragment],
    field: &MedialnessField,
    grad_norm: &[f64],
    lungs: &LabelVolume,
    heart: VoxelIndex,
    params: &ReconnectParams,
) -> Result<Vec<CenterlineTree>> {
    let (l, r) = rayon::join(
        || reconnect_lung(fragments, field, grad_norm, lungs, labels::LEFT, heart, params),
        || reconnect_lung(fragments, field, grad_norm, lungs, labels::RIGHT, heart, params),
    );
    Ok(vec![l?, r?])
}
