//! Multi-source Dijkstra on the voxel grid with per-node costs.
//!
//! Edge weight between neighbors `u` and `v` is `(c(u) + c(v)) / 2` times the
//! step length in voxels (1, sqrt 2 or sqrt 3). Voxels with non-finite cost
//! are impassable. Source voxels enter with distance 0 and contribute zero
//! node cost.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::volume::{Connectivity, Grid};

pub const UNREACHED: u32 = u32::MAX;

/// Distances, owning source label and shortest-path-tree parent per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortestPaths {
    pub dist: Vec<f64>,
    /// Label of the source whose tree claimed the voxel, `UNREACHED` otherwise.
    pub label: Vec<u32>,
    /// Parent offset in the shortest-path tree, `usize::MAX` for sources and
    /// unreached voxels.
    pub parent: Vec<usize>,
}

impl ShortestPaths {
    pub fn reached(&self, offset: usize) -> bool {
        self.label[offset] != UNREACHED
    }

    /// Offsets from `offset` back to its source, inclusive on both ends.
    pub fn path_to_source(&self, offset: usize) -> Option<Vec<usize>> {
        if !self.reached(offset) {
            return None;
        }
        let mut path = vec![offset];
        let mut cur = offset;
        while self.parent[cur] != usize::MAX {
            cur = self.parent[cur];
            path.push(cur);
        }
        Some(path)
    }
}

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    label: u32,
    offset: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // min-heap on (dist, label, offset)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.label.cmp(&self.label))
            .then(other.offset.cmp(&self.offset))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Precomputed neighbor offsets with their step lengths.
fn steps(conn: Connectivity) -> Vec<([isize; 3], f64)> {
    conn.offsets()
        .iter()
        .map(|d| {
            let len = ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt();
            (*d, len)
        })
        .collect()
}

/// Runs Dijkstra from `sources` (offset, label). Ties in distance go to the
/// smaller label, then to the smaller offset.
pub fn dijkstra(grid: &Grid, cost: &[f64], sources: &[(usize, u32)], conn: Connectivity) -> ShortestPaths {
    search(grid, cost, sources, conn, None)
}

/// [`dijkstra`] that stops once every voxel in `targets` is settled. Settled
/// voxels match the full search; all others are reported as unreached.
pub fn dijkstra_to_targets(
    grid: &Grid,
    cost: &[f64],
    sources: &[(usize, u32)],
    conn: Connectivity,
    targets: &[usize],
) -> ShortestPaths {
    search(grid, cost, sources, conn, Some(targets))
}

fn search(
    grid: &Grid,
    cost: &[f64],
    sources: &[(usize, u32)],
    conn: Connectivity,
    targets: Option<&[usize]>,
) -> ShortestPaths {
    assert_eq!(cost.len(), grid.len(), "cost length must match grid");
    let n = grid.len();
    let dims = grid.dims;
    let mut dist = vec![f64::INFINITY; n];
    let mut label = vec![UNREACHED; n];
    let mut parent = vec![usize::MAX; n];
    let mut is_source = vec![false; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    for &(o, l) in sources {
        is_source[o] = true;
        if dist[o] > 0.0 || l < label[o] {
            dist[o] = 0.0;
            label[o] = l;
        }
    }
    for &(o, _) in sources {
        heap.push(Entry {
            dist: 0.0,
            label: label[o],
            offset: o,
        });
    }
    let mut is_target = vec![false; if targets.is_some() { n } else { 0 }];
    let mut remaining = 0usize;
    for &t in targets.unwrap_or(&[]) {
        if !is_target[t] {
            is_target[t] = true;
            remaining += 1;
        }
    }
    let steps = steps(conn);
    let node_cost = |o: usize| if is_source[o] { 0.0 } else { cost[o] };
    while let Some(Entry {
        dist: d,
        label: l,
        offset: u,
    }) = heap.pop()
    {
        if done[u] || d > dist[u] || l != label[u] {
            continue;
        }
        done[u] = true;
        if targets.is_some() && is_target[u] {
            remaining -= 1;
            if remaining == 0 {
                break;
            }
        }
        let cu = node_cost(u);
        let x = grid.index_of(u);
        for (delta, len) in &steps {
            let Some(v) = x.offset_by(*delta, dims) else {
                continue;
            };
            let vo = grid.offset_of(v);
            // sources keep their own label even when touching another source
            if done[vo] || is_source[vo] {
                continue;
            }
            let cv = node_cost(vo);
            if !cv.is_finite() || !cu.is_finite() {
                continue;
            }
            let nd = d + 0.5 * (cu + cv) * len;
            if nd < dist[vo] || (nd == dist[vo] && l < label[vo]) {
                dist[vo] = nd;
                label[vo] = l;
                parent[vo] = u;
                heap.push(Entry {
                    dist: nd,
                    label: l,
                    offset: vo,
                });
            }
        }
    }
    if targets.is_some() {
        // tentative labels of unsettled voxels are not final
        for o in 0..n {
            if !done[o] {
                dist[o] = f64::INFINITY;
                label[o] = UNREACHED;
                parent[o] = usize::MAX;
            }
        }
    }
    ShortestPaths { dist, label, parent }
}
