//! Coarse lung extraction, left/right separation by shortest paths to the
//! labeled main bronchi, and per-lung refinement.

use std::path::Path;

use serde::Serialize;

use crate::airway::AirwayTree;
use crate::error::{Error, Result};
use crate::imageops::{
    city_block_distance, farid_gradient, fill_holes_3d, label_components, morphological_close, otsu_threshold,
    percentile, StructuringElement,
};
use crate::shortest_path::dijkstra;
use crate::volume::{labels, Connectivity, Grid, LabelVolume, Mask, Volume, Volume3D};

/// Components smaller than this fraction of the largest are dropped.
pub const MIN_RELATIVE_COMPONENT: f64 = 0.10;
/// The largest component must cover at least this fraction of the volume.
pub const MIN_LUNG_FRACTION: f64 = 0.01;

/// Otsu threshold, removal of air connected to the lateral faces, size
/// filtering and hole filling.
///
/// Components touching only the top or bottom slice are kept: the trachea
/// leaves the volume through the top slice and joins both lungs.
pub fn coarse_lung_mask(vol: &Volume3D, otsu_bins: usize) -> Result<Mask> {
    let th = otsu_threshold(vol, otsu_bins)? as f32;
    let below = vol.map(|v| v < th);
    let comps = label_components(&below, Connectivity::N6);
    let grid = *vol.grid();
    let [nx, ny, _] = grid.dims;
    let mut lateral = vec![false; comps.count() + 1];
    for (o, &id) in comps.labels.data().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let x = grid.index_of(o);
        if x.i == 0 || x.j == 0 || x.i == nx - 1 || x.j == ny - 1 {
            lateral[id as usize] = true;
        }
    }
    let inner: Vec<(u32, usize)> = (1..=comps.count() as u32)
        .filter(|&id| !lateral[id as usize])
        .map(|id| (id, comps.sizes[id as usize - 1]))
        .collect();
    let largest = inner.iter().map(|&(_, s)| s).max().unwrap_or(0);
    if (largest as f64) < MIN_LUNG_FRACTION * grid.len() as f64 {
        return Err(Error::NoLungComponent);
    }
    let mut keep = vec![false; comps.count() + 1];
    for &(id, s) in &inner {
        keep[id as usize] = s as f64 >= MIN_RELATIVE_COMPONENT * largest as f64;
    }
    let mask = comps.labels.map(|id| keep[id as usize]);
    Ok(fill_holes_3d(&mask))
}

/// Weights of the lung separation cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub gradient: f64,
    pub mask: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            gradient: 0.8,
            mask: 0.2,
        }
    }
}

/// Per-voxel traversal cost; `+inf` outside the lung-without-airway region.
#[derive(Clone, Debug, PartialEq)]
pub struct PathCostField {
    pub grid: Grid,
    pub cost: Vec<f64>,
}

impl PathCostField {
    pub fn traversable(&self, offset: usize) -> bool {
        self.cost[offset].is_finite()
    }
}

/// Gradient magnitude normalized by its 99th percentile over `region`,
/// clipped to `[0, 1]`; zero where the percentile is zero.
pub fn normalized_gradient(vol: &Volume3D, region: &Mask) -> Result<Vec<f64>> {
    let mag = farid_gradient(vol)?.magnitude();
    let mut inside: Vec<f32> = mag
        .data()
        .iter()
        .zip(region.data())
        .filter(|&(_, &m)| m)
        .map(|(&g, _)| g)
        .collect();
    let p99 = percentile(&mut inside, 99.0).unwrap_or(0.0) as f64;
    Ok(mag
        .data()
        .iter()
        .map(|&g| if p99 > 0.0 { (g as f64 / p99).min(1.0) } else { 0.0 })
        .collect())
}

/// `w_g * g_hat + w_m` on `coarse \ airway`, `+inf` elsewhere.
pub fn build_cost_field(vol: &Volume3D, coarse: &Mask, airway: &Mask, w: CostWeights) -> Result<PathCostField> {
    vol.same_dims(coarse)?;
    vol.same_dims(airway)?;
    let region = Volume::new(
        *vol.grid(),
        coarse
            .data()
            .iter()
            .zip(airway.data())
            .map(|(&c, &a)| c && !a)
            .collect(),
    )?;
    if region.count() == 0 {
        return Err(Error::EmptyMask("lung region without airways"));
    }
    let g = normalized_gradient(vol, &region)?;
    let cost = region
        .data()
        .iter()
        .zip(&g)
        .map(|(&r, &g)| if r { w.gradient * g + w.mask } else { f64::INFINITY })
        .collect();
    Ok(PathCostField {
        grid: *vol.grid(),
        cost,
    })
}

/// Left/right lung labels (0, 2, 3) with the count of unreachable voxels.
#[derive(Clone, Debug)]
pub struct LungLabels {
    pub labels: LabelVolume,
    pub unreachable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LungStats {
    pub voxels: usize,
    /// Inclusive voxel bounds `[[i, j, k] min, [i, j, k] max]`, absent for an empty lung.
    pub bbox: Option<[[usize; 3]; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LungSummary {
    pub left: LungStats,
    pub right: LungStats,
    pub unreachable: usize,
}

pub fn bounding_box(mask: &Mask) -> Option<[[usize; 3]; 2]> {
    let grid = mask.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (o, &m) in mask.data().iter().enumerate() {
        if m {
            any = true;
            let x = grid.index_of(o).as_array();
            for a in 0..3 {
                lo[a] = lo[a].min(x[a]);
                hi[a] = hi[a].max(x[a]);
            }
        }
    }
    any.then_some([lo, hi])
}

impl LungLabels {
    pub fn summary(&self) -> LungSummary {
        let stats = |l: u8| {
            let m = self.labels.mask_of(l);
            LungStats {
                voxels: m.count(),
                bbox: bounding_box(&m),
            }
        };
        LungSummary {
            left: stats(labels::LEFT),
            right: stats(labels::RIGHT),
            unreachable: self.unreachable,
        }
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Two-source Dijkstra over N6 from the left and right bronchus voxels;
/// every traversable voxel takes the label of the cheaper source (ties left).
pub fn split_lungs(cost: &PathCostField, airway: &AirwayTree) -> Result<LungLabels> {
    if airway.labels.grid().dims != cost.grid.dims {
        return Err(Error::DimMismatch(airway.labels.grid().dims, cost.grid.dims));
    }
    let sources: Vec<(usize, u32)> = airway
        .voxels_of(labels::LEFT)
        .into_iter()
        .map(|o| (o, labels::LEFT as u32))
        .chain(
            airway
                .voxels_of(labels::RIGHT)
                .into_iter()
                .map(|o| (o, labels::RIGHT as u32)),
        )
        .collect();
    split_from_sources(cost, &sources)
}

/// [`split_lungs`] with explicit `(offset, label)` sources.
pub fn split_from_sources(cost: &PathCostField, sources: &[(usize, u32)]) -> Result<LungLabels> {
    let sp = dijkstra(&cost.grid, &cost.cost, sources, Connectivity::N6);
    let mut out = vec![labels::BACKGROUND; cost.grid.len()];
    let mut unreachable = 0;
    for o in 0..cost.grid.len() {
        if !cost.traversable(o) {
            continue;
        }
        if sp.reached(o) {
            out[o] = sp.label[o] as u8;
        } else {
            unreachable += 1;
        }
    }
    if unreachable > 0 {
        log::warn!("{unreachable} lung voxels are unreachable from both main bronchi");
    }
    Ok(LungLabels {
        labels: LabelVolume::from_volume(Volume::new(cost.grid, out)?)?,
        unreachable,
    })
}

/// Removes the airway, closes each lung separately and resolves overlaps by
/// city-block distance to the pre-closing lungs (ties left).
pub fn refine_lungs(lungs: &LungLabels, airway: &Mask, closing_iterations: usize) -> Result<LungLabels> {
    lungs.labels.volume().same_dims(airway)?;
    let grid = *airway.grid();
    let lung = |l: u8| -> Mask {
        Volume::new(
            grid,
            lungs
                .labels
                .data()
                .iter()
                .zip(airway.data())
                .map(|(&v, &a)| v == l && !a)
                .collect(),
        )
        .expect("grid length")
    };
    let (left, right) = (lung(labels::LEFT), lung(labels::RIGHT));
    let (cl, cr) = rayon::join(
        || morphological_close(&left, StructuringElement::Star6, closing_iterations),
        || morphological_close(&right, StructuringElement::Star6, closing_iterations),
    );
    let overlap = cl.data().iter().zip(cr.data()).any(|(&a, &b)| a && b);
    let (dl, dr) = if overlap {
        (Some(city_block_distance(&left)), Some(city_block_distance(&right)))
    } else {
        (None, None)
    };
    let out = (0..grid.len())
        .map(|o| {
            if airway.data()[o] {
                return labels::BACKGROUND;
            }
            match (cl.data()[o], cr.data()[o]) {
                (true, false) => labels::LEFT,
                (false, true) => labels::RIGHT,
                (true, true) => {
                    let (a, b) = (dl.as_ref().unwrap().data()[o], dr.as_ref().unwrap().data()[o]);
                    if a <= b {
                        labels::LEFT
                    } else {
                        labels::RIGHT
                    }
                }
                (false, false) => labels::BACKGROUND,
            }
        })
        .collect();
    Ok(LungLabels {
        labels: LabelVolume::from_volume(Volume::new(grid, out)?)?,
        unreachable: lungs.unreachable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelIndex;

    fn volume<T: Copy>(dims: [usize; 3], f: impl Fn(f64, f64, f64) -> T) -> Volume<T> {
        let g = Grid::unit(dims).unwrap();
        let data = (0..g.len())
            .map(|o| {
                let v = g.index_of(o).as_f64();
                f(v[0], v[1], v[2])
            })
            .collect();
        Volume::new(g, data).unwrap()
    }

    fn ellipsoid(p: (f64, f64, f64), c: [f64; 3], r: [f64; 3]) -> bool {
        ((p.0 - c[0]) / r[0]).powi(2) + ((p.1 - c[1]) / r[1]).powi(2) + ((p.2 - c[2]) / r[2]).powi(2) <= 1.0
    }

    const L: ([f64; 3], [f64; 3]) = ([18.0, 24.0, 20.0], [9.0, 12.0, 14.0]);
    const R: ([f64; 3], [f64; 3]) = ([42.0, 24.0, 20.0], [9.0, 12.0, 14.0]);

    fn torso(with_vessels: bool) -> Volume3D {
        volume([60, 48, 40], |i, j, k| {
            let p = (i, j, k);
            if with_vessels && ((i - 18.0).powi(2) + (j - 24.0).powi(2) + (k - 20.0).powi(2) <= 4.0) {
                300.0
            } else if ellipsoid(p, L.0, L.1) || ellipsoid(p, R.0, R.1) {
                -850.0
            } else if ellipsoid(p, [30.0, 24.0, 20.0], [29.0, 22.0, 40.0]) {
                40.0
            } else {
                -1000.0
            }
        })
    }

    #[test]
    fn coarse_mask_is_the_two_ellipsoids() {
        for vessels in [false, true] {
            let m = coarse_lung_mask(&torso(vessels), 256).unwrap();
            let oracle = volume([60, 48, 40], |i, j, k| {
                ellipsoid((i, j, k), L.0, L.1) || ellipsoid((i, j, k), R.0, R.1)
            });
            assert_eq!(m, oracle, "vessels {vessels}");
        }
    }

    #[test]
    fn uniform_volume_has_no_lungs() {
        let v = volume([10, 10, 10], |_, _, _| 40.0f32);
        assert!(coarse_lung_mask(&v, 256).is_err());
    }

    #[test]
    fn cost_field_values() {
        let dims = [12, 12, 12];
        let v = volume(dims, |i, _, _| if i < 6.0 { -850.0f32 } else { -350.0 });
        let coarse = volume(dims, |_, _, _| true);
        let mut airway = volume(dims, |_, _, _| false);
        airway.set(VoxelIndex::new(1, 1, 1), true);
        let c = build_cost_field(&v, &coarse, &airway, CostWeights::default()).unwrap();
        let g = c.grid;
        assert_eq!(c.cost[g.offset(1, 1, 1)], f64::INFINITY);
        assert!((c.cost[g.offset(2, 6, 6)] - 0.2).abs() < 1e-12);
        assert!((c.cost[g.offset(5, 6, 6)] - 1.0).abs() < 1e-12);

        let flat = volume(dims, |_, _, _| -850.0f32);
        let c = build_cost_field(&flat, &coarse, &volume(dims, |_, _, _| false), CostWeights::default()).unwrap();
        assert!(c.cost.iter().all(|&x| (x - 0.2).abs() < 1e-12));
        assert!(build_cost_field(&flat, &volume(dims, |_, _, _| false), &airway, CostWeights::default()).is_err());
    }

    fn uniform_cost(region: &Mask) -> PathCostField {
        PathCostField {
            grid: *region.grid(),
            cost: region
                .data()
                .iter()
                .map(|&m| if m { 0.2 } else { f64::INFINITY })
                .collect(),
        }
    }

    #[test]
    fn disjoint_blobs_follow_membership() {
        let dims = [30, 10, 10];
        let region = volume(dims, |i, _, _| i < 12.0 || i > 17.0);
        let c = uniform_cost(&region);
        let g = c.grid;
        let l = split_from_sources(&c, &[(g.offset(2, 5, 5), 2), (g.offset(27, 5, 5), 3)]).unwrap();
        for o in 0..g.len() {
            let x = g.index_of(o);
            let want = if x.i < 12 {
                2
            } else if x.i > 17 {
                3
            } else {
                0
            };
            assert_eq!(l.labels.data()[o], want);
        }
        assert_eq!(l.unreachable, 0);
    }

    #[test]
    fn symmetric_blob_splits_at_midplane() {
        let dims = [31, 9, 9];
        let region = volume(dims, |_, _, _| true);
        let c = uniform_cost(&region);
        let g = c.grid;
        let l = split_from_sources(&c, &[(g.offset(0, 4, 4), 2), (g.offset(30, 4, 4), 3)]).unwrap();
        let right_min = (0..g.len())
            .filter(|&o| l.labels.data()[o] == 3)
            .map(|o| g.index_of(o).i)
            .min()
            .unwrap();
        let left_max = (0..g.len())
            .filter(|&o| l.labels.data()[o] == 2)
            .map(|o| g.index_of(o).i)
            .max()
            .unwrap();
        assert!((15..=16).contains(&right_min) && (14..=15).contains(&left_max));
    }

    #[test]
    fn septum_guides_the_split() {
        // merged blob, thin high-gradient septum at i = 15, off-center sources
        let dims = [40, 16, 16];
        let v = volume(dims, |i, _, _| if i == 15.0 { -400.0f32 } else { -850.0 });
        let coarse = volume(dims, |_, _, _| true);
        let none = volume(dims, |_, _, _| false);
        let c = build_cost_field(&v, &coarse, &none, CostWeights::default()).unwrap();
        let g = c.grid;
        let l = split_from_sources(&c, &[(g.offset(3, 8, 8), 2), (g.offset(22, 8, 8), 3)]).unwrap();
        let wrong = (0..g.len())
            .filter(|&o| {
                // septum voxels themselves may go either way
                let i = g.index_of(o).i;
                let want = if i < 15 { 2 } else { 3 };
                i != 15 && l.labels.data()[o] != want
            })
            .count();
        assert!((wrong as f64) <= 0.02 * g.len() as f64, "{wrong}");
    }

    fn labels_from(dims: [usize; 3], f: impl Fn(f64, f64, f64) -> u8) -> LungLabels {
        LungLabels {
            labels: LabelVolume::from_volume(volume(dims, f)).unwrap(),
            unreachable: 0,
        }
    }

    #[test]
    fn refine_closes_holes_and_excludes_airway() {
        let dims = [40, 20, 20];
        let input = labels_from(dims, |i, j, k| {
            let hole = (j - 10.0).abs() <= 1.0 && (k - 10.0).abs() <= 1.0 && (i - 8.0).abs() <= 1.0;
            if (2.0..=18.0).contains(&i) && (3.0..=16.0).contains(&j) && (3.0..=16.0).contains(&k) && !hole {
                2
            } else if (21.0..=37.0).contains(&i) && (3.0..=16.0).contains(&j) && (3.0..=16.0).contains(&k) {
                3
            } else {
                0
            }
        });
        let mut airway = volume(dims, |_, _, _| false);
        airway.set(VoxelIndex::new(30, 10, 10), true);
        let out = refine_lungs(&input, &airway, 10).unwrap();
        assert_eq!(out.labels.get(VoxelIndex::new(8, 10, 10)), 2);
        assert_eq!(out.labels.get(VoxelIndex::new(30, 10, 10)), 0);
        assert_eq!(out.labels.get(VoxelIndex::new(19, 10, 10)), 0);
    }

    #[test]
    fn refine_resolves_collisions() {
        // left lung is a fork whose prongs enclose a finger of the right lung
        let dims = [44, 24, 12];
        let input = labels_from(dims, |i, j, k| {
            if !(2.0..=9.0).contains(&k) {
                return 0;
            }
            let prongs = (2.0..=20.0).contains(&i) && ((2.0..=6.0).contains(&j) || (17.0..=21.0).contains(&j));
            let back = (2.0..=5.0).contains(&i) && (2.0..=21.0).contains(&j);
            let finger = (11.0..=40.0).contains(&i) && (10.0..=13.0).contains(&j);
            let body = (30.0..=40.0).contains(&i) && (2.0..=21.0).contains(&j);
            if prongs || back {
                2
            } else if finger || body {
                3
            } else {
                0
            }
        });
        let airway = volume(dims, |_, _, _| false);
        let out = refine_lungs(&input, &airway, 10).unwrap();
        for o in 0..out.labels.data().len() {
            let a = input.labels.data()[o];
            if a != 0 {
                assert_eq!(out.labels.data()[o], a);
            }
        }
        // the channel between prong and finger is claimed by whichever lung is nearer
        assert_eq!(out.labels.get(VoxelIndex::new(15, 9, 5)), 3);
        assert_eq!(out.labels.get(VoxelIndex::new(15, 7, 5)), 2);
    }

    #[test]
    fn summary_json() {
        let l = labels_from([6, 6, 6], |i, _, _| if i < 2.0 { 2 } else { 0 });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        l.write_summary(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["left"]["voxels"], 72);
        assert_eq!(v["left"]["bbox"][1][0], 1);
        assert!(v["right"]["bbox"].is_null());
    }
}
