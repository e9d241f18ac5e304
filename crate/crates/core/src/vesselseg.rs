//! Radius estimation by spherical sampling and painting of the coarse
//! vessel segmentation.

use std::path::Path;

use rayon::prelude::*;

use crate::centerline::CenterlineTree;
use crate::error::{Error, Result};
use crate::volume::{labels, Grid, LabelVolume, Volume, Volume3D};

pub const SPHERE_POINTS: usize = 48;

/// Radius estimation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusParams {
    /// Tested radii in voxels, strictly increasing.
    pub radii: Vec<f64>,
    pub drop_threshold: f64,
    pub air_reference_hu: f64,
    /// Nodes whose smallest-sphere mean is below this intensity are not
    /// inside a vessel and get the smallest radius.
    pub vessel_min_hu: f64,
}

impl Default for RadiusParams {
    fn default() -> Self {
        RadiusParams {
            radii: radius_range(1.0, 10.0, 0.5),
            drop_threshold: 0.6,
            air_reference_hu: -1000.0,
            vessel_min_hu: -500.0,
        }
    }
}

/// `min, min + step, ...` up to and including `max` (with a small tolerance).
pub fn radius_range(min: f64, max: f64, step: f64) -> Vec<f64> {
    let n = ((max - min) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| min + i as f64 * step).collect()
}

/// Unit directions of the point set: the upper half of a 48-point spherical
/// Fibonacci lattice and its antipodes, so the centroid is exactly the center.
fn unit_sphere() -> [[f64; 3]; SPHERE_POINTS] {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts = [[0f64; 3]; SPHERE_POINTS];
    let half = SPHERE_POINTS / 2;
    for i in 0..half {
        let z = 1.0 - (2 * i + 1) as f64 / SPHERE_POINTS as f64;
        let rho = (1.0 - z * z).sqrt();
        let (s, c) = (golden * i as f64).sin_cos();
        pts[i] = [rho * c, rho * s, z];
        pts[i + half] = [-rho * c, -rho * s, -z];
    }
    pts
}

/// 48 points on the sphere of `radius` voxels about `center`.
pub fn sphere_samples(center: [f64; 3], radius: f64) -> Vec<[f64; 3]> {
    unit_sphere()
        .iter()
        .map(|u| [0, 1, 2].map(|a| center[a] + radius * u[a]))
        .collect()
}

/// Normalized sphere means and the chosen radius at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusProfile {
    pub node_id: usize,
    pub radii: Vec<f64>,
    /// `v(r)`; exactly 1 at the smallest radius.
    pub values: Vec<f64>,
    pub radius_voxels: f64,
    pub radius_mm: f64,
    /// `v` at the first radius below the threshold, or at the last radius.
    pub drop_value: f64,
    /// Mean intensity on the smallest sphere.
    pub center_hu: f64,
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() || radii.iter().any(|&r| !(r > 0.0)) || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!(
            "radii must be positive and increasing: {radii:?}"
        )));
    }
    Ok(())
}

/// Geometric mean of the voxel spacing, used to convert voxel radii to mm.
pub fn mean_spacing(grid: &Grid) -> f64 {
    grid.spacing.iter().product::<f64>().cbrt()
}

/// Tests each radius in order; the chosen radius is the last one before the
/// normalized mean `(mean(r) - air) / (mean(r0) - air)` first drops below
/// the threshold. Nodes darker than `vessel_min_hu` get the smallest radius.
pub fn estimate_radius(vol: &Volume3D, center: [f64; 3], params: &RadiusParams) -> Result<RadiusProfile> {
    check_radii(&params.radii)?;
    let dims = vol.dims();
    let r_max = *params.radii.last().expect("non-empty");
    for a in 0..3 {
        if center[a] - r_max < 0.0 || center[a] + r_max > (dims[a] - 1) as f64 {
            return Err(Error::OutOfSupport {
                index: center.map(|c| c.round().max(0.0) as usize),
                dims,
            });
        }
    }
    Ok(profile_unchecked(vol, center, &params.radii, params))
}

fn profile_unchecked(vol: &Volume3D, center: [f64; 3], radii: &[f64], params: &RadiusParams) -> RadiusProfile {
    let air = params.air_reference_hu;
    let means: Vec<f64> = radii
        .iter()
        .map(|&r| {
            let pts = sphere_samples(center, r);
            pts.iter().map(|&p| vol.sample(p)).sum::<f64>() / pts.len() as f64
        })
        .collect();
    let base = means[0] - air;
    let values: Vec<f64> = means
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if i == 0 {
                1.0
            } else if base > 0.0 {
                (m - air) / base
            } else {
                0.0
            }
        })
        .collect();
    let no_vessel = base <= 0.0 || means[0] < params.vessel_min_hu;
    let first_drop = values.iter().position(|&v| v < params.drop_threshold);
    let chosen = match first_drop {
        _ if no_vessel => 0,
        Some(i) => i.saturating_sub(1),
        None => radii.len() - 1,
    };
    let drop_value = values[first_drop.unwrap_or(values.len() - 1)];
    RadiusProfile {
        node_id: 0,
        radii: radii.to_vec(),
        values,
        radius_voxels: radii[chosen],
        radius_mm: radii[chosen] * mean_spacing(vol.grid()),
        drop_value,
        center_hu: means[0],
    }
}

/// Profiles for every node of `tree`. Near the border the radius list is
/// truncated to the radii that fit; if none fits the smallest radius is used.
pub fn estimate_tree_radii(vol: &Volume3D, tree: &CenterlineTree, params: &RadiusParams) -> Result<Vec<RadiusProfile>> {
    check_radii(&params.radii)?;
    let dims = vol.dims();
    Ok(tree
        .nodes
        .par_iter()
        .map(|n| {
            let c = n.ijk.map(|v| v as f64);
            let margin = (0..3)
                .map(|a| c[a].min((dims[a] - 1) as f64 - c[a]))
                .fold(f64::INFINITY, f64::min);
            let fit: Vec<f64> = params.radii.iter().copied().filter(|&r| r <= margin).collect();
            let mut p = if fit.is_empty() {
                RadiusProfile {
                    node_id: 0,
                    radii: vec![params.radii[0]],
                    values: vec![1.0],
                    radius_voxels: params.radii[0],
                    radius_mm: params.radii[0] * mean_spacing(vol.grid()),
                    drop_value: 1.0,
                    center_hu: vol.sample(c),
                }
            } else {
                profile_unchecked(vol, c, &fit, params)
            };
            p.node_id = n.id;
            p
        })
        .collect())
}

/// Writes `lung, node_id, radius_voxels, radius_mm, drop_value` rows.
pub fn save_profiles_csv(rows: &[(u8, &RadiusProfile)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["lung", "node_id", "radius_voxels", "radius_mm", "drop_value"])
        .map_err(err)?;
    for (lung, p) in rows {
        w.write_record([
            lung.to_string(),
            p.node_id.to_string(),
            p.radius_voxels.to_string(),
            p.radius_mm.to_string(),
            p.drop_value.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ball to paint: storage offset of the center, radius in voxels and the
/// lung label it is clipped to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    pub center: usize,
    pub radius: f64,
    pub lung: u8,
}

/// Union of balls (voxel centers within `radius`) clipped to each ball's lung,
/// labeled as vessel.
pub fn paint_balls(lungs: &LabelVolume, balls: &[Ball]) -> Result<LabelVolume> {
    paint(lungs, balls, |_, _| true)
}

/// Paints the voxels of each ball accepted by `keep(ball index, offset)`.
fn paint(lungs: &LabelVolume, balls: &[Ball], keep: impl Fn(usize, usize) -> bool + Sync) -> Result<LabelVolume> {
    let grid = *lungs.grid();
    let dims = grid.dims;
    let plane = dims[0] * dims[1];
    let mut out = vec![labels::BACKGROUND; grid.len()];
    // gather balls per slice so slices can be painted independently
    let mut per_slice: Vec<Vec<usize>> = vec![Vec::new(); dims[2]];
    for (n, b) in balls.iter().enumerate() {
        let c = grid.index_of(b.center);
        let r = b.radius.floor() as usize;
        for k in c.k.saturating_sub(r)..=(c.k + r).min(dims[2] - 1) {
            per_slice[k].push(n);
        }
    }
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slice)| {
        for &n in &per_slice[k] {
            let b = &balls[n];
            let c = grid.index_of(b.center);
            let r = b.radius.floor() as usize;
            let dk = k as f64 - c.k as f64;
            for j in c.j.saturating_sub(r)..=(c.j + r).min(dims[1] - 1) {
                for i in c.i.saturating_sub(r)..=(c.i + r).min(dims[0] - 1) {
                    let di = i as f64 - c.i as f64;
                    let dj = j as f64 - c.j as f64;
                    let o = k * plane + j * dims[0] + i;
                    if di * di + dj * dj + dk * dk <= b.radius * b.radius && lungs.data()[o] == b.lung && keep(n, o) {
                        slice[j * dims[0] + i] = labels::VESSEL;
                    }
                }
            }
        }
    });
    LabelVolume::from_volume(Volume::new(grid, out)?)
}

fn check_profiles(trees: &[CenterlineTree], profiles: &[Vec<RadiusProfile>]) -> Result<()> {
    if trees.len() != profiles.len() || trees.iter().zip(profiles).any(|(t, p)| t.nodes.len() != p.len()) {
        return Err(Error::InvalidParameter(
            "one radius profile per tree node is required".into(),
        ));
    }
    Ok(())
}

/// Brightest samples of the smallest sphere averaged into the peak intensity.
const PEAK_SAMPLES: usize = 12;

/// Half-contrast boundary refinement of the painted balls. Each node with a
/// vessel-like center paints the voxels within `radius + band` that are at
/// least half way from the local background to the local peak. The peak is
/// the mean of the brightest quarter of the smallest sphere, so nodes just
/// off the axis still see the vessel core; the background is the median
/// over the sphere of twice the chosen radius. Nodes darker than
/// `vessel_min_hu` paint nothing.
pub fn refine_segmentation(
    vol: &Volume3D,
    lungs: &LabelVolume,
    trees: &[CenterlineTree],
    profiles: &[Vec<RadiusProfile>],
    params: &RadiusParams,
    band: f64,
) -> Result<LabelVolume> {
    check_profiles(trees, profiles)?;
    vol.same_dims(lungs.volume())?;
    let grid = *lungs.grid();
    let (balls, thresholds): (Vec<Ball>, Vec<f32>) = trees
        .iter()
        .zip(profiles)
        .flat_map(|(t, ps)| t.nodes.iter().zip(ps).map(move |(n, p)| (t.lung, n, p)))
        .filter(|(_, _, p)| p.center_hu >= params.vessel_min_hu)
        .filter_map(|(lung, n, p)| {
            let c = n.ijk.map(|v| v as f64);
            let mut ring: Vec<f64> = sphere_samples(c, 2.0 * p.radius_voxels)
                .iter()
                .map(|&q| vol.sample(q))
                .collect();
            ring.sort_by(f64::total_cmp);
            let background = 0.5 * (ring[23] + ring[24]);
            let mut inner: Vec<f64> = sphere_samples(c, p.radii[0]).iter().map(|&q| vol.sample(q)).collect();
            inner.sort_by(|a, b| b.total_cmp(a));
            let peak = inner[..PEAK_SAMPLES].iter().sum::<f64>() / PEAK_SAMPLES as f64;
            (peak > background).then(|| {
                (
                    Ball {
                        center: grid.offset(n.ijk[0], n.ijk[1], n.ijk[2]),
                        radius: p.radius_voxels + band,
                        lung,
                    },
                    (0.5 * (peak + background)) as f32,
                )
            })
        })
        .unzip();
    let data = vol.data();
    paint(lungs, &balls, |n, o| data[o] >= thresholds[n])
}

/// Paints every tree node with its estimated radius. `profiles[t][n]`
/// belongs to node `n` of tree `t`.
pub fn paint_segmentation(
    lungs: &LabelVolume,
    trees: &[CenterlineTree],
    profiles: &[Vec<RadiusProfile>],
) -> Result<LabelVolume> {
    check_profiles(trees, profiles)?;
    let grid = *lungs.grid();
    let balls: Vec<Ball> = trees
        .iter()
        .zip(profiles)
        .flat_map(|(t, ps)| {
            t.nodes.iter().zip(ps).map(move |(n, p)| Ball {
                center: grid.offset(n.ijk[0], n.ijk[1], n.ijk[2]),
                radius: p.radius_voxels,
                lung: t.lung,
            })
        })
        .collect();
    paint_balls(lungs, &balls)
}
