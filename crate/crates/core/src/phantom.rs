//! Synthetic tube phantoms with exact ground truth, a torso phantom for
//! end-to-end runs, and seeded Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{labels, Grid, LabelVolume, Mask, Volume, Volume3D, VoxelIndex};

/// The bundled 128^3 three-generation tree (radii 4, 3, 2 voxels).
pub const BRANCHING_TREE_JSON: &str = include_str!("../data/branching_tree.json");

/// One tube: a polyline with a radius per control point, in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub points: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
    pub hu: f64,
}

impl TubeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Phantom("a tube needs at least 2 control points".into()));
        }
        if self.radii.len() != self.points.len() {
            return Err(Error::Phantom(format!(
                "{} radii for {} control points",
                self.radii.len(),
                self.points.len()
            )));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Phantom("tube radii must be positive".into()));
        }
        Ok(())
    }
}

/// Phantom description as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_hu: f64,
    #[serde(default)]
    pub tubes: Vec<TubeSpec>,
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Phantom(format!("malformed phantom spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn branching_tree() -> Self {
        Self::from_json(BRANCHING_TREE_JSON).expect("bundled phantom spec parses")
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }
}

/// Seeded i.i.d. Gaussian noise; `std` is in HU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub std: f64,
    pub seed: u64,
}

/// Rasterized phantom with its ground truth.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume3D,
    /// Foreground voxels carry `labels::VESSEL`.
    pub truth: LabelVolume,
    /// One polyline per tube, sampled at voxel pitch (mm).
    pub centerlines: Vec<Vec<[f64; 3]>>,
    /// Control points shared by three or more tube ends or segments (mm).
    pub branch_points: Vec<[f64; 3]>,
}

impl Phantom {
    pub fn mask(&self) -> Mask {
        self.truth.mask_of(labels::VESSEL)
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    ra: f64,
    rb: f64,
    hu: f64,
}

impl Segment {
    /// Distance to the segment and the radius interpolated at the closest point.
    fn distance(&self, p: [f64; 3]) -> (f64, f64) {
        let ab = sub(self.b, self.a);
        let ap = sub(p, self.a);
        let len2 = dot(ab, ab);
        let t = if len2 > 0.0 {
            (dot(ap, ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [self.a[0] + t * ab[0], self.a[1] + t * ab[1], self.a[2] + t * ab[2]];
        let d = sub(p, q);
        (dot(d, d).sqrt(), self.ra + t * (self.rb - self.ra))
    }

    fn max_radius(&self) -> f64 {
        self.ra.max(self.rb)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn segments(tubes: &[TubeSpec]) -> Vec<Segment> {
    tubes
        .iter()
        .flat_map(|t| {
            (1..t.points.len()).map(move |s| Segment {
                a: t.points[s - 1],
                b: t.points[s],
                ra: t.radii[s - 1],
                rb: t.radii[s],
                hu: t.hu,
            })
        })
        .collect()
}

/// Per-voxel coverage of a set of segments: ramp fraction, tube HU and the
/// inside flag. The ramp is linear over one voxel centred on the surface.
struct Coverage {
    fraction: Vec<f32>,
    hu: Vec<f32>,
    inside: Vec<bool>,
}

fn coverage(grid: &Grid, segs: &[Segment]) -> Coverage {
    let [nx, ny, _] = grid.dims;
    let sp = grid.spacing;
    let width = sp[0].min(sp[1]).min(sp[2]);
    let slice = nx * ny;
    let mut fraction = vec![0f32; grid.len()];
    let mut hu = vec![0f32; grid.len()];
    let mut inside = vec![false; grid.len()];
    fraction
        .par_chunks_mut(slice)
        .zip(hu.par_chunks_mut(slice))
        .zip(inside.par_chunks_mut(slice))
        .enumerate()
        .for_each(|(k, ((frac, hu), ins))| {
            let z = grid.origin[2] + k as f64 * sp[2];
            for s in segs {
                let reach = s.max_radius() + width;
                if z < s.a[2].min(s.b[2]) - reach || z > s.a[2].max(s.b[2]) + reach {
                    continue;
                }
                let range = |axis: usize, n: usize| {
                    let lo = ((s.a[axis].min(s.b[axis]) - reach - grid.origin[axis]) / sp[axis])
                        .floor()
                        .max(0.0);
                    let hi = ((s.a[axis].max(s.b[axis]) + reach - grid.origin[axis]) / sp[axis]).ceil();
                    (lo as usize, (hi.max(-1.0) as isize + 1).clamp(0, n as isize) as usize)
                };
                let (i0, i1) = range(0, nx);
                let (j0, j1) = range(1, ny);
                for j in j0..j1 {
                    for i in i0..i1 {
                        let p = grid.continuous_to_physical([i as f64, j as f64, k as f64]);
                        let (d, r) = s.distance(p);
                        let f = (0.5 - (d - r) / width).clamp(0.0, 1.0) as f32;
                        let o = j * nx + i;
                        if f > frac[o] {
                            frac[o] = f;
                            hu[o] = s.hu as f32;
                        }
                        if d <= r {
                            ins[o] = true;
                        }
                    }
                }
            }
        });
    Coverage { fraction, hu, inside }
}

/// Writes `base + f (tube - base)` rounded to whole HU wherever coverage is positive.
fn blend(data: &mut [f32], cov: &Coverage) {
    data.par_iter_mut().enumerate().for_each(|(o, v)| {
        let f = cov.fraction[o];
        if f > 0.0 {
            *v = (*v + f * (cov.hu[o] - *v)).round();
        }
    });
}

fn check_bounds(grid: &Grid, tubes: &[TubeSpec]) -> Result<()> {
    for (n, t) in tubes.iter().enumerate() {
        t.validate()?;
        for p in &t.points {
            let c = grid.physical_to_continuous(*p);
            let outside = (0..3).any(|a| !(c[a] >= -1e-9 && c[a] <= (grid.dims[a] - 1) as f64 + 1e-9));
            if outside {
                return Err(Error::Phantom(format!(
                    "tube {n} exits the volume at ({}, {}, {}) mm",
                    p[0], p[1], p[2]
                )));
            }
        }
    }
    Ok(())
}

fn sample_polyline(points: &[[f64; 3]], pitch: f64) -> Vec<[f64; 3]> {
    let mut out = vec![points[0]];
    for w in points.windows(2) {
        let d = sub(w[1], w[0]);
        let len = dot(d, d).sqrt();
        let n = (len / pitch).ceil().max(1.0) as usize;
        for s in 1..=n {
            let t = s as f64 / n as f64;
            out.push([w[0][0] + t * d[0], w[0][1] + t * d[1], w[0][2] + t * d[2]]);
        }
    }
    out
}

fn branch_points(tubes: &[TubeSpec]) -> Vec<[f64; 3]> {
    let key = |p: &[f64; 3]| p.map(f64::to_bits);
    let mut degree: BTreeMap<[u64; 3], ([f64; 3], usize)> = BTreeMap::new();
    for t in tubes {
        let last = t.points.len() - 1;
        for (n, p) in t.points.iter().enumerate() {
            let d = if n == 0 || n == last { 1 } else { 2 };
            degree.entry(key(p)).or_insert((*p, 0)).1 += d;
        }
    }
    degree.into_values().filter(|(_, d)| *d >= 3).map(|(p, _)| p).collect()
}

/// Rasterizes the tubes of `spec` over its background.
pub fn rasterize_tubes(spec: &PhantomSpec) -> Result<Phantom> {
    let grid = spec.grid()?;
    check_bounds(&grid, &spec.tubes)?;
    let segs = segments(&spec.tubes);
    let cov = coverage(&grid, &segs);
    let mut data = vec![spec.background_hu.round() as f32; grid.len()];
    blend(&mut data, &cov);
    let truth: Vec<u8> = cov
        .inside
        .iter()
        .map(|&i| if i { labels::VESSEL } else { labels::BACKGROUND })
        .collect();
    let pitch = spec.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Phantom {
        volume: Volume::new(grid.clone(), data)?,
        truth: LabelVolume::from_volume(Volume::new(grid, truth)?)?,
        centerlines: spec.tubes.iter().map(|t| sample_polyline(&t.points, pitch)).collect(),
        branch_points: branch_points(&spec.tubes),
    })
}

/// Adds seeded Gaussian noise. Each z-slice draws from its own ChaCha stream
/// so the result does not depend on how slices are scheduled. Values are
/// rounded to whole HU like a stored CT.
pub fn add_gaussian_noise(vol: &Volume3D, spec: NoiseSpec) -> Result<Volume3D> {
    if !(spec.std.is_finite() && spec.std >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise std must be >= 0, got {}",
            spec.std
        )));
    }
    if spec.std == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, spec.std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let [nx, ny, _] = vol.dims();
    let mut out = vol.clone();
    out.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slice)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            for v in slice {
                *v = (*v as f64 + normal.sample(&mut rng)).round() as f32;
            }
        });
    Ok(out)
}

/// Stem of a noise-sweep volume, e.g. `noise_std_hu_20`.
pub fn noise_label(std: f64) -> String {
    format!("noise_std_hu_{std}")
}

/// HU values of the torso phantom.
pub mod torso_hu {
    pub const AIR: f64 = -1000.0;
    pub const BODY: f64 = 40.0;
    pub const LUNG: f64 = -850.0;
    pub const HEART: f64 = 400.0;
    pub const VESSEL: f64 = 100.0;
}

/// Chest-like phantom: body, two lungs, trachea with main bronchi, heart and
/// one small vessel tree per lung.
#[derive(Clone, Debug)]
pub struct TorsoPhantom {
    pub volume: Volume3D,
    pub vessels: Mask,
    /// Lung labels of the noise-free phantom, vessels included.
    pub lungs: LabelVolume,
    pub heart: VoxelIndex,
    pub trachea_top: VoxelIndex,
}

pub const TORSO_DIMS: [usize; 3] = [112, 96, 96];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn tube(points: &[[f64; 3]], radius: f64, hu: f64) -> TubeSpec {
    TubeSpec {
        points: points.to_vec(),
        radii: vec![radius; points.len()],
        hu,
    }
}

/// Vessel tree of the lung on the low-x side; the other lung gets its mirror.
fn torso_vessels() -> Vec<TubeSpec> {
    let right = [
        tube(&[[44.0, 48.0, 46.0], [34.0, 48.0, 40.0]], 3.0, torso_hu::VESSEL),
        tube(&[[34.0, 48.0, 40.0], [24.0, 40.0, 26.0]], 2.0, torso_hu::VESSEL),
        tube(&[[34.0, 48.0, 40.0], [24.0, 58.0, 56.0]], 2.0, torso_hu::VESSEL),
    ];
    let mirror = |t: &TubeSpec| TubeSpec {
        points: t
            .points
            .iter()
            .map(|p| [(TORSO_DIMS[0] - 1) as f64 - p[0], p[1], p[2]])
            .collect(),
        ..t.clone()
    };
    let left: Vec<TubeSpec> = right.iter().map(mirror).collect();
    right.into_iter().chain(left).collect()
}

fn torso_airway() -> Vec<TubeSpec> {
    let top = (TORSO_DIMS[2] - 1) as f64;
    vec![
        tube(&[[55.5, 48.0, top + 2.0], [55.5, 48.0, 72.0]], 4.0, torso_hu::AIR),
        tube(&[[55.5, 48.0, 72.0], [38.0, 48.0, 58.0]], 3.0, torso_hu::AIR),
        tube(&[[55.5, 48.0, 72.0], [73.0, 48.0, 58.0]], 3.0, torso_hu::AIR),
    ]
}

/// Builds the torso phantom, optionally with noise. Low x is the patient's
/// right, so the airway split labels it `labels::RIGHT` without flipping.
pub fn torso_phantom(noise: Option<NoiseSpec>) -> Result<TorsoPhantom> {
    let grid = Grid::unit(TORSO_DIMS)?;
    let body = Ellipsoid {
        center: [55.5, 48.0, 48.0],
        radii: [52.0, 42.0, 60.0],
    };
    let lungs = [
        (
            labels::RIGHT,
            Ellipsoid {
                center: [32.0, 48.0, 44.0],
                radii: [18.0, 28.0, 34.0],
            },
        ),
        (
            labels::LEFT,
            Ellipsoid {
                center: [79.0, 48.0, 44.0],
                radii: [18.0, 28.0, 34.0],
            },
        ),
    ];
    let heart = Ellipsoid {
        center: [55.5, 52.0, 40.0],
        radii: [6.0, 10.0, 10.0],
    };
    let mut data = vec![0f32; grid.len()];
    let mut lung_labels = vec![labels::BACKGROUND; grid.len()];
    data.par_iter_mut()
        .zip(lung_labels.par_iter_mut())
        .enumerate()
        .for_each(|(o, (v, l))| {
            let p = grid.index_of(o).as_f64();
            *v = torso_hu::AIR as f32;
            if body.contains(p) {
                *v = torso_hu::BODY as f32;
            }
            for (label, e) in &lungs {
                if e.contains(p) {
                    *v = torso_hu::LUNG as f32;
                    *l = *label;
                }
            }
            if heart.contains(p) {
                *v = torso_hu::HEART as f32;
            }
        });
    let vessel_cov = coverage(&grid, &segments(&torso_vessels()));
    blend(&mut data, &vessel_cov);
    let airway_cov = coverage(&grid, &segments(&torso_airway()));
    blend(&mut data, &airway_cov);
    // airway lumen wins over vessels and lungs in the truth as well
    let vessels: Vec<bool> = (0..grid.len())
        .map(|o| vessel_cov.inside[o] && !airway_cov.inside[o] && lung_labels[o] != labels::BACKGROUND)
        .collect();
    for (o, l) in lung_labels.iter_mut().enumerate() {
        if airway_cov.inside[o] {
            *l = labels::BACKGROUND;
        }
    }
    let mut volume = Volume::new(grid.clone(), data)?;
    if let Some(n) = noise {
        volume = add_gaussian_noise(&volume, n)?;
    }
    Ok(TorsoPhantom {
        volume,
        vessels: Volume::new(grid.clone(), vessels)?,
        lungs: LabelVolume::from_volume(Volume::new(grid, lung_labels)?)?,
        heart: VoxelIndex::new(55, 52, 40),
        trachea_top: VoxelIndex::new(55, 48, TORSO_DIMS[2] - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dims: [usize; 3], tubes: Vec<TubeSpec>) -> PhantomSpec {
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            background_hu: -850.0,
            tubes,
        }
    }

    #[test]
    fn cylinder_volume_matches_analytic() {
        let t = tube(&[[20.0, 20.0, 5.0], [20.0, 20.0, 55.0]], 3.0, -50.0);
        let p = rasterize_tubes(&spec([40, 40, 61], vec![t])).unwrap();
        // drop the hemispherical caps from the count
        let body = (6..=55)
            .map(|k| {
                (0..40 * 40)
                    .filter(|o| p.truth.volume().at(o % 40, o / 40, k) == labels::VESSEL)
                    .count()
            })
            .sum::<usize>();
        let want = std::f64::consts::PI * 9.0 * 50.0;
        assert!((body as f64 - want).abs() / want < 0.03, "{body} vs {want}");
        assert_eq!(p.volume.at(20, 20, 30), -50.0);
        assert_eq!(p.volume.at(5, 5, 30), -850.0);
        // surface voxel sits half way up the ramp
        assert_eq!(p.volume.at(23, 20, 30), -450.0);
    }

    #[test]
    fn y_bifurcation_has_one_branch_point() {
        let j = [20.0, 20.0, 20.0];
        let tubes = vec![
            tube(&[[20.0, 20.0, 4.0], j], 2.0, 0.0),
            tube(&[j, [10.0, 20.0, 34.0]], 2.0, 0.0),
            tube(&[j, [30.0, 20.0, 34.0]], 2.0, 0.0),
        ];
        let p = rasterize_tubes(&spec([40, 40, 40], tubes)).unwrap();
        assert_eq!(p.branch_points, vec![j]);
        let bundled = rasterize_tubes(&PhantomSpec::branching_tree()).unwrap();
        assert_eq!(bundled.branch_points.len(), 3);
    }

    #[test]
    fn zero_tubes_is_background() {
        let p = rasterize_tubes(&spec([8, 8, 8], vec![])).unwrap();
        assert!(p.volume.data().iter().all(|&v| v == -850.0));
        assert_eq!(p.truth.count(labels::VESSEL), 0);
    }

    #[test]
    fn order_independent_and_bounded() {
        let a = tube(&[[5.0, 5.0, 5.0], [5.0, 5.0, 25.0]], 2.0, 0.0);
        let b = tube(&[[20.0, 20.0, 5.0], [25.0, 20.0, 25.0]], 3.0, 100.0);
        let p1 = rasterize_tubes(&spec([30, 30, 30], vec![a.clone(), b.clone()])).unwrap();
        let p2 = rasterize_tubes(&spec([30, 30, 30], vec![b, a.clone()])).unwrap();
        assert_eq!(p1.volume.data(), p2.volume.data());
        assert_eq!(p1.truth.data(), p2.truth.data());
        let out = tube(&[[5.0, 5.0, 5.0], [5.0, 5.0, 30.0]], 2.0, 0.0);
        assert!(matches!(
            rasterize_tubes(&spec([30, 30, 30], vec![out])),
            Err(Error::Phantom(_))
        ));
        let bad = TubeSpec { radii: vec![1.0], ..a };
        assert!(rasterize_tubes(&spec([30, 30, 30], vec![bad])).is_err());
    }

    #[test]
    fn centerline_sampled_at_voxel_pitch() {
        let t = tube(&[[2.0, 2.0, 2.0], [2.0, 2.0, 12.0], [8.0, 10.0, 12.0]], 1.0, 0.0);
        let p = rasterize_tubes(&spec([16, 16, 16], vec![t])).unwrap();
        let line = &p.centerlines[0];
        assert_eq!(line.len(), 21);
        for w in line.windows(2) {
            let d = sub(w[1], w[0]);
            assert!(dot(d, d).sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn noise_statistics_and_reproducibility() {
        let grid = Grid::unit([64, 64, 64]).unwrap();
        let vol = Volume::filled(grid, -850.0f32);
        assert_eq!(
            add_gaussian_noise(&vol, NoiseSpec { std: 0.0, seed: 1 })
                .unwrap()
                .data(),
            vol.data()
        );
        let spec = NoiseSpec { std: 40.0, seed: 7 };
        let a = add_gaussian_noise(&vol, spec).unwrap();
        let b = add_gaussian_noise(&vol, spec).unwrap();
        assert_eq!(a.data(), b.data());
        let n = a.len() as f64;
        let mean = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = a.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 40.0).abs() / 40.0 < 0.02, "std {}", var.sqrt());
        assert!((mean + 850.0).abs() < 3.0 * 40.0 / n.sqrt());
        let c = add_gaussian_noise(&vol, NoiseSpec { std: 40.0, seed: 8 }).unwrap();
        assert_ne!(a.data(), c.data());
        assert!(add_gaussian_noise(&vol, NoiseSpec { std: -1.0, seed: 0 }).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = PhantomSpec::branching_tree();
        assert_eq!(s.dims, [128; 3]);
        assert_eq!(s.tubes.len(), 7);
        let back = PhantomSpec::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            PhantomSpec::from_json("{\"dims\": [1, 2]}"),
            Err(Error::Phantom(_))
        ));
    }

    #[test]
    fn torso_layout() {
        let t = torso_phantom(None).unwrap();
        let v = &t.volume;
        assert_eq!(v.get(t.heart), torso_hu::HEART as f32);
        assert_eq!(v.get(t.trachea_top), -1000.0);
        assert_eq!(v.at(32, 48, 30), torso_hu::LUNG as f32);
        assert_eq!(v.at(0, 48, 48), -1000.0);
        assert_eq!(v.at(55, 20, 48), torso_hu::BODY as f32);
        assert!(t.vessels.count() > 1000);
        // vessels stay inside their lung
        for o in 0..v.len() {
            if t.vessels.data()[o] {
                assert_ne!(t.lungs.data()[o], labels::BACKGROUND);
            }
        }
        let right = t.lungs.mask_of(labels::RIGHT);
        let left = t.lungs.mask_of(labels::LEFT);
        assert!(right.at(32, 48, 44) && left.at(79, 48, 44));
    }
}
