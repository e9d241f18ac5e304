//! Multi-scale, multi-radius offset-medialness vessel enhancement.
//!
//! At every pyramid level the image is smoothed (`I^sigma`), the Hessian is
//! decomposed and voxels with two strongly negative eigenvalues (bright tube
//! cross-sections) are probed: the boundary gradient `B = sigma * grad I^sigma`
//! is sampled on circles of radius `r` in the cross-section plane, the median
//! radial component gives the raw response, a median-absolute-deviation
//! symmetry factor suppresses one-sided edges and the central gradient
//! magnitude is subtracted to suppress vessel borders. Level responses are
//! upsampled trilinearly and the maximum over levels and radii is kept.
//!
//! All quantities are expressed in level-local voxel units with `sigma = 1`
//! per level, so responses are directly comparable across levels.

use std::ops::Range;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageops::{
    self, farid_gradient_slab, gaussian_smooth_slab, hessian_clamped, GradientField, HessianKernels, Sym3, FARID_RADIUS,
};
use crate::volume::{
    labels, save_float_channels, save_metaimage, trilinear, Connectivity, Grid, LabelVolume, Mask, Volume, Volume3D,
};

/// Filter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub n_scales: usize,
    pub pyramid_factor: f64,
    /// Probe radii in level-local voxels, strictly increasing.
    pub radii: Vec<f64>,
    pub symmetry_exponent: f64,
    /// Smoothing of each level image, in level-local voxels.
    pub level_sigma: f64,
    /// Candidate floor for centerline extraction, as a fraction of the
    /// 99.9th percentile of the response over the volume.
    pub response_floor: f64,
    /// Full-resolution slices per processing tile; `None` processes the
    /// volume in one piece. Output does not depend on this value.
    pub tile_slices: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_scales: 4,
            pyramid_factor: imageops::PYRAMID_FACTOR,
            radii: vec![1.0, 1.3, 1.6, 1.9],
            symmetry_exponent: 1.5,
            level_sigma: 1.0,
            response_floor: 0.5,
            tile_slices: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 {
            return Err(Error::InvalidParameter("n_scales must be >= 1".into()));
        }
        if self.radii.is_empty()
            || self.radii.iter().any(|&r| !(r > 0.0))
            || self.radii.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidParameter(format!(
                "radii must be positive and strictly increasing: {:?}",
                self.radii
            )));
        }
        if !(self.pyramid_factor > 1.0) {
            return Err(Error::InvalidParameter("pyramid factor must exceed 1".into()));
        }
        if self.radii.len() * self.n_scales > 254 {
            return Err(Error::InvalidParameter("too many (scale, radius) pairs".into()));
        }
        if self.tile_slices == Some(0) {
            return Err(Error::InvalidParameter("tile_slices must be >= 1".into()));
        }
        Ok(())
    }
}

/// Eigen-decomposition of a symmetric 3x3 matrix, ordered `|e1| >= |e2| >= |e3|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenFrame {
    pub values: [f64; 3],
    /// `vectors[n]` is the unit eigenvector of `values[n]`; `vectors[2]`
    /// estimates the vessel direction.
    pub vectors: [[f64; 3]; 3],
}

impl EigenFrame {
    /// Bright-tube gate: the two largest-magnitude eigenvalues are negative.
    pub fn is_bright_tube(&self) -> bool {
        self.values[0] < 0.0 && self.values[1] < 0.0
    }
}

/// Symmetric eigen-decomposition sorted by decreasing absolute eigenvalue.
/// Each eigenvector is signed so its largest-magnitude component is positive.
pub fn eigen_symmetric3(h: &Sym3) -> EigenFrame {
    let m = Matrix3::from_fn(|r, c| h[r][c]);
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
    });
    let mut values = [0f64; 3];
    let mut vectors = [[0f64; 3]; 3];
    for (n, &src) in order.iter().enumerate() {
        values[n] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut v = [col[0], col[1], col[2]];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.iter_mut().for_each(|c| *c /= norm);
        let lead = (0..3)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("three components");
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        vectors[n] = v;
    }
    EigenFrame { values, vectors }
}

/// Boundary gradient `B = sigma * grad(I^sigma)` of an already smoothed image.
pub fn boundary_gradient(vol_sigma: &Volume3D, sigma: f64) -> Result<GradientField> {
    Ok(imageops::farid_gradient(vol_sigma)?.scaled(sigma))
}

/// Intermediate terms of one offset-medialness evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MedialnessTerms {
    /// Median of the radial boundary samples (`R0+`).
    pub median: f64,
    /// Median absolute deviation of the samples.
    pub mad: f64,
    /// Symmetry factor, clamped to `[0, 1]`.
    pub symmetry: f64,
    /// `R0+ * S^exponent`.
    pub boundary_response: f64,
    /// Central penalty `|B(x)|`.
    pub central: f64,
    /// Final `max(R+ - |B(x)|, 0)`.
    pub response: f64,
}

/// Number of boundary samples on a circle of radius `r`.
pub fn sample_count(r: f64) -> usize {
    (2.0 * std::f64::consts::PI * r + 1.0).floor() as usize
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Offset medialness at continuous position `x` (voxel coordinates of the
/// grid of `boundary`) for probe radius `r`.
///
/// Returns zero terms when the eigenvalue gate fails. `boundary` already
/// carries the sigma factor, so the central penalty is `|B(x)|`.
pub fn medialness_at(
    x: [f64; 3],
    frame: &EigenFrame,
    boundary: &GradientField,
    r: f64,
    exponent: f64,
) -> MedialnessTerms {
    if !frame.is_bright_tube() {
        return MedialnessTerms::default();
    }
    let v1 = frame.vectors[0];
    let v2 = frame.vectors[1];
    let n = sample_count(r);
    let mut samples = [0f64; 64];
    let samples = &mut samples[..n.min(64)];
    for (i, s) in samples.iter_mut().enumerate() {
        let alpha = 2.0 * std::f64::consts::PI * (i + 1) as f64 / n as f64;
        let (sa, ca) = alpha.sin_cos();
        let dir = [
            ca * v1[0] + sa * v2[0],
            ca * v1[1] + sa * v2[1],
            ca * v1[2] + sa * v2[2],
        ];
        let p = [x[0] + r * dir[0], x[1] + r * dir[1], x[2] + r * dir[2]];
        let b = boundary.sample(p);
        *s = (b[0] * dir[0] + b[1] * dir[1] + b[2] * dir[2]).abs();
    }
    let median = median_of(samples);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - median).abs()).collect();
    let mad = median_of(&mut dev);
    let symmetry = if median > 0.0 {
        (1.0 - mad / median).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let boundary_response = median * symmetry.powf(exponent);
    let c = boundary.sample(x);
    let central = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    MedialnessTerms {
        median,
        mad,
        symmetry,
        boundary_response,
        central,
        response: (boundary_response - central).max(0.0),
    }
}

/// Filter output on the full-resolution grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MedialnessField {
    /// `R_multi`, zero outside the lungs and near the airways.
    pub response: Volume3D,
    /// 0 where the response is zero, otherwise `1 + level * n_radii + radius_index`
    /// of the winning (level, radius) pair.
    pub argmax: Volume<u8>,
    /// First cross-section axis `v1` at the winning scale.
    pub v1: Vec<[f32; 3]>,
    /// Vessel direction `v3` at the winning scale.
    pub v3: Vec<[f32; 3]>,
    pub radii: Vec<f64>,
    pub pyramid_factor: f64,
}

impl MedialnessField {
    pub fn grid(&self) -> &Grid {
        self.response.grid()
    }

    /// Winning `(level, radius index)` at a storage offset.
    pub fn winner(&self, offset: usize) -> Option<(usize, usize)> {
        let a = self.argmax.data()[offset];
        if a == 0 {
            return None;
        }
        let n = self.radii.len();
        Some(((a as usize - 1) / n, (a as usize - 1) % n))
    }

    /// Winning probe radius expressed in full-resolution voxels.
    pub fn radius_voxels(&self, offset: usize) -> Option<f64> {
        self.winner(offset)
            .map(|(l, r)| self.radii[r] * self.pyramid_factor.powi(l as i32))
    }

    /// Second cross-section axis `v2 = v3 x v1`.
    pub fn v2(&self, offset: usize) -> [f64; 3] {
        let a = self.v3[offset].map(f64::from);
        let b = self.v1[offset].map(f64::from);
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    /// Candidate floor: `fraction` of the 99.9th percentile of the response
    /// over the whole volume. Counting zero voxels keeps the floor from
    /// sinking when noise makes many background responses slightly positive.
    pub fn floor_threshold(&self, fraction: f64) -> f32 {
        let mut all = self.response.data().to_vec();
        match imageops::percentile(&mut all, 99.9) {
            Some(p) if p > 0.0 => (fraction * p as f64) as f32,
            _ => 0.0,
        }
    }

    /// Writes the response (MET_FLOAT), the argmax index (MET_UCHAR) and the
    /// six-channel frame `v1, v3` (MET_FLOAT) next to `response_path`.
    pub fn save(&self, response_path: &std::path::Path) -> Result<()> {
        save_metaimage(&self.response, response_path)?;
        save_metaimage(&self.argmax, &companion(response_path, "_argmax"))?;
        let frame: Vec<f32> = self
            .v1
            .iter()
            .zip(&self.v3)
            .flat_map(|(a, b)| [a[0], a[1], a[2], b[0], b[1], b[2]])
            .collect();
        save_float_channels(self.grid(), 6, &frame, companion(response_path, "_frame"))
    }

    pub fn load(response_path: &std::path::Path, radii: Vec<f64>, pyramid_factor: f64) -> Result<Self> {
        let response = crate::volume::load_metaimage(response_path)?.into_scalar();
        let argmax = match crate::volume::load_metaimage(companion(response_path, "_argmax"))? {
            crate::volume::MetaImage::UChar(v) => v,
            _ => return Err(Error::UnsupportedElementType("argmax must be MET_UCHAR".into())),
        };
        let (grid, channels, frame) = crate::volume::load_float_channels(companion(response_path, "_frame"))?;
        if channels != 6 || grid.dims != response.dims() || argmax.dims() != response.dims() {
            return Err(Error::DimMismatch(grid.dims, response.dims()));
        }
        let v1 = frame.chunks_exact(6).map(|c| [c[0], c[1], c[2]]).collect();
        let v3 = frame.chunks_exact(6).map(|c| [c[3], c[4], c[5]]).collect();
        Ok(MedialnessField {
            response,
            argmax,
            v1,
            v3,
            radii,
            pyramid_factor,
        })
    }
}

/// `dir/stem.mhd` -> `dir/stem{suffix}.mhd`.
pub fn companion(path: &std::path::Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("medialness");
    path.with_file_name(format!("{stem}{suffix}.mhd"))
}

/// Voxels where the response is allowed: inside either lung, outside the
/// airway mask dilated by one voxel.
pub fn restriction_mask(lungs: &LabelVolume, airway: &Mask) -> Result<Mask> {
    lungs.volume().same_dims(airway)?;
    let near_airway = imageops::dilate(airway, Connectivity::N6);
    let data = lungs
        .data()
        .iter()
        .zip(near_airway.data())
        .map(|(&l, &a)| (l == labels::LEFT || l == labels::RIGHT) && !a)
        .collect();
    Volume::new(*lungs.grid(), data)
}

/// Per-level result on a z-slab of the level grid.
struct LevelSlab {
    z: Range<usize>,
    response: Vec<f32>,
    radius_index: Vec<u8>,
    v1: Vec<[f32; 3]>,
    v3: Vec<[f32; 3]>,
}

/// Runs the filter restricted to the lungs without the airways.
pub fn run_filter(vol: &Volume3D, lungs: &LabelVolume, airway: &Mask, cfg: &FilterConfig) -> Result<MedialnessField> {
    cfg.validate()?;
    vol.same_dims(lungs.volume())?;
    let allowed = restriction_mask(lungs, airway)?;

    // Shift to a non-negative range; exact for integer-valued HU.
    let (lo, _) = vol.min_max();
    let base = vol.map(|v| v - lo);

    let mut pyramid = vec![base];
    for _ in 1..cfg.n_scales {
        let next = imageops::downsample(
            pyramid.last().expect("non-empty"),
            cfg.pyramid_factor,
            imageops::PYRAMID_PRESMOOTH_SIGMA * cfg.pyramid_factor / imageops::PYRAMID_FACTOR,
        )?;
        if next.dims().iter().any(|&d| d < 2 * FARID_RADIUS + 1) {
            log::warn!(
                "pyramid stops at level {} (dims {:?} below derivative support)",
                pyramid.len(),
                next.dims()
            );
            break;
        }
        pyramid.push(next);
    }

    let grid = *vol.grid();
    let dims = grid.dims;
    let n_radii = cfg.radii.len();
    let mut response = vec![0f32; grid.len()];
    let mut argmax = vec![0u8; grid.len()];
    let mut v1 = vec![[0f32; 3]; grid.len()];
    let mut v3 = vec![[0f32; 3]; grid.len()];
    let plane = dims[0] * dims[1];
    let tile = cfg.tile_slices.unwrap_or(dims[2]).max(1);

    let kernels = HessianKernels::new();
    let mut z0 = 0;
    while z0 < dims[2] {
        let z1 = (z0 + tile).min(dims[2]);
        for (level, image) in pyramid.iter().enumerate() {
            let scale = cfg.pyramid_factor.powi(level as i32);
            let slab = level_slab(image, &allowed, z0..z1, scale, cfg, &kernels)?;
            let ld = image.dims();
            let lplane = ld[0] * ld[1];
            let shift = slab.z.start * lplane;
            let out = response[z0 * plane..z1 * plane]
                .par_chunks_mut(plane)
                .zip(argmax[z0 * plane..z1 * plane].par_chunks_mut(plane))
                .zip(v1[z0 * plane..z1 * plane].par_chunks_mut(plane))
                .zip(v3[z0 * plane..z1 * plane].par_chunks_mut(plane))
                .enumerate();
            out.for_each(|(dz, (((r_s, a_s), v1_s), v3_s))| {
                let k = z0 + dz;
                for po in 0..plane {
                    let o = k * plane + po;
                    if !allowed.data()[o] {
                        continue;
                    }
                    let x = grid.index_of(o);
                    let p = [x.i as f64 / scale, x.j as f64 / scale, x.k as f64 / scale];
                    let r = if level == 0 {
                        slab.response[o - shift] as f64
                    } else {
                        trilinear(ld, p, |off| slab.response[off - shift] as f64)
                    };
                    if r > r_s[po] as f64 && r > 0.0 {
                        let src = if level == 0 {
                            o - shift
                        } else {
                            strongest_corner(ld, p, |off| slab.response[off - shift]) - shift
                        };
                        r_s[po] = r as f32;
                        a_s[po] = (1 + level * n_radii + slab.radius_index[src] as usize) as u8;
                        v1_s[po] = slab.v1[src];
                        v3_s[po] = slab.v3[src];
                    }
                }
            });
        }
        z0 = z1;
    }

    Ok(MedialnessField {
        response: Volume::new(grid, response)?,
        argmax: Volume::new(grid, argmax)?,
        v1,
        v3,
        radii: cfg.radii.clone(),
        pyramid_factor: cfg.pyramid_factor,
    })
}

/// Offset of the trilinear corner contributing most to the interpolated value.
fn strongest_corner(dims: [usize; 3], p: [f64; 3], value: impl Fn(usize) -> f32) -> usize {
    let mut lo = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        lo[a] = c.floor() as usize;
        w[a] = c - c.floor();
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        for a in 0..3 {
            let up = corner >> a & 1 == 1;
            idx[a] = if up { (lo[a] + 1).min(dims[a] - 1) } else { lo[a] };
            weight *= if up { w[a] } else { 1.0 - w[a] };
        }
        let off = idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]);
        let contrib = weight * value(off) as f64;
        if contrib > best.0 {
            best = (contrib, off);
        }
    }
    best.1
}

/// Level voxels whose response is needed for the allowed full-resolution
/// voxels of slices `z_full`, and the level z-range they span.
fn needed_level_voxels(
    level_dims: [usize; 3],
    allowed: &Mask,
    z_full: Range<usize>,
    scale: f64,
) -> (Vec<bool>, Range<usize>) {
    let grid = allowed.grid();
    let plane = grid.dims[0] * grid.dims[1];
    let zl_lo = ((z_full.start as f64 / scale).floor() as usize).min(level_dims[2] - 1);
    let zl_hi = (((z_full.end - 1) as f64 / scale).floor() as usize + 2).min(level_dims[2]);
    let lplane = level_dims[0] * level_dims[1];
    let mut needed = vec![false; lplane * (zl_hi - zl_lo)];
    for o in z_full.start * plane..z_full.end * plane {
        if !allowed.data()[o] {
            continue;
        }
        let x = grid.index_of(o);
        let p = [x.i as f64 / scale, x.j as f64 / scale, x.k as f64 / scale];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let c = p[a].clamp(0.0, (level_dims[a] - 1) as f64);
            lo[a] = c.floor() as usize;
            hi[a] = if c > c.floor() {
                (lo[a] + 1).min(level_dims[a] - 1)
            } else {
                lo[a]
            };
        }
        for k in [lo[2], hi[2]] {
            for j in [lo[1], hi[1]] {
                for i in [lo[0], hi[0]] {
                    needed[(k - zl_lo) * lplane + j * level_dims[0] + i] = true;
                }
            }
        }
    }
    (needed, zl_lo..zl_hi)
}

/// Computes the best (radius) response of one level for the level voxels
/// needed by full-resolution slices `z_full`.
fn level_slab(
    image: &Volume3D,
    allowed: &Mask,
    z_full: Range<usize>,
    scale: f64,
    cfg: &FilterConfig,
    kernels: &HessianKernels,
) -> Result<LevelSlab> {
    let ld = image.dims();
    let (needed, zr) = needed_level_voxels(ld, allowed, z_full, scale);
    let lplane = ld[0] * ld[1];
    let n = lplane * zr.len();
    let mut slab = LevelSlab {
        z: zr.clone(),
        response: vec![0f32; n],
        radius_index: vec![0u8; n],
        v1: vec![[0f32; 3]; n],
        v3: vec![[0f32; 3]; n],
    };
    if !needed.iter().any(|&b| b) {
        return Ok(slab);
    }

    // Boundary samples reach r_max + 1 slices (trilinear), the Hessian and
    // gradient taps another FARID_RADIUS each.
    let r_max = cfg.radii.last().copied().unwrap_or(1.0);
    let b_margin = r_max.ceil() as usize + 1;
    let b_range = zr.start.saturating_sub(b_margin)..(zr.end + b_margin).min(ld[2]);
    let s_range = b_range.start.saturating_sub(FARID_RADIUS)..(b_range.end + FARID_RADIUS).min(ld[2]);

    let smooth = gaussian_smooth_slab(image, cfg.level_sigma, s_range.clone())?;
    let s_grid = Grid::new([ld[0], ld[1], s_range.len()], image.grid().spacing, image.grid().origin)?;
    let smooth = Volume::new(s_grid, smooth)?;
    let local_b = (b_range.start - s_range.start)..(b_range.end - s_range.start);
    let boundary = farid_gradient_slab(&smooth, local_b)?.scaled(cfg.level_sigma);

    slab.response
        .par_chunks_mut(lplane)
        .zip(slab.radius_index.par_chunks_mut(lplane))
        .zip(slab.v1.par_chunks_mut(lplane))
        .zip(slab.v3.par_chunks_mut(lplane))
        .zip(needed.par_chunks(lplane))
        .enumerate()
        .for_each(|(dz, ((((resp, ridx), v1s), v3s), need))| {
            let k = zr.start + dz;
            let lk = k - s_range.start;
            for j in 0..ld[1] {
                for i in 0..ld[0] {
                    let po = j * ld[0] + i;
                    if !need[po] {
                        continue;
                    }
                    let h = hessian_clamped(&smooth, i, j, lk, kernels);
                    let frame = eigen_symmetric3(&h);
                    if !frame.is_bright_tube() {
                        continue;
                    }
                    let x = [i as f64, j as f64, lk as f64];
                    let mut best = (0f64, 0usize);
                    for (ri, &r) in cfg.radii.iter().enumerate() {
                        let t = medialness_at(x, &frame, &boundary, r, cfg.symmetry_exponent);
                        if t.response > best.0 {
                            best = (t.response, ri);
                        }
                    }
                    if best.0 > 0.0 {
                        resp[po] = best.0 as f32;
                        ridx[po] = best.1 as u8;
                        v1s[po] = frame.vectors[0].map(|c| c as f32);
                        v3s[po] = frame.vectors[2].map(|c| c as f32);
                    }
                }
            }
        });
    Ok(slab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::gaussian_smooth;
    use crate::volume::VoxelIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(dims: [usize; 3], mut f: impl FnMut(f64, f64, f64) -> f64) -> Volume3D {
        let g = Grid::unit(dims).unwrap();
        let data = (0..g.len())
            .map(|o| {
                let v = g.index_of(o);
                f(v.i as f64, v.j as f64, v.k as f64) as f32
            })
            .collect();
        Volume::new(g, data).unwrap()
    }

    /// z-axis cylinder with a one-voxel partial-volume ramp.
    fn cylinder(dims: [usize; 3], center: [f64; 2], radius: f64, inside: f64, outside: f64) -> Volume3D {
        field(dims, |i, j, _| {
            let d = ((i - center[0]).powi(2) + (j - center[1]).powi(2)).sqrt();
            let f = (radius + 0.5 - d).clamp(0.0, 1.0);
            (outside + (inside - outside) * f).round()
        })
    }

    fn frobenius(m: &Sym3) -> f64 {
        m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn eigen_identity_and_diagonal() {
        let id = eigen_symmetric3(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(id.values, [1.0, 1.0, 1.0]);
        let d = eigen_symmetric3(&[[-3.0, 0.0, 0.0], [0.0, -2.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(d.values, [-3.0, -2.0, 1.0]);
        assert!((d.vectors[0][0] - 1.0).abs() < 1e-12);
        assert!((d.vectors[1][1] - 1.0).abs() < 1e-12);
        assert!((d.vectors[2][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let mut h = [[0f64; 3]; 3];
            for a in 0..3 {
                for b in a..3 {
                    let v = rng.random_range(-500.0..500.0);
                    h[a][b] = v;
                    h[b][a] = v;
                }
            }
            let f = eigen_symmetric3(&h);
            let mut rec = [[0f64; 3]; 3];
            for n in 0..3 {
                for a in 0..3 {
                    for b in 0..3 {
                        rec[a][b] += f.values[n] * f.vectors[n][a] * f.vectors[n][b];
                    }
                }
            }
            let mut diff = [[0f64; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    diff[a][b] = h[a][b] - rec[a][b];
                }
            }
            assert!(frobenius(&diff) < 1e-9 * frobenius(&h));
            assert!(f.values[0].abs() >= f.values[1].abs() && f.values[1].abs() >= f.values[2].abs());
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|c| f.vectors[a][c] * f.vectors[b][c]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-6);
                }
                let v = f.vectors[a];
                let lead = v
                    .iter()
                    .cloned()
                    .fold(0f64, |m, c| if c.abs() > m.abs() { c } else { m });
                assert!(lead > 0.0);
            }
        }
    }

    #[test]
    fn boundary_gradient_scaling() {
        let v = field([12, 12, 12], |i, _, _| 2.0 * i);
        assert!(boundary_gradient(&field([8, 8, 8], |_, _, _| 5.0), 1.5)
            .unwrap()
            .data()
            .iter()
            .all(|g| *g == [0.0; 3]));
        let b = boundary_gradient(&v, 1.5).unwrap();
        let g = b.at(6, 6, 6);
        assert!((g[0] - 3.0).abs() < 1e-3);
        let b2 = boundary_gradient(&v, 3.0).unwrap();
        assert!((b2.at(6, 6, 6)[0] - 2.0 * g[0]).abs() < 1e-5);
    }

    #[test]
    fn sample_counts() {
        assert_eq!(sample_count(1.0), 7);
        assert_eq!(sample_count(1.3), 9);
        assert_eq!(sample_count(1.6), 11);
        assert_eq!(sample_count(1.9), 12);
    }

    fn terms_at(vol: &Volume3D, x: VoxelIndex, r: f64) -> MedialnessTerms {
        let s = gaussian_smooth(vol, 1.0).unwrap();
        let b = boundary_gradient(&s, 1.0).unwrap();
        let frame = eigen_symmetric3(&imageops::hessian_at(&s, x).unwrap());
        medialness_at(x.as_f64(), &frame, &b, r, 1.5)
    }

    #[test]
    fn cylinder_axis_is_symmetric_and_positive() {
        let vol = cylinder([21, 21, 9], [10.0, 10.0], 3.0, 300.0, 0.0);
        let x = VoxelIndex::new(10, 10, 4);
        let best = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
            .into_iter()
            .map(|r| terms_at(&vol, x, r))
            .max_by(|a, b| a.response.total_cmp(&b.response))
            .unwrap();
        assert!(best.symmetry >= 0.9 && best.symmetry <= 1.0, "{best:?}");
        assert!(best.response > 0.0);
    }

    #[test]
    fn isolated_edge_is_suppressed() {
        // bright half-space x >= 10, probe r voxels inside it
        let vol = field([21, 15, 15], |i, j, _| if i + 0.3 * j >= 12.0 { 300.0 } else { 0.0 });
        for r in [1.0, 1.5, 2.0] {
            let x = VoxelIndex::new(14, 7, 7);
            let t = terms_at(&vol, x, r);
            assert!(t.response < 1e-3, "r={r}: {t:?}");
        }
    }

    #[test]
    fn cylinder_border_is_suppressed() {
        let vol = cylinder([21, 21, 9], [10.0, 10.0], 3.0, 300.0, 0.0);
        let x = VoxelIndex::new(13, 10, 4);
        for r in [1.0, 1.3, 1.6, 1.9] {
            assert_eq!(terms_at(&vol, x, r).response, 0.0);
        }
    }

    fn lungs_all(dims: [usize; 3]) -> (LabelVolume, Mask) {
        let g = Grid::unit(dims).unwrap();
        (
            Volume::filled(g, true).to_labels(labels::LEFT),
            Volume::filled(g, false),
        )
    }

    #[test]
    fn run_filter_tracks_cylinder_axis() {
        let dims = [32, 32, 24];
        let vol = cylinder(dims, [15.0, 16.0], 3.0, -50.0, -850.0);
        let (lungs, airway) = lungs_all(dims);
        let f = run_filter(&vol, &lungs, &airway, &FilterConfig::default()).unwrap();
        let mut hits = 0;
        let slices = 4..20;
        for k in slices.clone() {
            let mut best = (0f32, 0, 0);
            for j in 0..32 {
                for i in 0..32 {
                    let r = f.response.at(i, j, k);
                    if r > best.0 {
                        best = (r, i, j);
                    }
                }
            }
            if (best.1 as f64 - 15.0).abs() <= 1.0 && (best.2 as f64 - 16.0).abs() <= 1.0 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * slices.len() as f64, "{hits}");
        assert!(f.response.data().iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn empty_lung_mask_gives_zero_field() {
        let dims = [20, 20, 12];
        let vol = cylinder(dims, [10.0, 10.0], 3.0, 300.0, 0.0);
        let g = Grid::unit(dims).unwrap();
        let lungs = LabelVolume::empty(g);
        let f = run_filter(&vol, &lungs, &Volume::filled(g, false), &FilterConfig::default()).unwrap();
        assert!(f.response.data().iter().all(|&r| r == 0.0));
        assert!(f.argmax.data().iter().all(|&a| a == 0));
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let vol = field([10, 10, 10], |_, _, _| 0.0);
        let (lungs, airway) = lungs_all([10, 10, 9]);
        assert!(run_filter(&vol, &lungs, &airway, &FilterConfig::default()).is_err());
    }

    #[test]
    fn larger_vessel_wins_at_coarser_level() {
        let dims = [56, 32, 20];
        let vol = field(dims, |i, j, _| {
            let d1 = ((i - 14.0).powi(2) + (j - 16.0).powi(2)).sqrt();
            let d2 = ((i - 38.0).powi(2) + (j - 16.0).powi(2)).sqrt();
            let f = (2.5 - d1).clamp(0.0, 1.0).max((5.5 - d2).clamp(0.0, 1.0));
            (-850.0 + 800.0 * f).round()
        });
        let (lungs, airway) = lungs_all(dims);
        let f = run_filter(&vol, &lungs, &airway, &FilterConfig::default()).unwrap();
        let g = *f.grid();
        let small = f.winner(g.offset(14, 16, 10)).unwrap();
        let large = f.winner(g.offset(38, 16, 10)).unwrap();
        assert!(large.0 > small.0, "small {small:?} large {large:?}");
        assert!(f.radius_voxels(g.offset(38, 16, 10)) > f.radius_voxels(g.offset(14, 16, 10)));
    }

    #[test]
    fn tiling_is_bit_exact() {
        let dims = [24, 22, 30];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vol = field(dims, |i, j, k| {
            let d = ((i - 11.0 - 0.1 * k).powi(2) + (j - 10.0).powi(2)).sqrt();
            (-850.0 + 800.0 * (3.5 - d).clamp(0.0, 1.0) + rng.random_range(-30.0..30.0)).round()
        });
        let (lungs, airway) = lungs_all(dims);
        let whole = run_filter(&vol, &lungs, &airway, &FilterConfig::default()).unwrap();
        for tile in [1, 7, 13] {
            let cfg = FilterConfig {
                tile_slices: Some(tile),
                ..FilterConfig::default()
            };
            assert_eq!(run_filter(&vol, &lungs, &airway, &cfg).unwrap(), whole, "tile {tile}");
        }
    }
}
