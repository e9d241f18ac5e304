//! Scalar-field operators: separable filtering, Farid–Simoncelli derivatives,
//! the 1.7 resolution pyramid, Otsu thresholding, connected components and
//! binary morphology.
//!
//! Borders are handled by edge replication throughout. Every operator computes
//! each output voxel from a fixed sequence of reads, so results do not depend
//! on how work is split across threads or z-slabs.

use std::collections::VecDeque;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{trilinear, Connectivity, Grid, LabelVolume, Mask, Volume, Volume3D, VoxelIndex};

/// Half-width of the 5-tap derivative kernels.
pub const FARID_RADIUS: usize = 2;

// Farid & Simoncelli 5-tap prefilter / first / second derivative (second-order
// design). Rescaled below to exact zeroth, first and second moments.
const FARID_P5: [f64; 5] = [0.030320, 0.249724, 0.439911, 0.249724, 0.030320];
const FARID_D1: [f64; 5] = [-0.104550, -0.292315, 0.0, 0.292315, 0.104550];
const FARID_D2: [f64; 5] = [0.232905, 0.002668, -0.471147, 0.002668, 0.232905];

/// How a kernel is applied; the paired forms make derivatives of constant
/// signals exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Parity {
    /// Symmetric, sums to one.
    Smooth,
    /// Antisymmetric (first derivative).
    Odd,
    /// Symmetric with zero sum (second derivative).
    ZeroSumEven,
}

/// A centered 1D correlation kernel of odd length.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    taps: Vec<f64>,
    parity: Parity,
}

impl Kernel {
    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Applies the kernel at position `n` of a line read through `at`.
    #[inline]
    fn apply(&self, n: isize, at: impl Fn(isize) -> f64) -> f64 {
        let r = self.radius() as isize;
        let t = &self.taps;
        let c = r as usize;
        match self.parity {
            Parity::Smooth => {
                let mut s = t[c] * at(n);
                for m in 1..=r {
                    s += t[c + m as usize] * (at(n + m) + at(n - m));
                }
                s
            }
            Parity::Odd => {
                let mut s = 0.0;
                for m in 1..=r {
                    s += t[c + m as usize] * (at(n + m) - at(n - m));
                }
                s
            }
            Parity::ZeroSumEven => {
                let x0 = at(n);
                let mut s = 0.0;
                for m in 1..=r {
                    s += t[c + m as usize] * ((at(n + m) - x0) + (at(n - m) - x0));
                }
                s
            }
        }
    }
}

/// Normalized Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Kernel {
    if sigma <= 0.0 {
        return Kernel {
            taps: vec![1.0],
            parity: Parity::Smooth,
        };
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Kernel {
        taps,
        parity: Parity::Smooth,
    }
}

/// The 5-tap prefilter, normalized to unit sum.
pub fn farid_prefilter() -> Kernel {
    let sum: f64 = FARID_P5.iter().sum();
    Kernel {
        taps: FARID_P5.iter().map(|t| t / sum).collect(),
        parity: Parity::Smooth,
    }
}

/// The 5-tap first-derivative kernel, scaled to unit first moment.
pub fn farid_first_derivative() -> Kernel {
    let moment: f64 = FARID_D1.iter().enumerate().map(|(i, t)| (i as f64 - 2.0) * t).sum();
    Kernel {
        taps: FARID_D1.iter().map(|t| t / moment).collect(),
        parity: Parity::Odd,
    }
}

/// The 5-tap second-derivative kernel, zero-sum with second moment two.
pub fn farid_second_derivative() -> Kernel {
    let moment: f64 = FARID_D2
        .iter()
        .enumerate()
        .map(|(i, t)| (i as f64 - 2.0).powi(2) * t)
        .sum();
    let mut taps: Vec<f64> = FARID_D2.iter().map(|t| 2.0 * t / moment).collect();
    taps[2] = -(taps[0] + taps[1] + taps[3] + taps[4]);
    Kernel {
        taps,
        parity: Parity::ZeroSumEven,
    }
}

/// Separable filtering of output slices `z_out`, reading the input with
/// global edge replication. Returns the slab in x-fastest order.
fn separable_slab(vol: &Volume3D, kx: &Kernel, ky: &Kernel, kz: &Kernel, z_out: Range<usize>) -> Vec<f64> {
    let [nx, ny, nz] = vol.dims();
    let rz = kz.radius();
    let z_in = z_out.start.saturating_sub(rz)..(z_out.end + rz).min(nz);
    let plane = nx * ny;
    let data = vol.data();

    // x then y within each needed input slice
    let mut tmp = vec![0f64; plane * z_in.len()];
    tmp.par_chunks_mut(plane).zip(z_in.clone()).for_each(|(slice, k)| {
        let base = k * plane;
        let mut xpass = vec![0f64; plane];
        for j in 0..ny {
            let row = base + j * nx;
            for i in 0..nx {
                xpass[j * nx + i] = kx.apply(i as isize, |t| data[row + t.clamp(0, nx as isize - 1) as usize] as f64);
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                slice[j * nx + i] = ky.apply(j as isize, |t| xpass[t.clamp(0, ny as isize - 1) as usize * nx + i]);
            }
        }
    });

    let mut out = vec![0f64; plane * z_out.len()];
    out.par_chunks_mut(plane).zip(z_out.clone()).for_each(|(slice, k)| {
        for (o, v) in slice.iter_mut().enumerate() {
            *v = kz.apply(k as isize, |t| {
                let kk = t.clamp(0, nz as isize - 1) as usize;
                tmp[(kk - z_in.start) * plane + o]
            });
        }
    });
    out
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Gaussian sigma must be >= 0, got {sigma}"
        )));
    }
    Ok(())
}

/// Separable Gaussian smoothing (sigma in voxels); `sigma == 0` returns a copy.
pub fn gaussian_smooth(vol: &Volume3D, sigma: f64) -> Result<Volume3D> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let data = gaussian_smooth_slab(vol, sigma, 0..vol.dims()[2])?;
    Volume::new(*vol.grid(), data)
}

/// Gaussian smoothing of the z-slab `z_out` only; identical to the matching
/// slices of [`gaussian_smooth`].
pub fn gaussian_smooth_slab(vol: &Volume3D, sigma: f64, z_out: Range<usize>) -> Result<Vec<f32>> {
    check_sigma(sigma)?;
    let plane = vol.dims()[0] * vol.dims()[1];
    if sigma == 0.0 {
        return Ok(vol.data()[z_out.start * plane..z_out.end * plane].to_vec());
    }
    let k = gaussian_kernel(sigma);
    Ok(separable_slab(vol, &k, &k, &k, z_out)
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// Per-voxel 3-vector field, optionally covering only a z-slab of its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    grid: Grid,
    z_start: usize,
    z_len: usize,
    data: Vec<[f32; 3]>,
}

impl GradientField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    /// Slices of the grid covered by this field.
    pub fn z_range(&self) -> Range<usize> {
        self.z_start..self.z_start + self.z_len
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        let [nx, ny, _] = self.grid.dims;
        debug_assert!(k >= self.z_start && k < self.z_start + self.z_len);
        self.data[i + nx * (j + ny * (k - self.z_start))]
    }

    pub fn get(&self, idx: VoxelIndex) -> [f32; 3] {
        self.at(idx.i, idx.j, idx.k)
    }

    /// Trilinear interpolation at continuous voxel coordinates, clamped to
    /// the full grid. The interpolation footprint must lie inside the slab.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let dims = self.grid.dims;
        let plane = dims[0] * dims[1];
        let shift = self.z_start * plane;
        let mut out = [0f64; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = trilinear(dims, p, |off| self.data[off - shift][c] as f64);
        }
        out
    }

    pub fn magnitude(&self) -> Volume3D {
        assert_eq!(self.z_len, self.grid.dims[2], "magnitude of a partial slab");
        let data = self
            .data
            .iter()
            .map(|g| ((g[0] as f64).powi(2) + (g[1] as f64).powi(2) + (g[2] as f64).powi(2)).sqrt() as f32)
            .collect();
        Volume::new(self.grid, data).expect("same grid")
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for g in &mut self.data {
            for c in g.iter_mut() {
                *c = (*c as f64 * factor) as f32;
            }
        }
        self
    }
}

fn check_derivative_support(vol: &Volume3D) -> Result<()> {
    let support = 2 * FARID_RADIUS + 1;
    if vol.dims().iter().any(|&d| d < support) {
        return Err(Error::Geometry(format!(
            "volume {:?} smaller than the {support}-tap derivative support",
            vol.dims()
        )));
    }
    Ok(())
}

/// Gradient by separable Farid–Simoncelli 5-tap filters (HU per voxel).
pub fn farid_gradient(vol: &Volume3D) -> Result<GradientField> {
    farid_gradient_slab(vol, 0..vol.dims()[2])
}

/// Gradient of the z-slab `z_out` only; identical to the matching slices of
/// [`farid_gradient`].
pub fn farid_gradient_slab(vol: &Volume3D, z_out: Range<usize>) -> Result<GradientField> {
    check_derivative_support(vol)?;
    let p = farid_prefilter();
    let d = farid_first_derivative();
    let gx = separable_slab(vol, &d, &p, &p, z_out.clone());
    let gy = separable_slab(vol, &p, &d, &p, z_out.clone());
    let gz = separable_slab(vol, &p, &p, &d, z_out.clone());
    let data = gx
        .iter()
        .zip(&gy)
        .zip(&gz)
        .map(|((&x, &y), &z)| [x as f32, y as f32, z as f32])
        .collect();
    Ok(GradientField {
        grid: *vol.grid(),
        z_start: z_out.start,
        z_len: z_out.len(),
        data,
    })
}

/// Symmetric 3x3 matrix.
pub type Sym3 = [[f64; 3]; 3];

/// Hessian at `idx` from Farid second-derivative and prefilter taps.
///
/// The voxel must be at least [`FARID_RADIUS`] voxels from every face.
pub fn hessian_at(vol: &Volume3D, idx: VoxelIndex) -> Result<Sym3> {
    let dims = vol.dims();
    let r = FARID_RADIUS;
    let inside = (0..3).all(|a| {
        let v = idx.as_array()[a];
        v >= r && v + r < dims[a]
    });
    if !inside {
        return Err(Error::OutOfSupport {
            index: idx.as_array(),
            dims,
        });
    }
    Ok(hessian_clamped(vol, idx.i, idx.j, idx.k, &HessianKernels::new()))
}

/// The three 5-tap kernels used for Hessians, built once per caller.
pub(crate) struct HessianKernels {
    p: Kernel,
    d1: Kernel,
    d2: Kernel,
}

impl HessianKernels {
    pub(crate) fn new() -> Self {
        HessianKernels {
            p: farid_prefilter(),
            d1: farid_first_derivative(),
            d2: farid_second_derivative(),
        }
    }
}

/// Hessian with edge replication at the volume border.
pub(crate) fn hessian_clamped(vol: &Volume3D, i: usize, j: usize, k: usize, kern: &HessianKernels) -> Sym3 {
    const W: usize = 2 * FARID_RADIUS + 1;
    let r = FARID_RADIUS as isize;
    let (i, j, k) = (i as isize, j as isize, k as isize);

    // x pass over the 5x5 (j, k) window: prefilter, d1, d2
    let mut xp = [[0f64; W]; W];
    let mut x1 = [[0f64; W]; W];
    let mut x2 = [[0f64; W]; W];
    for (b, dk) in (-r..=r).enumerate() {
        for (a, dj) in (-r..=r).enumerate() {
            let line = |t: isize| vol.at_clamped(t, j + dj, k + dk) as f64;
            xp[b][a] = kern.p.apply(i, line);
            x1[b][a] = kern.d1.apply(i, line);
            x2[b][a] = kern.d2.apply(i, line);
        }
    }
    // y pass: combinations needed by the six Hessian entries, per dk
    let mut y_d2p = [0f64; W];
    let mut y_pd2 = [0f64; W];
    let mut y_pp = [0f64; W];
    let mut y_d1d1 = [0f64; W];
    let mut y_d1p = [0f64; W];
    let mut y_pd1 = [0f64; W];
    let c = r;
    for b in 0..W {
        // the window already holds clamped reads, so index relative to j
        y_d2p[b] = kern.p.apply(j, window(&x2[b], j - c));
        y_pd2[b] = kern.d2.apply(j, window(&xp[b], j - c));
        y_pp[b] = kern.p.apply(j, window(&xp[b], j - c));
        y_d1d1[b] = kern.d1.apply(j, window(&x1[b], j - c));
        y_d1p[b] = kern.p.apply(j, window(&x1[b], j - c));
        y_pd1[b] = kern.d1.apply(j, window(&xp[b], j - c));
    }
    let hxx = kern.p.apply(k, window(&y_d2p, k - c));
    let hyy = kern.p.apply(k, window(&y_pd2, k - c));
    let hzz = kern.d2.apply(k, window(&y_pp, k - c));
    let hxy = kern.p.apply(k, window(&y_d1d1, k - c));
    let hxz = kern.d1.apply(k, window(&y_d1p, k - c));
    let hyz = kern.d1.apply(k, window(&y_pd1, k - c));
    [[hxx, hxy, hxz], [hxy, hyy, hyz], [hxz, hyz, hzz]]
}

fn window(arr: &[f64], start: isize) -> impl Fn(isize) -> f64 + '_ {
    move |t| arr[(t - start) as usize]
}

/// Downsampling factor between pyramid levels.
pub const PYRAMID_FACTOR: f64 = 1.7;

/// Presmoothing applied before each 1.7 downsample, in input voxels.
pub const PYRAMID_PRESMOOTH_SIGMA: f64 = 0.85;

/// Output dims of a downsample by `factor`.
pub fn downsampled_dims(dims: [usize; 3], factor: f64) -> [usize; 3] {
    dims.map(|d| ((d as f64 / factor).ceil() as usize).max(1))
}

/// Presmooths with sigma = 0.85 voxels and resamples trilinearly on a grid
/// whose spacing is 1.7 times coarser; voxel 0 keeps its physical position.
pub fn downsample_17(vol: &Volume3D) -> Result<Volume3D> {
    downsample(vol, PYRAMID_FACTOR, PYRAMID_PRESMOOTH_SIGMA)
}

pub fn downsample(vol: &Volume3D, factor: f64, presmooth_sigma: f64) -> Result<Volume3D> {
    if vol.dims().iter().any(|&d| d < 2) {
        return Err(Error::Geometry(format!(
            "cannot downsample degenerate dims {:?}",
            vol.dims()
        )));
    }
    if !(factor > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "downsampling factor must exceed 1, got {factor}"
        )));
    }
    let smooth = gaussian_smooth(vol, presmooth_sigma)?;
    let src = vol.grid();
    let dims = downsampled_dims(src.dims, factor);
    let grid = Grid::new(dims, src.spacing.map(|s| s * factor), src.origin)?;
    let plane = dims[0] * dims[1];
    let mut data = vec![0f32; grid.len()];
    data.par_chunks_mut(plane).enumerate().for_each(|(k, slice)| {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [i as f64 * factor, j as f64 * factor, k as f64 * factor];
                slice[j * dims[0] + i] = smooth.sample(p) as f32;
            }
        }
    });
    Volume::new(grid, data)
}

/// Otsu threshold over a histogram of `bins` equal-width bins on `[min, max]`.
///
/// Values strictly below the returned bin edge form the lower class. Ties in
/// between-class variance resolve to the lower edge.
pub fn otsu_threshold(vol: &Volume3D, bins: usize) -> Result<f64> {
    otsu_threshold_values(vol.data().iter().map(|&v| v as f64), bins)
}

/// Histogram geometry used by [`otsu_threshold_values`]; exposed so callers
/// can reproduce the bin assignment.
#[derive(Clone, Copy, Debug)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl Histogram {
    /// Lower edge of bin `t` (`t` in `0..=bins`).
    pub fn edge(&self, t: usize) -> f64 {
        self.min + (self.max - self.min) * t as f64 / self.bins as f64
    }

    /// Bin of `v`, consistent with the edges: `v < edge(t)` iff `bin(v) < t`.
    pub fn bin(&self, v: f64) -> usize {
        let w = (self.max - self.min) / self.bins as f64;
        let mut b = (((v - self.min) / w).floor().max(0.0) as usize).min(self.bins - 1);
        while b > 0 && v < self.edge(b) {
            b -= 1;
        }
        while b + 1 < self.bins && v >= self.edge(b + 1) {
            b += 1;
        }
        b
    }
}

pub fn otsu_threshold_values(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidParameter("Otsu needs at least 2 bins".into()));
    }
    let (min, max) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return Err(Error::ConstantInput("Otsu threshold of a constant volume"));
    }
    let hist = Histogram { min, max, bins };
    let mut count = vec![0f64; bins];
    let mut sum = vec![0f64; bins];
    for v in values {
        let b = hist.bin(v);
        count[b] += 1.0;
        sum[b] += v;
    }
    let total_n: f64 = count.iter().sum();
    let total_s: f64 = sum.iter().sum();
    let mut best = (f64::NEG_INFINITY, 1usize);
    let (mut n0, mut s0) = (0f64, 0f64);
    for t in 1..bins {
        n0 += count[t - 1];
        s0 += sum[t - 1];
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let m0 = s0 / n0;
        let m1 = (total_s - s0) / n1;
        let var = (n0 / total_n) * (n1 / total_n) * (m0 - m1) * (m0 - m1);
        if var > best.0 {
            best = (var, t);
        }
    }
    Ok(hist.edge(best.1))
}

/// Connected-component labeling of a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// Component id per voxel, 0 = background, ids start at 1.
    pub labels: Volume<u32>,
    /// `sizes[id - 1]` is the voxel count of component `id`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn mask_of(&self, id: u32) -> Mask {
        self.labels.map(|l| l == id)
    }
}

/// Labels the components of `mask`; ids are ordered by decreasing size, then
/// by the storage offset of the component's first voxel.
pub fn label_components(mask: &Mask, conn: Connectivity) -> Components {
    let grid = *mask.grid();
    let dims = grid.dims;
    let mut raw = vec![0u32; grid.len()];
    let mut sizes: Vec<(usize, usize)> = Vec::new(); // (size, first offset)
    let mut queue = VecDeque::new();
    let offs = conn.offsets();
    for start in 0..grid.len() {
        if !mask.data()[start] || raw[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        raw[start] = id;
        queue.push_back(start);
        let mut n = 0;
        while let Some(o) = queue.pop_front() {
            n += 1;
            let v = grid.index_of(o);
            for &d in offs {
                if let Some(nb) = v.offset_by(d, dims) {
                    let no = grid.offset_of(nb);
                    if mask.data()[no] && raw[no] == 0 {
                        raw[no] = id;
                        queue.push_back(no);
                    }
                }
            }
        }
        sizes.push((n, start));
    }
    // discovery order already sorts ties by first offset
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].0.cmp(&sizes[a].0).then(sizes[a].1.cmp(&sizes[b].1)));
    let mut remap = vec![0u32; sizes.len() + 1];
    for (new, &old) in order.iter().enumerate() {
        remap[old + 1] = new as u32 + 1;
    }
    let labels = raw.into_iter().map(|l| remap[l as usize]).collect();
    Components {
        labels: Volume::new(grid, labels).expect("same grid"),
        sizes: order.iter().map(|&o| sizes[o].0).collect(),
    }
}

/// Components of the voxels carrying `foreground` in a label volume.
pub fn connected_components(mask: &LabelVolume, foreground: u8, conn: Connectivity) -> Components {
    label_components(&mask.mask_of(foreground), conn)
}

/// Structuring elements for binary morphology.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuringElement {
    /// Center plus the six face neighbors.
    Star6,
}

impl StructuringElement {
    fn connectivity(self) -> Connectivity {
        match self {
            StructuringElement::Star6 => Connectivity::N6,
        }
    }
}

/// One dilation step with the neighborhood of `conn`; outside the grid counts as background.
pub fn dilate(mask: &Mask, conn: Connectivity) -> Mask {
    morph_step(mask, conn, true)
}

/// One erosion step; neighbors outside the grid are ignored, so erosion never
/// eats in from the volume border.
pub fn erode(mask: &Mask, conn: Connectivity) -> Mask {
    morph_step(mask, conn, false)
}

fn morph_step(mask: &Mask, conn: Connectivity, dilation: bool) -> Mask {
    let grid = *mask.grid();
    let dims = grid.dims;
    let plane = dims[0] * dims[1];
    let src = mask.data();
    let offs = conn.offsets();
    let mut out = vec![false; grid.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slice)| {
        for (po, v) in slice.iter_mut().enumerate() {
            let o = k * plane + po;
            let here = src[o];
            let idx = grid.index_of(o);
            *v = if dilation {
                here || offs
                    .iter()
                    .any(|&d| idx.offset_by(d, dims).is_some_and(|n| src[grid.offset_of(n)]))
            } else {
                here && offs
                    .iter()
                    .all(|&d| idx.offset_by(d, dims).is_none_or(|n| src[grid.offset_of(n)]))
            };
        }
    });
    Volume::new(grid, out).expect("same grid")
}

/// Dilates `iterations` times.
pub fn dilate_n(mask: &Mask, conn: Connectivity, iterations: usize) -> Mask {
    let mut m = mask.clone();
    for _ in 0..iterations {
        m = dilate(&m, conn);
    }
    m
}

/// Closing with the element dilated `iterations` times: that many dilations
/// followed by as many erosions. Out-of-grid voxels never erode.
pub fn morphological_close(mask: &Mask, element: StructuringElement, iterations: usize) -> Mask {
    let conn = element.connectivity();
    let mut m = dilate_n(mask, conn, iterations);
    for _ in 0..iterations {
        m = erode(&m, conn);
    }
    m
}

/// Sets every background voxel not N6-connected to the volume border.
pub fn fill_holes_3d(mask: &Mask) -> Mask {
    let grid = *mask.grid();
    let dims = grid.dims;
    let mut outside = vec![false; grid.len()];
    let mut queue = VecDeque::new();
    for o in 0..grid.len() {
        let v = grid.index_of(o);
        let border = v.i == 0 || v.j == 0 || v.k == 0 || v.i + 1 == dims[0] || v.j + 1 == dims[1] || v.k + 1 == dims[2];
        if border && !mask.data()[o] {
            outside[o] = true;
            queue.push_back(o);
        }
    }
    while let Some(o) = queue.pop_front() {
        let v = grid.index_of(o);
        for &d in Connectivity::N6.offsets() {
            if let Some(n) = v.offset_by(d, dims) {
                let no = grid.offset_of(n);
                if !mask.data()[no] && !outside[no] {
                    outside[no] = true;
                    queue.push_back(no);
                }
            }
        }
    }
    Volume::new(grid, outside.into_iter().map(|b| !b).collect()).expect("same grid")
}

/// N6 (city-block) distance in voxels from every voxel to the nearest set
/// voxel of `seeds`; `u32::MAX` when `seeds` is empty.
pub fn city_block_distance(seeds: &Mask) -> Volume<u32> {
    let grid = *seeds.grid();
    let dims = grid.dims;
    let mut dist = vec![u32::MAX; grid.len()];
    let mut queue = VecDeque::new();
    for (o, &s) in seeds.data().iter().enumerate() {
        if s {
            dist[o] = 0;
            queue.push_back(o);
        }
    }
    while let Some(o) = queue.pop_front() {
        let v = grid.index_of(o);
        for &d in Connectivity::N6.offsets() {
            if let Some(n) = v.offset_by(d, dims) {
                let no = grid.offset_of(n);
                if dist[no] == u32::MAX {
                    dist[no] = dist[o] + 1;
                    queue.push_back(no);
                }
            }
        }
    }
    Volume::new(grid, dist).expect("same grid")
}

/// Percentile (0..=100) of a value list by nearest rank on the sorted values.
pub fn percentile(values: &mut [f32], pct: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((pct / 100.0) * (values.len() - 1) as f64).round() as usize;
    Some(values[rank.min(values.len() - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
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

    fn mask_from(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Mask {
        let g = Grid::unit(dims).unwrap();
        let data = (0..g.len())
            .map(|o| {
                let v = g.index_of(o);
                f(v.i, v.j, v.k)
            })
            .collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn farid_taps_are_pinned() {
        let p = farid_prefilter();
        let d1 = farid_first_derivative();
        let d2 = farid_second_derivative();
        let expect_p = [0.0303200303, 0.2497242497, 0.4399114399, 0.2497242497, 0.0303200303];
        let expect_d1 = [-0.1042550, -0.2914901, 0.0, 0.2914901, 0.1042550];
        let expect_d2 = [0.2492861, 0.0028557, -0.5042835, 0.0028557, 0.2492861];
        for (got, want) in [(p.taps(), &expect_p), (d1.taps(), &expect_d1), (d2.taps(), &expect_d2)] {
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-6, "{got:?} vs {want:?}");
            }
        }
        assert!((p.taps().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_preserves_constants() {
        let v = field([9, 8, 7], |_, _, _| -412.0);
        let s = gaussian_smooth(&v, 1.7).unwrap();
        assert!(s.data().iter().all(|&x| (x + 412.0).abs() < 1e-3));
    }

    #[test]
    fn gaussian_impulse_matches_kernel() {
        let v = field(
            [15, 15, 15],
            |i, j, k| if (i, j, k) == (7.0, 7.0, 7.0) { 1.0 } else { 0.0 },
        );
        let s = gaussian_smooth(&v, 1.0).unwrap();
        // independent 3D kernel peak
        let norm: f64 = (-3..=3).map(|x: i32| (-(x * x) as f64 / 2.0).exp()).sum();
        let peak = (1.0 / norm).powi(3);
        assert!((s.at(7, 7, 7) as f64 - peak).abs() < 1e-6);
        let total: f64 = s.data().iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_zero_sigma_is_identity_and_negative_rejected() {
        let v = field([5, 5, 5], |i, j, k| i * 3.0 - j + k * k);
        assert_eq!(gaussian_smooth(&v, 0.0).unwrap(), v);
        assert!(gaussian_smooth(&v, -1.0).is_err());
    }

    #[test]
    fn gradient_of_ramps() {
        let v = field([12, 12, 12], |i, _, _| 2.0 * i);
        let g = farid_gradient(&v).unwrap();
        for k in 2..10 {
            for j in 2..10 {
                for i in 2..10 {
                    let d = g.at(i, j, k);
                    assert!((d[0] - 2.0).abs() < 1e-4 && d[1].abs() < 1e-6 && d[2].abs() < 1e-6);
                }
            }
        }
        let v = field([12, 12, 12], |_, j, _| 2.0 * j);
        let g = farid_gradient(&v).unwrap();
        let d = g.at(6, 6, 6);
        assert!(d[0].abs() < 1e-6 && (d[1] - 2.0).abs() < 1e-4 && d[2].abs() < 1e-6);
    }

    #[test]
    fn gradient_of_constant_is_exactly_zero() {
        let v = field([6, 7, 8], |_, _, _| -853.25);
        let g = farid_gradient(&v).unwrap();
        assert!(g.data().iter().all(|d| *d == [0.0; 3]));
    }

    #[test]
    fn gradient_rejects_small_volumes() {
        let v = field([4, 8, 8], |_, _, _| 0.0);
        assert!(farid_gradient(&v).is_err());
    }

    #[test]
    fn gradient_slabs_match_full_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = field([9, 8, 13], |_, _, _| rng.random_range(-100.0..100.0));
        let full = farid_gradient(&v).unwrap();
        let plane = 9 * 8;
        for r in [0..4, 4..9, 9..13, 5..6] {
            let slab = farid_gradient_slab(&v, r.clone()).unwrap();
            assert_eq!(slab.data(), &full.data()[r.start * plane..r.end * plane]);
        }
    }

    #[test]
    fn hessian_of_quadratics() {
        let v = field([11, 11, 11], |i, _, _| i * i);
        let h = hessian_at(&v, VoxelIndex::new(5, 5, 5)).unwrap();
        let want = [[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        for a in 0..3 {
            for b in 0..3 {
                assert!((h[a][b] - want[a][b]).abs() < 1e-3, "{h:?}");
            }
        }
        let v = field([11, 11, 11], |i, j, _| i * j);
        let h = hessian_at(&v, VoxelIndex::new(5, 5, 5)).unwrap();
        assert!((h[0][1] - 1.0).abs() < 1e-3 && (h[1][0] - 1.0).abs() < 1e-3);
        for (a, b) in [(0, 0), (1, 1), (2, 2), (0, 2), (1, 2)] {
            assert!(h[a][b].abs() < 1e-3);
        }
        let v = field([7, 7, 7], |_, _, _| 12.5);
        assert_eq!(hessian_at(&v, VoxelIndex::new(3, 3, 3)).unwrap(), [[0.0; 3]; 3]);
    }

    #[test]
    fn hessian_out_of_support() {
        let v = field([7, 7, 7], |_, _, _| 0.0);
        assert!(matches!(
            hessian_at(&v, VoxelIndex::new(1, 3, 3)),
            Err(Error::OutOfSupport { .. })
        ));
    }

    #[test]
    fn downsample_dims_and_constants() {
        let v = field([17, 17, 17], |_, _, _| 7.0);
        let d = downsample_17(&v).unwrap();
        assert_eq!(d.dims(), [10, 10, 10]);
        assert!(d.data().iter().all(|&x| (x - 7.0).abs() < 1e-4));
        assert!((d.grid().spacing[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn downsample_ramp_keeps_physical_slope() {
        let v = field([34, 8, 8], |i, _, _| 3.0 * i);
        let d = downsample_17(&v).unwrap();
        // slope per output voxel is 3 * 1.7; per mm unchanged
        for i in 2..16 {
            let slope = (d.at(i + 1, 4, 4) - d.at(i, 4, 4)) as f64;
            assert!((slope / 1.7 - 3.0).abs() < 0.02 * 3.0, "slope {slope} at {i}");
        }
    }

    #[test]
    fn otsu_separates_bimodal() {
        let v = field([10, 10, 10], |i, _, _| if i < 5.0 { -900.0 } else { 50.0 });
        let t = otsu_threshold(&v, 256).unwrap();
        assert!(t > -900.0 && t <= 50.0);
        assert!(otsu_threshold(&field([3, 3, 3], |_, _, _| 1.0), 256).is_err());
    }

    /// Exhaustive scan over every bin edge, partitioning raw values directly.
    fn otsu_oracle(values: &[f64], bins: usize) -> f64 {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let h = Histogram { min, max, bins };
        let n = values.len() as f64;
        let mut best = (-1.0f64, h.edge(1));
        for t in 1..bins {
            let e = h.edge(t);
            let lo: Vec<f64> = values.iter().cloned().filter(|&v| v < e).collect();
            let hi: Vec<f64> = values.iter().cloned().filter(|&v| v >= e).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let var = (lo.len() as f64 / n) * (hi.len() as f64 / n) * (m0 - m1).powi(2);
            if var > best.0 + 1e-9 * best.0.abs().max(1.0) {
                best = (var, e);
            }
        }
        best.1
    }

    #[test]
    fn otsu_matches_exhaustive_scan() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m1 = rng.random_range(-1000.0..-500.0);
            let m2 = rng.random_range(-200.0..200.0);
            let w = rng.random_range(0.2..0.8);
            let a = Normal::new(m1, rng.random_range(20.0..120.0)).unwrap();
            let b = Normal::new(m2, rng.random_range(20.0..120.0)).unwrap();
            let values: Vec<f64> = (0..3000)
                .map(|_| {
                    if rng.random_bool(w) {
                        a.sample(&mut rng)
                    } else {
                        b.sample(&mut rng)
                    }
                })
                .collect();
            let bins = 64;
            let got = otsu_threshold_values(values.iter().cloned(), bins).unwrap();
            assert_eq!(got, otsu_oracle(&values, bins));
        }
    }

    #[test]
    fn components_basic() {
        let m = mask_from([8, 8, 8], |i, j, k| {
            (i < 2 && j < 2 && k < 2) || ((4..6).contains(&i) && (4..6).contains(&j) && (4..6).contains(&k))
        });
        let c = label_components(&m, Connectivity::N6);
        assert_eq!(c.sizes, vec![8, 8]);
        assert_eq!(c.labels.at(0, 0, 0), 1);
        assert_eq!(c.labels.at(5, 5, 5), 2);
        assert!(
            label_components(&mask_from([3, 3, 3], |_, _, _| false), Connectivity::N6)
                .sizes
                .is_empty()
        );
    }

    #[test]
    fn diagonal_cubes_depend_on_connectivity() {
        let m = mask_from([6, 6, 6], |i, j, k| {
            (i < 2 && j < 2 && k < 2) || ((2..4).contains(&i) && (2..4).contains(&j) && (2..4).contains(&k))
        });
        assert_eq!(label_components(&m, Connectivity::N6).count(), 2);
        assert_eq!(label_components(&m, Connectivity::N26).count(), 1);
    }

    #[test]
    fn components_order_by_size() {
        let m = mask_from([10, 3, 3], |i, j, k| j == 1 && k == 1 && (i == 0 || i >= 4));
        let c = label_components(&m, Connectivity::N6);
        assert_eq!(c.sizes, vec![6, 1]);
        assert_eq!(c.labels.at(0, 1, 1), 2);
    }

    #[test]
    fn closing_cases() {
        let cube = mask_from([9, 9, 9], |i, j, k| [i, j, k].iter().all(|&v| (2..7).contains(&v)));
        assert_eq!(morphological_close(&cube, StructuringElement::Star6, 1), cube);

        let mut holed = cube.clone();
        holed.set(VoxelIndex::new(4, 4, 4), false);
        assert_eq!(morphological_close(&holed, StructuringElement::Star6, 1), cube);

        // Two isolated voxels two apart are not bridged by a single star
        // closing: the midpoint's off-axis neighbors never enter the dilation.
        let pair = mask_from([7, 7, 7], |i, j, k| j == 3 && k == 3 && (i == 2 || i == 4));
        let closed = morphological_close(&pair, StructuringElement::Star6, 1);
        assert!(!closed.get(VoxelIndex::new(3, 3, 3)));

        // Two parallel plates one voxel apart are bridged.
        let plates = mask_from([7, 9, 9], |i, j, k| {
            (i == 2 || i == 4) && (2..7).contains(&j) && (2..7).contains(&k)
        });
        let closed = morphological_close(&plates, StructuringElement::Star6, 1);
        assert!(closed.get(VoxelIndex::new(3, 4, 4)));
    }

    #[test]
    fn hole_filling_cases() {
        let shell = mask_from([9, 9, 9], |i, j, k| {
            let inside = [i, j, k].iter().all(|&v| (2..7).contains(&v));
            let core = [i, j, k].iter().all(|&v| (3..6).contains(&v));
            inside && !core
        });
        let solid = mask_from([9, 9, 9], |i, j, k| [i, j, k].iter().all(|&v| (2..7).contains(&v)));
        assert_eq!(fill_holes_3d(&shell), solid);

        // open channel from the cavity to the border: cavity stays background
        let mut open = shell.clone();
        open.set(VoxelIndex::new(4, 4, 2), false);
        let filled = fill_holes_3d(&open);
        assert!(!filled.get(VoxelIndex::new(4, 4, 4)));

        let empty = mask_from([4, 4, 4], |_, _, _| false);
        assert_eq!(fill_holes_3d(&empty), empty);
    }

    /// Independent flood fill counting components with a recursive-free DFS.
    fn component_count_oracle(m: &Mask, conn: Connectivity) -> (usize, usize) {
        let dims = m.dims();
        let mut seen = vec![false; m.len()];
        let mut count = 0;
        let mut total = 0;
        for o in 0..m.len() {
            if !m.data()[o] || seen[o] {
                continue;
            }
            count += 1;
            let mut stack = vec![o];
            seen[o] = true;
            while let Some(c) = stack.pop() {
                total += 1;
                let v = m.grid().index_of(c);
                for n in crate::volume::neighbors(v, conn, dims) {
                    let no = m.grid().offset_of(n);
                    if m.data()[no] && !seen[no] {
                        seen[no] = true;
                        stack.push(no);
                    }
                }
            }
        }
        (count, total)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn components_match_flood_fill(seed in any::<u64>(), density in 0.1f64..0.6, n26 in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_from([7, 6, 5], |_, _, _| rng.random_bool(density));
            let conn = if n26 { Connectivity::N26 } else { Connectivity::N6 };
            let c = label_components(&m, conn);
            let (count, total) = component_count_oracle(&m, conn);
            prop_assert_eq!(c.count(), count);
            prop_assert_eq!(c.sizes.iter().sum::<usize>(), total);
            prop_assert!(c.sizes.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn fill_holes_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_from([6, 6, 6], |_, _, _| rng.random_bool(0.5));
            let once = fill_holes_3d(&m);
            prop_assert_eq!(fill_holes_3d(&once), once);
        }

        #[test]
        fn closing_is_extensive(seed in any::<u64>(), iters in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_from([7, 6, 5], |_, _, _| rng.random_bool(0.3));
            let c = morphological_close(&m, StructuringElement::Star6, iters);
            prop_assert!(m.data().iter().zip(c.data()).all(|(&a, &b)| !a || b));
        }

        #[test]
        fn smoothing_preserves_mean(seed in any::<u64>()) {
            // periodic-free check on an interior-dominated volume with a flat border
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = field([24, 24, 24], |i, j, k| {
                if [i, j, k].iter().all(|&c| (6.0..18.0).contains(&c)) { rng.random_range(-50.0..50.0) } else { 0.0 }
            });
            let s = gaussian_smooth(&v, 1.0).unwrap();
            let mean = |x: &Volume3D| x.data().iter().map(|&a| a as f64).sum::<f64>() / x.len() as f64;
            let scale = v.data().iter().map(|a| a.abs() as f64).sum::<f64>() / v.len() as f64;
            prop_assert!((mean(&s) - mean(&v)).abs() <= 1e-4 * scale);
        }

        #[test]
        fn hessian_is_exactly_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = field([7, 7, 7], |_, _, _| rng.random_range(-1000.0..1000.0));
            let h = hessian_at(&v, VoxelIndex::new(3, 3, 3)).unwrap();
            for a in 0..3 { for b in 0..3 { prop_assert_eq!(h[a][b], h[b][a]); } }
        }
    }
}
