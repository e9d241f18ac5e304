//! Dense 3D grids, voxel addressing and MetaImage (`.mhd` + `.raw`) I/O.
//!
//! All grids are stored x-fastest: the linear offset of voxel `(i, j, k)` is
//! `i + nx * (j + ny * k)`, which is also the MetaImage raw layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Label values shared by every label volume produced by the pipeline.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const AIRWAY: u8 = 1;
    pub const LEFT: u8 = 2;
    pub const RIGHT: u8 = 3;
    pub const VESSEL: u8 = 4;
}

/// Dimensions, voxel spacing (mm) and origin (mm) of a volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!("non-positive spacing {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("non-finite origin {origin:?}")));
        }
        Ok(Grid { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Grid::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn offset_of(&self, idx: VoxelIndex) -> usize {
        self.offset(idx.i, idx.j, idx.k)
    }

    #[inline]
    pub fn index_of(&self, offset: usize) -> VoxelIndex {
        let nx = self.dims[0];
        let ny = self.dims[1];
        VoxelIndex {
            i: offset % nx,
            j: (offset / nx) % ny,
            k: offset / (nx * ny),
        }
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        idx.i < self.dims[0] && idx.j < self.dims[1] && idx.k < self.dims[2]
    }

    /// Physical position (mm) of a voxel center.
    pub fn to_physical(&self, idx: VoxelIndex) -> [f64; 3] {
        self.continuous_to_physical([idx.i as f64, idx.j as f64, idx.k as f64])
    }

    pub fn continuous_to_physical(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + p[0] * self.spacing[0],
            self.origin[1] + p[1] * self.spacing[1],
            self.origin[2] + p[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a physical position.
    pub fn physical_to_continuous(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel to a physical position, `None` outside the grid.
    pub fn physical_to_index(&self, p: [f64; 3]) -> Option<VoxelIndex> {
        let c = self.physical_to_continuous(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if r < 0.0 || r >= self.dims[a] as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(VoxelIndex::new(out[0], out[1], out[2]))
    }
}

/// Integer voxel address `(i, j, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        VoxelIndex { i, j, k }
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.i as f64, self.j as f64, self.k as f64]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.i, self.j, self.k]
    }

    /// Adds a signed offset, returning `None` when the result leaves `dims`.
    #[inline]
    pub fn offset_by(&self, d: [isize; 3], dims: [usize; 3]) -> Option<VoxelIndex> {
        let i = self.i as isize + d[0];
        let j = self.j as isize + d[1];
        let k = self.k as isize + d[2];
        if i < 0 || j < 0 || k < 0 || i >= dims[0] as isize || j >= dims[1] as isize || k >= dims[2] as isize {
            return None;
        }
        Some(VoxelIndex::new(i as usize, j as usize, k as usize))
    }

    pub fn distance(&self, other: &VoxelIndex) -> f64 {
        let a = self.as_f64();
        let b = other.as_f64();
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

impl fmt::Display for VoxelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.i, self.j, self.k)
    }
}

impl std::str::FromStr for VoxelIndex {
    type Err = Error;

    /// Parses `i,j,k`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidParameter(format!(
                "expected voxel index i,j,k, got {s:?}"
            )));
        }
        let mut v = [0usize; 3];
        for (a, p) in parts.iter().enumerate() {
            v[a] = p
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad voxel coordinate {p:?} in {s:?}")))?;
        }
        Ok(VoxelIndex::new(v[0], v[1], v[2]))
    }
}

/// Voxel adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors.
    N6,
    /// Face, edge and corner neighbors.
    N26,
}

const N6_OFFSETS: [[isize; 3]; 6] = [[0, 0, -1], [0, -1, 0], [-1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]];

const fn n26_offsets() -> [[isize; 3]; 26] {
    let mut out = [[0isize; 3]; 26];
    let mut n = 0;
    let mut dk = -1;
    while dk <= 1 {
        let mut dj = -1;
        while dj <= 1 {
            let mut di = -1;
            while di <= 1 {
                if !(di == 0 && dj == 0 && dk == 0) {
                    out[n] = [di, dj, dk];
                    n += 1;
                }
                di += 1;
            }
            dj += 1;
        }
        dk += 1;
    }
    out
}

const N26_OFFSETS: [[isize; 3]; 26] = n26_offsets();

impl Connectivity {
    /// Neighbor offsets `[di, dj, dk]`, ordered lexicographically by `(dk, dj, di)`.
    pub fn offsets(self) -> &'static [[isize; 3]] {
        match self {
            Connectivity::N6 => &N6_OFFSETS,
            Connectivity::N26 => &N26_OFFSETS,
        }
    }
}

/// In-bounds neighbors of `idx`, ordered lexicographically by `(k, j, i)`.
pub fn neighbors(idx: VoxelIndex, conn: Connectivity, dims: [usize; 3]) -> Vec<VoxelIndex> {
    conn.offsets().iter().filter_map(|&d| idx.offset_by(d, dims)).collect()
}

/// Dense scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
}

/// Scalar field used for CT intensities (HU) and every derived field.
pub type Volume3D = Volume<f32>;

/// Binary voxel set.
pub type Mask = Volume<bool>;

impl<T: Copy> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        Volume {
            data: vec![value; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.offset(i, j, k)]
    }

    #[inline]
    pub fn get(&self, idx: VoxelIndex) -> T {
        self.data[self.grid.offset_of(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: VoxelIndex, value: T) {
        let o = self.grid.offset_of(idx);
        self.data[o] = value;
    }

    /// Value at a possibly out-of-range index, clamped to the nearest edge voxel.
    #[inline]
    pub fn at_clamped(&self, i: isize, j: isize, k: isize) -> T {
        let d = self.grid.dims;
        let i = i.clamp(0, d[0] as isize - 1) as usize;
        let j = j.clamp(0, d[1] as isize - 1) as usize;
        let k = k.clamp(0, d[2] as isize - 1) as usize;
        self.at(i, j, k)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.grid.dims != other.grid.dims {
            return Err(Error::DimMismatch(self.grid.dims, other.grid.dims));
        }
        Ok(())
    }
}

impl Volume<f32> {
    /// Trilinear interpolation at continuous voxel coordinates, clamped to the grid.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        trilinear(self.grid.dims, p, |o| self.data[o] as f64)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl Volume<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Voxel indices of set voxels in storage order.
    pub fn indices(&self) -> Vec<VoxelIndex> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(o, _)| self.grid.index_of(o))
            .collect()
    }

    pub fn to_labels(&self, label: u8) -> LabelVolume {
        let data = self
            .data
            .iter()
            .map(|&b| if b { label } else { labels::BACKGROUND })
            .collect();
        LabelVolume::from_volume(Volume { grid: self.grid, data }).expect("single-label volume has a legend entry")
    }
}

/// Trilinear interpolation over an x-fastest grid accessed through `value(offset)`.
/// Coordinates outside the grid are clamped to the edge.
#[inline]
pub(crate) fn trilinear(dims: [usize; 3], p: [f64; 3], value: impl Fn(usize) -> f64) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        w[a] = c - f;
    }
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let at = |i: usize, j: usize, k: usize| value(i + nx * j + nxy * k);
    let c00 = at(lo[0], lo[1], lo[2]) * (1.0 - w[0]) + at(hi[0], lo[1], lo[2]) * w[0];
    let c10 = at(lo[0], hi[1], lo[2]) * (1.0 - w[0]) + at(hi[0], hi[1], lo[2]) * w[0];
    let c01 = at(lo[0], lo[1], hi[2]) * (1.0 - w[0]) + at(hi[0], lo[1], hi[2]) * w[0];
    let c11 = at(lo[0], hi[1], hi[2]) * (1.0 - w[0]) + at(hi[0], hi[1], hi[2]) * w[0];
    let c0 = c00 * (1.0 - w[1]) + c10 * w[1];
    let c1 = c01 * (1.0 - w[1]) + c11 * w[1];
    c0 * (1.0 - w[2]) + c1 * w[2]
}

/// Integer label grid with a legend naming every stored value.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    volume: Volume<u8>,
    legend: BTreeMap<u8, String>,
}

pub fn default_legend() -> BTreeMap<u8, String> {
    [
        (labels::BACKGROUND, "background"),
        (labels::AIRWAY, "airway"),
        (labels::LEFT, "left"),
        (labels::RIGHT, "right"),
        (labels::VESSEL, "vessel"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect()
}

impl LabelVolume {
    /// Wraps a volume using the standard legend.
    pub fn from_volume(volume: Volume<u8>) -> Result<Self> {
        LabelVolume::with_legend(volume, default_legend())
    }

    pub fn with_legend(volume: Volume<u8>, legend: BTreeMap<u8, String>) -> Result<Self> {
        if let Some(v) = volume.data().iter().find(|v| !legend.contains_key(v)) {
            return Err(Error::InvalidParameter(format!("label value {v} missing from legend")));
        }
        Ok(LabelVolume { volume, legend })
    }

    pub fn empty(grid: Grid) -> Self {
        LabelVolume {
            volume: Volume::filled(grid, labels::BACKGROUND),
            legend: default_legend(),
        }
    }

    pub fn volume(&self) -> &Volume<u8> {
        &self.volume
    }

    pub fn grid(&self) -> &Grid {
        self.volume.grid()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volume.dims()
    }

    pub fn data(&self) -> &[u8] {
        self.volume.data()
    }

    pub fn legend(&self) -> &BTreeMap<u8, String> {
        &self.legend
    }

    pub fn get(&self, idx: VoxelIndex) -> u8 {
        self.volume.get(idx)
    }

    /// Sets a voxel; the label must be in the legend.
    pub fn set(&mut self, idx: VoxelIndex, label: u8) {
        assert!(self.legend.contains_key(&label), "label {label} not in legend");
        self.volume.set(idx, label);
    }

    pub fn mask_of(&self, label: u8) -> Mask {
        self.volume.map(|v| v == label)
    }

    pub fn count(&self, label: u8) -> usize {
        self.volume.data().iter().filter(|&&v| v == label).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_metaimage(&self.volume, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_metaimage(path)? {
            MetaImage::UChar(v) => LabelVolume::from_volume(v),
            other => Err(Error::UnsupportedElementType(format!(
                "label volumes must be MET_UCHAR, found {}",
                other.element_type().name()
            ))),
        }
    }
}

/// MetaImage element types supported on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Short,
    UChar,
    Float,
}

impl ElementType {
    pub fn name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::UChar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::UChar => 1,
            ElementType::Float => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_UCHAR" => Ok(ElementType::UChar),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }
}

/// Voxel types that can be written as MetaImage elements.
pub trait MetaElement: Copy {
    const ELEMENT: ElementType;
    fn write_le(self, out: &mut Vec<u8>);
}

impl MetaElement for i16 {
    const ELEMENT: ElementType = ElementType::Short;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl MetaElement for u8 {
    const ELEMENT: ElementType = ElementType::UChar;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

impl MetaElement for f32 {
    const ELEMENT: ElementType = ElementType::Float;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl MetaElement for bool {
    const ELEMENT: ElementType = ElementType::UChar;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
}

/// A volume loaded from disk, tagged by its stored element type.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaImage {
    Short(Volume<i16>),
    UChar(Volume<u8>),
    Float(Volume<f32>),
}

impl MetaImage {
    pub fn element_type(&self) -> ElementType {
        match self {
            MetaImage::Short(_) => ElementType::Short,
            MetaImage::UChar(_) => ElementType::UChar,
            MetaImage::Float(_) => ElementType::Float,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            MetaImage::Short(v) => v.grid(),
            MetaImage::UChar(v) => v.grid(),
            MetaImage::Float(v) => v.grid(),
        }
    }

    /// Converts to the floating-point scalar type; lossless for integer inputs.
    pub fn into_scalar(self) -> Volume3D {
        match self {
            MetaImage::Short(v) => v.map(f32::from),
            MetaImage::UChar(v) => v.map(f32::from),
            MetaImage::Float(v) => v,
        }
    }
}

/// Raw header contents shared by the scalar and multi-channel readers.
struct Header {
    grid: Grid,
    element: ElementType,
    channels: usize,
    big_endian: bool,
    data_file: PathBuf,
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Header {
        path: path.to_path_buf(),
        reason,
    };
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing key {k}")))
    };
    let triple_f64 = |k: &str| -> Result<[f64; 3]> {
        let v: Vec<f64> = get(k)?
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("{k}: {e}")))?;
        v.try_into()
            .map_err(|v: Vec<f64>| bad(format!("{k} has {} values, expected 3", v.len())))
    };

    let ndims: usize = get("NDims")?.parse().map_err(|e| bad(format!("NDims: {e}")))?;
    if ndims != 3 {
        return Err(bad(format!("NDims = {ndims}, only 3 is supported")));
    }
    let dims_v: Vec<usize> = get("DimSize")?
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("DimSize: {e}")))?;
    let dims: [usize; 3] = dims_v
        .try_into()
        .map_err(|_| bad("DimSize must have 3 values".into()))?;
    let spacing = if fields.contains_key("ElementSpacing") {
        triple_f64("ElementSpacing")?
    } else {
        [1.0; 3]
    };
    let origin = if fields.contains_key("Offset") {
        triple_f64("Offset")?
    } else if fields.contains_key("Origin") {
        triple_f64("Origin")?
    } else {
        [0.0; 3]
    };
    let element = ElementType::parse(get("ElementType")?)?;
    let channels = match fields.get("ElementNumberOfChannels") {
        Some(c) => c.parse().map_err(|e| bad(format!("ElementNumberOfChannels: {e}")))?,
        None => 1,
    };
    if fields
        .get("CompressedData")
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
    {
        return Err(bad("compressed data is not supported".into()));
    }
    let msb = fields
        .get("ElementByteOrderMSB")
        .or_else(|| fields.get("BinaryDataByteOrderMSB"))
        .is_some_and(|v| v.eq_ignore_ascii_case("true"));
    let data_name = get("ElementDataFile")?;
    if data_name.eq_ignore_ascii_case("LOCAL") || data_name.starts_with("LIST") {
        return Err(bad(format!("ElementDataFile = {data_name} is not supported")));
    }
    let data_file = path.parent().unwrap_or_else(|| Path::new(".")).join(data_name);
    let grid = Grid::new(dims, spacing, origin).map_err(|e| bad(e.to_string()))?;
    Ok(Header {
        grid,
        element,
        channels,
        big_endian: msb,
        data_file,
    })
}

fn read_payload(header: &Header) -> Result<Vec<u8>> {
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let expected = header.grid.len() * header.channels * header.element.size();
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn decode<const N: usize, T>(bytes: &[u8], big_endian: bool, f: impl Fn([u8; N]) -> T) -> Vec<T> {
    bytes
        .chunks_exact(N)
        .map(|c| {
            let mut a: [u8; N] = c.try_into().expect("chunk size");
            if big_endian {
                a.reverse();
            }
            f(a)
        })
        .collect()
}

/// Reads a 3D scalar MetaImage.
pub fn load_metaimage(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    if header.channels != 1 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            reason: format!("{} channels, expected a scalar image", header.channels),
        });
    }
    let bytes = read_payload(&header)?;
    let be = header.big_endian;
    Ok(match header.element {
        ElementType::Short => MetaImage::Short(Volume::new(header.grid, decode(&bytes, be, i16::from_le_bytes))?),
        ElementType::UChar => MetaImage::UChar(Volume::new(header.grid, bytes)?),
        ElementType::Float => MetaImage::Float(Volume::new(header.grid, decode(&bytes, be, f32::from_le_bytes))?),
    })
}

fn raw_path(path: &Path) -> Result<(PathBuf, String)> {
    let raw = path.with_extension("raw");
    let name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidParameter(format!("bad output path {}", path.display())))?
        .to_string();
    Ok((raw, name))
}

fn join3<T: fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn write_pair(path: &Path, grid: &Grid, element: ElementType, channels: usize, payload: &[u8]) -> Result<()> {
    let (raw, raw_name) = raw_path(path)?;
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str("NDims = 3\n");
    header.push_str("BinaryData = True\n");
    header.push_str("ElementByteOrderMSB = False\n");
    header.push_str("CompressedData = False\n");
    header.push_str(&format!("Offset = {}\n", join3(&grid.origin)));
    header.push_str(&format!("ElementSpacing = {}\n", join3(&grid.spacing)));
    header.push_str(&format!("DimSize = {}\n", join3(&grid.dims)));
    if channels != 1 {
        header.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    header.push_str(&format!("ElementType = {}\n", element.name()));
    header.push_str(&format!("ElementDataFile = {raw_name}\n"));
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

/// Writes `path` (header) and the sibling `.raw` payload, little-endian, x-fastest.
pub fn save_metaimage<T: MetaElement>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grid = vol.grid();
    if grid.is_empty() {
        return Err(Error::Geometry("cannot save an empty volume".into()));
    }
    let mut payload = Vec::with_capacity(vol.len() * T::ELEMENT.size());
    for &v in vol.data() {
        v.write_le(&mut payload);
    }
    write_pair(path, grid, T::ELEMENT, 1, &payload)
}

/// Writes an interleaved multi-channel MET_FLOAT image (`channels` values per voxel).
pub fn save_float_channels(grid: &Grid, channels: usize, data: &[f32], path: impl AsRef<Path>) -> Result<()> {
    if data.len() != grid.len() * channels || channels == 0 {
        return Err(Error::Geometry(format!(
            "{} values for {} voxels x {channels} channels",
            data.len(),
            grid.len()
        )));
    }
    let mut payload = Vec::with_capacity(data.len() * 4);
    for &v in data {
        v.write_le(&mut payload);
    }
    write_pair(path.as_ref(), grid, ElementType::Float, channels, &payload)
}

/// Reads an interleaved multi-channel MET_FLOAT image.
pub fn load_float_channels(path: impl AsRef<Path>) -> Result<(Grid, usize, Vec<f32>)> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    if header.element != ElementType::Float {
        return Err(Error::UnsupportedElementType(format!(
            "expected MET_FLOAT channels, found {}",
            header.element.name()
        )));
    }
    let bytes = read_payload(&header)?;
    let data = decode(&bytes, header.big_endian, f32::from_le_bytes);
    Ok((header.grid, header.channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::new(d, [0.7, 0.7, 1.25], [-10.5, 3.0, 100.0]).unwrap()
    }

    #[test]
    fn constant_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v: Volume<i16> = Volume::filled(grid([3, 3, 3]), -1000);
        let p = dir.path().join("c.mhd");
        save_metaimage(&v, &p).unwrap();
        let back = load_metaimage(&p).unwrap().into_scalar();
        assert!(back.data().iter().all(|&x| x == -1000.0));
        assert_eq!(back.grid(), v.grid());
    }

    #[test]
    fn random_float_round_trip_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..512).map(|_| rng.random_range(-2000.0..3000.0)).collect();
        let v = Volume::new(grid([8, 8, 8]), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.mhd");
        save_metaimage(&v, &p).unwrap();
        assert_eq!(load_metaimage(&p).unwrap(), MetaImage::Float(v));
    }

    #[test]
    fn labels_are_written_as_uchar() {
        let mut l = LabelVolume::empty(grid([4, 4, 4]));
        l.set(VoxelIndex::new(1, 2, 3), labels::VESSEL);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.mhd");
        l.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("ElementType = MET_UCHAR"));
        assert_eq!(LabelVolume::load(&p).unwrap(), l);
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mhd");
        fs::write(
            &p,
            "NDims = 3\nDimSize = 4 4 4\nElementType = MET_UCHAR\nElementDataFile = bad.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("bad.raw"), vec![0u8; 63]).unwrap();
        match load_metaimage(&p) {
            Err(Error::PayloadSize { expected, actual }) => {
                assert_eq!((expected, actual), (64, 63));
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_type_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.mhd");
        fs::write(
            &p,
            "NDims = 3\nDimSize = 1 1 1\nElementType = MET_DOUBLE\nElementDataFile = d.raw\n",
        )
        .unwrap();
        assert!(matches!(load_metaimage(&p), Err(Error::UnsupportedElementType(_))));
        assert!(matches!(
            load_metaimage(dir.path().join("nope.mhd")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn big_endian_payload_is_swapped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.mhd");
        fs::write(
            &p,
            "NDims = 3\nDimSize = 2 1 1\nElementType = MET_SHORT\nElementByteOrderMSB = True\nElementDataFile = be.raw\n",
        )
        .unwrap();
        let mut raw = Vec::new();
        raw.extend_from_slice(&(-1000i16).to_be_bytes());
        raw.extend_from_slice(&(40i16).to_be_bytes());
        fs::write(dir.path().join("be.raw"), raw).unwrap();
        let v = load_metaimage(&p).unwrap().into_scalar();
        assert_eq!(v.data(), &[-1000.0, 40.0]);
    }

    #[test]
    fn zero_sized_dims_are_rejected() {
        assert!(Grid::new([0, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn neighbor_counts() {
        let d = [5, 5, 5];
        assert_eq!(neighbors(VoxelIndex::new(2, 2, 2), Connectivity::N6, d).len(), 6);
        assert_eq!(neighbors(VoxelIndex::new(0, 0, 0), Connectivity::N6, d).len(), 3);
        assert_eq!(neighbors(VoxelIndex::new(2, 2, 2), Connectivity::N26, d).len(), 26);
        assert_eq!(neighbors(VoxelIndex::new(0, 0, 0), Connectivity::N26, d).len(), 7);
    }

    #[test]
    fn neighbor_order_is_lexicographic_in_kji() {
        let d = [4, 4, 4];
        for conn in [Connectivity::N6, Connectivity::N26] {
            let n = neighbors(VoxelIndex::new(1, 1, 1), conn, d);
            let keys: Vec<_> = n.iter().map(|v| (v.k, v.j, v.i)).collect();
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(keys, sorted);
        }
    }

    #[test]
    fn label_outside_legend_is_rejected() {
        let v = Volume::filled(Grid::unit([2, 2, 2]).unwrap(), 9u8);
        assert!(LabelVolume::from_volume(v).is_err());
    }

    #[test]
    fn trilinear_reproduces_linear_fields() {
        let g = Grid::unit([4, 5, 6]).unwrap();
        let data = (0..g.len())
            .map(|o| {
                let v = g.index_of(o);
                (2.0 * v.i as f64 - 3.0 * v.j as f64 + 0.5 * v.k as f64) as f32
            })
            .collect();
        let vol = Volume::new(g, data).unwrap();
        let p = [1.25, 2.5, 3.75];
        let want = 2.0 * p[0] - 3.0 * p[1] + 0.5 * p[2];
        assert!((vol.sample(p) - want).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn neighbors_are_symmetric(
            dims in (1usize..6, 1usize..6, 1usize..6),
            a in (0usize..6, 0usize..6, 0usize..6),
            n26 in any::<bool>(),
        ) {
            let d = [dims.0, dims.1, dims.2];
            let a = VoxelIndex::new(a.0 % d[0], a.1 % d[1], a.2 % d[2]);
            let conn = if n26 { Connectivity::N26 } else { Connectivity::N6 };
            for b in neighbors(a, conn, d) {
                prop_assert!(neighbors(b, conn, d).contains(&a));
            }
        }

        #[test]
        fn physical_mapping_inverts_on_lattice(i in 0usize..40, j in 0usize..40, k in 0usize..40) {
            let g = Grid::new([40, 40, 40], [0.625, 0.8, 1.5], [-123.4, 55.5, -0.25]).unwrap();
            let idx = VoxelIndex::new(i, j, k);
            prop_assert_eq!(g.physical_to_index(g.to_physical(idx)), Some(idx));
        }

        #[test]
        fn short_round_trip(values in proptest::collection::vec(any::<i16>(), 24)) {
            let v = Volume::new(grid([2, 3, 4]), values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.mhd");
            save_metaimage(&v, &p).unwrap();
            prop_assert_eq!(load_metaimage(&p).unwrap(), MetaImage::Short(v));
        }
    }
}
