//! Stage orchestration and artifact I/O shared by the one-shot pipeline and
//! the single-stage commands.
//!
//! Every stage reads its prerequisites from the output directory under fixed
//! names, so running the stages one by one reproduces the pipeline artifacts
//! byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::airway::{detect_trachea_seed, grow_airway, skeletonize_and_label, write_trace_csv, GrowParams, GrowResult};
use crate::centerline::{
    detect_heart_center, load_trees, non_max_suppress, prune_fragments, reconnect, save_nodes_csv, save_trees,
    CenterlineTree,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::lungs::{build_cost_field, coarse_lung_mask, normalized_gradient, refine_lungs, split_from_sources};
use crate::medialness::{companion, run_filter, MedialnessField};
use crate::metrics::{distance_metric, summarize_dm, BranchPath, DmSummary};
use crate::vesselseg::{
    estimate_tree_radii, paint_segmentation, refine_segmentation, save_profiles_csv, RadiusProfile,
};
use crate::volume::{labels, load_metaimage, LabelVolume, Mask, Volume, Volume3D, VoxelIndex};

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const AIRWAY: &str = "airway.mhd";
    pub const AIRWAY_TRACE: &str = "airway_trace.csv";
    pub const LUNGS: &str = "lungs.mhd";
    pub const LUNG_SUMMARY: &str = "lungs_summary.json";
    pub const MEDIALNESS: &str = "medialness.mhd";
    pub const CENTERLINE: &str = "centerline.json";
    pub const CENTERLINE_NODES: &str = "centerline_nodes.csv";
    pub const VESSELS: &str = "vessels.mhd";
    pub const VESSELS_COARSE: &str = "vessels_coarse.mhd";
    pub const RADIUS_PROFILES: &str = "radius_profiles.csv";
    pub const DM_REPORT: &str = "dm_report.json";
    pub const RUN_CONFIG: &str = "run_config.txt";
    pub const TIMING: &str = "timing.csv";
}

/// Pipeline stages in execution order. `Input` covers loading the CT.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Input,
    Airway,
    Lungs,
    Vesselness,
    Centerline,
    Segment,
    Tortuosity,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Input,
        Stage::Airway,
        Stage::Lungs,
        Stage::Vesselness,
        Stage::Centerline,
        Stage::Segment,
        Stage::Tortuosity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::Airway => "airway",
            Stage::Lungs => "lungs",
            Stage::Vesselness => "vesselness",
            Stage::Centerline => "centerline",
            Stage::Segment => "segment",
            Stage::Tortuosity => "tortuosity",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        10 + self.index() as i32
    }
}

/// A stage failure with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{} stage failed: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Manual overrides for automatic detections.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub airway_seed: Option<VoxelIndex>,
    pub heart_seed: Option<VoxelIndex>,
    /// Swap the left/right assignment of the main bronchi.
    pub flip_lr: bool,
}

/// Paths of the artifacts in one output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Workspace { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of a prerequisite, which must exist.
    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                stage: stage.name(),
            })
        }
    }
}

pub fn load_ct(path: impl AsRef<Path>) -> Result<Volume3D> {
    Ok(load_metaimage(path)?.into_scalar())
}

// ---- in-memory stages ----

/// Airway growth and labeling.
#[derive(Clone, Debug)]
pub struct AirwayStage {
    pub grow: GrowResult,
    pub labels: LabelVolume,
}

pub fn airway_stage(vol: &Volume3D, cfg: &PipelineConfig, opts: &RunOptions) -> Result<AirwayStage> {
    let seed = match opts.airway_seed {
        Some(s) => s,
        None => detect_trachea_seed(vol)?,
    };
    let mut params = GrowParams::from_seed(vol, seed)?;
    params.step = cfg.grow_step_hu as f32;
    params.leak_factor = cfg.leak_factor;
    params.max_iterations = cfg.grow_max_iterations;
    params.stall_iterations = cfg.grow_stall_iterations;
    let grow = grow_airway(vol, &params)?;
    log::info!("airway: {} voxels, stop {:?}", grow.mask.count(), grow.stop);
    let tree = skeletonize_and_label(&grow.mask, opts.flip_lr)?;
    Ok(AirwayStage {
        grow,
        labels: tree.labels,
    })
}

fn airway_mask(airway: &LabelVolume) -> Mask {
    airway.volume().map(|l| l != labels::BACKGROUND)
}

/// Coarse mask, left/right split from the labeled main bronchi, refinement.
pub fn lungs_stage(vol: &Volume3D, airway: &LabelVolume, cfg: &PipelineConfig) -> Result<LabelVolume> {
    vol.same_dims(airway.volume())?;
    let coarse = coarse_lung_mask(vol, cfg.otsu_bins)?;
    let am = airway_mask(airway);
    let cost = build_cost_field(vol, &coarse, &am, cfg.cost_weights())?;
    let sources: Vec<(usize, u32)> = airway
        .data()
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l == labels::LEFT || l == labels::RIGHT)
        .map(|(o, &l)| (o, l as u32))
        .collect();
    if !sources.iter().any(|s| s.1 == labels::LEFT as u32) || !sources.iter().any(|s| s.1 == labels::RIGHT as u32) {
        return Err(Error::EmptyMask("main bronchus label"));
    }
    let split = split_from_sources(&cost, &sources)?;
    let refined = refine_lungs(&split, &am, cfg.closing_iterations)?;
    Ok(refined.labels)
}

pub fn vesselness_stage(
    vol: &Volume3D,
    lungs: &LabelVolume,
    airway: &LabelVolume,
    cfg: &PipelineConfig,
) -> Result<MedialnessField> {
    run_filter(vol, lungs, &airway_mask(airway), &cfg.filter())
}

/// Centerline candidates, pruning and per-lung reconnection to `root` (the
/// heart center unless given).
pub fn centerline_stage(
    vol: &Volume3D,
    field: &MedialnessField,
    lungs: &LabelVolume,
    airway: &LabelVolume,
    root: Option<VoxelIndex>,
    cfg: &PipelineConfig,
) -> Result<Vec<CenterlineTree>> {
    let th = field.floor_threshold(cfg.response_floor);
    let candidates = non_max_suppress(field, th, cfg.nms_radius);
    let fragments = prune_fragments(
        &candidates,
        &airway_mask(airway),
        cfg.airway_dilation,
        cfg.prune_min_voxels,
    )?;
    log::info!(
        "centerline: {} candidate voxels, {} fragments",
        candidates.count(),
        fragments.len()
    );
    let root = match root {
        Some(r) => r,
        None => detect_heart_center(vol, lungs, cfg.heart_hu as f32)?,
    };
    let region = lungs.volume().map(|l| l != labels::BACKGROUND);
    let grad = normalized_gradient(vol, &region)?;
    reconnect(&fragments, field, &grad, lungs, root, &cfg.reconnect())
}

/// Vessel segmentation: radius profiles, the painted balls and the final
/// labels (the refined balls, or the painted ones when refinement is off).
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub profiles: Vec<Vec<RadiusProfile>>,
    pub coarse: LabelVolume,
    pub vessels: LabelVolume,
}

pub fn segment_stage(
    vol: &Volume3D,
    lungs: &LabelVolume,
    trees: &[CenterlineTree],
    cfg: &PipelineConfig,
) -> Result<Segmentation> {
    let params = cfg.radius();
    let profiles = trees
        .iter()
        .map(|t| estimate_tree_radii(vol, t, &params))
        .collect::<Result<Vec<_>>>()?;
    let coarse = paint_segmentation(lungs, trees, &profiles)?;
    let vessels = if cfg.refine_segmentation {
        refine_segmentation(vol, lungs, trees, &profiles, &params, cfg.refine_band)?
    } else {
        coarse.clone()
    };
    Ok(Segmentation {
        profiles,
        coarse,
        vessels,
    })
}

/// Tortuosity of one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchDm {
    pub lung: u8,
    pub nodes: usize,
    pub length_mm: f64,
    pub dm: f64,
}

/// Patient-level tortuosity report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmReport {
    pub min_branch_mm: f64,
    /// `None` when no branch reaches the minimum length.
    pub overall: Option<DmSummary>,
    pub left: Option<DmSummary>,
    pub right: Option<DmSummary>,
    pub branches: Vec<BranchDm>,
}

pub fn tortuosity_stage(trees: &[CenterlineTree], cfg: &PipelineConfig) -> Result<DmReport> {
    let min = cfg.dm_min_branch_mm;
    let mut branches = Vec::new();
    for t in trees {
        for b in BranchPath::from_tree(t) {
            let length_mm = b.length();
            if length_mm < min {
                continue;
            }
            branches.push(BranchDm {
                lung: t.lung,
                nodes: b.0.len(),
                length_mm,
                dm: distance_metric(&b)?,
            });
        }
    }
    let summary = |lung: Option<u8>| {
        let dms: Vec<f64> = branches
            .iter()
            .filter(|b| lung.is_none_or(|l| b.lung == l))
            .map(|b| b.dm)
            .collect();
        summarize_dm(&dms, min).ok()
    };
    Ok(DmReport {
        min_branch_mm: min,
        overall: summary(None),
        left: summary(Some(labels::LEFT)),
        right: summary(Some(labels::RIGHT)),
        branches,
    })
}

// ---- artifact writers and readers ----

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_airway(ws: &Workspace, a: &AirwayStage) -> Result<()> {
    a.labels.save(ws.path(artifacts::AIRWAY))?;
    write_trace_csv(&a.grow.trace, ws.path(artifacts::AIRWAY_TRACE))
}

fn write_lungs(ws: &Workspace, lungs: &LabelVolume) -> Result<()> {
    lungs.save(ws.path(artifacts::LUNGS))?;
    let summary = crate::lungs::LungLabels {
        labels: lungs.clone(),
        unreachable: 0,
    }
    .summary();
    write_json(&summary, &ws.path(artifacts::LUNG_SUMMARY))
}

fn write_centerline(ws: &Workspace, trees: &[CenterlineTree]) -> Result<()> {
    save_trees(trees, ws.path(artifacts::CENTERLINE))?;
    save_nodes_csv(trees, ws.path(artifacts::CENTERLINE_NODES))
}

fn write_segmentation(ws: &Workspace, trees: &[CenterlineTree], seg: &Segmentation) -> Result<()> {
    seg.vessels.save(ws.path(artifacts::VESSELS))?;
    seg.coarse.save(ws.path(artifacts::VESSELS_COARSE))?;
    let rows: Vec<(u8, &RadiusProfile)> = trees
        .iter()
        .zip(&seg.profiles)
        .flat_map(|(t, ps)| ps.iter().map(move |p| (t.lung, p)))
        .collect();
    save_profiles_csv(&rows, ws.path(artifacts::RADIUS_PROFILES))
}

fn load_labels(ws: &Workspace, name: &str, producer: Stage) -> Result<LabelVolume> {
    LabelVolume::load(ws.require(name, producer)?)
}

fn load_field(ws: &Workspace, cfg: &PipelineConfig) -> Result<MedialnessField> {
    let p = ws.require(artifacts::MEDIALNESS, Stage::Vesselness)?;
    for suffix in ["_argmax", "_frame"] {
        let c = companion(&p, suffix);
        if !c.is_file() {
            return Err(Error::MissingArtifact {
                path: c,
                stage: Stage::Vesselness.name(),
            });
        }
    }
    MedialnessField::load(&p, cfg.radii.clone(), cfg.pyramid_factor)
}

fn load_centerline(ws: &Workspace) -> Result<Vec<CenterlineTree>> {
    load_trees(ws.require(artifacts::CENTERLINE, Stage::Centerline)?)
}

// ---- file-based single stages ----

pub fn run_airway(ct: &Path, ws: &Workspace, cfg: &PipelineConfig, opts: &RunOptions) -> StageResult<()> {
    let vol = load_ct(ct).at(Stage::Input)?;
    let a = airway_stage(&vol, cfg, opts).at(Stage::Airway)?;
    write_airway(ws, &a).at(Stage::Airway)
}

pub fn run_lungs(ct: &Path, ws: &Workspace, cfg: &PipelineConfig) -> StageResult<()> {
    let airway = load_labels(ws, artifacts::AIRWAY, Stage::Airway).at(Stage::Lungs)?;
    let vol = load_ct(ct).at(Stage::Input)?;
    let lungs = lungs_stage(&vol, &airway, cfg).at(Stage::Lungs)?;
    write_lungs(ws, &lungs).at(Stage::Lungs)
}

pub fn run_vesselness(ct: &Path, ws: &Workspace, cfg: &PipelineConfig) -> StageResult<()> {
    let st = Stage::Vesselness;
    let lungs = load_labels(ws, artifacts::LUNGS, Stage::Lungs).at(st)?;
    let airway = load_labels(ws, artifacts::AIRWAY, Stage::Airway).at(st)?;
    let vol = load_ct(ct).at(Stage::Input)?;
    let field = vesselness_stage(&vol, &lungs, &airway, cfg).at(st)?;
    field.save(&ws.path(artifacts::MEDIALNESS)).at(st)
}

pub fn run_centerline(ct: &Path, ws: &Workspace, cfg: &PipelineConfig, opts: &RunOptions) -> StageResult<()> {
    let st = Stage::Centerline;
    let field = load_field(ws, cfg).at(st)?;
    let lungs = load_labels(ws, artifacts::LUNGS, Stage::Lungs).at(st)?;
    let airway = load_labels(ws, artifacts::AIRWAY, Stage::Airway).at(st)?;
    let vol = load_ct(ct).at(Stage::Input)?;
    let trees = centerline_stage(&vol, &field, &lungs, &airway, opts.heart_seed, cfg).at(st)?;
    write_centerline(ws, &trees).at(st)
}

pub fn run_segment(ct: &Path, ws: &Workspace, cfg: &PipelineConfig) -> StageResult<()> {
    let st = Stage::Segment;
    let trees = load_centerline(ws).at(st)?;
    let lungs = load_labels(ws, artifacts::LUNGS, Stage::Lungs).at(st)?;
    let vol = load_ct(ct).at(Stage::Input)?;
    let seg = segment_stage(&vol, &lungs, &trees, cfg).at(st)?;
    write_segmentation(ws, &trees, &seg).at(st)
}

pub fn run_tortuosity(ws: &Workspace, cfg: &PipelineConfig) -> StageResult<DmReport> {
    let st = Stage::Tortuosity;
    let trees = load_centerline(ws).at(st)?;
    let report = tortuosity_stage(&trees, cfg).at(st)?;
    write_json(&report, &ws.path(artifacts::DM_REPORT)).at(st)?;
    Ok(report)
}

/// Wall time per reported stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timing {
    pub rows: Vec<(&'static str, f64)>,
}

/// Stage names written to `timing.csv`.
pub const TIMED_STAGES: [&str; 4] = [
    "lung_airway_segmentation",
    "vessel_enhancement",
    "centerline_extraction",
    "vessel_segmentation",
];

impl Timing {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("stage,seconds\n");
        for (name, secs) in &self.rows {
            s.push_str(&format!("{name},{secs:.3}\n"));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Results of a full run kept in memory.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub airway: LabelVolume,
    pub lungs: LabelVolume,
    pub trees: Vec<CenterlineTree>,
    pub vessels: LabelVolume,
    pub dm: DmReport,
    pub timing: Timing,
}

/// Runs every stage on `ct` and writes all artifacts into `ws`.
pub fn run_pipeline(ct: &Path, ws: &Workspace, cfg: &PipelineConfig, opts: &RunOptions) -> StageResult<PipelineOutput> {
    cfg.save(ws.path(artifacts::RUN_CONFIG)).at(Stage::Input)?;
    let vol = load_ct(ct).at(Stage::Input)?;
    let mut timing = Timing::default();

    let t = Instant::now();
    let airway = airway_stage(&vol, cfg, opts).at(Stage::Airway)?;
    write_airway(ws, &airway).at(Stage::Airway)?;
    let lungs = lungs_stage(&vol, &airway.labels, cfg).at(Stage::Lungs)?;
    write_lungs(ws, &lungs).at(Stage::Lungs)?;
    timing.rows.push((TIMED_STAGES[0], t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let field = vesselness_stage(&vol, &lungs, &airway.labels, cfg).at(Stage::Vesselness)?;
    field.save(&ws.path(artifacts::MEDIALNESS)).at(Stage::Vesselness)?;
    timing.rows.push((TIMED_STAGES[1], t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let trees = centerline_stage(&vol, &field, &lungs, &airway.labels, opts.heart_seed, cfg).at(Stage::Centerline)?;
    write_centerline(ws, &trees).at(Stage::Centerline)?;
    timing.rows.push((TIMED_STAGES[2], t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let seg = segment_stage(&vol, &lungs, &trees, cfg).at(Stage::Segment)?;
    write_segmentation(ws, &trees, &seg).at(Stage::Segment)?;
    timing.rows.push((TIMED_STAGES[3], t.elapsed().as_secs_f64()));

    let dm = tortuosity_stage(&trees, cfg).at(Stage::Tortuosity)?;
    write_json(&dm, &ws.path(artifacts::DM_REPORT)).at(Stage::Tortuosity)?;
    timing.save(&ws.path(artifacts::TIMING)).at(Stage::Tortuosity)?;
    Ok(PipelineOutput {
        airway: airway.labels,
        lungs,
        trees,
        vessels: seg.vessels,
        dm,
        timing,
    })
}

/// Vessel-only run on a tube phantom: the whole volume is treated as one
/// lung without airways and the centerline is rooted at `root`.
#[derive(Clone, Debug)]
pub struct PhantomRun {
    pub field: MedialnessField,
    pub trees: Vec<CenterlineTree>,
    pub segmentation: Segmentation,
    pub vessels: Mask,
}

pub fn run_phantom(vol: &Volume3D, root: VoxelIndex, cfg: &PipelineConfig) -> Result<PhantomRun> {
    let grid = *vol.grid();
    let lungs = LabelVolume::from_volume(Volume::filled(grid, labels::LEFT))?;
    let airway = LabelVolume::empty(grid);
    let field = vesselness_stage(vol, &lungs, &airway, cfg)?;
    let trees = centerline_stage(vol, &field, &lungs, &airway, Some(root), cfg)?;
    let segmentation = segment_stage(vol, &lungs, &trees, cfg)?;
    Ok(PhantomRun {
        field,
        trees,
        vessels: segmentation.vessels.mask_of(labels::VESSEL),
        segmentation,
    })
}
