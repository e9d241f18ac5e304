//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::centerline::ReconnectParams;
use crate::error::{Error, Result};
use crate::lungs::CostWeights;
use crate::medialness::FilterConfig;
use crate::metrics::TTestKind;
use crate::vesselseg::{radius_range, RadiusParams};

/// Every tunable of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub grow_step_hu: f64,
    pub leak_factor: f64,
    pub grow_max_iterations: usize,
    pub grow_stall_iterations: usize,
    pub otsu_bins: usize,
    pub closing_iterations: usize,
    pub cost_weight_gradient: f64,
    pub cost_weight_mask: f64,
    pub pyramid_factor: f64,
    pub n_scales: usize,
    pub radii: Vec<f64>,
    pub symmetry_exponent: f64,
    pub level_sigma: f64,
    pub response_floor: f64,
    /// 0 processes the volume untiled.
    pub tile_slices: usize,
    pub nms_radius: f64,
    pub prune_min_voxels: usize,
    pub airway_dilation: usize,
    pub heart_hu: f64,
    pub reconnect_epsilon: f64,
    pub reconnect_lambda: f64,
    pub corridor_radius: usize,
    pub sphere_radius_min: f64,
    pub sphere_radius_max: f64,
    pub sphere_radius_step: f64,
    pub drop_threshold: f64,
    pub air_reference_hu: f64,
    pub vessel_min_hu: f64,
    /// Snap the painted balls to the half-contrast boundary.
    pub refine_segmentation: bool,
    pub refine_band: f64,
    pub dm_min_branch_mm: f64,
    pub ttest: TTestKind,
    pub noise_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        let r = ReconnectParams::default();
        let w = CostWeights::default();
        PipelineConfig {
            grow_step_hu: 1.0,
            leak_factor: 3.0,
            grow_max_iterations: 1000,
            grow_stall_iterations: 5,
            otsu_bins: 256,
            closing_iterations: 10,
            cost_weight_gradient: w.gradient,
            cost_weight_mask: w.mask,
            pyramid_factor: f.pyramid_factor,
            n_scales: f.n_scales,
            radii: f.radii,
            symmetry_exponent: f.symmetry_exponent,
            level_sigma: f.level_sigma,
            response_floor: f.response_floor,
            tile_slices: 0,
            nms_radius: 1.0,
            prune_min_voxels: 5,
            airway_dilation: 2,
            heart_hu: 100.0,
            reconnect_epsilon: r.epsilon,
            reconnect_lambda: r.lambda,
            corridor_radius: r.corridor_radius,
            sphere_radius_min: 1.0,
            sphere_radius_max: 10.0,
            sphere_radius_step: 0.5,
            drop_threshold: 0.6,
            air_reference_hu: -1000.0,
            vessel_min_hu: -500.0,
            refine_segmentation: true,
            refine_band: 1.0,
            dm_min_branch_mm: crate::metrics::DEFAULT_MIN_BRANCH_MM,
            ttest: TTestKind::Welch,
            noise_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

impl PipelineConfig {
    /// Key/value pairs in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("grow_step_hu", self.grow_step_hu.to_string()),
            ("leak_factor", self.leak_factor.to_string()),
            ("grow_max_iterations", self.grow_max_iterations.to_string()),
            ("grow_stall_iterations", self.grow_stall_iterations.to_string()),
            ("otsu_bins", self.otsu_bins.to_string()),
            ("closing_iterations", self.closing_iterations.to_string()),
            ("cost_weight_gradient", self.cost_weight_gradient.to_string()),
            ("cost_weight_mask", self.cost_weight_mask.to_string()),
            ("pyramid_factor", self.pyramid_factor.to_string()),
            ("n_scales", self.n_scales.to_string()),
            ("radii", fmt_list(&self.radii)),
            ("symmetry_exponent", self.symmetry_exponent.to_string()),
            ("level_sigma", self.level_sigma.to_string()),
            ("response_floor", self.response_floor.to_string()),
            ("tile_slices", self.tile_slices.to_string()),
            ("nms_radius", self.nms_radius.to_string()),
            ("prune_min_voxels", self.prune_min_voxels.to_string()),
            ("airway_dilation", self.airway_dilation.to_string()),
            ("heart_hu", self.heart_hu.to_string()),
            ("reconnect_epsilon", self.reconnect_epsilon.to_string()),
            ("reconnect_lambda", self.reconnect_lambda.to_string()),
            ("corridor_radius", self.corridor_radius.to_string()),
            ("sphere_radius_min", self.sphere_radius_min.to_string()),
            ("sphere_radius_max", self.sphere_radius_max.to_string()),
            ("sphere_radius_step", self.sphere_radius_step.to_string()),
            ("drop_threshold", self.drop_threshold.to_string()),
            ("air_reference_hu", self.air_reference_hu.to_string()),
            ("vessel_min_hu", self.vessel_min_hu.to_string()),
            ("refine_segmentation", self.refine_segmentation.to_string()),
            ("refine_band", self.refine_band.to_string()),
            ("dm_min_branch_mm", self.dm_min_branch_mm.to_string()),
            (
                "ttest",
                match self.ttest {
                    TTestKind::Welch => "welch".into(),
                    TTestKind::Pooled => "pooled".into(),
                },
            ),
            ("noise_seed", self.noise_seed.to_string()),
        ]
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grow_step_hu" => self.grow_step_hu = parse(key, value)?,
            "leak_factor" => self.leak_factor = parse(key, value)?,
            "grow_max_iterations" => self.grow_max_iterations = parse(key, value)?,
            "grow_stall_iterations" => self.grow_stall_iterations = parse(key, value)?,
            "otsu_bins" => self.otsu_bins = parse(key, value)?,
            "closing_iterations" => self.closing_iterations = parse(key, value)?,
            "cost_weight_gradient" => self.cost_weight_gradient = parse(key, value)?,
            "cost_weight_mask" => self.cost_weight_mask = parse(key, value)?,
            "pyramid_factor" => self.pyramid_factor = parse(key, value)?,
            "n_scales" => self.n_scales = parse(key, value)?,
            "radii" => self.radii = parse_list(key, value)?,
            "symmetry_exponent" => self.symmetry_exponent = parse(key, value)?,
            "level_sigma" => self.level_sigma = parse(key, value)?,
            "response_floor" => self.response_floor = parse(key, value)?,
            "tile_slices" => self.tile_slices = parse(key, value)?,
            "nms_radius" => self.nms_radius = parse(key, value)?,
            "prune_min_voxels" => self.prune_min_voxels = parse(key, value)?,
            "airway_dilation" => self.airway_dilation = parse(key, value)?,
            "heart_hu" => self.heart_hu = parse(key, value)?,
            "reconnect_epsilon" => self.reconnect_epsilon = parse(key, value)?,
            "reconnect_lambda" => self.reconnect_lambda = parse(key, value)?,
            "corridor_radius" => self.corridor_radius = parse(key, value)?,
            "sphere_radius_min" => self.sphere_radius_min = parse(key, value)?,
            "sphere_radius_max" => self.sphere_radius_max = parse(key, value)?,
            "sphere_radius_step" => self.sphere_radius_step = parse(key, value)?,
            "drop_threshold" => self.drop_threshold = parse(key, value)?,
            "air_reference_hu" => self.air_reference_hu = parse(key, value)?,
            "vessel_min_hu" => self.vessel_min_hu = parse(key, value)?,
            "refine_segmentation" => self.refine_segmentation = parse(key, value)?,
            "refine_band" => self.refine_band = parse(key, value)?,
            "dm_min_branch_mm" => self.dm_min_branch_mm = parse(key, value)?,
            "ttest" => {
                self.ttest = match value {
                    "welch" => TTestKind::Welch,
                    "pooled" => TTestKind::Pooled,
                    _ => {
                        return Err(Error::Config(format!(
                            "ttest must be 'welch' or 'pooled', got '{value}'"
                        )))
                    }
                }
            }
            "noise_seed" => self.noise_seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.filter().validate().map_err(|e| Error::Config(e.to_string()))?;
        check_radii_range(self)?;
        let checks = [
            (self.leak_factor > 1.0, "leak_factor must exceed 1"),
            (self.grow_step_hu >= 0.0, "grow_step_hu must be >= 0"),
            (self.otsu_bins >= 2, "otsu_bins must be >= 2"),
            (
                self.drop_threshold > 0.0 && self.drop_threshold < 1.0,
                "drop_threshold must be in (0, 1)",
            ),
            (self.reconnect_epsilon > 0.0, "reconnect_epsilon must be positive"),
            (self.reconnect_lambda >= 0.0, "reconnect_lambda must be >= 0"),
            (self.nms_radius > 0.0, "nms_radius must be positive"),
            (self.refine_band >= 0.0, "refine_band must be >= 0"),
            (self.response_floor >= 0.0, "response_floor must be >= 0"),
            (self.dm_min_branch_mm >= 0.0, "dm_min_branch_mm must be >= 0"),
            (
                self.cost_weight_gradient >= 0.0 && self.cost_weight_mask >= 0.0,
                "cost weights must be >= 0",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            n_scales: self.n_scales,
            pyramid_factor: self.pyramid_factor,
            radii: self.radii.clone(),
            symmetry_exponent: self.symmetry_exponent,
            level_sigma: self.level_sigma,
            response_floor: self.response_floor,
            tile_slices: (self.tile_slices > 0).then_some(self.tile_slices),
        }
    }

    pub fn reconnect(&self) -> ReconnectParams {
        ReconnectParams {
            epsilon: self.reconnect_epsilon,
            lambda: self.reconnect_lambda,
            corridor_radius: self.corridor_radius,
        }
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            gradient: self.cost_weight_gradient,
            mask: self.cost_weight_mask,
        }
    }

    pub fn radius(&self) -> RadiusParams {
        RadiusParams {
            radii: radius_range(self.sphere_radius_min, self.sphere_radius_max, self.sphere_radius_step),
            drop_threshold: self.drop_threshold,
            air_reference_hu: self.air_reference_hu,
            vessel_min_hu: self.vessel_min_hu,
        }
    }
}

fn check_radii_range(c: &PipelineConfig) -> Result<()> {
    if !(c.sphere_radius_min > 0.0 && c.sphere_radius_step > 0.0 && c.sphere_radius_max >= c.sphere_radius_min) {
        return Err(Error::Config(
            "sphere radii need 0 < sphere_radius_min <= sphere_radius_max and a positive step".into(),
        ));
    }
    Ok(())
}
