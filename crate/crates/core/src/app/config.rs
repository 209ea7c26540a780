//! Simulation configuration: TOML text, embedded presets and cross-field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::Component;
use crate::error::{ConfigError, PdError, Result};
use crate::forces::{ForceLaw, LoadKind, Material};
use crate::geometry::{build_grid, select_layer, Aabb, Dim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Plate2d,
    Block3d,
    Crack2d,
    Custom,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Plate2d => "plate2d",
            Scenario::Block3d => "block3d",
            Scenario::Crack2d => "crack2d",
            Scenario::Custom => "custom",
        }
    }
}

/// Embedded preset text for a scenario, at desk or full scale.
pub fn preset_text(name: &str, full_scale: bool) -> Option<&'static str> {
    Some(match (name, full_scale) {
        ("plate2d", false) => include_str!("../../presets/plate2d.toml"),
        ("plate2d", true) => include_str!("../../presets/plate2d-full.toml"),
        ("block3d", false) => include_str!("../../presets/block3d.toml"),
        ("block3d", true) => include_str!("../../presets/block3d-full.toml"),
        ("crack2d", false) => include_str!("../../presets/crack2d.toml"),
        ("crack2d", true) => include_str!("../../presets/crack2d-full.toml"),
        _ => return None,
    })
}

pub const PRESETS: [&str; 3] = ["plate2d", "block3d", "crack2d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Region {
    pub fn to_aabb(&self) -> Aabb {
        Aabb::from_slices(&self.min, &self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub spacing: f64,
    /// Plate thickness; 2D only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thickness: Option<f64>,
}

impl GeometryConfig {
    pub fn dim(&self) -> Option<Dim> {
        Dim::from_count(self.min.len())
    }
    pub fn bounds(&self) -> Aabb {
        Aabb::from_slices(&self.min, &self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: f64,
    pub law: ForceLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadKindConfig {
    BodyForce,
    Velocity,
}

impl From<LoadKindConfig> for LoadKind {
    fn from(k: LoadKindConfig) -> Self {
        match k {
            LoadKindConfig::BodyForce => LoadKind::BodyForce,
            LoadKindConfig::Velocity => LoadKind::Velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub kind: LoadKindConfig,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Force density (N/m^3) or velocity (m/s), one entry per dimension.
    pub value: Vec<f64>,
    /// Duration of a smooth switch-on from zero; absent means applied at full value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractureConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_critical_stretch")]
    pub critical_stretch: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precrack: Option<[[f64; 2]; 2]>,
}

fn default_critical_stretch() -> f64 {
    0.01
}

impl Default for FractureConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            critical_stretch: default_critical_stretch(),
            precrack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Upd,
    Mts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtsSection {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub fine_region: Vec<Region>,
}

fn default_order() -> usize {
    4
}
fn default_substeps() -> usize {
    1
}

impl Default for MtsSection {
    fn default() -> Self {
        Self {
            scheme: Scheme::Upd,
            order: default_order(),
            substeps: default_substeps(),
            fine_region: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Vtk,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    /// Snapshot every `cadence` steps; 0 writes only the initial and final states.
    #[serde(default)]
    pub cadence: usize,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Vtk]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            cadence: 0,
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub component: Component,
    /// Step of the single-rate reference run; defaults to the finest swept step / 16.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_dt: Option<f64>,
    /// Directory for cached reference states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub geometry: GeometryConfig,
    pub material: Material,
    pub model: ModelConfig,
    #[serde(default)]
    pub loads: Vec<LoadConfig>,
    #[serde(default)]
    pub fracture: FractureConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub mts: MtsSection,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Command-line style overrides applied on top of the file before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scheme: Option<Scheme>,
    pub order: Option<usize>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub substeps: Option<usize>,
    pub output: Option<PathBuf>,
}

fn syntax_error(e: toml::de::Error) -> PdError {
    ConfigError::single("config", e.to_string().trim_end()).into()
}

/// Recursively overlays `top` onto `base`; tables merge key by key, everything else is replaced.
pub fn deep_merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => deep_merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses config text. A `scenario` naming a preset starts from that preset, and the
/// keys given in `text` override it.
pub fn parse_config(text: &str, full_scale: bool, overrides: &Overrides) -> Result<SimulationConfig> {
    let user: toml::Value = toml::from_str(text).map_err(syntax_error)?;
    let mut merged = match user.get("scenario").and_then(|s| s.as_str()) {
        Some(name) => match preset_text(name, full_scale) {
            Some(preset) => {
                let mut base: toml::Value = toml::from_str(preset).expect("embedded presets parse");
                deep_merge(&mut base, user);
                base
            }
            None => user,
        },
        None => user,
    };
    apply_overrides(&mut merged, overrides);
    let config: SimulationConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| PdError::from(ConfigError::single("config", e.message())))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, full_scale: bool, overrides: &Overrides) -> Result<SimulationConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, full_scale, overrides)
}

/// A preset with overrides, without any user file.
pub fn preset_config(name: &str, full_scale: bool, overrides: &Overrides) -> Result<SimulationConfig> {
    if preset_text(name, full_scale).is_none() {
        return Err(ConfigError::single("scenario", format!("unknown preset {name:?}; known: {}", PRESETS.join(", "))).into());
    }
    parse_config(&format!("scenario = {name:?}\n"), full_scale, overrides)
}

fn apply_overrides(value: &mut toml::Value, o: &Overrides) {
    let mut patch = toml::Table::new();
    let mut time = toml::Table::new();
    let mut mts = toml::Table::new();
    if let Some(dt) = o.dt {
        time.insert("dt".into(), dt.into());
    }
    if let Some(n) = o.steps {
        time.insert("steps".into(), (n as i64).into());
    }
    if let Some(s) = o.scheme {
        let name = match s {
            Scheme::Upd => "upd",
            Scheme::Mts => "mts",
        };
        mts.insert("scheme".into(), name.into());
    }
    if let Some(r) = o.order {
        mts.insert("order".into(), (r as i64).into());
    }
    if let Some(k) = o.substeps {
        mts.insert("substeps".into(), (k as i64).into());
    }
    if let Some(dir) = &o.output {
        let mut out = toml::Table::new();
        out.insert("directory".into(), dir.display().to_string().into());
        patch.insert("output".into(), out.into());
    }
    if !time.is_empty() {
        patch.insert("time".into(), time.into());
    }
    if !mts.is_empty() {
        patch.insert("mts".into(), mts.into());
    }
    deep_merge(value, toml::Value::Table(patch));
}

fn check_region(issues: &mut ConfigError, path: &str, min: &[f64], max: &[f64], dims: usize) -> bool {
    let mut ok = true;
    if min.len() != dims || max.len() != dims {
        issues.push(path, format!("min and max need {dims} coordinates"));
        return false;
    }
    for (k, (a, b)) in min.iter().zip(max).enumerate() {
        if !(a.is_finite() && b.is_finite() && a <= b) {
            issues.push(path, format!("axis {k}: min {a} must not exceed max {b}"));
            ok = false;
        }
    }
    ok
}

impl SimulationConfig {
    pub fn dim(&self) -> Dim {
        self.geometry.dim().unwrap_or(Dim::Two)
    }

    /// Checks every cross-field rule and reports all violations together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = ConfigError::default();
        let g = &self.geometry;
        let dim = g.dim();
        let dims = match dim {
            Some(d) => d.count(),
            None => {
                issues.push("geometry.min", "need 2 or 3 coordinates");
                2
            }
        };
        let mut geometry_ok = dim.is_some();
        if dim.is_some() {
            if g.max.len() != dims {
                issues.push("geometry.max", format!("need {dims} coordinates like geometry.min"));
                geometry_ok = false;
            } else {
                for (k, (a, b)) in g.min.iter().zip(&g.max).enumerate() {
                    if !(b > a) {
                        issues.push("geometry.max", format!("axis {k}: extent must be positive"));
                        geometry_ok = false;
                    }
                }
            }
        }
        if !(g.spacing > 0.0 && g.spacing.is_finite()) {
            issues.push("geometry.spacing", "must be positive");
            geometry_ok = false;
        }
        match (dim, g.thickness) {
            (Some(Dim::Two), None) => issues.push("geometry.thickness", "required in 2D"),
            (Some(Dim::Two), Some(d)) if !(d > 0.0) => issues.push("geometry.thickness", "must be positive"),
            (Some(Dim::Three), Some(_)) => issues.push("geometry.thickness", "only meaningful in 2D"),
            _ => {}
        }
        let cloud = if geometry_ok {
            match build_grid(&g.bounds(), g.spacing, dim.unwrap(), g.thickness.or(Some(1.0))) {
                Ok(c) => Some(c),
                Err(e) => {
                    issues.push("geometry.spacing", e.to_string());
                    None
                }
            }
        } else {
            None
        };

        if let Some(d) = dim {
            for (key, msg) in self.material.problems(d) {
                issues.push(format!("material.{key}"), msg);
            }
        }
        if !(self.model.horizon > 0.0) {
            issues.push("model.horizon", "must be positive");
        } else if self.model.horizon < g.spacing {
            issues.push("model.horizon", format!("must be at least the spacing {}", g.spacing));
        }

        for (k, load) in self.loads.iter().enumerate() {
            let path = format!("loads[{k}]");
            if check_region(&mut issues, &path, &load.min, &load.max, dims) {
                if let Some(c) = &cloud {
                    if select_layer(c, &Aabb::from_slices(&load.min, &load.max)).is_err() {
                        issues.push(&path, "region contains no points");
                    }
                }
            }
            if load.value.len() != dims || load.value.iter().any(|v| !v.is_finite()) {
                issues.push(format!("{path}.value"), format!("need {dims} finite components"));
            }
            if let Some(r) = load.ramp {
                if !(r > 0.0) {
                    issues.push(format!("{path}.ramp"), "must be positive");
                }
            }
        }

        let f = &self.fracture;
        if f.enabled && !(f.critical_stretch > 0.0) {
            issues.push("fracture.critical_stretch", "must be positive when fracture is enabled");
        }
        if f.precrack.is_some() && dim != Some(Dim::Two) {
            issues.push("fracture.precrack", "pre-cracks are supported in 2D only");
        }

        let t = &self.time;
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            issues.push("time.dt", "must be positive");
        }

        let m = &self.mts;
        if m.order != 3 && m.order != 4 {
            issues.push("mts.order", format!("must be 3 or 4, got {}", m.order));
        }
        if m.substeps == 0 {
            issues.push("mts.substeps", "must be at least 1");
        }
        for (k, r) in m.fine_region.iter().enumerate() {
            let path = format!("mts.fine_region[{k}]");
            if check_region(&mut issues, &path, &r.min, &r.max, dims)
                && geometry_ok
                && !g.bounds().contains_box(&r.to_aabb(), 1e-9 * g.spacing)
            {
                issues.push(path, "must lie inside the geometry");
            }
        }

        let o = &self.output;
        if o.cadence > 0 && !t.steps.is_multiple_of(o.cadence) {
            issues.push("output.cadence", format!("must divide time.steps = {}", t.steps));
        }
        if let Some(r) = self.analysis.reference_dt {
            if !(r > 0.0) {
                issues.push("analysis.reference_dt", "must be positive");
            }
        }
        if dim == Some(Dim::Two) && self.analysis.component == Component::Z {
            issues.push("analysis.component", "2D runs have no z displacement");
        }
        issues.into_result()
    }

    /// Canonical TOML text of the full configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Text identifying the physical problem: everything except stepping, scheme and output.
    pub fn physics_description(&self) -> String {
        let mut c = self.clone();
        c.time.dt = 0.0;
        c.mts = MtsSection::default();
        c.output = OutputConfig::default();
        c.analysis = AnalysisConfig::default();
        c.to_toml()
    }

    pub fn final_time(&self) -> f64 {
        self.time.dt * self.time.steps as f64
    }
}
