//! Run configuration.
//!
//! A run is described by one TOML file. Every key is optional; missing keys
//! take the defaults shown below. `seed`, when given, replaces the dataset,
//! field and training seeds.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/default"
//!
//! [scene]
//! preset = "checker-sphere"        # or "specular-sphere"
//!
//! [dataset]                         # DatasetSpec
//! width = 64
//! height = 64
//! train = { count = 60, min_elevation_deg = 40.0, max_elevation_deg = 90.0 }
//!
//! [field]                           # FieldConfig
//! mode = "standard"                 # "no-direction" | "atlas-capable" | "deferred"
//!
//! [train]                           # TrainSchedule
//! stage1_iters = 15000
//! p_rrc = 0.7
//! p_ra = 0.5
//! eta_deg = 30.0
//!
//! [mesh]
//! resolution = 128
//! # iso = 5.0                       # default: ln 2 per voxel diagonal
//! visibility_eps_voxels = 0.5
//!
//! [eval]
//! samples = 64
//! variants = ["baseline", "ra", "rrc", "rrc+ra"]
//! eta_sweep_deg = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
//! ```
//!
//! Overrides use dotted keys (`train.p_ra=0.25`); the value is parsed as a
//! TOML value and taken as a plain string when that fails.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::geometry::Aabb;
use crate::scene::ToyScene;
use crate::train::TrainSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    CheckerSphere,
    SpecularSphere,
}

impl ScenePreset {
    pub fn build(self) -> ToyScene {
        match self {
            ScenePreset::CheckerSphere => ToyScene::checker_sphere(),
            ScenePreset::SpecularSphere => ToyScene::specular_sphere(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub preset: ScenePreset,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            preset: ScenePreset::CheckerSphere,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub resolution: usize,
    pub iso: Option<f64>,
    /// Occlusion tolerance for atlas visibility, in voxel edges.
    pub visibility_eps_voxels: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            iso: None,
            visibility_eps_voxels: 0.5,
        }
    }
}

/// Which priors a fine-tuned model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "ra")]
    Ra,
    #[serde(rename = "rrc")]
    Rrc,
    #[serde(rename = "rrc+ra")]
    RrcRa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Ra, Variant::Rrc, Variant::RrcRa];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ra => "ra",
            Variant::Rrc => "rrc",
            Variant::RrcRa => "rrc+ra",
        }
    }

    /// Directory-safe form of the name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::RrcRa => "rrc_ra",
            v => v.name(),
        }
    }

    pub fn uses_rrc(self) -> bool {
        matches!(self, Variant::Rrc | Variant::RrcRa)
    }

    pub fn uses_atlas(self) -> bool {
        matches!(self, Variant::Ra | Variant::RrcRa)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || v.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected baseline, ra, rrc or rrc+ra)")))
    }

    /// The schedule with the unused priors switched off.
    pub fn schedule(self, base: &TrainSchedule) -> TrainSchedule {
        TrainSchedule {
            p_rrc: if self.uses_rrc() { base.p_rrc } else { 0.0 },
            p_ra: if self.uses_atlas() { base.p_ra } else { 0.0 },
            ..base.clone()
        }
    }

    /// A variant runs when each prior it names has a non-zero probability.
    pub fn enabled(self, base: &TrainSchedule) -> bool {
        (!self.uses_rrc() || base.p_rrc > 0.0) && (!self.uses_atlas() || base.p_ra > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per ray for test renders.
    pub samples: usize,
    pub variants: Vec<Variant>,
    pub eta_sweep_deg: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            variants: Variant::ALL.to_vec(),
            eta_sweep_deg: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub dataset: DatasetSpec,
    pub field: FieldConfig,
    pub train: TrainSchedule,
    pub mesh: MeshConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            dataset: DatasetSpec::default(),
            field: FieldConfig {
                bounds: Aabb::cube(1.2),
                ..FieldConfig::default()
            },
            train: TrainSchedule::default(),
            mesh: MeshConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_owned()),
    }
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        // partial sections keep the defaults of their unnamed fields
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validated()
    }

    /// Reads a config file; `None` gives the defaults (plus overrides).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Applies the top-level seed and checks every section.
    pub fn validated(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.field.seed = s;
            self.train.seed = s;
        }
        let cfg_err = |e: Error| match e {
            Error::Config(m) | Error::InvalidInput(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.field.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        self.scene.preset.build().validate().map_err(cfg_err)?;
        if self.mesh.resolution < 16 {
            return Err(Error::Config("mesh.resolution must be at least 16".into()));
        }
        if !(self.mesh.visibility_eps_voxels >= 0.0) {
            return Err(Error::Config("mesh.visibility_eps_voxels must be non-negative".into()));
        }
        if let Some(iso) = self.mesh.iso {
            if !(iso > 0.0 && iso.is_finite()) {
                return Err(Error::Config("mesh.iso must be positive".into()));
            }
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        if self.eval.eta_sweep_deg.iter().any(|e| !(0.0..90.0).contains(e)) {
            return Err(Error::Config("eval.eta_sweep_deg entries must lie in [0, 90)".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical TOML form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
