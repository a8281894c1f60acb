//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use orthofuse::fusion::ProcessNoise;
use orthofuse::matching::{MatchConfig, RefineParams};
use orthofuse::ortho::OrthoParams;
use orthofuse::synth::{preset, SceneSpec};
use orthofuse::terrain::TerrainParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Built-in scene; ignored when `scene` is given in full.
    pub preset: Option<String>,
    pub scene: Option<SceneSpec>,
    /// Overrides the scene seed.
    pub seed: Option<u64>,
    /// Scene directory consumed by the stage commands; `<output>/scene` if unset.
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    /// Worker threads; all cores if unset.
    pub threads: Option<usize>,
    pub fusion: FusionConfig,
    pub terrain: TerrainParams,
    pub features: FeatureConfig,
    pub matching: MatchConfig,
    pub refine: RefineConfig,
    pub ortho: OrthoConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: None,
            scene: None,
            seed: None,
            input: None,
            output: PathBuf::from("out"),
            threads: None,
            fusion: FusionConfig::default(),
            terrain: TerrainParams::default(),
            features: FeatureConfig::default(),
            matching: MatchConfig::default(),
            refine: RefineConfig::default(),
            ortho: OrthoConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub process: ProcessNoise,
    pub init_velocity_std: f64,
    pub init_attitude_std_deg: f64,
    pub init_accel_bias_std: f64,
    pub init_gyro_bias_std: f64,
}

/// Defaults are the datasheet values of the simulated IMU.
impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            process: ProcessNoise {
                accel_density: 2e-3,
                gyro_density: 5e-5,
                accel_bias_walk: 1e-5,
                gyro_bias_walk: 1e-7,
            },
            init_velocity_std: 0.1,
            // The rig carries a ground-aligned initial attitude.
            init_attitude_std_deg: 0.1,
            init_accel_bias_std: 2e-3,
            init_gyro_bias_std: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Labeled features shipped with the scene.
    Synthetic,
    /// Corner detection on the frame images.
    Detect,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub source: FeatureSource,
    /// Per-frame cap for detection.
    pub max_features: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            source: FeatureSource::Synthetic,
            max_features: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    pub params: RefineParams,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            params: RefineParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    /// Refined poses when available, else fused.
    Refined,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoConfig {
    pub gsd: Option<f64>,
    pub margin: f64,
    pub blur: bool,
    pub normalize_illumination: bool,
    pub transparent: bool,
    pub poses: PoseSource,
}

impl Default for OrthoConfig {
    fn default() -> Self {
        let p = OrthoParams::default();
        Self {
            gsd: p.gsd,
            margin: p.margin,
            blur: p.blur,
            normalize_illumination: p.normalize_illumination,
            transparent: false,
            poses: PoseSource::Refined,
        }
    }
}

impl OrthoConfig {
    pub fn params(&self) -> OrthoParams {
        OrthoParams {
            gsd: self.gsd,
            margin: self.margin,
            blur: self.blur,
            normalize_illumination: self.normalize_illumination,
            ..OrthoParams::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Pairs kept per block in the homogenized variant.
    pub max_per_block: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { max_per_block: 4 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Scene spec after applying preset, explicit spec and seed override.
    pub fn scene_spec(&self) -> Result<SceneSpec, CliError> {
        let mut spec = match (&self.scene, &self.preset) {
            (Some(_), Some(_)) => return Err(CliError::Config("give either `preset` or `scene`, not both".into())),
            (Some(s), None) => s.clone(),
            (None, Some(p)) => preset(p).map_err(|e| CliError::Config(e.to_string()))?,
            (None, None) => preset("road-like").expect("built-in preset"),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn scene_dir(&self) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.output.join("scene"))
    }

    /// Checks every section; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.scene_spec()?;
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        let t = &self.terrain;
        if !(t.voxel > 0.0 && t.cell_size > 0.0 && t.std_ratio > 0.0) {
            return bad("terrain voxel, cell_size and std_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.percentile) || t.fill_k == 0 || t.outlier_k == 0 {
            return bad("terrain percentile must be in [0, 1]; outlier_k and fill_k at least 1".into());
        }
        self.matching.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(g) = self.ortho.gsd {
            if !(g > 0.0) {
                return bad(format!("ortho gsd must be positive, got {g}"));
            }
        }
        if !(0.0..1.0).contains(&self.ortho.margin) {
            return bad("ortho margin must be in [0, 1)".into());
        }
        if self.features.max_features == 0 || self.bench.max_per_block == 0 {
            return bad("features.max_features and bench.max_per_block must be at least 1".into());
        }
        let f = &self.fusion;
        let p = &f.process;
        let all = [p.accel_density, p.gyro_density, p.accel_bias_walk, p.gyro_bias_walk];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return bad("fusion process noise must be non-negative".into());
        }
        let init = [f.init_velocity_std, f.init_attitude_std_deg, f.init_accel_bias_std, f.init_gyro_bias_std];
        if init.iter().any(|v| !(*v > 0.0)) {
            return bad("fusion initial standard deviations must be positive".into());
        }
        let r = &self.refine.params;
        if !(r.huber > 0.0) || r.max_iterations == 0 {
            return bad("refine huber must be positive and max_iterations at least 1".into());
        }
        let mut warnings = Vec::new();
        if self.matching.homogenize.is_some() && !self.matching.matcher.uses_prior() {
            warnings.push(format!(
                "homogenize is set but matcher '{}' does not use the block grid; blocks are still formed on image A",
                self.matching.matcher.name()
            ));
        }
        Ok(warnings)
    }
}
