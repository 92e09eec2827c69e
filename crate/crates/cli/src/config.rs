//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use prp_core::adaptation::AdaptationParams;
use prp_core::correspondence::PairSamplingParams;
use prp_core::evaluation::{EssentialParams, RansacParams, RegistrationParams};
use prp_core::geometry::{CameraIntrinsics, PrPParams};
use prp_core::losses::DescriptorLossParams;
use prp_core::scene::{SceneSpec, Texture, TrajectorySpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinScene {
    Room,
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub builtin: BuiltinScene,
    /// JSON scene description; replaces the builtin when set.
    pub path: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            builtin: BuiltinScene::Room,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            hfov_deg: 44.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceConfig {
    pub cell: usize,
    pub eps_s_prp: f64,
    pub eps_s_homography: f64,
    /// Pairs written by `pairs`.
    pub pairs: usize,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            cell: 8,
            eps_s_prp: 4.0,
            eps_s_homography: 8.0,
            pairs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsConfig {
    /// Every `stride`-th admissible reference frame is labelled.
    pub stride: usize,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCheckConfig {
    pub descriptor: DescriptorLossParams,
    pub instances: usize,
    /// Grid rows and columns of each random instance.
    pub grid: [usize; 2],
    pub dims: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for LossCheckConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorLossParams::default(),
            instances: 100,
            grid: [4, 4],
            dims: vec![4, 16, 64],
            step: 1e-4,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pairs: usize,
    pub keypoints: usize,
    pub nms_radius: usize,
    pub descriptor_dim: usize,
    /// Ratio test for homography and pose matching; off when absent.
    pub ratio: Option<f64>,
    pub homography_strength: f64,
    pub homography_thresholds: Vec<f64>,
    pub pose_thresholds: Vec<f64>,
    pub pose_split: f64,
    /// Frame offsets `[min, max]` for pose pairs.
    pub pose_offsets: [usize; 2],
    pub register_offsets: [usize; 2],
    pub rotation_thresholds_deg: Vec<f64>,
    pub translation_thresholds_cm: Vec<f64>,
    pub chamfer_thresholds_cm: Vec<f64>,
    pub ransac: RansacParams,
    pub essential: EssentialParams,
    pub registration: RegistrationParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 20,
            keypoints: 1000,
            nms_radius: 4,
            descriptor_dim: 128,
            ratio: None,
            homography_strength: 0.15,
            homography_thresholds: vec![3.0, 5.0],
            pose_thresholds: vec![5.0, 10.0, 20.0],
            pose_split: 0.15,
            pose_offsets: [5, 20],
            register_offsets: [5, 15],
            rotation_thresholds_deg: vec![5.0, 10.0, 45.0],
            translation_thresholds_cm: vec![5.0, 10.0, 25.0],
            chamfer_thresholds_cm: vec![1.0, 5.0, 10.0],
            ransac: RansacParams::default(),
            essential: EssentialParams::default(),
            registration: RegistrationParams {
                stride: 8,
                ..RegistrationParams::default()
            },
        }
    }
}

/// Everything a run needs. The top-level `seed` overrides the seeds of the
/// nested sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; excluded from the config echo in reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Dataset read by `pairs`, `labels` and `eval`.
    pub dataset: Option<PathBuf>,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub trajectory: TrajectorySpec,
    pub prp: PrPParams,
    pub sampling: PairSamplingParams,
    pub correspondence: CorrespondenceConfig,
    pub adaptation: AdaptationParams,
    pub labels: LabelsConfig,
    pub losscheck: LossCheckConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            dataset: None,
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            trajectory: TrajectorySpec::default(),
            prp: PrPParams::default(),
            sampling: PairSamplingParams::default(),
            correspondence: CorrespondenceConfig::default(),
            adaptation: AdaptationParams::default(),
            labels: LabelsConfig::default(),
            losscheck: LossCheckConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(msg.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.scene.path, &mut cfg.dataset] {
            if let Some(rel) = p.as_ref().filter(|q| q.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Pushes the top-level seed into every nested section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trajectory.seed = seed;
        self.sampling.seed = seed;
        self.adaptation.seed = seed;
        self.eval.ransac.seed = seed;
        self.eval.essential.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.camera().map_err(bad)?;
        self.trajectory.validate().map_err(bad)?;
        self.prp.validate().map_err(bad)?;
        self.sampling.validate().map_err(bad)?;
        self.adaptation.validate().map_err(bad)?;
        self.losscheck.descriptor.validate().map_err(bad)?;
        if let Some(p) = &self.scene.path {
            if !p.exists() {
                return Err(bad(format!("scene file {} does not exist", p.display())));
            }
        }
        let c = &self.correspondence;
        if c.cell == 0 || c.eps_s_prp <= 0.0 || c.eps_s_homography <= 0.0 {
            return Err(bad("correspondence cell and eps_s must be positive"));
        }
        let e = &self.eval;
        if e.keypoints == 0 || e.descriptor_dim == 0 || e.nms_radius == 0 {
            return Err(bad("eval keypoints, descriptor_dim and nms_radius must be positive"));
        }
        for (name, o) in [("pose_offsets", e.pose_offsets), ("register_offsets", e.register_offsets)] {
            if o[0] == 0 || o[0] > o[1] {
                return Err(bad(format!("eval.{name} needs 1 <= min <= max")));
            }
        }
        if e.ratio.is_some_and(|r| !(r > 0.0 && r <= 1.0)) {
            return Err(bad("eval.ratio must be in (0, 1]"));
        }
        if self.losscheck.grid.contains(&0) || self.losscheck.dims.contains(&0) || self.losscheck.step <= 0.0 {
            return Err(bad("losscheck grid, dims and step must be positive"));
        }
        Ok(())
    }

    pub fn camera(&self) -> prp_core::Result<CameraIntrinsics> {
        CameraIntrinsics::from_hfov(self.camera.hfov_deg, self.camera.width, self.camera.height)
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, ConfigError> {
        let spec = match &self.scene.path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", p.display())))?
            }
            None => match self.scene.builtin {
                BuiltinScene::Room => SceneSpec::room(),
                BuiltinScene::Plane => SceneSpec::plane(
                    Texture::CheckerNoise {
                        scale: 0.25,
                        noise_scale: 0.05,
                        seed: 3,
                    },
                    6.0,
                ),
            },
        };
        spec.validate().map_err(bad)?;
        Ok(spec)
    }

    /// JSON echo embedded in reports (no output directory).
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.out = None;
        serde_json::to_value(&c).expect("config serializes to JSON")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[prp]\neps = 0.1").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig::from_toml("[adaptation]\nn_sampled = 25").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml("[scene]\npath = \"/nonexistent/scene.json\"").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let mut c = RunConfig::default();
        c.apply_seed(42);
        assert_eq!(
            (c.trajectory.seed, c.sampling.seed, c.adaptation.seed, c.eval.ransac.seed, c.eval.essential.seed),
            (42, 42, 42, 42, 42)
        );
    }
}
