//! Run configuration: a sectioned, human-readable TOML file with a
//! strict schema (unknown keys are rejected so typos fail loudly).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{CutMixConfig, GlobalAugmentConfig};
use crate::cloud::CropBounds;
use crate::dataio::ClassMap;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::NetworkConfig;
use crate::optim::OptimizerConfig;
use crate::projection::{PlaneKind, PlaneSetConfig, PolarGridConfig, RangeImageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub out_dir: PathBuf,
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Kitti,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KittiSection {
    /// Directory holding `<sequence>/velodyne/*.bin` and
    /// `<sequence>/labels/*.label`.
    pub root: PathBuf,
    pub train_sequences: Vec<String>,
    pub val_sequences: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub train_scenes: usize,
    pub val_scenes: usize,
    #[serde(default = "default_ground_points")]
    pub ground_points: usize,
    #[serde(default = "default_object_points")]
    pub box_points: usize,
    #[serde(default = "default_object_points")]
    pub cylinder_points: usize,
}

fn default_ground_points() -> usize {
    100
}

fn default_object_points() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default)]
    pub kitti: Option<KittiSection>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSection {
    #[serde(default)]
    pub ignore_index: u32,
    /// (raw, train) pairs; omitted for synthetic data (identity map).
    #[serde(default)]
    pub map: Vec<(u16, u32)>,
    #[serde(default)]
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub voxel_resolution: f64,
    pub crop: CropBounds,
    /// Shared Cartesian grid cell size, meters.
    pub cell_size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridsSection {
    #[serde(default)]
    pub polar: Option<PolarGridConfig>,
    #[serde(default)]
    pub range_image: Option<RangeImageConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub layers: usize,
    pub channels: usize,
    pub k_neighbors: usize,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_hidden")]
    pub conv_hidden: usize,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default)]
    pub plane_order: Option<[PlaneKind; 5]>,
}

fn default_hidden() -> usize {
    256
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda: default_lambda(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_rotate_prob")]
    pub rotate_prob: f64,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default = "default_rotate_prob")]
    pub scale_prob: f64,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
}

fn default_rotate_prob() -> f64 {
    1.0
}

fn default_flip_prob() -> f64 {
    0.5
}

fn default_scale_min() -> f64 {
    0.95
}

fn default_scale_max() -> f64 {
    1.05
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            enabled: false,
            rotate_prob: default_rotate_prob(),
            flip_prob: default_flip_prob(),
            scale_prob: default_rotate_prob(),
            scale_min: default_scale_min(),
            scale_max: default_scale_max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutMixSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub rare_classes: Vec<u32>,
    #[serde(default)]
    pub ground_classes: Vec<u32>,
    #[serde(default = "default_max_paste")]
    pub max_paste: usize,
    #[serde(default = "default_min_instance_points")]
    pub min_instance_points: usize,
    #[serde(default = "default_fov_step")]
    pub vertical_fov_step: f64,
    #[serde(default = "default_rate_clamp")]
    pub rate_clamp: [f64; 2],
    /// Existing instance bank directory; when absent, the bank is built
    /// from the training scenes at startup.
    #[serde(default)]
    pub bank_dir: Option<PathBuf>,
}

fn default_max_paste() -> usize {
    10
}

fn default_min_instance_points() -> usize {
    10
}

fn default_fov_step() -> f64 {
    0.0073
}

fn default_rate_clamp() -> [f64; 2] {
    [0.5, 2.0]
}

impl Default for CutMixSection {
    fn default() -> Self {
        CutMixSection {
            enabled: false,
            rare_classes: vec![],
            ground_classes: vec![],
            max_paste: default_max_paste(),
            min_instance_points: default_min_instance_points(),
            vertical_fov_step: default_fov_step(),
            rate_clamp: default_rate_clamp(),
            bank_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Accumulate per-cloud gradients (per-cloud batch-norm statistics)
    /// instead of a joint batch forward.
    #[serde(default)]
    pub grad_accumulation: bool,
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub classes: Option<ClassSection>,
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub grids: GridsSection,
    pub network: NetworkSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub cutmix: CutMixSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: TrainSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.source {
            DataSource::Kitti => {
                let kitti = self
                    .data
                    .kitti
                    .as_ref()
                    .ok_or_else(|| Error::config("data.source = \"kitti\" needs a [data.kitti] section"))?;
                if !kitti.root.is_dir() {
                    return Err(Error::config(format!(
                        "dataset root {} does not exist",
                        kitti.root.display()
                    )));
                }
                if kitti.train_sequences.is_empty() {
                    return Err(Error::config("kitti train_sequences is empty"));
                }
                for seq in kitti.train_sequences.iter().chain(&kitti.val_sequences) {
                    let dir = kitti.root.join(seq).join("velodyne");
                    if !dir.is_dir() {
                        return Err(Error::config(format!(
                            "sequence directory {} does not exist",
                            dir.display()
                        )));
                    }
                }
                if self.classes.as_ref().is_none_or(|c| c.map.is_empty()) {
                    return Err(Error::config("kitti data needs a [classes] map"));
                }
            }
            DataSource::Synthetic => {
                let synth = self.data.synthetic.as_ref().ok_or_else(|| {
                    Error::config("data.source = \"synthetic\" needs a [data.synthetic] section")
                })?;
                if synth.train_scenes == 0 {
                    return Err(Error::config("synthetic train_scenes must be positive"));
                }
            }
        }
        if !(self.preprocess.voxel_resolution > 0.0) {
            return Err(Error::config("voxel_resolution must be positive"));
        }
        self.preprocess.crop.validate()?;
        self.class_map()?;
        self.network_config()?.validate()?;
        self.loss_config().validate()?;
        self.cutmix_config().validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        let ignore = self.classes.as_ref().map_or(0, |c| c.ignore_index);
        match &self.classes {
            Some(c) if !c.map.is_empty() => ClassMap::new(&c.map, ignore),
            // Synthetic scenes use ids 0..=3 directly.
            _ => Ok(ClassMap::identity(4, ignore)),
        }
    }

    pub fn class_names(&self) -> Option<Vec<String>> {
        self.classes
            .as_ref()
            .filter(|c| !c.names.is_empty())
            .map(|c| c.names.clone())
    }

    pub fn plane_set(&self) -> PlaneSetConfig {
        let mut planes =
            PlaneSetConfig::from_crop_bounds(&self.preprocess.crop, self.preprocess.cell_size);
        if let Some(polar) = self.grids.polar {
            planes.polar = polar;
        }
        if let Some(range_image) = self.grids.range_image {
            planes.range_image = range_image;
        }
        planes
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let num_classes = self.class_map()?.num_classes;
        Ok(NetworkConfig {
            layers: self.network.layers,
            channels: self.network.channels,
            k_neighbors: self.network.k_neighbors,
            num_classes,
            mlp_hidden: self.network.mlp_hidden,
            conv_hidden: self.network.conv_hidden,
            bn_momentum: self.network.bn_momentum,
            bn_eps: self.network.bn_eps,
            plane_order: self
                .network
                .plane_order
                .unwrap_or(crate::projection::DEFAULT_PLANE_CYCLE),
            planes: self.plane_set(),
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.loss.lambda,
            ignore_index: self.classes.as_ref().map_or(0, |c| c.ignore_index),
        }
    }

    pub fn global_augment_config(&self) -> GlobalAugmentConfig {
        GlobalAugmentConfig {
            rotate_prob: self.augment.rotate_prob,
            flip_prob: self.augment.flip_prob,
            scale_prob: self.augment.scale_prob,
            scale_min: self.augment.scale_min,
            scale_max: self.augment.scale_max,
        }
    }

    pub fn cutmix_config(&self) -> CutMixConfig {
        CutMixConfig {
            rare_classes: self.cutmix.rare_classes.clone(),
            ground_classes: self.cutmix.ground_classes.clone(),
            max_paste: self.cutmix.max_paste,
            min_instance_points: self.cutmix.min_instance_points,
            vertical_fov_step: self.cutmix.vertical_fov_step,
            rate_clamp_min: self.cutmix.rate_clamp[0],
            rate_clamp_max: self.cutmix.rate_clamp[1],
            max_retries: 10,
        }
    }
}

/// A minimal synthetic-data configuration used by tests and as a
/// starting point for new runs.
pub fn example_config_toml() -> &'static str {
    r#"[run]
seed = 42
precision = "f32"
out_dir = "runs/demo"

[data]
source = "synthetic"

[data.synthetic]
train_scenes = 2
val_scenes = 1

[classes]
ignore_index = 0
names = ["unlabeled", "ground", "vehicle", "person"]

[preprocess]
voxel_resolution = 0.1
crop = { x_min = -15.0, x_max = 15.0, y_min = -15.0, y_max = 15.0, z_min = -3.0, z_max = 3.0 }
cell_size = 1.0

[grids.polar]
rho_min = 1.0
rho_max = 16.0
rings = 16
sectors = 32

[grids.range_image]
height = 16
width = 64
fov_up = 0.35
fov_down = 0.45

[network]
layers = 10
channels = 16
k_neighbors = 8
mlp_hidden = 32
conv_hidden = 16

[loss]
lambda = 1.0

[augment]
enabled = true

[cutmix]
enabled = false
rare_classes = [3]
ground_classes = [1]

[optimizer]
peak_lr = 0.002
final_lr = 1e-5
warmup_epochs = 1
total_epochs = 3
batch_size = 2
"#
}
