//! The two-branch model: image encoder + GeM/FC head, and voxel backbone +
//! GeM/FC head, sharing the local feature size `D` and descriptor size `D_g`.

use rand::Rng;
use thiserror::Error;

use crate::geometry::{voxelize, GeometryError, PointCloud, VoxelGridConfig};
use crate::heads::{GemFcn, HeadError, Image, ImageEncoder, ImagePlan, IMAGE_HEAD_PREFIX, POINT_HEAD_PREFIX};
use crate::params::{Bound, ParamSet};
use crate::sparse3d::{BackboneConfig, BackbonePlan, ConvLayerSpec, PointBackbone, SparseError, SparseFeatureMap, VfeConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_in_channels: usize,
    /// Channels of the three image blocks; the last is the local feature size.
    pub image_channels: [usize; 3],
    pub backbone: BackboneConfig,
    pub descriptor_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_in_channels: 1,
            image_channels: [16, 32, 64],
            backbone: BackboneConfig::with_feature_dim(32, 64),
            descriptor_dim: 256,
        }
    }
}

const META_IMAGE: &str = "meta.image";
const META_VFE: &str = "meta.vfe";
const META_CONV: &str = "meta.conv";
const META_VOXEL: &str = "meta.voxel";
const META_DESCRIPTOR: &str = "meta.descriptor_dim";

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.image_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.feature_dim() != self.feature_dim() {
            return Err(ModelError::Config(format!(
                "point feature dim {} differs from image feature dim {}",
                self.backbone.feature_dim(),
                self.feature_dim()
            )));
        }
        if self.descriptor_dim == 0 || self.image_channels.contains(&0) || self.backbone.vfe.out_dim == 0 {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        self.backbone.voxel.validate()?;
        Ok(())
    }

    /// Stores the architecture as `meta.*` tensors so a checkpoint is
    /// self-describing.
    pub fn write_meta(&self, params: &mut ParamSet) {
        let c = &self.image_channels;
        params.insert(
            META_IMAGE,
            Tensor::vector(vec![self.image_in_channels as f64, c[0] as f64, c[1] as f64, c[2] as f64]),
        );
        let vfe = &self.backbone.vfe;
        params.insert(META_VFE, Tensor::vector(vec![vfe.out_dim as f64, vfe.two_layer as u8 as f64]));
        let conv: Vec<f64> = self
            .backbone
            .layers
            .iter()
            .flat_map(|l| [l.kernel as f64, l.stride as f64, l.out_channels as f64])
            .collect();
        params.insert(META_CONV, Tensor::vector(conv));
        let v = &self.backbone.voxel;
        let mut voxel = Vec::with_capacity(10);
        voxel.extend_from_slice(&v.range_min);
        voxel.extend_from_slice(&v.range_max);
        voxel.extend_from_slice(&v.voxel_size);
        voxel.push(v.max_points_per_voxel as f64);
        params.insert(META_VOXEL, Tensor::vector(voxel));
        params.insert(META_DESCRIPTOR, Tensor::vector(vec![self.descriptor_dim as f64]));
    }

    pub fn from_meta(params: &ParamSet) -> Result<Self> {
        let get = |k: &str| params.require(k).map(|t| t.data().to_vec());
        let img = get(META_IMAGE)?;
        let vfe = get(META_VFE)?;
        let conv = get(META_CONV)?;
        let voxel = get(META_VOXEL)?;
        let desc = get(META_DESCRIPTOR)?;
        if img.len() != 4 || vfe.len() != 2 || conv.len() % 3 != 0 || voxel.len() != 10 || desc.len() != 1 {
            return Err(ModelError::Config("malformed meta tensors".into()));
        }
        let cfg = Self {
            image_in_channels: img[0] as usize,
            image_channels: [img[1] as usize, img[2] as usize, img[3] as usize],
            backbone: BackboneConfig {
                voxel: VoxelGridConfig {
                    range_min: [voxel[0], voxel[1], voxel[2]],
                    range_max: [voxel[3], voxel[4], voxel[5]],
                    voxel_size: [voxel[6], voxel[7], voxel[8]],
                    max_points_per_voxel: voxel[9] as usize,
                },
                vfe: VfeConfig {
                    out_dim: vfe[0] as usize,
                    two_layer: vfe[1] != 0.0,
                },
                layers: conv
                    .chunks(3)
                    .map(|c| ConvLayerSpec {
                        kernel: c[0] as usize,
                        stride: c[1] as usize,
                        out_channels: c[2] as usize,
                    })
                    .collect(),
            },
            descriptor_dim: desc[0] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network definitions for both branches. Weights live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct VxpModel {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub image_head: GemFcn,
    pub backbone: PointBackbone,
    pub point_head: GemFcn,
}

impl VxpModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim();
        Ok(Self {
            image_encoder: ImageEncoder {
                in_channels: config.image_in_channels,
                channels: config.image_channels,
            },
            image_head: GemFcn::new(IMAGE_HEAD_PREFIX, d, config.descriptor_dim),
            backbone: PointBackbone::new(config.backbone.clone()),
            point_head: GemFcn::new(POINT_HEAD_PREFIX, d, config.descriptor_dim),
            config,
        })
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        Self::new(ModelConfig::from_meta(params)?)
    }

    pub fn init_image_branch(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.config.write_meta(params);
        self.image_encoder.init(params, rng);
        self.image_head.init(params, rng);
    }

    pub fn init_backbone(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.backbone.init(params, rng);
    }

    pub fn init_point_head(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.point_head.init(params, rng);
    }

    pub fn image_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..3)
            .flat_map(|i| {
                [
                    format!("{}.conv{i}.weight", crate::heads::IMAGE_ENCODER_PREFIX),
                    format!("{}.conv{i}.bias", crate::heads::IMAGE_ENCODER_PREFIX),
                ]
            })
            .collect();
        names.extend(self.image_head.param_names());
        names
    }

    /// Image features (`[H*·W*, D]`) and the `[1, D_g]` descriptor on a tape.
    pub fn image_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Image,
        plan: &ImagePlan,
    ) -> Result<(crate::heads::ImageFeatureMap, Var)> {
        let fm = self.image_encoder.forward(tape, bound, image, plan)?;
        let desc = self.image_head.forward(tape, bound, fm.feats)?;
        Ok((fm, desc))
    }

    /// Untracked image encoding: `(features, W*, H*, descriptor)`.
    pub fn encode_image(&self, params: &ParamSet, image: &Image) -> Result<(Tensor, usize, usize, Vec<f64>)> {
        let plan = ImagePlan::new(image.width, image.height)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let (fm, desc) = self.image_forward(&mut tape, &bound, image, &plan)?;
        Ok((
            tape.value(fm.feats).clone(),
            fm.width,
            fm.height,
            tape.value(desc).data().to_vec(),
        ))
    }

    pub fn plan_cloud(&self, cloud: &PointCloud, seed: u64) -> Result<BackbonePlan> {
        let grid = voxelize(cloud, &self.config.backbone.voxel, seed)?;
        Ok(self.backbone.plan(&grid)?)
    }

    /// Untracked point branch: the sparse output map and the descriptor.
    pub fn encode_cloud(&self, params: &ParamSet, cloud: &PointCloud, seed: u64) -> Result<(SparseFeatureMap, Vec<f64>)> {
        let plan = self.plan_cloud(cloud, seed)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let act = self.backbone.forward(&mut tape, &bound, &plan)?;
        let desc = self.point_head.forward(&mut tape, &bound, act.feats)?;
        Ok((act.to_map(&tape), tape.value(desc).data().to_vec()))
    }
}

/// Voxelization seed for a sample, stable across runs and platforms.
pub fn sample_seed(id: &str) -> u64 {
    // FNV-1a
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
