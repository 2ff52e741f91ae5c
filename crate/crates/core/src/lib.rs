//! Cross-modal (camera to LiDAR) place recognition through voxel-to-pixel
//! projection.
//!
//! The crate covers the whole desk-scale pipeline: a small reverse-mode
//! autodiff engine ([`tensor`]), voxelization and projection
//! ([`geometry`]), sparse 3D convolution ([`sparse3d`]), the image encoder
//! and descriptor heads ([`heads`], [`model`]), the three training
//! objectives ([`losses`]), staged training ([`trainer`]), retrieval and
//! evaluation protocols ([`retrieval`]), file formats and synthetic data
//! ([`data_io`], [`synth`]).

pub mod data_io;
pub mod experiment;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod model;
pub mod params;
pub mod plot;
pub mod protocol;
pub mod retrieval;
pub mod sparse3d;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use geometry::{PointCloud, ProjectedFeatureMap, ProjectionModel, VoxelGrid, VoxelGridConfig};
pub use heads::{GlobalDescriptor, Image, Modality};
pub use model::{ModelConfig, VxpModel};
pub use params::ParamSet;
pub use retrieval::RetrievalIndex;
pub use sparse3d::SparseFeatureMap;
pub use tensor::{Tape, Tensor, Var};
