//! Voxel feature encoding and sparse 3D convolution.
//!
//! A convolution is compiled into [`ConvRules`] once per input coordinate
//! set; the rules are then replayed on the tape, so forward and backward
//! never touch empty sites.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::geometry::{GridFrame, VoxelGrid, VoxelGridConfig};
use crate::params::{he_normal, Bound, ParamSet};
use crate::tensor::{ConvRules, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("voxel grid is empty")]
    EmptyGrid,
    #[error("channel mismatch: layer expects {expected} input channels, map has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("dense grid of {cells} values exceeds the cap of {cap}")]
    TooLarge { cells: usize, cap: usize },
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = SparseError> = std::result::Result<T, E>;

/// Sparse 3D tensor: `coords[i]` holds row `i` of `feats` (`T × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap {
    pub coords: Vec<[usize; 3]>,
    pub feats: Tensor,
    pub frame: GridFrame,
}

impl SparseFeatureMap {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }
}

/// Coordinates and frame of a sparse map whose features live on a tape.
#[derive(Clone, Debug)]
pub struct SparseActivation {
    pub coords: Rc<Vec<[usize; 3]>>,
    pub frame: GridFrame,
    pub feats: Var,
}

impl SparseActivation {
    pub fn to_map(&self, tape: &Tape) -> SparseFeatureMap {
        SparseFeatureMap {
            coords: self.coords.as_ref().clone(),
            feats: tape.value(self.feats).clone(),
            frame: self.frame,
        }
    }
}

/// Output sites and gather/scatter rules of one sparse convolution.
#[derive(Clone, Debug)]
pub struct ConvPlan {
    pub out_coords: Rc<Vec<[usize; 3]>>,
    pub out_frame: GridFrame,
    pub rules: Rc<ConvRules>,
}

/// Plans a convolution with an odd cubic `kernel`, padding `kernel / 2` and
/// `stride`. Output site `o` reads input `o * stride + k - pad` for kernel
/// offset `k`; an output site exists iff one of those inputs is non-empty.
pub fn plan_conv(coords: &[[usize; 3]], frame: &GridFrame, kernel: usize, stride: usize) -> Result<ConvPlan> {
    if kernel % 2 == 0 || stride == 0 {
        return Err(SparseError::InvalidLayer(format!(
            "kernel must be odd and stride >= 1 (kernel {kernel}, stride {stride})"
        )));
    }
    let out_frame = frame.downsampled(stride);
    let pad = kernel / 2;
    let k3 = kernel * kernel * kernel;
    let mut out_index: HashMap<[usize; 3], u32> = HashMap::new();
    let mut out_coords: Vec<[usize; 3]> = Vec::new();
    let mut raw: Vec<Vec<(u32, u32)>> = vec![Vec::new(); k3];

    for (i, c) in coords.iter().enumerate() {
        // Per axis, the (offset, output) pairs this input reaches.
        let mut reach: [Vec<(usize, usize)>; 3] = Default::default();
        for a in 0..3 {
            for k in 0..kernel {
                let shifted = c[a] + pad;
                if shifted < k || (shifted - k) % stride != 0 {
                    continue;
                }
                let o = (shifted - k) / stride;
                if o < out_frame.dims[a] {
                    reach[a].push((k, o));
                }
            }
        }
        for &(kx, ox) in &reach[0] {
            for &(ky, oy) in &reach[1] {
                for &(kz, oz) in &reach[2] {
                    let o = [ox, oy, oz];
                    let next = out_coords.len() as u32;
                    let oi = *out_index.entry(o).or_insert_with(|| {
                        out_coords.push(o);
                        next
                    });
                    raw[(kx * kernel + ky) * kernel + kz].push((i as u32, oi));
                }
            }
        }
    }

    // Renumber outputs in lexicographic order so plans do not depend on the
    // order in which sites were discovered.
    let mut order: Vec<u32> = (0..out_coords.len() as u32).collect();
    order.sort_unstable_by_key(|&o| out_coords[o as usize]);
    let mut remap = vec![0u32; order.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let sorted: Vec<[usize; 3]> = order.iter().map(|&o| out_coords[o as usize]).collect();
    for pairs in &mut raw {
        for p in pairs.iter_mut() {
            p.1 = remap[p.1 as usize];
        }
    }
    Ok(ConvPlan {
        rules: Rc::new(ConvRules {
            input_rows: coords.len(),
            output_rows: sorted.len(),
            offsets: raw,
        }),
        out_coords: Rc::new(sorted),
        out_frame,
    })
}

/// Weights of one sparse convolution: `weight` is `[k³, C_in, C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl SparseConvLayer {
    pub fn kernel(&self) -> Result<usize> {
        let k3 = self.weight.shape().first().copied().unwrap_or(0);
        let k = (k3 as f64).cbrt().round() as usize;
        if k * k * k != k3 || self.weight.shape().len() != 3 {
            return Err(SparseError::InvalidLayer(format!("weight shape {:?}", self.weight.shape())));
        }
        Ok(k)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Sparse convolution plus bias, no activation.
pub fn sparse_conv3d(input: &SparseFeatureMap, layer: &SparseConvLayer) -> Result<SparseFeatureMap> {
    let kernel = layer.kernel()?;
    if input.channels() != layer.in_channels() {
        return Err(SparseError::ChannelMismatch {
            expected: layer.in_channels(),
            got: input.channels(),
        });
    }
    let plan = plan_conv(&input.coords, &input.frame, kernel, layer.stride)?;
    let mut tape = Tape::new();
    let x = tape.constant(input.feats.clone());
    let w = tape.constant(layer.weight.clone());
    let b = tape.constant(layer.bias.clone());
    let y = tape.conv(x, w, plan.rules.clone())?;
    let y = tape.add_row_broadcast(y, b)?;
    Ok(SparseFeatureMap {
        coords: plan.out_coords.as_ref().clone(),
        feats: tape.value(y).clone(),
        frame: plan.out_frame,
    })
}

/// Default memory cap for [`sparse_to_dense`], in `f64` values.
pub const DENSE_CAP: usize = 64 << 20;

/// Dense `[X, Y, Z, D]` copy of a sparse map.
pub fn sparse_to_dense(map: &SparseFeatureMap, cap: usize) -> Result<Tensor> {
    let [x, y, z] = map.frame.dims;
    let d = map.channels();
    let cells = x * y * z * d;
    if cells > cap {
        return Err(SparseError::TooLarge { cells, cap });
    }
    let mut data = vec![0.0; cells];
    for (i, c) in map.coords.iter().enumerate() {
        let off = ((c[0] * y + c[1]) * z + c[2]) * d;
        data[off..off + d].copy_from_slice(map.feats.row(i));
    }
    Ok(Tensor::new(vec![x, y, z, d], data)?)
}

/// Sites of a dense `[X, Y, Z, D]` tensor with any non-zero channel.
pub fn dense_to_sparse(dense: &Tensor, frame: GridFrame) -> Result<SparseFeatureMap> {
    let s = dense.shape();
    if s.len() != 4 || s[..3] != frame.dims {
        return Err(SparseError::InvalidLayer(format!("dense shape {s:?} does not match grid {:?}", frame.dims)));
    }
    let d = s[3];
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for (cell, chunk) in dense.data().chunks(d.max(1)).enumerate() {
        if chunk.iter().any(|v| *v != 0.0) {
            let zc = cell % s[2];
            let yc = (cell / s[2]) % s[1];
            let xc = cell / (s[1] * s[2]);
            coords.push([xc, yc, zc]);
            feats.extend_from_slice(chunk);
        }
    }
    let n = coords.len();
    Ok(SparseFeatureMap {
        coords,
        feats: Tensor::matrix(n, d, feats)?,
        frame,
    })
}

/// Per-point network of the voxel feature encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VfeConfig {
    pub out_dim: usize,
    /// Adds the second point-wise layer fed with `[point feature, voxel max]`.
    pub two_layer: bool,
}

impl Default for VfeConfig {
    fn default() -> Self {
        Self {
            out_dim: 32,
            two_layer: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Voxel branch architecture: VFE then a stack of sparse convolutions, each
/// followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub voxel: VoxelGridConfig,
    pub vfe: VfeConfig,
    pub layers: Vec<ConvLayerSpec>,
}

impl BackboneConfig {
    /// Two 3³ stride-2 layers ending in `feature_dim` channels.
    pub fn with_feature_dim(vfe_dim: usize, feature_dim: usize) -> Self {
        let layer = |out| ConvLayerSpec {
            kernel: 3,
            stride: crate::protocol::CONV_STRIDE,
            out_channels: out,
        };
        Self {
            voxel: VoxelGridConfig::default(),
            vfe: VfeConfig {
                out_dim: vfe_dim,
                two_layer: false,
            },
            layers: vec![layer(feature_dim), layer(feature_dim)],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.vfe.out_dim, |l| l.out_channels)
    }

    pub fn output_frame(&self) -> GridFrame {
        self.layers
            .iter()
            .fold(self.voxel.frame(), |f, l| f.downsampled(l.stride))
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::with_feature_dim(32, 64)
    }
}

/// Precomputed, parameter-independent structure of one voxel grid passing
/// through a backbone: normalized point inputs, voxel segments and the
/// convolution plans.
#[derive(Clone, Debug)]
pub struct BackbonePlan {
    points: Tensor,
    segment_ends: Vec<usize>,
    point_voxel: Rc<Vec<usize>>,
    input_coords: Rc<Vec<[usize; 3]>>,
    input_frame: GridFrame,
    convs: Vec<ConvPlan>,
}

impl BackbonePlan {
    pub fn output_coords(&self) -> &Rc<Vec<[usize; 3]>> {
        self.convs.last().map_or(&self.input_coords, |p| &p.out_coords)
    }

    pub fn output_frame(&self) -> GridFrame {
        self.convs.last().map_or(self.input_frame, |p| p.out_frame)
    }

    pub fn voxel_count(&self) -> usize {
        self.input_coords.len()
    }
}

pub const VFE_PREFIX: &str = "pc.vfe";

pub fn conv_prefix(i: usize) -> String {
    format!("pc.conv{i}")
}

/// Voxel branch up to the sparse output map.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBackbone {
    pub config: BackboneConfig,
}

impl PointBackbone {
    pub fn new(config: BackboneConfig) -> Self {
        Self { config }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let d = self.config.vfe.out_dim;
        params.insert(format!("{VFE_PREFIX}.w1"), he_normal(vec![3, d], 3, rng));
        params.insert(format!("{VFE_PREFIX}.b1"), Tensor::zeros(vec![d]));
        if self.config.vfe.two_layer {
            params.insert(format!("{VFE_PREFIX}.w2"), he_normal(vec![2 * d, d], 2 * d, rng));
            params.insert(format!("{VFE_PREFIX}.b2"), Tensor::zeros(vec![d]));
        }
        let mut cin = d;
        for (i, l) in self.config.layers.iter().enumerate() {
            let k3 = l.kernel.pow(3);
            params.insert(
                format!("{}.weight", conv_prefix(i)),
                he_normal(vec![k3, cin, l.out_channels], k3 * cin, rng),
            );
            params.insert(format!("{}.bias", conv_prefix(i)), Tensor::zeros(vec![l.out_channels]));
            cin = l.out_channels;
        }
    }

    /// Names of every parameter this backbone owns.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![format!("{VFE_PREFIX}.w1"), format!("{VFE_PREFIX}.b1")];
        if self.config.vfe.two_layer {
            names.push(format!("{VFE_PREFIX}.w2"));
            names.push(format!("{VFE_PREFIX}.b2"));
        }
        for i in 0..self.config.layers.len() {
            names.push(format!("{}.weight", conv_prefix(i)));
            names.push(format!("{}.bias", conv_prefix(i)));
        }
        names
    }

    /// Point coordinates are mapped affinely onto [-1, 1] over the voxel
    /// range before the first linear layer.
    fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = &self.config.voxel;
        std::array::from_fn(|a| {
            let half = 0.5 * (v.range_max[a] - v.range_min[a]);
            (p[a] - v.range_min[a] - half) / half
        })
    }

    pub fn plan(&self, grid: &VoxelGrid) -> Result<BackbonePlan> {
        if grid.is_empty() {
            return Err(SparseError::EmptyGrid);
        }
        let mut pts = Vec::new();
        let mut segment_ends = Vec::with_capacity(grid.len());
        let mut point_voxel = Vec::new();
        for (vi, v) in grid.voxels.iter().enumerate() {
            for p in v.valid_points() {
                pts.extend_from_slice(&self.normalize(p));
                point_voxel.push(vi);
            }
            segment_ends.push(point_voxel.len());
        }
        let n = point_voxel.len();
        let input_coords: Vec<[usize; 3]> = grid.voxels.iter().map(|v| v.coord).collect();
        let input_frame = grid.frame();
        let mut convs: Vec<ConvPlan> = Vec::with_capacity(self.config.layers.len());
        for l in &self.config.layers {
            let (coords, frame) = match convs.last() {
                Some(p) => (p.out_coords.as_ref().as_slice(), p.out_frame),
                None => (input_coords.as_slice(), input_frame),
            };
            let next = plan_conv(coords, &frame, l.kernel, l.stride)?;
            convs.push(next);
        }
        Ok(BackbonePlan {
            points: Tensor::matrix(n, 3, pts)?,
            segment_ends,
            point_voxel: Rc::new(point_voxel),
            input_coords: Rc::new(input_coords),
            input_frame,
            convs,
        })
    }

    /// Voxel feature encoding: per-point linear + ReLU, then max over the
    /// valid points of each voxel. Padding rows never enter the computation.
    pub fn vfe_forward(&self, tape: &mut Tape, bound: &Bound, plan: &BackbonePlan) -> Result<SparseActivation> {
        let pts = tape.constant(plan.points.clone());
        let w1 = bound.get(&format!("{VFE_PREFIX}.w1"))?;
        let b1 = bound.get(&format!("{VFE_PREFIX}.b1"))?;
        let h = tape.matmul(pts, w1)?;
        let h = tape.add_row_broadcast(h, b1)?;
        let h = tape.relu(h)?;
        let mut pooled = tape.segment_max(h, &plan.segment_ends)?;
        if self.config.vfe.two_layer {
            let w2 = bound.get(&format!("{VFE_PREFIX}.w2"))?;
            let b2 = bound.get(&format!("{VFE_PREFIX}.b2"))?;
            let back = tape.gather_rows(pooled, plan.point_voxel.clone())?;
            let cat = tape.concat_cols(h, back)?;
            let h2 = tape.matmul(cat, w2)?;
            let h2 = tape.add_row_broadcast(h2, b2)?;
            let h2 = tape.relu(h2)?;
            pooled = tape.segment_max(h2, &plan.segment_ends)?;
        }
        Ok(SparseActivation {
            coords: plan.input_coords.clone(),
            frame: plan.input_frame,
            feats: pooled,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, plan: &BackbonePlan) -> Result<SparseActivation> {
        let mut act = self.vfe_forward(tape, bound, plan)?;
        for (i, conv) in plan.convs.iter().enumerate() {
            let w = bound.get(&format!("{}.weight", conv_prefix(i)))?;
            let b = bound.get(&format!("{}.bias", conv_prefix(i)))?;
            let y = tape.conv(act.feats, w, conv.rules.clone())?;
            let y = tape.add_row_broadcast(y, b)?;
            let y = tape.relu(y)?;
            act = SparseActivation {
                coords: conv.out_coords.clone(),
                frame: conv.out_frame,
                feats: y,
            };
        }
        Ok(act)
    }

    /// Untracked VFE pass over a grid.
    pub fn vfe_encode(&self, grid: &VoxelGrid, params: &ParamSet) -> Result<SparseFeatureMap> {
        let plan = self.plan(grid)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        Ok(self.vfe_forward(&mut tape, &bound, &plan)?.to_map(&tape))
    }

    /// Untracked full backbone pass over a grid.
    pub fn encode(&self, grid: &VoxelGrid, params: &ParamSet) -> Result<SparseFeatureMap> {
        let plan = self.plan(grid)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        Ok(self.forward(&mut tape, &bound, &plan)?.to_map(&tape))
    }
}

/// VFE over `grid` with the encoder weights found in `params`.
pub fn vfe_encode(grid: &VoxelGrid, params: &ParamSet, vfe: &VfeConfig) -> Result<SparseFeatureMap> {
    let backbone = PointBackbone::new(BackboneConfig {
        voxel: grid.config.clone(),
        vfe: vfe.clone(),
        layers: Vec::new(),
    });
    backbone.vfe_encode(grid, params)
}

/// VFE followed by the configured convolution stack.
pub fn point_cloud_backbone(grid: &VoxelGrid, params: &ParamSet, config: &BackboneConfig) -> Result<SparseFeatureMap> {
    PointBackbone::new(config.clone()).encode(grid, params)
}
