//! Voxelization and voxel-to-pixel projection.
//!
//! Three frames are involved: the voxel grid `{V}` (integer cell
//! coordinates), the LiDAR frame `{P}` (meters) and the camera frame `{C}`
//! (meters, +z forward). Grid cells map to `{P}` through their centers, and
//! `{P}` maps to `{C}` through the extrinsic of a [`ProjectionModel`].

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no point lies inside the voxel range")]
    AllPointsCulled,
    #[error("invalid voxel grid config: {0}")]
    InvalidConfig(String),
    #[error("invalid projection model: {0}")]
    InvalidProjection(String),
    #[error("no voxel projects into the feature map")]
    NoVisibleVoxels,
}

pub type Point3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub timestamp: Option<f64>,
    pub id: String,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Point3>) -> Self {
        Self {
            points,
            timestamp: None,
            id: id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGridConfig {
    pub range_min: Point3,
    pub range_max: Point3,
    pub voxel_size: Point3,
    pub max_points_per_voxel: usize,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self {
            range_min: protocol::VOXEL_RANGE_MIN,
            range_max: protocol::VOXEL_RANGE_MAX,
            voxel_size: protocol::VOXEL_SIZE,
            max_points_per_voxel: protocol::MAX_POINTS_PER_VOXEL,
        }
    }
}

// Absorbs representation error in (p - min) / size, e.g. 22 / 0.4.
const CELL_EPS: f64 = 1e-9;

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for a in 0..3 {
            if !(self.range_max[a] > self.range_min[a]) {
                return Err(GeometryError::InvalidConfig(format!("range_max[{a}] must exceed range_min[{a}]")));
            }
            if !(self.voxel_size[a] > 0.0) {
                return Err(GeometryError::InvalidConfig(format!("voxel_size[{a}] must be positive")));
            }
        }
        if self.max_points_per_voxel == 0 {
            return Err(GeometryError::InvalidConfig("max_points_per_voxel must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| {
            (((self.range_max[a] - self.range_min[a]) / self.voxel_size[a]) - CELL_EPS).ceil() as usize
        })
    }

    /// Cell containing `p`, or `None` outside the half-open range.
    pub fn cell_of(&self, p: &Point3) -> Option<[usize; 3]> {
        let dims = self.grid_dims();
        let mut c = [0usize; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let idx = ((p[a] - self.range_min[a]) / self.voxel_size[a] + CELL_EPS).floor() as usize;
            c[a] = idx.min(dims[a] - 1);
        }
        Some(c)
    }

    pub fn frame(&self) -> GridFrame {
        GridFrame {
            dims: self.grid_dims(),
            voxel_size: self.voxel_size,
            range_min: self.range_min,
        }
    }
}

/// Placement of an integer grid in the LiDAR frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridFrame {
    pub dims: [usize; 3],
    pub voxel_size: Point3,
    pub range_min: Point3,
}

impl GridFrame {
    /// Frame of the grid after a convolution with `stride`: cells grow by
    /// `stride`, dims shrink by ceil division.
    pub fn downsampled(&self, stride: usize) -> GridFrame {
        GridFrame {
            dims: self.dims.map(|d| d.div_ceil(stride)),
            voxel_size: self.voxel_size.map(|v| v * stride as f64),
            range_min: self.range_min,
        }
    }

    pub fn center(&self, c: [usize; 3]) -> Point3 {
        voxel_center_to_lidar(c, self.voxel_size, self.range_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub coord: [usize; 3],
    /// Exactly `max_points_per_voxel` rows; rows past `valid_count` are zero.
    pub points: Vec<Point3>,
    pub valid_count: usize,
}

impl Voxel {
    pub fn valid_points(&self) -> &[Point3] {
        &self.points[..self.valid_count]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    /// Non-empty voxels in lexicographic coordinate order.
    pub voxels: Vec<Voxel>,
    pub config: VoxelGridConfig,
    /// Input points outside the range.
    pub discarded: usize,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn frame(&self) -> GridFrame {
        self.config.frame()
    }
}

/// Groups the points of `cloud` into voxels. Voxels holding more than `M`
/// points keep a uniform random subset drawn from `seed`, in input order.
pub fn voxelize(cloud: &PointCloud, config: &VoxelGridConfig, seed: u64) -> Result<VoxelGrid, GeometryError> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let mut cells: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    let mut discarded = 0;
    for (i, p) in cloud.points.iter().enumerate() {
        match config.cell_of(p) {
            Some(c) => cells.entry(c).or_default().push(i),
            None => discarded += 1,
        }
    }
    if cells.is_empty() {
        return Err(GeometryError::AllPointsCulled);
    }
    let m = config.max_points_per_voxel;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = cells
        .into_iter()
        .map(|(coord, mut idx)| {
            if idx.len() > m {
                let mut keep = sample(&mut rng, idx.len(), m).into_vec();
                keep.sort_unstable();
                idx = keep.into_iter().map(|k| idx[k]).collect();
            }
            let mut points = vec![[0.0; 3]; m];
            for (row, &i) in points.iter_mut().zip(&idx) {
                *row = cloud.points[i];
            }
            Voxel {
                coord,
                points,
                valid_count: idx.len(),
            }
        })
        .collect();
    Ok(VoxelGrid {
        voxels,
        config: config.clone(),
        discarded,
    })
}

/// Center of grid cell `c` in the LiDAR frame: `diag(v) c + v / 2 + min`.
pub fn voxel_center_to_lidar(c: [usize; 3], voxel_size: Point3, range_min: Point3) -> Point3 {
    std::array::from_fn(|a| voxel_size[a] * c[a] as f64 + (voxel_size[a] / 2.0 + range_min[a]))
}

/// Pinhole intrinsics as fractions of the image width (`fx`, `cx`) and
/// height (`fy`, `cy`), so one model serves every feature-map resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl NormalizedIntrinsics {
    /// Pixel-unit intrinsics for a `width × height` map.
    pub fn scaled(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (w, h) = (width as f64, height as f64);
        (self.fx * w, self.fy * h, self.cx * w, self.cy * h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionModel {
    pub intrinsics: NormalizedIntrinsics,
    /// Rigid transform from the LiDAR frame to the camera frame.
    pub extrinsic: Matrix4<f64>,
}

impl ProjectionModel {
    pub fn new(intrinsics: NormalizedIntrinsics, extrinsic: Matrix4<f64>) -> Result<Self, GeometryError> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(GeometryError::InvalidProjection("focal lengths must be positive".into()));
        }
        if !(intrinsics.cx.is_finite() && intrinsics.cy.is_finite()) {
            return Err(GeometryError::InvalidProjection("principal point must be finite".into()));
        }
        let r: Matrix3<f64> = extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(GeometryError::InvalidProjection(format!(
                "extrinsic rotation is not orthonormal (error {err:e})"
            )));
        }
        let bottom = extrinsic.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(GeometryError::InvalidProjection("extrinsic bottom row must be 0 0 0 1".into()));
        }
        Ok(Self { intrinsics, extrinsic })
    }

    /// Forward-looking camera on a LiDAR with x forward, y left, z up.
    pub fn forward_camera(intrinsics: NormalizedIntrinsics) -> Self {
        #[rustfmt::skip]
        let extrinsic = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Self { intrinsics, extrinsic }
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        let h = self.extrinsic * Vector4::new(p[0], p[1], p[2], 1.0);
        Vector3::new(h.x, h.y, h.z)
    }

    /// Continuous pixel coordinates and depth of a LiDAR-frame point on a
    /// `width × height` map. `None` when behind the camera (`depth <= 0`).
    pub fn project_point(&self, p: &Point3, width: usize, height: usize) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if !(c.z > 0.0) {
            return None;
        }
        let (fx, fy, cx, cy) = self.intrinsics.scaled(width, height);
        Some((fx * c.x / c.z + cx, fy * c.y / c.z + cy, c.z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedEntry {
    /// Integer pixel `(u, v)`: column, row.
    pub pixel: [usize; 2],
    /// Continuous pixel coordinates before flooring.
    pub continuous: [f64; 2],
    /// Row of the voxel in the projected sparse map.
    pub voxel: usize,
    pub depth: f64,
    pub inverse_depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionSet {
    pub pixel: [usize; 2],
    /// Indices into [`ProjectedFeatureMap::entries`].
    pub entries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatureMap {
    pub width: usize,
    pub height: usize,
    pub entries: Vec<ProjectedEntry>,
    pub collisions: Vec<CollisionSet>,
}

impl ProjectedFeatureMap {
    fn from_entries(width: usize, height: usize, entries: Vec<ProjectedEntry>) -> Result<Self, GeometryError> {
        if entries.is_empty() {
            return Err(GeometryError::NoVisibleVoxels);
        }
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            groups.entry((e.pixel[1], e.pixel[0])).or_default().push(i);
        }
        let collisions = groups
            .into_iter()
            .map(|((v, u), entries)| CollisionSet { pixel: [u, v], entries })
            .collect();
        Ok(Self {
            width,
            height,
            entries,
            collisions,
        })
    }

    /// Row index of each entry's pixel in a row-major `height × width` map.
    pub fn pixel_rows(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.pixel[1] * self.width + e.pixel[0]).collect()
    }

    /// Per-entry weight `d_i / sum of d_j` over the entry's collision set.
    pub fn collision_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.entries.len()];
        for set in &self.collisions {
            let total: f64 = set.entries.iter().map(|&i| self.entries[i].inverse_depth).sum();
            for &i in &set.entries {
                w[i] = self.entries[i].inverse_depth / total;
            }
        }
        w
    }
}

/// Projects every site of a sparse grid onto a `width × height` map through
/// `proj`. Sites behind the camera or outside the map are culled; colliding
/// sites are all retained.
pub fn project_sites(
    coords: &[[usize; 3]],
    frame: &GridFrame,
    proj: &ProjectionModel,
    width: usize,
    height: usize,
) -> Result<ProjectedFeatureMap, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::InvalidConfig("feature map dims must be >= 1".into()));
    }
    let mut entries = Vec::new();
    for (voxel, &c) in coords.iter().enumerate() {
        let center = frame.center(c);
        let Some((u, v, depth)) = proj.project_point(&center, width, height) else {
            continue;
        };
        if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
            continue;
        }
        entries.push(ProjectedEntry {
            pixel: [u.floor() as usize, v.floor() as usize],
            continuous: [u, v],
            voxel,
            depth,
            inverse_depth: 1.0 / depth,
        });
    }
    ProjectedFeatureMap::from_entries(width, height, entries)
}

/// Perspective voxel-to-pixel projection of a sparse feature map.
pub fn project_voxels(
    map: &crate::sparse3d::SparseFeatureMap,
    proj: &ProjectionModel,
    feat_dims: (usize, usize),
) -> Result<ProjectedFeatureMap, GeometryError> {
    project_sites(&map.coords, &map.frame, proj, feat_dims.0, feat_dims.1)
}

/// Orthographic counterpart: the forward grid axis (0) is dropped and the
/// lateral (1) and vertical (2) grid axes are rescaled linearly onto the
/// map. Depth is the distance of the voxel center from the near face of the
/// grid and only feeds collision bookkeeping.
pub fn orthographic_sites(
    coords: &[[usize; 3]],
    frame: &GridFrame,
    width: usize,
    height: usize,
) -> Result<ProjectedFeatureMap, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::InvalidConfig("feature map dims must be >= 1".into()));
    }
    let entries = coords
        .iter()
        .enumerate()
        .map(|(voxel, c)| {
            let u = c[1] as f64 * width as f64 / frame.dims[1] as f64;
            let v = c[2] as f64 * height as f64 / frame.dims[2] as f64;
            let depth = (c[0] as f64 + 0.5) * frame.voxel_size[0];
            ProjectedEntry {
                pixel: [(u.floor() as usize).min(width - 1), (v.floor() as usize).min(height - 1)],
                continuous: [u, v],
                voxel,
                depth,
                inverse_depth: 1.0 / depth,
            }
        })
        .collect();
    ProjectedFeatureMap::from_entries(width, height, entries)
}

pub fn orthographic_project(
    map: &crate::sparse3d::SparseFeatureMap,
    feat_dims: (usize, usize),
) -> Result<ProjectedFeatureMap, GeometryError> {
    orthographic_sites(&map.coords, &map.frame, feat_dims.0, feat_dims.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    Perspective,
    Orthographic,
}

impl ProjectionKind {
    pub fn project(
        self,
        coords: &[[usize; 3]],
        frame: &GridFrame,
        proj: &ProjectionModel,
        width: usize,
        height: usize,
    ) -> Result<ProjectedFeatureMap, GeometryError> {
        match self {
            ProjectionKind::Perspective => project_sites(coords, frame, proj, width, height),
            ProjectionKind::Orthographic => orthographic_sites(coords, frame, width, height),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_intrinsics() -> NormalizedIntrinsics {
        NormalizedIntrinsics {
            fx: 0.5,
            fy: 0.5,
            cx: 0.5,
            cy: 0.5,
        }
    }

    fn identity_camera() -> ProjectionModel {
        ProjectionModel::new(unit_intrinsics(), Matrix4::identity()).unwrap()
    }

    /// Frame whose cell `c` is centered at exactly `c` in camera space.
    fn unit_frame(dims: [usize; 3]) -> GridFrame {
        GridFrame {
            dims,
            voxel_size: [1.0; 3],
            range_min: [-0.5; 3],
        }
    }

    #[test]
    fn default_config_grid_is_110_cubed() {
        assert_eq!(VoxelGridConfig::default().grid_dims(), [110, 110, 110]);
    }

    #[test]
    fn point_to_cell_example() {
        let cfg = VoxelGridConfig::default();
        assert_eq!(cfg.cell_of(&[0.5, 0.0, 0.0]), Some([1, 55, 20]));
        assert_eq!(cfg.cell_of(&[44.0, 0.0, 0.0]), None);
        assert_eq!(cfg.cell_of(&[f64::NAN, 0.0, 0.0]), None);
    }

    #[test]
    fn voxelize_rejects_empty_and_culled() {
        let cfg = VoxelGridConfig::default();
        assert_eq!(voxelize(&PointCloud::new("e", vec![]), &cfg, 0), Err(GeometryError::EmptyCloud));
        let far = PointCloud::new("f", vec![[100.0, 0.0, 0.0]]);
        assert_eq!(voxelize(&far, &cfg, 0), Err(GeometryError::AllPointsCulled));
    }

    #[test]
    fn overflow_keeps_m_points_and_zero_pads() {
        let cfg = VoxelGridConfig {
            max_points_per_voxel: 2,
            ..Default::default()
        };
        let p = [1.0, 1.0, 1.0];
        let grid = voxelize(&PointCloud::new("c", vec![p, p, p]), &cfg, 3).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid.voxels[0].valid_count, 2);
        assert_eq!(grid.voxels[0].points, vec![p, p]);

        let cfg4 = VoxelGridConfig {
            max_points_per_voxel: 4,
            ..Default::default()
        };
        let grid = voxelize(&PointCloud::new("c", vec![p, p, p]), &cfg4, 3).unwrap();
        assert_eq!(grid.voxels[0].valid_count, 3);
        assert_eq!(grid.voxels[0].points[3], [0.0; 3]);
    }

    #[test]
    fn voxel_center_examples() {
        let min = [0.0, -22.0, -4.0];
        let c = voxel_center_to_lidar([0, 0, 0], [0.4, 0.4, 0.2], min);
        approx::assert_abs_diff_eq!(c[0], 0.2, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(c[1], -21.8, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(c[2], -3.9, epsilon = 1e-12);
        let c = voxel_center_to_lidar([0, 0, 0], [1.6, 1.6, 0.8], min);
        approx::assert_abs_diff_eq!(c[0], 0.8, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(c[1], -21.2, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(c[2], -3.6, epsilon = 1e-12);
    }

    #[test]
    fn principal_axis_maps_to_principal_point() {
        let frame = unit_frame([1, 1, 11]);
        let proj = identity_camera();
        let m = project_sites(&[[0, 0, 10]], &frame, &proj, 28, 28).unwrap();
        assert_eq!(m.entries[0].pixel, [14, 14]);
        assert_eq!(m.entries[0].depth, 10.0);
        assert_eq!(m.entries[0].inverse_depth, 0.1);
    }

    #[test]
    fn behind_camera_is_culled() {
        let frame = GridFrame {
            dims: [1, 1, 1],
            voxel_size: [1.0; 3],
            range_min: [-0.5, -0.5, -5.5],
        };
        let res = project_sites(&[[0, 0, 0]], &frame, &identity_camera(), 28, 28);
        assert_eq!(res, Err(GeometryError::NoVisibleVoxels));
    }

    #[test]
    fn colliding_voxels_share_a_set() {
        let frame = unit_frame([1, 1, 11]);
        let m = project_sites(&[[0, 0, 5], [0, 0, 10]], &frame, &identity_camera(), 28, 28).unwrap();
        assert_eq!(m.collisions.len(), 1);
        let inv: Vec<f64> = m.collisions[0].entries.iter().map(|&i| m.entries[i].inverse_depth).collect();
        assert_eq!(inv, vec![0.2, 0.1]);
        let w = m.collision_weights();
        approx::assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn orthographic_drops_forward_axis() {
        let frame = GridFrame {
            dims: [28, 28, 28],
            voxel_size: [1.6, 1.6, 0.8],
            range_min: [0.0, -22.0, -4.0],
        };
        for k in [0, 5, 27] {
            let m = orthographic_sites(&[[k, 0, 0], [k, 27, 27]], &frame, 28, 28).unwrap();
            assert_eq!(m.entries[0].pixel, [0, 0]);
            assert_eq!(m.entries[1].pixel, [27, 27]);
        }
    }

    #[test]
    fn non_orthonormal_extrinsic_rejected() {
        let mut e = Matrix4::identity();
        e[(0, 0)] = 1.1;
        assert!(ProjectionModel::new(unit_intrinsics(), e).is_err());
        let bad = NormalizedIntrinsics { fx: 0.0, ..unit_intrinsics() };
        assert!(ProjectionModel::new(bad, Matrix4::identity()).is_err());
    }

    #[test]
    fn downsampled_frame_matches_output_grid() {
        let f = VoxelGridConfig::default().frame().downsampled(2).downsampled(2);
        assert_eq!(f.dims, [28, 28, 28]);
        approx::assert_abs_diff_eq!(f.voxel_size[0], 1.6, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(f.voxel_size[2], 0.8, epsilon = 1e-12);
        assert!(28.0 * f.voxel_size[0] >= 44.0);
    }
}
