//! Seeded synthetic scenes: random boxes whose sensor-visible surfaces are
//! sampled as a point cloud, plus a dense one-channel inverse-depth image
//! ray-cast from the same pose through a forward camera.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::geometry::{NormalizedIntrinsics, Point3, PointCloud, ProjectionModel};
use crate::heads::Image;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid synthetic parameters: {0}")]
pub struct SynthError(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneParams {
    pub box_count: (usize, usize),
    pub points_per_cloud: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub pose_jitter_m: f64,
    pub noise_m: f64,
    /// Distance between consecutive scenes along the x axis of the manifest.
    pub scene_spacing_m: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        Self {
            box_count: (5, 15),
            points_per_cloud: 2048,
            image_width: 64,
            image_height: 64,
            pose_jitter_m: 0.5,
            noise_m: 0.02,
            scene_spacing_m: 100.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.box_count;
        if lo == 0 || lo > hi {
            return Err(SynthError(format!("box_count range {lo}..={hi} is empty or zero")));
        }
        if self.points_per_cloud == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(SynthError("counts and image dims must be positive".into()));
        }
        if !(self.pose_jitter_m >= 0.0 && self.noise_m >= 0.0 && self.scene_spacing_m > 0.0) {
            return Err(SynthError("jitter, noise and spacing must be non-negative".into()));
        }
        Ok(())
    }
}

/// Camera used by every synthetic scene: 90° field of view, centered.
pub fn synthetic_projection() -> ProjectionModel {
    ProjectionModel::forward_camera(NormalizedIntrinsics {
        fx: 0.5,
        fy: 0.5,
        cx: 0.5,
        cy: 0.5,
    })
}

#[derive(Clone, Debug, PartialEq)]
struct SceneBox {
    min: Point3,
    max: Point3,
}

impl SceneBox {
    /// Faces whose outward normal points towards `eye`, as (fixed axis,
    /// side, area) with side 0 = min face, 1 = max face.
    fn faces_towards(&self, eye: &Point3) -> Vec<(usize, f64, f64)> {
        let e = [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]];
        let mut out = Vec::new();
        for axis in 0..3 {
            let area = e[(axis + 1) % 3] * e[(axis + 2) % 3];
            if eye[axis] < self.min[axis] {
                out.push((axis, 0.0, area));
            } else if eye[axis] > self.max[axis] {
                out.push((axis, 1.0, area));
            }
        }
        out
    }

    /// Whether the open segment from `a` to `b` passes through the box.
    fn blocks(&self, a: &Point3, b: &Point3) -> bool {
        let (mut t0, mut t1): (f64, f64) = (0.0, 1.0 - 1e-9);
        for k in 0..3 {
            let d = b[k] - a[k];
            if d.abs() < 1e-12 {
                if a[k] <= self.min[k] || a[k] >= self.max[k] {
                    return false;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[k] - a[k]) / d, (self.max[k] - a[k]) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 >= t1 {
                return false;
            }
        }
        true
    }

    /// Smallest `s > 0` with `o + s·d` on the box surface.
    fn hit(&self, o: &Point3, d: &Point3) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[k] - o[k]) / d[k], (self.max[k] - o[k]) / d[k]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

fn scene_boxes(params: &SyntheticSceneParams, scene_seed: u64) -> Vec<SceneBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let n = rng.gen_range(params.box_count.0..=params.box_count.1);
    (0..n)
        .map(|_| {
            let size: [f64; 3] = [rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0), rng.gen_range(1.0..8.0)];
            let cx = rng.gen_range(4.0 + size[0] / 2.0..40.0 - size[0] / 2.0);
            // keep the box inside the camera's 90° horizontal field of view
            let half = (0.9 * (cx - size[0] / 2.0) - size[1] / 2.0).clamp(0.0, 18.0 - size[1] / 2.0);
            let cy = if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 };
            let z0 = -2.0;
            SceneBox {
                min: [cx - size[0] / 2.0, cy - size[1] / 2.0, z0],
                max: [cx + size[0] / 2.0, cy + size[1] / 2.0, z0 + size[2]],
            }
        })
        .collect()
}

/// Seed of traversal `t` of a scene.
pub fn traversal_seed(scene_seed: u64, traversal: usize) -> u64 {
    splitmix(scene_seed ^ splitmix(traversal as u64 + 1))
}

/// Seed of scene `index` of a dataset.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix(dataset_seed.wrapping_add(splitmix(index as u64)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub image: Image,
    /// Sensor offset from the scene origin (the pose jitter).
    pub pose: Point3,
    pub projection: ProjectionModel,
}

/// One traversal of a scene. The box layout depends on `scene_seed` only;
/// surface sampling, noise and pose jitter depend on the traversal. Only
/// faces turned towards the sensor are sampled, and points hidden behind
/// another box are rejected.
pub fn generate_synthetic_scene(
    params: &SyntheticSceneParams,
    scene_seed: u64,
    traversal: usize,
) -> Result<SyntheticScene, SynthError> {
    params.validate()?;
    let boxes = scene_boxes(params, scene_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(traversal_seed(scene_seed, traversal));
    let jitter = Normal::new(0.0, params.pose_jitter_m).map_err(|e| SynthError(e.to_string()))?;
    let noise = Normal::new(0.0, params.noise_m).map_err(|e| SynthError(e.to_string()))?;
    let pose = [jitter.sample(&mut rng), jitter.sample(&mut rng), 0.0];

    // the sensor sees the faces turned towards it, minus what other boxes hide
    let faces: Vec<(usize, usize, f64)> = boxes
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.faces_towards(&pose).into_iter().map(move |(axis, side, area)| (i, axis * 2 + side as usize, area)))
        .collect();
    let pick = WeightedIndex::new(faces.iter().map(|f| f.2)).map_err(|e| SynthError(e.to_string()))?;
    let mut points = Vec::with_capacity(params.points_per_cloud);
    let mut attempts = 0usize;
    while points.len() < params.points_per_cloud {
        attempts += 1;
        if attempts > 100 * params.points_per_cloud {
            return Err(SynthError("scene is almost entirely occluded".into()));
        }
        let (bi, face, _) = faces[pick.sample(&mut rng)];
        let b = &boxes[bi];
        let (axis, side) = (face / 2, (face % 2) as f64);
        let mut p = [0.0; 3];
        for (k, v) in p.iter_mut().enumerate() {
            *v = if k == axis {
                b.min[k] + side * (b.max[k] - b.min[k])
            } else {
                rng.gen_range(b.min[k]..b.max[k])
            };
        }
        if boxes.iter().enumerate().any(|(j, o)| j != bi && o.blocks(&pose, &p)) {
            continue;
        }
        for (k, v) in p.iter_mut().enumerate() {
            *v += noise.sample(&mut rng) - pose[k];
        }
        points.push(p);
    }
    let projection = synthetic_projection();
    let image = render_boxes(&boxes, &pose, &projection, params.image_width, params.image_height);
    Ok(SyntheticScene {
        cloud: PointCloud::new(String::new(), points),
        image,
        pose,
        projection,
    })
}

/// Inverse depth of the nearest box along each pixel-center ray, 0 where
/// the ray hits nothing. The sensor sits at `pose` in the scene frame.
fn render_boxes(boxes: &[SceneBox], pose: &Point3, projection: &ProjectionModel, width: usize, height: usize) -> Image {
    let (fx, fy, cx, cy) = projection.intrinsics.scaled(width, height);
    let r = projection.extrinsic.fixed_view::<3, 3>(0, 0).transpose();
    let t = projection.extrinsic.fixed_view::<3, 1>(0, 3).into_owned();
    let origin = -(r * t);
    let o = [origin.x + pose[0], origin.y + pose[1], origin.z + pose[2]];
    let mut img = Image::zeros(width, height, 1);
    for y in 0..height {
        for x in 0..width {
            let dc = nalgebra::Vector3::new((x as f64 + 0.5 - cx) / fx, (y as f64 + 0.5 - cy) / fy, 1.0);
            let dl = r * dc;
            let d = [dl.x, dl.y, dl.z];
            // camera-frame depth equals the ray parameter since dc.z = 1
            let nearest = boxes.iter().filter_map(|b| b.hit(&o, &d)).fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                *img.at_mut(x, y, 0) = 1.0 / nearest;
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub scene: usize,
    pub traversal: usize,
    pub timestamp_s: f64,
    pub position: Point3,
    pub run_id: String,
    pub cloud: PointCloud,
    pub image: Image,
}

/// `scenes × traversals` samples ordered by traversal, then scene. Scene `i`
/// sits at `x = i · scene_spacing_m`.
pub fn generate_dataset(
    params: &SyntheticSceneParams,
    scenes: usize,
    traversals: usize,
) -> Result<Vec<SyntheticSample>, SynthError> {
    let mut out = Vec::with_capacity(scenes * traversals);
    for t in 0..traversals {
        for i in 0..scenes {
            out.push(generate_sample(params, i, t)?);
        }
    }
    Ok(out)
}

pub fn sample_id(scene: usize, traversal: usize) -> String {
    format!("s{scene:04}_t{traversal}")
}

pub fn generate_sample(params: &SyntheticSceneParams, scene: usize, traversal: usize) -> Result<SyntheticSample, SynthError> {
    let s = generate_synthetic_scene(params, scene_seed(params.seed, scene), traversal)?;
    let id = sample_id(scene, traversal);
    let mut cloud = s.cloud;
    cloud.id = id.clone();
    let timestamp_s = (traversal * 100_000 + scene * 10) as f64;
    cloud.timestamp = Some(timestamp_s);
    Ok(SyntheticSample {
        id,
        scene,
        traversal,
        timestamp_s,
        position: [scene as f64 * params.scene_spacing_m + s.pose[0], s.pose[1], s.pose[2]],
        run_id: format!("t{traversal}"),
        cloud,
        image: s.image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSceneParams {
        SyntheticSceneParams {
            points_per_cloud: 512,
            image_width: 32,
            image_height: 32,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = generate_synthetic_scene(&small(), 11, 0).unwrap();
        let b = generate_synthetic_scene(&small(), 11, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cloud.len(), 512);
        let c = generate_synthetic_scene(&small(), 11, 1).unwrap();
        assert_ne!(a.cloud.points, c.cloud.points);
    }

    #[test]
    fn image_matches_visible_surfaces() {
        let params = SyntheticSceneParams {
            noise_m: 0.0,
            image_width: 128,
            image_height: 128,
            ..small()
        };
        let s = generate_synthetic_scene(&params, 5, 0).unwrap();
        assert!(s.image.data.iter().filter(|&&v| v > 0.0).count() >= 20);
        // cloud points are surfaces the camera sees: their pixel is lit with
        // their depth or a nearer one, up to edge pixels whose center ray
        // misses the box
        let (mut checked, mut lit) = (0, 0);
        for p in &s.cloud.points {
            let Some((u, v, depth)) = s.projection.project_point(p, 128, 128) else { continue };
            if !(0.0..128.0).contains(&u) || !(0.0..128.0).contains(&v) {
                continue;
            }
            checked += 1;
            let px = s.image.at(u as usize, v as usize, 0);
            if px > 0.0 && 1.0 / px <= depth + 0.5 {
                lit += 1;
            }
        }
        assert!(lit * 20 >= checked * 17, "{lit} of {checked} points on consistent pixels");
        assert!(checked > 100);
    }

    #[test]
    fn points_are_visible_from_the_sensor() {
        let params = SyntheticSceneParams {
            noise_m: 0.0,
            ..small()
        };
        let seed = 21;
        let s = generate_synthetic_scene(&params, seed, 1).unwrap();
        let boxes = scene_boxes(&params, seed);
        for q in &s.cloud.points {
            let p = [q[0] + s.pose[0], q[1] + s.pose[1], q[2] + s.pose[2]];
            let owner = boxes
                .iter()
                .position(|b| (0..3).all(|k| p[k] >= b.min[k] - 1e-9 && p[k] <= b.max[k] + 1e-9))
                .expect("point lies on a box");
            // the ray from the sensor reaches the point without entering any box
            for (j, b) in boxes.iter().enumerate() {
                let inside_before = (1..100).any(|i| {
                    let t = i as f64 / 100.0 * (1.0 - 1e-6);
                    (0..3).all(|k| {
                        let x = s.pose[k] + t * (p[k] - s.pose[k]);
                        x > b.min[k] + 1e-9 && x < b.max[k] - 1e-9
                    })
                });
                assert!(!inside_before, "point of box {owner} hidden by box {j}");
            }
        }
    }

    #[test]
    fn invalid_params() {
        let p = SyntheticSceneParams {
            box_count: (3, 2),
            ..Default::default()
        };
        assert!(generate_synthetic_scene(&p, 0, 0).is_err());
    }
}
