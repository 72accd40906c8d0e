//! Synthetic datasets rendered from a [`ToyScene`], their JSON manifest, and
//! the rotation-distance split of test views into close / middle / far.
//!
//! Manifest (`transforms.json`, paths relative to it):
//!
//! ```text
//! { "camera_angle_x": f64, "width": u32, "height": u32,
//!   "t_near": f64, "t_far": f64, "bounds": {"min": [..], "max": [..]},
//!   "frames": [ { "file_path", "mask_path",
//!                 "transform_matrix": 4x4 row-major camera-to-world,
//!                 "split": "train" | "test-close" | "test-middle" | "test-far",
//!                 "regime": "training" | "interpolation" | "extrapolation",
//!                 "d_y": f64 } ] }
//! ```
//!
//! Camera axes in `transform_matrix` are `+x` right, `+y` down, `+z` forward.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, pose_distance, Aabb, Camera, Mat3, Vec3};
use crate::imageio::{ensure_parent, Image};
use crate::rng::{keyed_rng, stream};
use crate::scene::ToyScene;
use crate::train::{TrainView, TrainingSet};

pub const MANIFEST_NAME: &str = "transforms.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    TestClose,
    TestMiddle,
    TestFar,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::TestClose => "test-close",
            SplitTag::TestMiddle => "test-middle",
            SplitTag::TestFar => "test-far",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Training,
    /// Test poses drawn from the training elevation band.
    Interpolation,
    /// Test poses outside the training band.
    Extrapolation,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Training => "training",
            Regime::Interpolation => "interpolation",
            Regime::Extrapolation => "extrapolation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file_path: String,
    pub mask_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    pub split: SplitTag,
    pub regime: Regime,
    pub d_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub camera_angle_x: f64,
    pub width: u32,
    pub height: u32,
    pub t_near: f64,
    pub t_far: f64,
    pub bounds: Aabb,
    pub frames: Vec<FrameRecord>,
}

/// Camera count and elevation range (degrees above the `z = 0` plane).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseBand {
    pub count: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub width: u32,
    pub height: u32,
    pub camera_angle_x: f64,
    /// Camera distance from the scene center.
    pub radius: f64,
    /// Added to the content radius when deriving the ray bounds.
    pub margin: f64,
    pub train: PoseBand,
    pub interpolation: PoseBand,
    pub extrapolation: PoseBand,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            camera_angle_x: 0.69,
            radius: 4.0,
            margin: 0.2,
            train: PoseBand {
                count: 60,
                min_elevation_deg: 40.0,
                max_elevation_deg: 90.0,
            },
            interpolation: PoseBand {
                count: 10,
                min_elevation_deg: 40.0,
                max_elevation_deg: 90.0,
            },
            extrapolation: PoseBand {
                count: 30,
                min_elevation_deg: 0.0,
                max_elevation_deg: 30.0,
            },
            seed: 0,
        }
    }
}

/// Stratified poses over a band: area-uniform elevation strata, golden-angle
/// azimuths, both jittered from the keyed pose stream.
pub fn sample_band(band: &PoseBand, radius: f64, seed: u64, key: u64) -> Vec<Vec3> {
    let mut rng = keyed_rng(seed, &[stream::POSES, key]);
    let (s0, s1) = (band.min_elevation_deg.to_radians().sin(), band.max_elevation_deg.to_radians().sin());
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    (0..band.count)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / band.count as f64;
            let el = (s0 + (s1 - s0) * u).clamp(-1.0, 1.0).asin();
            let az = phase + golden * i as f64 + 0.2 * (rng.random::<f64>() - 0.5);
            Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * radius
        })
        .collect()
}

/// Tags each candidate by its rotation distance to the training set.
/// Without explicit boundaries the candidate tertiles are used. A distance
/// equal to a boundary belongs to the nearer group.
pub fn split_by_distance(
    candidates: &[Mat3],
    train: &[Mat3],
    boundaries: Option<(f64, f64)>,
) -> Result<Vec<(SplitTag, f64)>> {
    if train.is_empty() {
        return Err(Error::invalid("split needs at least one training pose"));
    }
    let d: Vec<f64> = candidates.iter().map(|c| pose_distance(c, train)).collect::<Result<_>>()?;
    let (lo, hi) = match boundaries {
        Some(b) => b,
        None => tertiles(&d),
    };
    Ok(d.into_iter()
        .map(|v| {
            let tag = if v <= lo {
                SplitTag::TestClose
            } else if v <= hi {
                SplitTag::TestMiddle
            } else {
                SplitTag::TestFar
            };
            (tag, v)
        })
        .collect())
}

fn tertiles(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let at = |k: usize| s[(k.max(1) - 1).min(n - 1)];
    (at(n.div_ceil(3)), at((2 * n).div_ceil(3)))
}

fn matrix_of(cam: &Camera) -> [[f64; 4]; 4] {
    let r = cam.rotation;
    let t = cam.translation;
    [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn content_radius(scene: &ToyScene) -> f64 {
    use crate::scene::Primitive;
    scene
        .primitives
        .iter()
        .map(|p| match *p {
            Primitive::Sphere { center, radius, .. } => center.norm() + radius,
            Primitive::Box { bounds, .. } => {
                let c = bounds.center();
                c.norm() + bounds.half_extent().norm()
            }
        })
        .fold(0.0, f64::max)
}

/// Renders every frame and writes images, masks and the manifest.
pub fn generate_dataset(scene: &ToyScene, spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset> {
    if spec.train.count == 0 {
        return Err(Error::invalid("the training band needs at least one camera"));
    }
    scene.validate()?;
    let reach = content_radius(scene) + spec.margin;
    if spec.radius <= reach {
        return Err(Error::invalid(format!(
            "camera radius {} does not clear the scene content (radius {reach})",
            spec.radius
        )));
    }
    let bands = [
        (Regime::Training, &spec.train),
        (Regime::Interpolation, &spec.interpolation),
        (Regime::Extrapolation, &spec.extrapolation),
    ];
    let mut poses = Vec::new();
    for (key, (regime, band)) in bands.iter().enumerate() {
        for (i, p) in sample_band(band, spec.radius, spec.seed, key as u64).into_iter().enumerate() {
            poses.push((*regime, i, p));
        }
    }
    let cameras = poses
        .iter()
        .map(|(_, _, p)| Camera::look_at(*p, Vec3::zeros(), spec.width, spec.height, spec.camera_angle_x))
        .collect::<Result<Vec<_>>>()?;

    let names: Vec<(String, String)> = poses
        .iter()
        .map(|(regime, i, _)| {
            let stem = match regime {
                Regime::Training => format!("train_{i:03}"),
                Regime::Interpolation => format!("interp_{i:03}"),
                Regime::Extrapolation => format!("extrap_{i:03}"),
            };
            (format!("images/{stem}.png"), format!("masks/{stem}.png"))
        })
        .collect();
    cameras
        .par_iter()
        .zip(&names)
        .map(|(cam, (img, mask))| {
            let (rgb, m) = scene.render(cam)?;
            rgb.save_png(&out_dir.join(img))?;
            m.save_png(&out_dir.join(mask))
        })
        .collect::<Result<Vec<_>>>()?;

    let train_rot: Vec<Mat3> = poses
        .iter()
        .zip(&cameras)
        .filter(|((r, _, _), _)| *r == Regime::Training)
        .map(|(_, c)| c.rotation)
        .collect();
    let test_idx: Vec<usize> = (0..poses.len()).filter(|&i| poses[i].0 != Regime::Training).collect();
    let test_rot: Vec<Mat3> = test_idx.iter().map(|&i| cameras[i].rotation).collect();
    let tags = split_by_distance(&test_rot, &train_rot, None)?;

    let mut frames: Vec<FrameRecord> = poses
        .iter()
        .zip(&cameras)
        .zip(&names)
        .map(|(((regime, _, _), cam), (img, mask))| FrameRecord {
            file_path: img.clone(),
            mask_path: mask.clone(),
            transform_matrix: matrix_of(cam),
            split: SplitTag::Train,
            regime: *regime,
            d_y: 0.0,
        })
        .collect();
    for (&i, (tag, d)) in test_idx.iter().zip(tags) {
        frames[i].split = tag;
        frames[i].d_y = d;
    }
    let manifest = Manifest {
        camera_angle_x: spec.camera_angle_x,
        width: spec.width,
        height: spec.height,
        t_near: spec.radius - reach,
        t_far: spec.radius + reach,
        bounds: scene.bounds,
        frames,
    };
    let ds = Dataset {
        root: out_dir.to_owned(),
        manifest,
    };
    ds.save_manifest()?;
    Ok(ds)
}

/// A manifest plus the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Loads `transforms.json` from a directory (or the given file).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_owned() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        let root = file.parent().map(Path::to_owned).unwrap_or_default();
        let ds = Self { root, manifest };
        for i in 0..ds.manifest.frames.len() {
            ds.camera(i)?;
        }
        Ok(ds)
    }

    pub fn save_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        ensure_parent(&path)?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Re-tags every non-training frame by its distance to the training
    /// poses.
    pub fn resplit(&mut self, boundaries: Option<(f64, f64)>) -> Result<()> {
        let train = self.train_indices();
        let test = self.indices(|f| f.split != SplitTag::Train);
        let rot = |i: usize| self.camera(i).map(|c| c.rotation);
        let train_rot = train.iter().map(|&i| rot(i)).collect::<Result<Vec<_>>>()?;
        let test_rot = test.iter().map(|&i| rot(i)).collect::<Result<Vec<_>>>()?;
        let tags = split_by_distance(&test_rot, &train_rot, boundaries)?;
        for (&i, (tag, d)) in test.iter().zip(tags) {
            self.manifest.frames[i].split = tag;
            self.manifest.frames[i].d_y = d;
        }
        Ok(())
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.manifest.frames
    }

    pub fn indices(&self, pred: impl Fn(&FrameRecord) -> bool) -> Vec<usize> {
        (0..self.manifest.frames.len()).filter(|&i| pred(&self.manifest.frames[i])).collect()
    }

    pub fn camera(&self, frame: usize) -> Result<Camera> {
        let m = &self.manifest;
        let t = &m.frames[frame].transform_matrix;
        let r = Mat3::new(t[0][0], t[0][1], t[0][2], t[1][0], t[1][1], t[1][2], t[2][0], t[2][1], t[2][2]);
        let rotation = nearest_rotation(&r, 1e-6)?;
        let fx = 0.5 * m.width as f64 / (0.5 * m.camera_angle_x).tan();
        Camera::new(
            fx,
            fx,
            0.5 * m.width as f64,
            0.5 * m.height as f64,
            m.width,
            m.height,
            rotation,
            Vec3::new(t[0][3], t[1][3], t[2][3]),
        )
    }

    fn check_dims(&self, img: &Image, path: &Path) -> Result<()> {
        if (img.width, img.height) != (self.manifest.width, self.manifest.height) {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!(
                    "image is {}x{}, manifest says {}x{}",
                    img.width, img.height, self.manifest.width, self.manifest.height
                ),
            });
        }
        Ok(())
    }

    pub fn image(&self, frame: usize) -> Result<Image> {
        let p = self.root.join(&self.manifest.frames[frame].file_path);
        let img = Image::load_rgb_png(&p)?;
        self.check_dims(&img, &p)?;
        Ok(img)
    }

    pub fn mask(&self, frame: usize) -> Result<Image> {
        let p = self.root.join(&self.manifest.frames[frame].mask_path);
        let img = Image::load_gray_png(&p)?;
        self.check_dims(&img, &p)?;
        Ok(img)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(|f| f.split == SplitTag::Train)
    }

    pub fn view(&self, frame: usize) -> Result<TrainView> {
        Ok(TrainView {
            camera: self.camera(frame)?,
            rgb: self.image(frame)?,
            mask: self.mask(frame)?,
        })
    }

    pub fn training_set(&self) -> Result<TrainingSet> {
        let views = self.train_indices().into_iter().map(|i| self.view(i)).collect::<Result<Vec<_>>>()?;
        TrainingSet::new(views, self.manifest.t_near, self.manifest.t_far)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pose_is_close() {
        let r = Camera::look_at(Vec3::new(3.0, 1.0, 2.0), Vec3::zeros(), 8, 8, 0.7).unwrap().rotation;
        let out = split_by_distance(&[r], &[r], Some((0.3, 0.8))).unwrap();
        assert_eq!(out[0].0, SplitTag::TestClose);
        assert!(out[0].1.abs() < 1e-12);
    }

    #[test]
    fn boundary_arithmetic() {
        use crate::geometry::so3_exp;
        let train = [Mat3::identity()];
        let cand = [so3_exp(&Vec3::new(0.0, 0.0, 0.5)), so3_exp(&Vec3::new(0.9, 0.0, 0.0))];
        let out = split_by_distance(&cand, &train, Some((0.3, 0.8))).unwrap();
        assert_eq!(out[0].0, SplitTag::TestMiddle);
        assert_eq!(out[1].0, SplitTag::TestFar);
        assert!(split_by_distance(&cand, &[], None).is_err());
    }

    #[test]
    fn tertiles_split_evenly() {
        let (a, b) = tertiles(&[5.0, 1.0, 3.0, 2.0, 6.0, 4.0]);
        assert_eq!((a, b), (2.0, 4.0));
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            width: 16,
            height: 16,
            train: PoseBand { count: 6, min_elevation_deg: 40.0, max_elevation_deg: 90.0 },
            interpolation: PoseBand { count: 2, min_elevation_deg: 40.0, max_elevation_deg: 90.0 },
            extrapolation: PoseBand { count: 3, min_elevation_deg: 0.0, max_elevation_deg: 30.0 },
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&ToyScene::checker_sphere(), &spec, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.frames().len(), 11);
        for (i, f) in back.frames().iter().enumerate() {
            assert!(back.image(i).is_ok() && back.mask(i).is_ok());
            if f.regime == Regime::Extrapolation {
                assert!(f.d_y > 0.0);
                assert_ne!(f.split, SplitTag::Train);
            }
        }
        let set = back.training_set().unwrap();
        assert_eq!(set.views().len(), 6);
        let empty = DatasetSpec { train: PoseBand { count: 0, ..spec.train }, ..spec };
        assert!(generate_dataset(&ToyScene::checker_sphere(), &empty, dir.path()).is_err());
    }
}
