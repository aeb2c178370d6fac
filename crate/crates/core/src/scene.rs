//! Synthetic driving scenes, their on-disk format and training augmentation.
//!
//! A scene is a ground plane, a background wall and a few fronto-parallel
//! boxes standing on the ground, rendered by per-pixel ray casting. Every
//! pixel hits some surface, so the dense depth is valid everywhere.
//!
//! # Directory format
//!
//! A dataset is a directory of `scene_NNNN` subdirectories. Each holds
//! `manifest.txt`, one `key = value` per line:
//!
//! ```text
//! format = getup-scene-1
//! seed = 17
//! height = 72
//! width = 144
//! fx = 115.2
//! fy = 115.2
//! cx = 72.0
//! cy = 36.0
//! lidar_points = 1024
//! radar_points = 37
//! ```
//!
//! and five arrays of little-endian `f64`, row-major, with no header:
//! `image.f64` (H·W·3), `depth.f64` (H·W), `sparse_depth.f64` (H·W, zero
//! where unsampled), `lidar.f64` (M·3: x, y, z) and `radar.f64`
//! (N·6: x, y, z, v_x, v_z, RCS).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{project_points, CameraIntrinsics, Point3};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "getup-scene-1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub position: Point3,
    /// Planar velocity `(v_x, v_z)` in m/s.
    pub velocity: [f64; 2],
    pub rcs: f64,
}

impl RadarPoint {
    pub fn to_row(&self) -> [f64; 6] {
        let [x, y, z] = self.position;
        [x, y, z, self.velocity[0], self.velocity[1], self.rcs]
    }

    pub fn from_row(r: &[f64]) -> Self {
        Self {
            position: [r[0], r[1], r[2]],
            velocity: [r[3], r[4]],
            rcs: r[5],
        }
    }
}

/// Radar corruption applied to the LiDAR points the radar is sampled from.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// Replace the vertical coordinate by the sensor height (`y = 0`).
    pub zero_height: bool,
    /// Standard deviation of the lateral (`x`) jitter in metres.
    pub position_sigma: f64,
    /// Standard deviation of the range (`z`) jitter in metres.
    pub depth_sigma: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            zero_height: false,
            position_sigma: 0.0,
            depth_sigma: 0.0,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            zero_height: true,
            position_sigma: 0.3,
            depth_sigma: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub lidar_points: usize,
    pub radar_min: usize,
    pub radar_max: usize,
    pub max_boxes: usize,
    /// Fraction of pixels sampled into the sparse depth target.
    pub sparse_fraction: f64,
    pub max_depth: f64,
    /// Camera height above the ground plane in metres.
    pub camera_height: f64,
    pub noise: NoiseSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 72,
            width: 144,
            lidar_points: 1024,
            radar_min: 20,
            radar_max: 60,
            max_boxes: 6,
            sparse_fraction: 0.02,
            max_depth: 80.0,
            camera_height: 1.5,
            noise: NoiseSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let pixels = self.height * self.width;
        if pixels == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        if self.lidar_points > pixels || self.lidar_points == 0 {
            return Err(Error::Config(format!(
                "{} LiDAR points for {pixels} pixels",
                self.lidar_points
            )));
        }
        if self.radar_min == 0 || self.radar_min > self.radar_max || self.radar_max > self.lidar_points {
            return Err(Error::Config(format!(
                "radar count range {}..={} invalid for {} LiDAR points",
                self.radar_min, self.radar_max, self.lidar_points
            )));
        }
        if !(self.sparse_fraction > 0.0 && self.sparse_fraction <= 1.0) {
            return Err(Error::Config("sparse fraction must lie in (0, 1]".into()));
        }
        if !(self.max_depth > 1.0) || !(self.camera_height > 0.0) {
            return Err(Error::Config("max depth must exceed 1 m and camera height be positive".into()));
        }
        let n = &self.noise;
        if !(n.position_sigma >= 0.0 && n.depth_sigma >= 0.0) {
            return Err(Error::Config("noise deviations must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H×W×3` intensities in `[0, 1]`.
    pub image: Tensor,
    /// `H×W` depth in metres, zero where invalid.
    pub depth: Tensor,
    /// `H×W` sparse depth target, zero where unsampled.
    pub sparse_depth: Tensor,
    pub lidar: Vec<Point3>,
    pub radar: Vec<RadarPoint>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

/// Per-scene seed derived from a dataset seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Surface {
    color: [f64; 3],
    /// Box: depth, x range, y range. Plane surfaces use `None`.
    rect: Option<(f64, [f64; 2], [f64; 2])>,
}

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 0.8 * w as f64;
    let intrinsics = CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0)?;

    let wall_depth = rng.random_range(0.75 * spec.max_depth..=spec.max_depth);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.15..0.95)) };
    let mut surfaces = vec![
        Surface {
            color: color(&mut rng),
            rect: None,
        },
        Surface {
            color: color(&mut rng),
            rect: None,
        },
    ];
    let boxes = rng.random_range(1..=spec.max_boxes.max(1));
    for _ in 0..boxes {
        let z = rng.random_range(3.0..0.7 * spec.max_depth);
        let half_fov = intrinsics.cx / intrinsics.fx * z;
        let centre = rng.random_range(-half_fov..half_fov);
        let half_width = rng.random_range(0.8..4.0);
        let tall = rng.random_range(1.0..6.0);
        surfaces.push(Surface {
            color: color(&mut rng),
            rect: Some((
                z,
                [centre - half_width, centre + half_width],
                [spec.camera_height - tall, spec.camera_height],
            )),
        });
    }

    let mut depth = vec![0.0; h * w];
    let mut image = vec![0.0; h * w * 3];
    for v in 0..h {
        let dy = (v as f64 + 0.5 - intrinsics.cy) / intrinsics.fy;
        for u in 0..w {
            let dx = (u as f64 + 0.5 - intrinsics.cx) / intrinsics.fx;
            // Wall first, then the ground, then boxes; nearest hit wins.
            let mut hit = (wall_depth, 0usize);
            if dy > 0.0 {
                let z = spec.camera_height / dy;
                if z < hit.0 {
                    hit = (z, 1);
                }
            }
            for (s, surface) in surfaces.iter().enumerate().skip(2) {
                let (z, xr, yr) = surface.rect.expect("boxes carry a rectangle");
                let (x, y) = (dx * z, dy * z);
                if z < hit.0 && x >= xr[0] && x < xr[1] && y >= yr[0] && y < yr[1] {
                    hit = (z, s);
                }
            }
            let cell = v * w + u;
            depth[cell] = hit.0;
            let shade = 0.45 + 0.55 * (-hit.0 / 40.0).exp();
            let stripe = if (u / 4 + v / 4) % 2 == 0 { 1.0 } else { 0.9 };
            for c in 0..3 {
                image[cell * 3 + c] = (surfaces[hit.1].color[c] * shade * stripe).clamp(0.0, 1.0);
            }
        }
    }

    let lidar_pixels = sample(&mut rng, h * w, spec.lidar_points).into_vec();
    let lidar: Vec<Point3> = lidar_pixels
        .iter()
        .map(|&cell| intrinsics.back_project(cell % w, cell / w, depth[cell]))
        .collect();

    let n_radar = rng.random_range(spec.radar_min..=spec.radar_max);
    let lateral = normal(spec.noise.position_sigma)?;
    let range = normal(spec.noise.depth_sigma)?;
    let radar = sample(&mut rng, lidar.len(), n_radar)
        .into_iter()
        .map(|i| {
            let mut p = lidar[i];
            p[0] += lateral.sample(&mut rng);
            p[2] = (p[2] + range.sample(&mut rng)).clamp(0.5, spec.max_depth);
            if spec.noise.zero_height {
                p[1] = 0.0;
            }
            RadarPoint {
                position: p,
                velocity: [rng.random_range(-2.0..2.0), rng.random_range(-15.0..15.0)],
                rcs: rng.random_range(-10.0..30.0),
            }
        })
        .collect();

    let n_sparse = ((h * w) as f64 * spec.sparse_fraction).round().max(1.0) as usize;
    let mut sparse = vec![0.0; h * w];
    for cell in sample(&mut rng, h * w, n_sparse) {
        sparse[cell] = depth[cell];
    }

    Ok(Scene {
        image: Tensor::new(&[h, w, 3], image)?,
        depth: Tensor::new(&[h, w], depth)?,
        sparse_depth: Tensor::new(&[h, w], sparse)?,
        lidar,
        radar,
        intrinsics,
        seed,
    })
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise deviation {sigma}: {e}")))
}

pub fn generate_dataset(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(derive_seed(seed, i), spec)).collect()
}

/// Crop window `[top, top+height) × [left, left+width)` with an optional
/// horizontal mirror, applied to pixels and to the 3D clouds alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl Augmentation {
    pub fn centre(scene: &Scene, height: usize, width: usize) -> Result<Self> {
        check_crop(scene, height, width)?;
        Ok(Self {
            top: (scene.height() - height) / 2,
            left: (scene.width() - width) / 2,
            height,
            width,
            flip: false,
        })
    }

    pub fn random(scene: &Scene, height: usize, width: usize, allow_flip: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_crop(scene, height, width)?;
        Ok(Self {
            top: rng.random_range(0..=scene.height() - height),
            left: rng.random_range(0..=scene.width() - width),
            height,
            width,
            flip: allow_flip && rng.random_bool(0.5),
        })
    }
}

fn check_crop(scene: &Scene, height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height > scene.height() || width > scene.width() {
        return Err(Error::Config(format!(
            "crop {height}×{width} does not fit a {}×{} scene",
            scene.height(),
            scene.width()
        )));
    }
    Ok(())
}

/// Crops (shifting the principal point) and optionally mirrors (negating
/// `x` and `v_x`, principal point `cx → W − cx`).
pub fn augment(scene: &Scene, aug: &Augmentation) -> Result<Scene> {
    let (h, w, sw) = (aug.height, aug.width, scene.width());
    let src_col = |u: usize| aug.left + if aug.flip { w - 1 - u } else { u };
    let crop = |t: &Tensor, channels: usize| -> Result<Tensor> {
        let mut out = Vec::with_capacity(h * w * channels);
        for v in 0..h {
            for u in 0..w {
                let s = ((aug.top + v) * sw + src_col(u)) * channels;
                out.extend_from_slice(&t.data()[s..s + channels]);
            }
        }
        let shape: Vec<usize> = if channels == 1 { vec![h, w] } else { vec![h, w, channels] };
        Tensor::new(&shape, out)
    };
    let k = scene.intrinsics;
    let cx = k.cx - aug.left as f64;
    let mut intrinsics = CameraIntrinsics::new(k.fx, k.fy, cx, k.cy - aug.top as f64)?;
    let mirror = |p: Point3| if aug.flip { [-p[0], p[1], p[2]] } else { p };
    if aug.flip {
        intrinsics.cx = w as f64 - cx;
    }
    Ok(Scene {
        image: crop(&scene.image, 3)?,
        depth: crop(&scene.depth, 1)?,
        sparse_depth: crop(&scene.sparse_depth, 1)?,
        lidar: scene.lidar.iter().map(|&p| mirror(p)).collect(),
        radar: scene
            .radar
            .iter()
            .map(|r| RadarPoint {
                position: mirror(r.position),
                velocity: if aug.flip { [-r.velocity[0], r.velocity[1]] } else { r.velocity },
                rcs: r.rcs,
            })
            .collect(),
        intrinsics,
        seed: scene.seed,
    })
}

/// Radar and LiDAR pixels and depths for the depth-discrepancy histogram.
pub fn depth_discrepancies(scene: &Scene) -> Result<Vec<f64>> {
    let (h, w) = (scene.height(), scene.width());
    let radar: Vec<Point3> = scene.radar.iter().map(|r| r.position).collect();
    let rp = project_points(&radar, &scene.intrinsics, h, w)?;
    let lp = project_points(&scene.lidar, &scene.intrinsics, h, w)?;
    crate::geometry::nearest_depth_discrepancy(&rp.pixels, &rp.depths, &lp.pixels, &lp.depths)
}

/// Bins of the discrepancy histogram: 0.5 m wide over `[0, 20)` m.
pub const HIST_BINS: usize = 40;
pub const HIST_BIN_WIDTH: f64 = 0.5;

/// `bin_start,bin_end,count` rows; the overflow bin ends at `inf`.
pub fn histogram_csv(counts: &[usize], width: f64) -> String {
    let mut out = String::from("bin_start,bin_end,count\n");
    for (i, c) in counts.iter().enumerate() {
        let start = i as f64 * width;
        if i + 1 == counts.len() {
            let _ = writeln!(out, "{start},inf,{c}");
        } else {
            let _ = writeln!(out, "{start},{},{c}", start + width);
        }
    }
    out
}

/// Counts of `values` in bins of `width` over `[0, bins·width)` plus a
/// final overflow bin.
pub fn histogram(values: &[f64], bins: usize, width: f64) -> Vec<usize> {
    let mut counts = vec![0; bins + 1];
    for &v in values {
        let b = (v / width).floor();
        let b = if b.is_finite() && b >= 0.0 && (b as usize) < bins { b as usize } else { bins };
        counts[b] += 1;
    }
    counts
}

/// Discrepancy histogram over every radar point of every scene.
pub fn discrepancy_histogram(scenes: &[Scene]) -> Result<Vec<usize>> {
    let mut values = Vec::new();
    for s in scenes {
        values.extend(depth_discrepancies(s)?);
    }
    Ok(histogram(&values, HIST_BINS, HIST_BIN_WIDTH))
}

/// Share of the counts in bins that start at or beyond `metres`.
pub fn fraction_beyond(counts: &[usize], width: f64, metres: f64) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let first = (metres / width).ceil() as usize;
    counts.iter().skip(first).sum::<usize>() as f64 / total as f64
}

fn write_f64s(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = &scene.intrinsics;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format = {FORMAT_TAG}");
    let _ = writeln!(manifest, "seed = {}", scene.seed);
    let _ = writeln!(manifest, "height = {}", scene.height());
    let _ = writeln!(manifest, "width = {}", scene.width());
    for (key, v) in [("fx", k.fx), ("fy", k.fy), ("cx", k.cx), ("cy", k.cy)] {
        let _ = writeln!(manifest, "{key} = {v:?}");
    }
    let _ = writeln!(manifest, "lidar_points = {}", scene.lidar.len());
    let _ = writeln!(manifest, "radar_points = {}", scene.radar.len());
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    write_f64s(&dir.join("image.f64"), scene.image.data().iter().copied())?;
    write_f64s(&dir.join("depth.f64"), scene.depth.data().iter().copied())?;
    write_f64s(&dir.join("sparse_depth.f64"), scene.sparse_depth.data().iter().copied())?;
    write_f64s(&dir.join("lidar.f64"), scene.lidar.iter().flatten().copied())?;
    write_f64s(&dir.join("radar.f64"), scene.radar.iter().flat_map(|r| r.to_row()))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: bad line {line:?}", path.display())))?;
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| {
        entries
            .get(key)
            .ok_or_else(|| Error::Format(format!("{}: missing {key}", path.display())))
    };
    if get("format")? != FORMAT_TAG {
        return Err(Error::Format(format!("{}: unknown format", path.display())));
    }
    let int = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: {key} is not an integer", path.display())))
    };
    let float = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: {key} is not a number", path.display())))
    };
    let (h, w) = (int("height")? as usize, int("width")? as usize);
    let (m, n) = (int("lidar_points")? as usize, int("radar_points")? as usize);
    let intrinsics = CameraIntrinsics::new(float("fx")?, float("fy")?, float("cx")?, float("cy")?)?;
    let lidar = read_f64s(&dir.join("lidar.f64"), m * 3)?;
    let radar = read_f64s(&dir.join("radar.f64"), n * 6)?;
    Ok(Scene {
        image: Tensor::new(&[h, w, 3], read_f64s(&dir.join("image.f64"), h * w * 3)?)?,
        depth: Tensor::new(&[h, w], read_f64s(&dir.join("depth.f64"), h * w)?)?,
        sparse_depth: Tensor::new(&[h, w], read_f64s(&dir.join("sparse_depth.f64"), h * w)?)?,
        lidar: lidar.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        radar: radar.chunks_exact(6).map(RadarPoint::from_row).collect(),
        intrinsics,
        seed: int("seed")?,
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

pub fn save_dataset(scenes: &[Scene], root: &Path) -> Result<()> {
    scenes
        .iter()
        .enumerate()
        .try_for_each(|(i, s)| save_scene(s, &scene_dir(root, i)))
}

/// Loads every `scene_*` subdirectory of `root` in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} holds no scenes", root.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}
