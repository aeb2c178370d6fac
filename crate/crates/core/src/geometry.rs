//! Camera projection, neighbour queries, Chamfer distance and point-cloud
//! normalisation.
//!
//! Camera frame: `x` right, `y` down, `z` forward (the projection axis).
//! Pixel coordinates are floored to integers with the origin at the top-left
//! corner, so pixel `(u, v)` covers `[u, u+1) × [v, v+1)`. Back-projection
//! goes through the pixel centre `(u + 0.5, v + 0.5)`, which makes
//! `project(back_project(u, v, z)) == (u, v)` robust to rounding.

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Continuous image-plane coordinates of a point in front of the camera.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| {
            (
                self.fx * p[0] / p[2] + self.cx,
                self.fy * p[1] / p[2] + self.cy,
            )
        })
    }

    /// Integer pixel of a point, if it lands inside a `height×width` image.
    pub fn project_to_pixel(&self, p: &Point3, height: usize, width: usize) -> Option<PixelCoord> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.floor(), v.floor());
        (u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64).then_some(PixelCoord {
            x: u as usize,
            y: v as usize,
        })
    }

    /// 3D point at `depth` along the ray through the centre of pixel `(u, v)`.
    pub fn back_project(&self, u: usize, v: usize, depth: f64) -> Point3 {
        [
            (u as f64 + 0.5 - self.cx) * depth / self.fx,
            (v as f64 + 0.5 - self.cy) * depth / self.fy,
            depth,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    pub x: usize,
    pub y: usize,
}

impl PixelCoord {
    /// Cell at pyramid level `level`: `(⌊x/2^i⌋, ⌊y/2^i⌋)`.
    pub fn at_level(self, level: usize) -> PixelCoord {
        PixelCoord {
            x: self.x >> level,
            y: self.y >> level,
        }
    }

    /// Row index in an `H×W×C` map of width `width`.
    pub fn flat(self, width: usize) -> usize {
        self.y * width + self.x
    }
}

/// Result of projecting a cloud: kept pixels, their depths, and the indices
/// of the kept points in the input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Projection {
    pub pixels: Vec<PixelCoord>,
    pub depths: Vec<f64>,
    pub retained: Vec<usize>,
}

pub fn project_points(
    cloud: &[Point3],
    intrinsics: &CameraIntrinsics,
    height: usize,
    width: usize,
) -> Result<Projection> {
    if height == 0 || width == 0 {
        return Err(Error::Precondition("image extents must be positive".into()));
    }
    let mut out = Projection::default();
    for (i, p) in cloud.iter().enumerate() {
        if let Some(px) = intrinsics.project_to_pixel(p, height, width) {
            out.pixels.push(px);
            out.depths.push(p[2]);
            out.retained.push(i);
        }
    }
    Ok(out)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other rows for every row of an `n×dim` set.
///
/// Returns a flat `n·k` list. Distances are Euclidean; ties go to the lower
/// index.
pub fn knn(rows: &[f64], dim: usize, k: usize) -> Result<Vec<usize>> {
    let n = rows.len().checked_div(dim).unwrap_or(0);
    if n <= k {
        return Err(Error::Precondition(format!(
            "knn needs more than k={k} points, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        let a = &rows[i * dim..(i + 1) * dim];
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(a, &rows[j * dim..(j + 1) * dim]), j)),
        );
        let by_dist = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k, by_dist);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(by_dist);
        out.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Neighbour count actually usable for `n` points: `min(k, n - 1)`.
pub fn effective_k(n: usize, k: usize) -> usize {
    k.min(n.saturating_sub(1))
}

/// For each 3D point of `a`, the index of and squared distance to its
/// nearest point in `b` (ties to the lower index).
pub fn nearest_in(a: &[f64], b: &[f64]) -> Result<Vec<(usize, f64)>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("nearest-point query on an empty set".into()));
    }
    Ok(a.chunks(3)
        .map(|p| {
            b.chunks(3)
                .enumerate()
                .fold((0, f64::INFINITY), |best, (j, q)| {
                    let d = squared_distance(p, q);
                    if d < best.1 {
                        (j, d)
                    } else {
                        best
                    }
                })
        })
        .collect())
}

pub fn flatten(cloud: &[Point3]) -> Vec<f64> {
    cloud.iter().flatten().copied().collect()
}

/// Mean nearest squared distance from `a` to `b` plus the reverse term.
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    let (fa, fb) = (flatten(a), flatten(b));
    let ab = nearest_in(&fa, &fb)?;
    let ba = nearest_in(&fb, &fa)?;
    Ok(ab.iter().map(|p| p.1).sum::<f64>() / a.len() as f64
        + ba.iter().map(|p| p.1).sum::<f64>() / b.len() as f64)
}

/// The `n_l` LiDAR points closest (in squared distance) to any radar point,
/// returned in ascending distance order with ties by index.
pub fn select_gt_points(radar: &[Point3], lidar: &[Point3], n_l: usize) -> Result<Vec<Point3>> {
    if radar.is_empty() {
        return Err(Error::Precondition("ground-truth selection needs radar points".into()));
    }
    if lidar.len() < n_l {
        return Err(Error::Data(format!(
            "{} LiDAR points cannot supply {n_l} ground-truth points",
            lidar.len()
        )));
    }
    let nearest = nearest_in(&flatten(lidar), &flatten(radar))?;
    let mut order: Vec<usize> = (0..lidar.len()).collect();
    order.sort_by(|&i, &j| nearest[i].1.total_cmp(&nearest[j].1).then(i.cmp(&j)));
    Ok(order[..n_l].iter().map(|&i| lidar[i]).collect())
}

/// Centroid shift plus isotropic scale by the maximum centroid distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationTransform {
    pub centroid: Point3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn fit(cloud: &[Point3]) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Data("cannot normalise an empty cloud".into()));
        }
        let n = cloud.len() as f64;
        let mut centroid = [0.0; 3];
        for p in cloud {
            for c in 0..3 {
                centroid[c] += p[c] / n;
            }
        }
        let scale = cloud
            .iter()
            .map(|p| squared_distance(p, &centroid).sqrt())
            .fold(0.0, f64::max);
        if scale <= 0.0 {
            return Err(Error::Data("degenerate cloud: all points coincide".into()));
        }
        Ok(Self { centroid, scale })
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        std::array::from_fn(|c| (p[c] - self.centroid[c]) / self.scale)
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        std::array::from_fn(|c| p[c] * self.scale + self.centroid[c])
    }
}

pub fn normalize(cloud: &[Point3]) -> Result<(Vec<Point3>, NormalizationTransform)> {
    let t = NormalizationTransform::fit(cloud)?;
    Ok((cloud.iter().map(|p| t.apply(p)).collect(), t))
}

pub fn denormalize(cloud: &[Point3], t: &NormalizationTransform) -> Vec<Point3> {
    cloud.iter().map(|p| t.invert(p)).collect()
}

/// For each radar pixel, `|depth − depth of the nearest LiDAR pixel|` with
/// nearest measured by Euclidean pixel distance (ties to the lower index).
pub fn nearest_depth_discrepancy(
    radar_pixels: &[PixelCoord],
    radar_depths: &[f64],
    lidar_pixels: &[PixelCoord],
    lidar_depths: &[f64],
) -> Result<Vec<f64>> {
    if radar_pixels.len() != radar_depths.len() || lidar_pixels.len() != lidar_depths.len() {
        return Err(Error::Dimension("pixel and depth counts differ".into()));
    }
    if lidar_pixels.is_empty() {
        return Err(Error::Precondition("no LiDAR pixels to compare against".into()));
    }
    Ok(radar_pixels
        .iter()
        .zip(radar_depths)
        .map(|(r, &d)| {
            let mut best = (usize::MAX, 0usize);
            for (j, l) in lidar_pixels.iter().enumerate() {
                let dx = r.x.abs_diff(l.x);
                let dy = r.y.abs_diff(l.y);
                let d2 = dx * dx + dy * dy;
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            (d - lidar_depths[best.1]).abs()
        })
        .collect())
}
