//! Adaptive sparse convolution over the radar projection map.
//!
//! Radar detections are split into depth groups by per-group observation
//! masks. Each group runs its own stack of normalised sparse convolutions
//! (larger kernels for nearer groups, whose objects cover more pixels) and
//! the group outputs are summed.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{CameraIntrinsics, PixelCoord};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::params::ParameterStore;
use crate::scene::RadarPoint;
use crate::tensor::Tensor;

/// Added to the observed-pixel count before normalising.
pub const SPARSE_EPS: f64 = 1e-8;

/// Channels of the radar projection map.
pub const MAP_CHANNELS: usize = 4;

/// `H×W×4` grid of (depth, v_x, v_z, RCS) plus the observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarProjectionMap {
    pub features: Tensor,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

/// Radar points that landed inside the image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectedRadar {
    /// Index into the original radar cloud.
    pub retained: Vec<usize>,
    pub pixels: Vec<PixelCoord>,
}

impl RadarProjectionMap {
    /// Projects the cloud; when several points hit a pixel the nearest wins.
    pub fn build(
        radar: &[RadarPoint],
        intrinsics: &CameraIntrinsics,
        height: usize,
        width: usize,
    ) -> (Self, ProjectedRadar) {
        let mut features = Tensor::zeros(&[height, width, MAP_CHANNELS]);
        let mut mask = vec![false; height * width];
        let mut kept = ProjectedRadar::default();
        for (i, p) in radar.iter().enumerate() {
            let Some(px) = intrinsics.project_to_pixel(&p.position, height, width) else {
                continue;
            };
            kept.retained.push(i);
            kept.pixels.push(px);
            let cell = px.flat(width);
            let row = &mut features.data_mut()[cell * MAP_CHANNELS..(cell + 1) * MAP_CHANNELS];
            if !mask[cell] || p.position[2] < row[0] {
                row.copy_from_slice(&[p.position[2], p.velocity[0], p.velocity[1], p.rcs]);
                mask[cell] = true;
            }
        }
        (
            Self {
                features,
                mask,
                height,
                width,
            },
            kept,
        )
    }

    pub fn depth(&self, cell: usize) -> f64 {
        self.features.data()[cell * MAP_CHANNELS]
    }
}

/// One depth interval `[min, max)` with its kernel schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceGroup {
    pub min: f64,
    pub max: f64,
    pub kernels: Vec<usize>,
}

impl DistanceGroup {
    pub fn contains(&self, depth: f64) -> bool {
        depth >= self.min && depth < self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceGroupSpec {
    pub groups: Vec<DistanceGroup>,
}

impl Default for DistanceGroupSpec {
    fn default() -> Self {
        Self {
            groups: vec![
                DistanceGroup {
                    min: 0.0,
                    max: 40.0,
                    kernels: vec![11, 7, 7, 5, 5, 3],
                },
                DistanceGroup {
                    min: 40.0,
                    max: 70.0,
                    kernels: vec![11, 7, 5, 5, 3, 3],
                },
                DistanceGroup {
                    min: 70.0,
                    max: f64::INFINITY,
                    kernels: vec![11, 7, 5, 3],
                },
            ],
        }
    }
}

impl DistanceGroupSpec {
    /// One group covering every depth.
    pub fn single(kernels: Vec<usize>) -> Self {
        Self {
            groups: vec![DistanceGroup {
                min: 0.0,
                max: f64::INFINITY,
                kernels,
            }],
        }
    }

    /// Intervals must tile `[0, ∞)` in order.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0.0;
        for (i, g) in self.groups.iter().enumerate() {
            if g.min != expected || !(g.max > g.min) {
                return Err(Error::Config(format!(
                    "group {i} interval [{}, {}) does not continue from {expected}",
                    g.min, g.max
                )));
            }
            validate_schedule(&g.kernels)?;
            expected = g.max;
        }
        if expected != f64::INFINITY {
            return Err(Error::Config("distance groups must extend to infinity".into()));
        }
        Ok(())
    }
}

pub fn validate_schedule(kernels: &[usize]) -> Result<()> {
    if kernels.is_empty() {
        return Err(Error::Config("empty kernel schedule".into()));
    }
    if kernels.iter().any(|k| k % 2 == 0) {
        return Err(Error::Config(format!("kernel sizes must be odd: {kernels:?}")));
    }
    if kernels.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Config(format!("kernel sizes must not increase: {kernels:?}")));
    }
    Ok(())
}

/// Disjoint per-group observation masks whose union is `map.mask`.
pub fn partition_masks(map: &RadarProjectionMap, spec: &DistanceGroupSpec) -> Vec<Vec<bool>> {
    spec.groups
        .iter()
        .map(|g| {
            map.mask
                .iter()
                .enumerate()
                .map(|(cell, &m)| m && g.contains(map.depth(cell)))
                .collect()
        })
        .collect()
}

/// Max-pool of a binary mask over a `size×size` window.
pub fn dilate_mask(mask: &[bool], height: usize, width: usize, size: usize) -> Vec<bool> {
    let r = size / 2;
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            for oy in y.saturating_sub(r)..(y + r + 1).min(height) {
                for ox in x.saturating_sub(r)..(x + r + 1).min(width) {
                    out[oy * width + ox] = true;
                }
            }
        }
    }
    out
}

/// Observed pixels inside each `size×size` window (zero padding).
fn window_counts(mask: &[bool], height: usize, width: usize, size: usize) -> Vec<usize> {
    let r = size / 2;
    // Summed-area table, one extra row and column.
    let mut sat = vec![0usize; (height + 1) * (width + 1)];
    for y in 0..height {
        for x in 0..width {
            sat[(y + 1) * (width + 1) + x + 1] = usize::from(mask[y * width + x])
                + sat[y * (width + 1) + x + 1]
                + sat[(y + 1) * (width + 1) + x]
                - sat[y * (width + 1) + x];
        }
    }
    let mut out = vec![0; mask.len()];
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(width));
            out[y * width + x] = sat[y1 * (width + 1) + x1] + sat[y0 * (width + 1) + x0]
                - sat[y0 * (width + 1) + x1]
                - sat[y1 * (width + 1) + x0];
        }
    }
    out
}

/// Normalised sparse convolution with stride 1 and same padding.
///
/// `out(p) = Σ k·m·x / (Σ m + ε)` over the window at `p`; the returned mask
/// is the input mask dilated by the kernel window.
pub fn sparse_conv_layer(
    g: &mut Graph,
    features: Var,
    mask: &[bool],
    kernel: Var,
) -> Result<(Var, Vec<bool>)> {
    let [h, w, c] = *g.shape(features) else {
        return Err(dim_err!("sparse conv input must be H×W×C"));
    };
    let &[kh, kw, _, _] = g.shape(kernel) else {
        return Err(dim_err!("sparse conv kernel must be 4-D"));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(dim_err!("sparse conv needs a square odd kernel, got {kh}×{kw}"));
    }
    if mask.len() != h * w {
        return Err(dim_err!("mask of {} cells for a {h}×{w} map", mask.len()));
    }
    let channel_mask = Tensor::from_parts(
        vec![h, w, c],
        mask.iter()
            .flat_map(|&m| std::iter::repeat_n(f64::from(u8::from(m)), c))
            .collect(),
    );
    let masked = g.mul_const(features, channel_mask)?;
    let summed = g.conv2d(masked, kernel, None, 1, Padding::Same)?;
    let factors = window_counts(mask, h, w, kh)
        .into_iter()
        .map(|n| 1.0 / (n as f64 + SPARSE_EPS))
        .collect();
    let out = g.scale_rows(summed, factors)?;
    Ok((out, dilate_mask(mask, h, w, kh)))
}

/// `size×size×c×c` kernel passing each channel through unchanged.
pub fn box_kernel(size: usize, channels: usize) -> Tensor {
    let mut k = Tensor::zeros(&[size, size, channels, channels]);
    for ky in 0..size {
        for kx in 0..size {
            for c in 0..channels {
                k.set(&[ky, kx, c, c], 1.0);
            }
        }
    }
    k
}

/// The stacked sparse convolutions of every distance group.
#[derive(Clone, Debug)]
pub struct Ascb {
    pub spec: DistanceGroupSpec,
    /// Kernel parameter names per group, or fixed kernels when not learnable.
    layers: Vec<Vec<KernelSource>>,
    channels: usize,
}

#[derive(Clone, Debug)]
enum KernelSource {
    Param(String),
    Fixed(Tensor),
}

impl Ascb {
    pub fn new(
        store: &mut ParameterStore,
        _rng: &mut ChaCha8Rng,
        name: &str,
        spec: DistanceGroupSpec,
        channels: usize,
        learnable: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (gi, group) in spec.groups.iter().enumerate() {
            let mut stack = Vec::new();
            for (li, &size) in group.kernels.iter().enumerate() {
                let kernel = box_kernel(size, channels);
                if learnable {
                    let pname = format!("{name}.g{gi}.l{li}.kernel");
                    store.insert(&pname, kernel)?;
                    stack.push(KernelSource::Param(pname));
                } else {
                    stack.push(KernelSource::Fixed(kernel));
                }
            }
            layers.push(stack);
        }
        Ok(Self {
            spec,
            layers,
            channels,
        })
    }

    /// Number of stacked layers per group.
    pub fn depths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Output of a single group's pipeline on its masked copy of the map.
    pub fn group_forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        features: Var,
        group_mask: &[bool],
        group: usize,
    ) -> Result<Var> {
        if g.shape(features).last() != Some(&self.channels) {
            return Err(dim_err!("ASCB expects {} channels", self.channels));
        }
        let mut x = features;
        let mut mask = group_mask.to_vec();
        for src in &self.layers[group] {
            let k = match src {
                KernelSource::Param(name) => g.param(store, name)?,
                KernelSource::Fixed(t) => g.constant(t.clone()),
            };
            (x, mask) = sparse_conv_layer(g, x, &mask, k)?;
        }
        Ok(x)
    }

    /// Sum over groups, in group order, of each group's pipeline output.
    ///
    /// `features` is the (possibly rescaled) map content; group membership is
    /// decided from `map`'s metric depths.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        map: &RadarProjectionMap,
        features: Var,
    ) -> Result<Var> {
        let masks = partition_masks(map, &self.spec);
        let mut total: Option<Var> = None;
        for (gi, mask) in masks.iter().enumerate() {
            let out = self.group_forward(g, store, features, mask, gi)?;
            total = Some(match total {
                Some(t) => g.add(t, out)?,
                None => out,
            });
        }
        total.ok_or_else(|| Error::Config("ASCB without groups".into()))
    }
}
