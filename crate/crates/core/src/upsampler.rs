//! Variable-ratio point-cloud upsampling.
//!
//! A frame's `N` radar points (any `N ≥ 1`) are first resampled to a fixed
//! `n = N_L / τ^{n_u}` rows by linear interpolation along the point order.
//! `n_u` upsample units then each multiply the point count by `τ`, and a
//! reconstruction head predicts per-point offsets added to the replicated
//! base points. The output always holds exactly `N_L` points.

use rand_chacha::ChaCha8Rng;

use crate::config::UpsamplerConfig;
use crate::error::{dim_err, Error, Result};
use crate::geometry::Point3;
use crate::graph::{Graph, Var};
use crate::layers::{LinearLayer, Mlp};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// `n×N` matrix resampling `N` rows at `n` evenly spaced positions in
/// `[0, N−1]`. Each output row is a convex combination of at most two
/// neighbouring input rows.
pub fn interpolation_matrix(n_in: usize, n_out: usize) -> Result<Tensor> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::Precondition("reshape needs at least one row".into()));
    }
    let mut a = Tensor::zeros(&[n_out, n_in]);
    for j in 0..n_out {
        let pos = if n_out == 1 {
            0.0
        } else {
            (j * (n_in - 1)) as f64 / (n_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n_in - 1);
        let frac = pos - lo as f64;
        a.set(&[j, lo], 1.0 - frac);
        if frac > 0.0 {
            a.set(&[j, lo + 1], frac);
        }
    }
    Ok(a)
}

/// Resamples points and their features to `n` rows with the same weights.
pub fn reshape_block(
    g: &mut Graph,
    points: &[Point3],
    features: Var,
    n: usize,
) -> Result<(Vec<Point3>, Var)> {
    if g.shape(features)[0] != points.len() {
        return Err(dim_err!(
            "{} points but {} feature rows",
            points.len(),
            g.shape(features)[0]
        ));
    }
    let a = interpolation_matrix(points.len(), n)?;
    let resampled = (0..n)
        .map(|j| {
            let mut p = [0.0; 3];
            for (i, q) in points.iter().enumerate() {
                let w = a.at(&[j, i]);
                if w != 0.0 {
                    for c in 0..3 {
                        p[c] += w * q[c];
                    }
                }
            }
            p
        })
        .collect();
    let av = g.constant(a);
    Ok((resampled, g.matmul(av, features)?))
}

/// Each row repeated `times` times contiguously.
pub fn replicate(points: &[Point3], times: usize) -> Vec<Point3> {
    points
        .iter()
        .flat_map(|p| std::iter::repeat_n(*p, times))
        .collect()
}

#[derive(Clone, Debug)]
pub struct UpsampleUnit {
    pub deconv_kernel: String,
    pub deconv_bias: String,
    pub refine: Mlp,
    pub rate: usize,
}

impl UpsampleUnit {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        rate: usize,
        taps: usize,
        slope: f64,
    ) -> Result<Self> {
        let deconv_kernel = format!("{name}.deconv.kernel");
        let deconv_bias = format!("{name}.deconv.bias");
        store.insert_uniform(&deconv_kernel, &[taps, channels, channels], channels * taps / rate, rng)?;
        store.insert_uniform(&deconv_bias, &[channels], channels * taps / rate, rng)?;
        let refine = Mlp::new(
            store,
            rng,
            &format!("{name}.refine"),
            &[2 * channels, channels, channels],
            slope,
            true,
        )?;
        Ok(Self {
            deconv_kernel,
            deconv_bias,
            refine,
            rate,
        })
    }

    /// `m` points with `m×C` features to `τm` points with `τm×C` features.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        points: &[Point3],
        features: Var,
    ) -> Result<(Vec<Point3>, Var)> {
        if g.shape(features)[0] != points.len() {
            return Err(dim_err!("unit got {} points, {} rows", points.len(), g.shape(features)[0]));
        }
        let duplicated = g.repeat_rows(features, self.rate);
        let k = g.param(store, &self.deconv_kernel)?;
        let b = g.param(store, &self.deconv_bias)?;
        let deconv = g.point_deconv(features, k, b, self.rate)?;
        let cat = g.concat_cols(&[duplicated, deconv])?;
        let out = self.refine.forward(g, store, cat)?;
        Ok((replicate(points, self.rate), out))
    }
}

/// Offset head: two affine layers, `C → C/2 → 3`.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub hidden: LinearLayer,
    pub offset: LinearLayer,
    pub slope: f64,
}

impl Reconstruction {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        slope: f64,
    ) -> Result<Self> {
        let mid = (channels / 2).max(1);
        Ok(Self {
            hidden: LinearLayer::new(store, rng, &format!("{name}.mlp1"), channels, mid)?,
            offset: LinearLayer::new(store, rng, &format!("{name}.mlp2"), mid, 3)?,
            slope,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        features: Var,
        base: Vec<Point3>,
    ) -> Result<UpsampledCloud> {
        if g.shape(features)[0] != base.len() {
            return Err(dim_err!(
                "{} feature rows for {} base points",
                g.shape(features)[0],
                base.len()
            ));
        }
        let h = self.hidden.forward(g, store, features)?;
        let h = g.leaky_relu(h, self.slope);
        let offsets = self.offset.forward(g, store, h)?;
        let base_var = g.constant(Tensor::from_parts(
            vec![base.len(), 3],
            base.iter().flatten().copied().collect(),
        ));
        let points = g.add(base_var, offsets)?;
        Ok(UpsampledCloud {
            points,
            features,
            offsets,
            base,
        })
    }
}

/// Graph handles for the upsampler output, in normalised coordinates.
#[derive(Clone, Debug)]
pub struct UpsampledCloud {
    /// `R_up`, `N_L×3`.
    pub points: Var,
    /// `𝓕_up`, `N_L×C`.
    pub features: Var,
    /// `Δr`, `N_L×3`.
    pub offsets: Var,
    /// `R_up′`, the replicated base points.
    pub base: Vec<Point3>,
}

impl UpsampledCloud {
    pub fn point_list(&self, g: &Graph) -> Vec<Point3> {
        g.value(self.points)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Upsampler {
    pub config: UpsamplerConfig,
    pub units: Vec<UpsampleUnit>,
    pub reconstruction: Reconstruction,
}

impl Upsampler {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: UpsamplerConfig,
        channels: usize,
        slope: f64,
    ) -> Result<Self> {
        config.validate()?;
        let units = (0..config.n_units)
            .map(|i| {
                UpsampleUnit::new(
                    store,
                    rng,
                    &format!("{name}.unit{}", i + 1),
                    channels,
                    config.tau,
                    config.deconv_taps,
                    slope,
                )
            })
            .collect::<Result<_>>()?;
        let reconstruction = Reconstruction::new(store, rng, &format!("{name}.recon"), channels, slope)?;
        Ok(Self {
            config,
            units,
            reconstruction,
        })
    }

    /// Runs reshape, the units and reconstruction on normalised points.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        points: &[Point3],
        features: Var,
    ) -> Result<UpsampledCloud> {
        let (points, features) = if self.config.depth_sorted {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.sort_by(|&a, &b| points[a][2].total_cmp(&points[b][2]).then(a.cmp(&b)));
            let sorted: Vec<Point3> = order.iter().map(|&i| points[i]).collect();
            (sorted, g.gather_rows(features, order)?)
        } else {
            (points.to_vec(), features)
        };
        let (mut pts, mut feat) = reshape_block(g, &points, features, self.config.base_points())?;
        for unit in &self.units {
            (pts, feat) = unit.forward(g, store, &pts, feat)?;
        }
        self.reconstruction.forward(g, store, feat, pts)
    }

    /// The base cloud the reconstruction offsets are added to.
    pub fn baseline(&self, points: &[Point3]) -> Result<Vec<Point3>> {
        let a = interpolation_matrix(points.len(), self.config.base_points())?;
        let reshaped: Vec<Point3> = (0..a.shape()[0])
            .map(|j| {
                std::array::from_fn(|c| {
                    points
                        .iter()
                        .enumerate()
                        .map(|(i, q)| a.at(&[j, i]) * q[c])
                        .sum()
                })
            })
            .collect();
        Ok(replicate(&reshaped, self.config.tau.pow(self.config.n_units as u32)))
    }
}
