//! The full depth network: radar branch, image encoder, fusion and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::Aggregation;
use crate::ascb::{Ascb, DistanceGroupSpec, ProjectedRadar, RadarProjectionMap, MAP_CHANNELS};
use crate::config::{GnnVariant, RunConfig};
use crate::decoder::{depth_loss, total_loss, Decoder, DepthMap, GatedFusion};
use crate::encoder::{select_point_features, Encoder};
use crate::error::{Error, Result};
use crate::geometry::{select_gt_points, NormalizationTransform, Point3};
use crate::gnn::{DynamicGraphNet, GnnDiagnostics, PointwiseNet};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::refinement::{build_global_map, scatter_add_scale};
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::upsampler::{UpsampledCloud, Upsampler};

/// Divisors applied to the radar attributes before they enter the network:
/// depth by `max_depth`, velocities by 10 m/s, RCS by 30 dBsm.
const VELOCITY_SCALE: f64 = 10.0;
const RCS_SCALE: f64 = 30.0;

/// Everything the network needs from one scene, computed outside the graph.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub image: Tensor,
    pub map: RadarProjectionMap,
    pub projected: ProjectedRadar,
    /// Metric positions of the projected radar points.
    pub positions: Vec<Point3>,
    /// `N×6`: normalised position, scaled velocity and RCS.
    pub rows: Tensor,
    pub transform: NormalizationTransform,
    /// Normalised ground-truth points for the Chamfer term.
    pub target_points: Option<Vec<Point3>>,
    pub sparse: DepthMap,
    pub dense: DepthMap,
    pub intrinsics: crate::geometry::CameraIntrinsics,
}

impl FrameInput {
    pub fn height(&self) -> usize {
        self.map.height
    }

    pub fn width(&self) -> usize {
        self.map.width
    }

    pub fn point_count(&self) -> usize {
        self.positions.len()
    }
}

/// Centroid/max-distance transform, or a unit-scale shift when the cloud is
/// a single point.
pub fn fit_transform(cloud: &[Point3]) -> Result<NormalizationTransform> {
    match NormalizationTransform::fit(cloud) {
        Ok(t) => Ok(t),
        Err(Error::Data(_)) if !cloud.is_empty() => Ok(NormalizationTransform {
            centroid: cloud[0],
            scale: 1.0,
        }),
        Err(e) => Err(e),
    }
}

pub fn prepare_frame(scene: &Scene, config: &RunConfig) -> Result<FrameInput> {
    let (h, w) = (scene.height(), scene.width());
    let (map, projected) = RadarProjectionMap::build(&scene.radar, &scene.intrinsics, h, w);
    let points: Vec<_> = projected.retained.iter().map(|&i| scene.radar[i]).collect();
    let positions: Vec<Point3> = points.iter().map(|p| p.position).collect();
    let (transform, rows, target_points) = if positions.is_empty() {
        let t = NormalizationTransform {
            centroid: [0.0; 3],
            scale: 1.0,
        };
        (t, Tensor::zeros(&[0, 6]), None)
    } else {
        let t = fit_transform(&positions)?;
        let data = points
            .iter()
            .flat_map(|p| {
                let [x, y, z] = t.apply(&p.position);
                [
                    x,
                    y,
                    z,
                    p.velocity[0] / VELOCITY_SCALE,
                    p.velocity[1] / VELOCITY_SCALE,
                    p.rcs / RCS_SCALE,
                ]
            })
            .collect();
        let target = if config.ablation.no_upsample {
            None
        } else {
            let gt = select_gt_points(&positions, &scene.lidar, config.upsampler.n_l)?;
            Some(gt.iter().map(|p| t.apply(p)).collect())
        };
        (t, Tensor::new(&[positions.len(), 6], data)?, target)
    };
    Ok(FrameInput {
        image: scene.image.clone(),
        map,
        projected,
        positions,
        rows,
        transform,
        target_points,
        sparse: DepthMap::from_depth(scene.sparse_depth.clone()),
        dense: DepthMap::from_depth(scene.depth.clone()),
        intrinsics: scene.intrinsics,
    })
}

#[derive(Clone, Debug)]
enum PointNet {
    Graph(DynamicGraphNet),
    Pointwise(PointwiseNet),
}

#[derive(Clone, Debug)]
pub struct GetUp {
    pub config: RunConfig,
    ascb: Option<Ascb>,
    image_encoder: Encoder,
    radar_encoder: Encoder,
    point_net: PointNet,
    aggregation: Aggregation,
    upsampler: Option<Upsampler>,
    fusion: Vec<GatedFusion>,
    decoder: Decoder,
}

/// Graph handles and side outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `H×W` predicted depth.
    pub depth: Var,
    pub upsampled: Option<UpsampledCloud>,
    pub gnn: Option<GnnDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub depth: Var,
    pub chamfer: Option<Var>,
    pub forward: ForwardOutput,
}

impl GetUp {
    /// Builds the network and registers its parameters, drawing initial
    /// values from `config.seed`.
    pub fn new(config: &RunConfig, store: &mut ParameterStore) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        if m.radar_map_channels != MAP_CHANNELS {
            return Err(Error::Config(format!(
                "radar map has {MAP_CHANNELS} channels, config says {}",
                m.radar_map_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let ab = &config.ablation;
        let ascb = if ab.no_ascb {
            None
        } else {
            let spec = if ab.conventional_sparse {
                DistanceGroupSpec::single(config.ascb.conventional_kernels.clone())
            } else {
                config.ascb.groups.clone()
            };
            Some(Ascb::new(store, rng, "ascb", spec, MAP_CHANNELS, config.ascb.learnable)?)
        };
        let c = m.point_channels;
        let image_encoder = Encoder::new(store, rng, "image", 3, &m.image_channels, m.leaky_slope)?;
        let radar_encoder = Encoder::new(store, rng, "radar", MAP_CHANNELS, &m.radar_channels, m.leaky_slope)?;
        let point_net = if ab.no_gnn {
            PointNet::Pointwise(PointwiseNet::new(store, rng, "pointwise", c, m.leaky_slope)?)
        } else {
            PointNet::Graph(DynamicGraphNet::new(
                store,
                rng,
                "gnn",
                &m.gnn_channels,
                &m.radar_channels,
                c,
                m.k,
                m.leaky_slope,
                m.gnn_variant,
            )?)
        };
        let aggregation = Aggregation::new(store, rng, "agg", c, &m.radar_channels)?;
        let upsampler = if ab.no_upsample {
            None
        } else {
            Some(Upsampler::new(store, rng, "up", config.upsampler.clone(), c, m.leaky_slope)?)
        };
        let fusion = m
            .image_channels
            .iter()
            .zip(&m.radar_channels)
            .enumerate()
            .map(|(i, (&ci, &cr))| GatedFusion::new(store, rng, &format!("fuse{}", i + 1), ci, cr))
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(
            store,
            rng,
            "dec",
            &m.image_channels,
            c,
            &m.decoder_channels,
            config.max_depth,
            m.leaky_slope,
        )?;
        Ok(Self {
            config: config.clone(),
            ascb,
            image_encoder,
            radar_encoder,
            point_net,
            aggregation,
            upsampler,
            fusion,
            decoder,
        })
    }

    pub fn ascb(&self) -> Option<&Ascb> {
        self.ascb.as_ref()
    }

    pub fn uses_graph(&self) -> bool {
        matches!(self.point_net, PointNet::Graph(_))
    }

    pub fn gnn_variant(&self) -> Option<GnnVariant> {
        self.uses_graph().then_some(self.config.model.gnn_variant)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, frame: &FrameInput) -> Result<ForwardOutput> {
        let (h, w) = (frame.height(), frame.width());
        let scale = [
            1.0 / self.config.max_depth,
            1.0 / VELOCITY_SCALE,
            1.0 / VELOCITY_SCALE,
            1.0 / RCS_SCALE,
        ];
        let scaled = Tensor::new(
            &[h, w, MAP_CHANNELS],
            frame
                .map
                .features
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * scale[i % MAP_CHANNELS])
                .collect(),
        )?;
        let radar_in = g.constant(scaled);
        let radar_in = match &self.ascb {
            Some(a) => a.forward(g, store, &frame.map, radar_in)?,
            None => radar_in,
        };
        let image = g.constant(frame.image.clone());
        let image_pyr = self.image_encoder.forward(g, store, image)?;
        let mut radar_pyr = self.radar_encoder.forward(g, store, radar_in)?;

        let c = self.config.model.point_channels;
        let mut upsampled = None;
        let mut gnn = None;
        let global_map = if frame.point_count() == 0 {
            g.constant(Tensor::zeros(&[h, w, c]))
        } else {
            let pixels = &frame.projected.pixels;
            let f2d = select_point_features(g, &radar_pyr, pixels)?;
            let r = g.constant(frame.rows.clone());
            let f3d = match &self.point_net {
                PointNet::Graph(net) => {
                    let (f, diag) = net.forward(g, store, r, &f2d)?;
                    gnn = Some(diag);
                    f
                }
                PointNet::Pointwise(net) => net.forward(g, store, r)?,
            };
            let agg = self.aggregation.forward(g, store, f3d, &f2d)?;
            for (i, (level, &fa)) in radar_pyr.levels.iter_mut().zip(&agg.per_scale).enumerate() {
                *level = scatter_add_scale(g, *level, fa, pixels, i + 1)?;
            }
            let normalized: Vec<Point3> = frame.positions.iter().map(|p| frame.transform.apply(p)).collect();
            let cloud = match &self.upsampler {
                Some(up) => Some(up.forward(g, store, &normalized, f3d)?),
                None => None,
            };
            let metric: Option<Vec<Point3>> = cloud
                .as_ref()
                .map(|cl| cl.point_list(g).iter().map(|p| frame.transform.invert(p)).collect());
            let up_input = match (&cloud, &metric) {
                (Some(cl), Some(pts)) => Some((pts.as_slice(), cl.features)),
                _ => None,
            };
            let gm = build_global_map(g, agg.global, pixels, up_input, &frame.intrinsics, h, w)?;
            upsampled = cloud;
            gm.map
        };

        let fused = self
            .fusion
            .iter()
            .zip(image_pyr.levels.iter().zip(&radar_pyr.levels))
            .map(|(f, (&img, &rad))| f.forward(g, store, img, rad))
            .collect::<Result<Vec<_>>>()?;
        let depth = self.decoder.forward(g, store, &fused, global_map)?;
        Ok(ForwardOutput { depth, upsampled, gnn })
    }

    /// Forward pass plus `L = L_depth + α·L_up` (the Chamfer term is absent
    /// without radar points or with the upsampler ablated).
    pub fn loss(&self, g: &mut Graph, store: &ParameterStore, frame: &FrameInput) -> Result<LossOutput> {
        let forward = self.forward(g, store, frame)?;
        let depth = depth_loss(g, forward.depth, &frame.sparse, &frame.dense)?;
        let chamfer = match (&forward.upsampled, &frame.target_points) {
            (Some(cloud), Some(target)) => {
                let t = g.constant(Tensor::new(
                    &[target.len(), 3],
                    target.iter().flatten().copied().collect(),
                )?);
                Some(g.chamfer(cloud.points, t)?)
            }
            _ => None,
        };
        let total = total_loss(g, depth, chamfer, self.config.alpha)?;
        Ok(LossOutput {
            total,
            depth,
            chamfer,
            forward,
        })
    }

    /// Predicted `H×W` depth for one frame.
    pub fn predict(&self, store: &ParameterStore, frame: &FrameInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, frame)?;
        Ok(g.value(out.depth).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::scene::{generate_scene, SceneSpec};

    pub(crate) fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.crop = [32, 64];
        c.model.image_channels = vec![3, 4, 4, 5, 5];
        c.model.radar_channels = vec![2, 3, 3, 4, 4];
        c.model.gnn_channels = vec![4, 4, 4, 4, 4];
        c.model.point_channels = 6;
        c.model.decoder_channels = vec![3, 3, 4, 4, 5, 5];
        c.upsampler.n_l = 16;
        c
    }

    fn tiny_scene(seed: u64) -> Scene {
        generate_scene(
            seed,
            &SceneSpec {
                height: 32,
                width: 64,
                lidar_points: 200,
                radar_min: 5,
                radar_max: 9,
                ..SceneSpec::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn every_ablation_combination_runs_with_finite_gradients() {
        let scene = tiny_scene(1);
        for bits in 0..16u32 {
            for variant in [GnnVariant::Attention, GnnVariant::Dgcnn] {
                let mut cfg = tiny_config();
                cfg.model.gnn_variant = variant;
                cfg.ablation = Ablation {
                    no_ascb: bits & 1 != 0,
                    conventional_sparse: bits & 2 != 0,
                    no_gnn: bits & 4 != 0,
                    no_upsample: bits & 8 != 0,
                };
                let mut store = ParameterStore::new();
                let model = GetUp::new(&cfg, &mut store).unwrap();
                let frame = prepare_frame(&scene, &cfg).unwrap();
                let mut g = Graph::new();
                let out = model.loss(&mut g, &store, &frame).unwrap();
                assert_eq!(g.shape(out.forward.depth), &[32, 64]);
                assert!(g.value(out.forward.depth).data().iter().all(|&d| d > 0.0));
                assert_eq!(out.chamfer.is_some(), !cfg.ablation.no_upsample);
                g.backward(out.total, &mut store).unwrap();
                assert!(store.iter().all(|(_, p)| p.grad.is_finite()));
            }
        }
    }

    #[test]
    fn upsampled_cloud_has_target_cardinality() {
        let cfg = tiny_config();
        let mut store = ParameterStore::new();
        let model = GetUp::new(&cfg, &mut store).unwrap();
        let frame = prepare_frame(&tiny_scene(2), &cfg).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &frame).unwrap();
        assert_eq!(g.shape(out.upsampled.unwrap().points), &[16, 3]);
    }

    #[test]
    fn radar_free_frame_still_predicts() {
        let cfg = tiny_config();
        let mut store = ParameterStore::new();
        let model = GetUp::new(&cfg, &mut store).unwrap();
        let mut scene = tiny_scene(3);
        scene.radar.clear();
        let frame = prepare_frame(&scene, &cfg).unwrap();
        let mut g = Graph::new();
        let out = model.loss(&mut g, &store, &frame).unwrap();
        assert!(out.chamfer.is_none());
        assert!(out.forward.upsampled.is_none());
    }

    #[test]
    fn single_point_transform_falls_back_to_unit_scale() {
        let t = fit_transform(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(t.scale, 1.0);
        assert_eq!(t.apply(&[1.0, 2.0, 3.0]), [0.0; 3]);
        assert!(fit_transform(&[]).is_err());
    }
}
