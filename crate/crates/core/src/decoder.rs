//! Gated radar/image fusion, the depth decoder and the training losses.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::ConvLayer;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// `H×W` depths in metres with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depth: Tensor,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Valid wherever the depth is positive.
    pub fn from_depth(depth: Tensor) -> Self {
        let valid = depth.data().iter().map(|&d| d > 0.0).collect();
        Self { depth, valid }
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// `fused = F_img + σ(conv_g(F_img ⊕ F_radar)) ⊙ conv_v(F_radar)`.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub gate: ConvLayer,
    pub value: ConvLayer,
}

impl GatedFusion {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        image_channels: usize,
        radar_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            gate: ConvLayer::new(
                store,
                rng,
                &format!("{name}.gate"),
                image_channels + radar_channels,
                image_channels,
                3,
                1,
                true,
            )?,
            value: ConvLayer::new(
                store,
                rng,
                &format!("{name}.value"),
                radar_channels,
                image_channels,
                1,
                1,
                true,
            )?,
        })
    }

    pub fn gate_values(&self, g: &mut Graph, store: &ParameterStore, image: Var, radar: Var) -> Result<Var> {
        let (si, sr) = (g.shape(image), g.shape(radar));
        if si.len() != 3 || sr.len() != 3 || si[..2] != sr[..2] {
            return Err(dim_err!("fusion spatial extents {si:?} vs {sr:?}"));
        }
        let cat = g.concat_cols(&[image, radar])?;
        let z = self.gate.forward(g, store, cat)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, image: Var, radar: Var) -> Result<Var> {
        let gate = self.gate_values(g, store, image, radar)?;
        let v = self.value.forward(g, store, radar)?;
        let gated = g.mul(gate, v)?;
        g.add(image, gated)
    }
}

/// Coarse-to-fine decoder: at each level upsample ×2, concatenate the fused
/// features of that level and convolve; at full resolution concatenate a
/// 1×1 projection of the global radar map, then a 1×1 head with
/// `softplus · max_depth`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub top: ConvLayer,
    /// Levels 4, 3, 2, 1 in that order.
    pub stages: Vec<ConvLayer>,
    pub global_proj: ConvLayer,
    pub full: ConvLayer,
    pub head: ConvLayer,
    pub max_depth: f64,
    pub slope: f64,
}

impl Decoder {
    /// `fused_channels` are the level 1..5 widths; `widths` are the decoder
    /// widths, full resolution first then levels 1..5.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fused_channels: &[usize],
        global_channels: usize,
        widths: &[usize],
        max_depth: f64,
        slope: f64,
    ) -> Result<Self> {
        if fused_channels.len() != 5 || widths.len() != 6 {
            return Err(Error::Config("decoder needs 5 fused widths and 6 decoder widths".into()));
        }
        let top = ConvLayer::new(store, rng, &format!("{name}.top"), fused_channels[4], widths[5], 3, 1, true)?;
        let stages = (1..=4)
            .rev()
            .map(|level| {
                ConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.level{level}"),
                    widths[level + 1] + fused_channels[level - 1],
                    widths[level],
                    3,
                    1,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        let global_proj = ConvLayer::new(
            store,
            rng,
            &format!("{name}.global"),
            global_channels,
            widths[0],
            1,
            1,
            true,
        )?;
        let full = ConvLayer::new(store, rng, &format!("{name}.full"), widths[1] + widths[0], widths[0], 3, 1, true)?;
        let head = ConvLayer::new(store, rng, &format!("{name}.head"), widths[0], 1, 1, 1, true)?;
        Ok(Self {
            top,
            stages,
            global_proj,
            full,
            head,
            max_depth,
            slope,
        })
    }

    /// `fused` holds levels 1..5; returns an `H×W` positive depth map.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        fused: &[Var],
        global: Var,
    ) -> Result<Var> {
        if fused.len() != 5 {
            return Err(dim_err!("decoder needs 5 fused maps, got {}", fused.len()));
        }
        let x = self.top.forward(g, store, fused[4])?;
        let mut x = g.leaky_relu(x, self.slope);
        for (stage, level) in self.stages.iter().zip((1..=4).rev()) {
            let up = g.upsample2(x)?;
            let cat = g.concat_cols(&[up, fused[level - 1]])?;
            let y = stage.forward(g, store, cat)?;
            x = g.leaky_relu(y, self.slope);
        }
        let up = g.upsample2(x)?;
        let &[h, w, _] = g.shape(up) else { unreachable!() };
        if g.shape(global)[..2] != [h, w] {
            return Err(dim_err!("global map {:?} for output {h}×{w}", g.shape(global)));
        }
        let gp = self.global_proj.forward(g, store, global)?;
        let cat = g.concat_cols(&[up, gp])?;
        let y = self.full.forward(g, store, cat)?;
        let y = g.leaky_relu(y, self.slope);
        self.depth_head(g, store, y)
    }

    /// Full-resolution features `[H, W, C]` to depth `[H, W]`.
    pub fn depth_head(&self, g: &mut Graph, store: &ParameterStore, features: Var) -> Result<Var> {
        let &[h, w, _] = g.shape(features) else {
            return Err(dim_err!("head input must be H×W×C, got {:?}", g.shape(features)));
        };
        let logits = self.head.forward(g, store, features)?;
        let pos = g.softplus(logits);
        let depth = g.scale(pos, self.max_depth);
        g.reshape(depth, &[h, w])
    }
}

/// Mean absolute error over the valid pixels of `D_s` plus that over the
/// valid pixels of `D`. A term whose mask is empty is omitted; both empty is
/// an error.
pub fn depth_loss(g: &mut Graph, pred: Var, sparse: &DepthMap, dense: &DepthMap) -> Result<Var> {
    let mut terms = Vec::new();
    for target in [sparse, dense] {
        if target.depth.shape() != g.shape(pred) {
            return Err(dim_err!(
                "depth target {:?} vs prediction {:?}",
                target.depth.shape(),
                g.shape(pred)
            ));
        }
        if target.valid.iter().any(|&v| v) {
            terms.push(g.masked_mae(pred, &target.depth, &target.valid)?);
        }
    }
    match terms.as_slice() {
        [] => Err(Error::Data("depth loss with no valid pixels in either target".into())),
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// `L = L_depth + α · L_up`.
pub fn total_loss(g: &mut Graph, depth: Var, chamfer: Option<Var>, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be ≥ 0, got {alpha}")));
    }
    match chamfer {
        Some(c) => {
            let weighted = g.scale(c, alpha);
            g.add(depth, weighted)
        }
        None => Ok(depth),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_radar_passes_image_through() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fusion = GatedFusion::new(&mut store, &mut rng, "f", 3, 2).unwrap();
        let vb = fusion.value.bias.clone().unwrap();
        store.set_value(&vb, Tensor::zeros(&[3])).unwrap();
        let img = random(&mut rng, &[4, 4, 3]);
        let mut g = Graph::new();
        let i = g.constant(img.clone());
        let r = g.constant(Tensor::zeros(&[4, 4, 2]));
        let out = fusion.forward(&mut g, &store, i, r).unwrap();
        assert_eq!(g.value(out), &img);
    }

    #[test]
    fn saturated_gate_closes_radar_branch() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fusion = GatedFusion::new(&mut store, &mut rng, "f", 3, 2).unwrap();
        let gb = fusion.gate.bias.clone().unwrap();
        store.set_value(&gb, Tensor::full(&[3], -800.0)).unwrap();
        let img = random(&mut rng, &[4, 4, 3]);
        let mut g = Graph::new();
        let i = g.constant(img.clone());
        let r = g.constant(random(&mut rng, &[4, 4, 2]));
        let out = fusion.forward(&mut g, &store, i, r).unwrap();
        for (a, b) in g.value(out).data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-300_f64.max(1e-12));
        }
    }

    #[test]
    fn gate_values_in_open_unit_interval() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fusion = GatedFusion::new(&mut store, &mut rng, "f", 2, 2).unwrap();
        let mut g = Graph::new();
        let i = g.constant(random(&mut rng, &[4, 4, 2]).scale(5.0));
        let r = g.constant(random(&mut rng, &[4, 4, 2]).scale(5.0));
        let gate = fusion.gate_values(&mut g, &store, i, r).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = g.constant(Tensor::zeros(&[2, 4, 2]));
        assert!(fusion.forward(&mut g, &store, i, bad).is_err());
    }

    #[test]
    fn decoder_output_positive_and_parameter_sensitive() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Decoder::new(&mut store, &mut rng, "d", &[2, 3, 4, 5, 6], 3, &[2, 2, 3, 3, 4, 4], 80.0, 0.2)
            .unwrap();
        let run = |store: &ParameterStore, rng: &mut ChaCha8Rng| {
            let mut rng2 = rng.clone();
            let mut g = Graph::new();
            let fused: Vec<Var> = (0..5)
                .map(|i| {
                    let s = 32 >> (i + 1);
                    g.constant(random(&mut rng2, &[s, 2 * s, i + 2]))
                })
                .collect();
            let global = g.constant(random(&mut rng2, &[32, 64, 3]));
            let d = dec.forward(&mut g, store, &fused, global).unwrap();
            g.value(d).clone()
        };
        let a = run(&store, &mut rng);
        assert_eq!(a.shape(), &[32, 64]);
        assert!(a.data().iter().all(|&v| v > 0.0));
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let v = store.value(&n).unwrap().scale(2.0);
            store.set_value(&n, v).unwrap();
        }
        assert_ne!(run(&store, &mut rng), a);
    }

    #[test]
    fn depth_loss_examples() {
        let mut g = Graph::new();
        let truth = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let p = g.constant(truth.clone());
        let dm = DepthMap::from_depth(truth.clone());
        let l = depth_loss(&mut g, p, &dm, &dm).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        let pred = g.constant(Tensor::new(&[2, 2], vec![6.0, 3.0, 0.0, 0.0]).unwrap());
        let sparse = DepthMap::from_depth(Tensor::new(&[2, 2], vec![5.0, 6.0, 0.0, 0.0]).unwrap());
        let none = DepthMap::from_depth(Tensor::zeros(&[2, 2]));
        let l = depth_loss(&mut g, pred, &sparse, &none).unwrap();
        assert_eq!(g.value(l).data()[0], 2.0);
        assert!(matches!(depth_loss(&mut g, pred, &none, &none), Err(Error::Data(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(2.0));
        let l = total_loss(&mut g, d, Some(c), 1.0).unwrap();
        assert_eq!(g.value(l).data()[0], 5.0);
        let l0 = total_loss(&mut g, d, Some(c), 0.0).unwrap();
        assert_eq!(g.value(l0).data()[0], 3.0);
        assert!(total_loss(&mut g, d, Some(c), -1.0).is_err());
    }
}
