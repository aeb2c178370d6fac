//! Five-scale convolutional encoders and per-point feature selection.
//!
//! Each level halves the resolution with a stride-2 entry convolution and
//! refines with two 3×3 convolutions around a residual add. Level `i` has
//! shape `(H/2^i)×(W/2^i)×C_i`.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::geometry::PixelCoord;
use crate::graph::{Graph, Var};
use crate::layers::ConvLayer;
use crate::params::ParameterStore;

pub const LEVELS: usize = 5;

/// Graph handles for the five feature maps, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    entry: ConvLayer,
    conv1: ConvLayer,
    conv2: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    levels: Vec<EncoderLevel>,
    in_channels: usize,
    slope: f64,
}

impl Encoder {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        slope: f64,
    ) -> Result<Self> {
        if channels.len() != LEVELS {
            return Err(Error::Config(format!("encoder needs {LEVELS} widths")));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        let mut prev = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let base = format!("{name}.level{}", i + 1);
            levels.push(EncoderLevel {
                entry: ConvLayer::new(store, rng, &format!("{base}.entry"), prev, c, 3, 2, true)?,
                conv1: ConvLayer::new(store, rng, &format!("{base}.conv1"), c, c, 3, 1, true)?,
                conv2: ConvLayer::new(store, rng, &format!("{base}.conv2"), c, c, 3, 1, true)?,
            });
            prev = c;
        }
        Ok(Self {
            levels,
            in_channels,
            slope,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<FeaturePyramid> {
        let &[h, w, c] = g.shape(x) else {
            return Err(dim_err!("encoder input must be H×W×C"));
        };
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input {h}×{w} not divisible by 32")));
        }
        if c != self.in_channels {
            return Err(dim_err!("encoder expects {} channels, got {c}", self.in_channels));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        let mut x = x;
        for level in &self.levels {
            let entry = level.entry.forward(g, store, x)?;
            let y = g.leaky_relu(entry, self.slope);
            let r = level.conv1.forward(g, store, y)?;
            let r = g.leaky_relu(r, self.slope);
            let r = level.conv2.forward(g, store, r)?;
            let sum = g.add(y, r)?;
            x = g.leaky_relu(sum, self.slope);
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Names of every bias parameter (used to build zero-bias variants).
    pub fn bias_names(&self) -> Vec<String> {
        self.levels
            .iter()
            .flat_map(|l| [&l.entry, &l.conv1, &l.conv2])
            .filter_map(|c| c.bias.clone())
            .collect()
    }
}

/// Gathers, for each level `i = 1..5`, the feature row of every point at
/// `(⌊x/2^i⌋, ⌊y/2^i⌋)`. Returns one `N×C_i` matrix per level.
pub fn select_point_features(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    coords: &[PixelCoord],
) -> Result<Vec<Var>> {
    pyramid
        .levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let &[h, w, _] = g.shape(level) else {
                return Err(dim_err!("pyramid level must be H×W×C"));
            };
            let index = coords
                .iter()
                .map(|p| {
                    let cell = p.at_level(i + 1);
                    if cell.x >= w || cell.y >= h {
                        Err(Error::State(format!(
                            "pixel ({}, {}) outside level {} map {h}×{w}",
                            p.x,
                            p.y,
                            i + 1
                        )))
                    } else {
                        Ok(cell.flat(w))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            g.gather_rows(level, index)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn encoder(store: &mut ParameterStore) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Encoder::new(store, &mut rng, "enc", 3, &[2, 3, 4, 5, 6], 0.2).unwrap()
    }

    #[test]
    fn levels_halve() {
        let mut store = ParameterStore::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[64, 64, 3], 0.3));
        let p = enc.forward(&mut g, &store, x).unwrap();
        let sides: Vec<_> = p.levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(
            sides,
            vec![vec![32, 32, 2], vec![16, 16, 3], vec![8, 8, 4], vec![4, 4, 5], vec![2, 2, 6]]
        );
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_pyramid() {
        let mut store = ParameterStore::new();
        let enc = encoder(&mut store);
        for b in enc.bias_names() {
            let shape = store.value(&b).unwrap().shape().to_vec();
            store.set_value(&b, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[32, 64, 3]));
        let p = enc.forward(&mut g, &store, x).unwrap();
        for &l in &p.levels {
            assert_eq!(g.value(l).max_abs(), 0.0);
        }
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let mut store = ParameterStore::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[48, 64, 3]));
        assert!(matches!(enc.forward(&mut g, &store, x), Err(Error::Config(_))));
    }

    #[test]
    fn floor_scaled_cells() {
        let p = PixelCoord { x: 13, y: 27 };
        assert_eq!(p.at_level(2), PixelCoord { x: 3, y: 6 });
        let o = PixelCoord { x: 0, y: 0 };
        for l in 1..=5 {
            assert_eq!(o.at_level(l), o);
        }
    }

    #[test]
    fn points_sharing_a_cell_share_features() {
        let mut store = ParameterStore::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let x = g.constant(Tensor::new(&[64, 64, 3], img).unwrap());
        let p = enc.forward(&mut g, &store, x).unwrap();
        let coords = [PixelCoord { x: 33, y: 2 }, PixelCoord { x: 62, y: 30 }];
        let f = select_point_features(&mut g, &p, &coords).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(g.value(f[4]).row(0), g.value(f[4]).row(1));
        assert_ne!(g.value(f[0]).row(0), g.value(f[0]).row(1));
        let bad = select_point_features(&mut g, &p, &[PixelCoord { x: 64, y: 0 }]);
        assert!(matches!(bad, Err(Error::State(_))));
    }
}
