//! 2D-3D feature aggregation.
//!
//! Per scale, `f_agg^i = Attention(f3d·W_Q^i, f2d^i·W_K^i, f2d^i·W_V^i)` with
//! output width `C_i`. Globally, the five 2D sets are concatenated
//! channel-wise and attended with `f3d` as the query, output width `C`.
//! Neither output carries a residual term.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::LinearLayer;
use crate::params::ParameterStore;

#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
}

impl AttentionProjections {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: LinearLayer::new(store, rng, &format!("{name}.q"), query_dim, out_dim)?,
            key: LinearLayer::new(store, rng, &format!("{name}.k"), kv_dim, out_dim)?,
            value: LinearLayer::new(store, rng, &format!("{name}.v"), kv_dim, out_dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, query: Var, kv: Var) -> Result<Var> {
        if g.shape(query)[0] != g.shape(kv)[0] {
            return Err(dim_err!(
                "aggregation row counts {} vs {}",
                g.shape(query)[0],
                g.shape(kv)[0]
            ));
        }
        let q = self.query.forward(g, store, query)?;
        let k = self.key.forward(g, store, kv)?;
        let v = self.value.forward(g, store, kv)?;
        g.attention(q, k, v)
    }
}

#[derive(Clone, Debug)]
pub struct AggregatedFeatures {
    pub per_scale: Vec<Var>,
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub per_scale: Vec<AttentionProjections>,
    pub global: AttentionProjections,
}

impl Aggregation {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        point_dim: usize,
        widths_2d: &[usize],
    ) -> Result<Self> {
        let per_scale = widths_2d
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                AttentionProjections::new(store, rng, &format!("{name}.scale{}", i + 1), point_dim, c, c)
            })
            .collect::<Result<_>>()?;
        let total = widths_2d.iter().sum();
        let global =
            AttentionProjections::new(store, rng, &format!("{name}.global"), point_dim, total, point_dim)?;
        Ok(Self { per_scale, global })
    }

    pub fn aggregate_per_scale(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f3d: Var,
        f2d: &[Var],
    ) -> Result<Vec<Var>> {
        if f2d.len() != self.per_scale.len() {
            return Err(dim_err!("{} 2D sets for {} scales", f2d.len(), self.per_scale.len()));
        }
        self.per_scale
            .iter()
            .zip(f2d)
            .map(|(p, &f)| p.forward(g, store, f3d, f))
            .collect()
    }

    pub fn aggregate_global(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f3d: Var,
        f2d: &[Var],
    ) -> Result<Var> {
        let cat = g.concat_cols(f2d)?;
        self.global.forward(g, store, f3d, cat)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f3d: Var,
        f2d: &[Var],
    ) -> Result<AggregatedFeatures> {
        Ok(AggregatedFeatures {
            per_scale: self.aggregate_per_scale(g, store, f3d, f2d)?,
            global: self.aggregate_global(g, store, f3d, f2d)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn setup() -> (ParameterStore, ChaCha8Rng, Aggregation) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let agg = Aggregation::new(&mut store, &mut rng, "agg", 6, &[2, 3, 4, 5, 6]).unwrap();
        (store, rng, agg)
    }

    #[test]
    fn widths_match_inputs() {
        let (store, mut rng, agg) = setup();
        let mut g = Graph::new();
        let f3d = g.constant(random(&mut rng, 7, 6));
        let f2d: Vec<Var> = [2, 3, 4, 5, 6]
            .iter()
            .map(|&c| g.constant(random(&mut rng, 7, c)))
            .collect();
        let out = agg.forward(&mut g, &store, f3d, &f2d).unwrap();
        for (i, &v) in out.per_scale.iter().enumerate() {
            assert_eq!(g.shape(v), &[7, i + 2]);
        }
        assert_eq!(g.shape(out.global), &[7, 6]);
        let cat = g.concat_cols(&f2d).unwrap();
        assert_eq!(g.shape(cat)[1], 2 + 3 + 4 + 5 + 6);
    }

    #[test]
    fn single_point_returns_projected_value() {
        let (store, mut rng, agg) = setup();
        let f2 = random(&mut rng, 1, 3);
        let mut g = Graph::new();
        let f3d = g.constant(random(&mut rng, 1, 6));
        let f2v = g.constant(f2.clone());
        let out = agg.per_scale[1].forward(&mut g, &store, f3d, f2v).unwrap();
        let v = agg.per_scale[1].value.forward(&mut g, &store, f2v).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn identical_2d_rows_give_identical_outputs() {
        let (store, mut rng, agg) = setup();
        let mut g = Graph::new();
        let f3d = g.constant(random(&mut rng, 4, 6));
        let f2 = g.constant(Tensor::new(&[4, 2], [0.4, -0.9].repeat(4)).unwrap());
        let out = agg.per_scale[0].forward(&mut g, &store, f3d, f2).unwrap();
        for r in 1..4 {
            let (a, b) = (g.value(out).row(0), g.value(out).row(r));
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let (mut store, mut rng, agg) = setup();
        let qb = agg.global.query.bias.clone();
        store.set_value(&qb, Tensor::zeros(&[6])).unwrap();
        let mut g = Graph::new();
        let f3d = g.constant(Tensor::zeros(&[5, 6]));
        let f2d: Vec<Var> = [2, 3, 4, 5, 6]
            .iter()
            .map(|&c| g.constant(random(&mut rng, 5, c)))
            .collect();
        let out = agg.aggregate_global(&mut g, &store, f3d, &f2d).unwrap();
        let cat = g.concat_cols(&f2d).unwrap();
        let v = agg.global.value.forward(&mut g, &store, cat).unwrap();
        let vals = g.value(v);
        for c in 0..6 {
            let mean = (0..5).map(|r| vals.at(&[r, c])).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((g.value(out).at(&[r, c]) - mean).abs() < 1e-14);
            }
        }
    }
}
