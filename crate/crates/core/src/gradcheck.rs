//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::Aggregation;
use crate::ascb::sparse_conv_layer;
use crate::decoder::{depth_loss, total_loss, Decoder, DepthMap, GatedFusion};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::gnn::{CrossAttentionStage, EdgeConvBlock};
use crate::graph::{Graph, Var};
use crate::layers::{ConvLayer, LinearLayer, Mlp};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::upsampler::{Reconstruction, UpsampleUnit};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are compared in absolute terms.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// A probe straddles a point where the function is not differentiable (a
/// leaky-ReLU kink, a max switch) when its forward and backward one-sided
/// differences disagree by more than this fraction of the gradient and the
/// central-difference mismatch is between a quarter of that gap and the
/// whole gap. Crossing a kink on one side puts the mismatch at half the gap;
/// smooth curvature leaves it orders of magnitude below. Such probes are
/// counted and skipped.
pub const KINK_RATIO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Parameter (or `"input"`) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries: usize,
    /// Probes skipped because they straddle a kink.
    pub skipped: usize,
}

impl CheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            worst_values: (0.0, 0.0),
            entries: 0,
            skipped: 0,
        }
    }

    /// Records one probe from `f(x−ε)`, `f(x)`, `f(x+ε)`.
    fn record(&mut self, name: &str, index: usize, analytic: f64, f: [f64; 3], eps: f64, floor: f64) {
        let [minus, centre, plus] = f;
        let (back, fwd) = ((centre - minus) / eps, (plus - centre) / eps);
        let numeric = (plus - minus) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs()).max(floor);
        let gap = (fwd - back).abs();
        let mismatch = (analytic - numeric).abs();
        if gap > KINK_RATIO * scale && mismatch <= gap && 4.0 * mismatch >= gap {
            self.skipped += 1;
            return;
        }
        let err = mismatch / scale;
        self.entries += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index));
            self.worst_values = (analytic, numeric);
        }
    }

    fn merge(&mut self, other: CheckReport) {
        self.entries += other.entries;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
    }
}

/// Evenly spaced flat indices, at most `limit` of them.
fn probe_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit).collect()
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::State(format!("gradient check needs a scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Compares the analytic gradient of every named parameter with central
/// differences of `build`, probing at most `limit` entries per parameter.
pub fn check_parameters(
    store: &mut ParameterStore,
    names: &[String],
    limit: usize,
    eps: f64,
    floor: f64,
    build: impl Fn(&mut Graph, &ParameterStore) -> Result<Var>,
) -> Result<CheckReport> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let centre = scalar(&g, loss)?;
    g.backward(loss, store)?;
    let mut report = CheckReport::empty();
    for name in names {
        let analytic = store.grad(name)?.clone();
        let original = store.value(name)?.clone();
        for i in probe_indices(original.len(), limit) {
            let eval = |delta: f64, store: &mut ParameterStore| -> Result<f64> {
                let mut data = original.clone().into_data();
                data[i] += delta;
                store.set_value(name, Tensor::new(original.shape(), data)?)?;
                let mut g = Graph::new();
                let l = build(&mut g, store)?;
                scalar(&g, l)
            };
            let plus = eval(eps, store)?;
            let minus = eval(-eps, store)?;
            store.set_value(name, original.clone())?;
            report.record(name, i, analytic.data()[i], [minus, centre, plus], eps, floor);
        }
    }
    Ok(report)
}

/// Checks every parameter of `store`.
pub fn check_all_parameters(
    store: &mut ParameterStore,
    limit: usize,
    eps: f64,
    floor: f64,
    build: impl Fn(&mut Graph, &ParameterStore) -> Result<Var>,
) -> Result<CheckReport> {
    let names: Vec<String> = store.names().map(String::from).collect();
    check_parameters(store, &names, limit, eps, floor, build)
}

/// Gradient with respect to a graph input `x`.
pub fn check_input(
    x: &Tensor,
    limit: usize,
    eps: f64,
    floor: f64,
    build: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = build(&mut g, xv)?;
    let centre = scalar(&g, loss)?;
    let analytic = g.gradients(loss)?.get(xv);
    let mut report = CheckReport::empty();
    for i in probe_indices(x.len(), limit) {
        let eval = |delta: f64| -> Result<f64> {
            let mut data = x.clone().into_data();
            data[i] += delta;
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(x.shape(), data)?);
            let l = build(&mut g, xv)?;
            scalar(&g, l)
        };
        let f = [eval(-eps)?, centre, eval(eps)?];
        report.record("input", i, analytic.data()[i], f, eps, floor);
    }
    Ok(report)
}

/// Parameter and input checks combined.
pub fn check_both(
    store: &mut ParameterStore,
    x: &Tensor,
    limit: usize,
    build: impl Fn(&mut Graph, &ParameterStore, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let mut report = check_all_parameters(store, limit, DEFAULT_EPS, DEFAULT_FLOOR, |g, s| {
        let xv = g.input(x.clone());
        build(g, s, xv)
    })?;
    let frozen = store.clone();
    report.merge(check_input(x, limit, DEFAULT_EPS, DEFAULT_FLOOR, |g, xv| {
        build(g, &frozen, xv)
    })?);
    Ok(report)
}

/// Probed entries per parameter tensor in [`run_suite`].
const SUITE_PROBES: usize = 12;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite random values")
}

/// `Σ out ⊙ R` with a fixed random `R`, so no output entry cancels.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let p = g.mul_const(out, weights.clone())?;
    Ok(g.sum(p))
}

struct Case {
    store: ParameterStore,
    input: Tensor,
    weights: Tensor,
}

fn case(rng: &mut ChaCha8Rng, store: ParameterStore, input: &[usize], output: &[usize]) -> Case {
    Case {
        store,
        input: random_tensor(rng, input),
        weights: random_tensor(rng, output),
    }
}

fn run_case(
    mut c: Case,
    forward: impl Fn(&mut Graph, &ParameterStore, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let weights = c.weights;
    check_both(&mut c.store, &c.input, SUITE_PROBES, |g, s, x| {
        let out = forward(g, s, x)?;
        project(g, out, &weights)
    })
}

/// Finite-difference checks of every learnable block on small random
/// shapes. Returns one report per block, in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<(String, CheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let slope = 0.2;
    let mut out = Vec::new();
    let mut push = |name: &str, r: CheckReport| out.push((name.to_string(), r));

    let mut st = ParameterStore::new();
    let lin = LinearLayer::new(&mut st, rng, "lin", 5, 4)?;
    push("linear", run_case(case(rng, st, &[7, 5], &[7, 4]), |g, s, x| lin.forward(g, s, x))?);

    let mut st = ParameterStore::new();
    let mlp = Mlp::new(&mut st, rng, "mlp", &[4, 6, 3], slope, true)?;
    push("mlp", run_case(case(rng, st, &[6, 4], &[6, 3]), |g, s, x| mlp.forward(g, s, x))?);

    for (name, stride, size) in [("conv2d", 1, 3), ("conv2d_stride2", 2, 3), ("conv2d_5x5", 1, 5)] {
        let mut st = ParameterStore::new();
        let conv = ConvLayer::new(&mut st, rng, "conv", 3, 2, size, stride, true)?;
        let o = 9usize.div_ceil(stride);
        push(name, run_case(case(rng, st, &[9, 9, 3], &[o, o, 2]), |g, s, x| conv.forward(g, s, x))?);
    }

    let mut st = ParameterStore::new();
    st.insert("sparse.kernel", random_tensor(rng, &[3, 3, 2, 2]))?;
    let mask: Vec<bool> = (0..64).map(|_| rng.random_bool(0.3)).collect();
    push(
        "sparse_conv",
        run_case(case(rng, st, &[8, 8, 2], &[8, 8, 2]), |g, s, x| {
            let k = g.param(s, "sparse.kernel")?;
            Ok(sparse_conv_layer(g, x, &mask, k)?.0)
        })?,
    );

    let mut st = ParameterStore::new();
    st.insert("deconv.kernel", random_tensor(rng, &[4, 3, 2]))?;
    st.insert("deconv.bias", random_tensor(rng, &[2]))?;
    push(
        "point_deconv",
        run_case(case(rng, st, &[5, 3], &[10, 2]), |g, s, x| {
            let k = g.param(s, "deconv.kernel")?;
            let b = g.param(s, "deconv.bias")?;
            g.point_deconv(x, k, b, 2)
        })?,
    );

    let keys = random_tensor(rng, &[6, 3]);
    let values = random_tensor(rng, &[6, 4]);
    push(
        "attention",
        run_case(case(rng, ParameterStore::new(), &[5, 3], &[5, 4]), |g, _, x| {
            let k = g.input(keys.clone());
            let v = g.input(values.clone());
            let q = g.scale(x, 2.0);
            g.attention(q, k, v)
        })?,
    );

    let mut st = ParameterStore::new();
    let stage = CrossAttentionStage::new(&mut st, rng, "attn", 4, 3)?;
    let f2d = random_tensor(rng, &[6, 3]);
    push(
        "cross_attention_stage",
        run_case(case(rng, st, &[6, 4], &[6, 4]), |g, s, x| {
            let f = g.constant(f2d.clone());
            stage.forward(g, s, x, f)
        })?,
    );

    let mut st = ParameterStore::new();
    let edge = EdgeConvBlock::new(&mut st, rng, "edge", 3, 4, 3, slope)?;
    push(
        "edgeconv",
        run_case(case(rng, st, &[7, 3], &[7, 4]), |g, s, x| Ok(edge.forward(g, s, x)?.features))?,
    );

    let widths = [2, 3, 2, 3, 2];
    let f2d: Vec<Tensor> = widths.iter().map(|&c| random_tensor(rng, &[6, c])).collect();
    let mut st = ParameterStore::new();
    let agg = Aggregation::new(&mut st, rng, "agg", 4, &widths)?;
    let st2 = st.clone();
    push(
        "aggregation_per_scale",
        run_case(case(rng, st, &[6, 4], &[6, widths.iter().sum()]), |g, s, x| {
            let sets: Vec<Var> = f2d.iter().map(|t| g.constant(t.clone())).collect();
            let per = agg.aggregate_per_scale(g, s, x, &sets)?;
            g.concat_cols(&per)
        })?,
    );
    push(
        "aggregation_global",
        run_case(case(rng, st2, &[6, 4], &[6, 4]), |g, s, x| {
            let sets: Vec<Var> = f2d.iter().map(|t| g.constant(t.clone())).collect();
            agg.aggregate_global(g, s, x, &sets)
        })?,
    );

    let mut st = ParameterStore::new();
    let unit = UpsampleUnit::new(&mut st, rng, "unit", 4, 2, 4, slope)?;
    let pts: Vec<Point3> = (0..4).map(|i| [i as f64, 0.0, 1.0]).collect();
    push(
        "upsample_unit",
        run_case(case(rng, st, &[4, 4], &[8, 4]), |g, s, x| Ok(unit.forward(g, s, &pts, x)?.1))?,
    );

    let mut st = ParameterStore::new();
    let recon = Reconstruction::new(&mut st, rng, "recon", 4, slope)?;
    let base: Vec<Point3> = (0..8).map(|i| [0.1 * i as f64, 0.2, -0.3]).collect();
    push(
        "coordinate_reconstruction",
        run_case(case(rng, st, &[8, 4], &[8, 3]), |g, s, x| {
            Ok(recon.forward(g, s, x, base.clone())?.points)
        })?,
    );

    let mut st = ParameterStore::new();
    let gate = GatedFusion::new(&mut st, rng, "gate", 3, 2)?;
    let radar = random_tensor(rng, &[6, 6, 2]);
    push(
        "gated_fusion",
        run_case(case(rng, st, &[6, 6, 3], &[6, 6, 3]), |g, s, x| {
            let r = g.input(radar.clone());
            gate.forward(g, s, x, r)
        })?,
    );

    let mut st = ParameterStore::new();
    let enc = Encoder::new(&mut st, rng, "enc", 2, &[2, 2, 3, 3, 3], slope)?;
    push(
        "encoder",
        run_case(case(rng, st, &[32, 32, 2], &[1, 1, 3]), |g, s, x| {
            Ok(enc.forward(g, s, x)?.levels[4])
        })?,
    );

    let mut st = ParameterStore::new();
    let dec = Decoder::new(&mut st, rng, "dec", &[2, 2, 2, 2, 2], 2, &[2, 2, 2, 2, 2, 2], 80.0, slope)?;
    let fused: Vec<Tensor> = (0..5).map(|i| random_tensor(rng, &[16 >> i, 16 >> i, 2])).collect();
    push(
        "decoder",
        run_case(case(rng, st, &[32, 32, 2], &[32, 32]), |g, s, x| {
            let f: Vec<Var> = fused.iter().map(|t| g.input(t.clone())).collect();
            dec.forward(g, s, &f, x)
        })?,
    );

    let mut st = ParameterStore::new();
    let dec = Decoder::new(&mut st, rng, "head", &[2, 2, 2, 2, 2], 2, &[2, 2, 2, 2, 2, 2], 80.0, slope)?;
    let mut head = ParameterStore::new();
    for (name, p) in st.iter().filter(|(n, _)| n.starts_with("head.head")) {
        head.insert(name, p.value.clone())?;
    }
    let st = head;
    push(
        "decoder_head",
        run_case(case(rng, st, &[16, 16, 2], &[16, 16]), |g, s, x| dec.depth_head(g, s, x))?,
    );

    let dense = DepthMap::from_depth(random_tensor(rng, &[6, 6]).map(|v| (v * 20.0 + 5.0).max(0.0)));
    let sparse = DepthMap::from_depth(random_tensor(rng, &[6, 6]).map(|v| if v > 0.5 { 30.0 * v } else { 0.0 }));
    let pred = random_tensor(rng, &[6, 6]).map(|v| 15.0 + 10.0 * v);
    push(
        "depth_loss",
        check_input(&pred, 36, DEFAULT_EPS, DEFAULT_FLOOR, |g, x| depth_loss(g, x, &sparse, &dense))?,
    );

    let target = random_tensor(rng, &[9, 3]);
    let cloud = random_tensor(rng, &[7, 3]);
    push(
        "chamfer_loss",
        check_input(&cloud, 21, DEFAULT_EPS, DEFAULT_FLOOR, |g, x| {
            let t = g.constant(target.clone());
            g.chamfer(x, t)
        })?,
    );

    push(
        "total_loss",
        check_input(&pred, 36, DEFAULT_EPS, DEFAULT_FLOOR, |g, x| {
            let d = depth_loss(g, x, &sparse, &dense)?;
            let flat = g.reshape(x, &[12, 3])?;
            let t = g.constant(target.clone());
            let c = g.chamfer(flat, t)?;
            total_loss(g, d, Some(c), 0.7)
        })?,
    );
    Ok(out)
}
