//! Optimisation loop, evaluation and output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate_frames, MetricReport, CSV_HEADER};
use crate::model::{prepare_frame, FrameInput, GetUp};
use crate::params::ParameterStore;
use crate::scene::{augment, Augmentation, Scene};
use crate::tensor::Tensor;

/// `lr₀·(1 − t/T)^p`, zero from `t = T` on.
pub fn learning_rate(lr0: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter from its gradient slot.
    pub fn update(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            let mut next = p.value.clone();
            for (i, (x, &g)) in next.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name} after step {}", self.step)));
            }
            p.value = next;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub depth: f64,
    /// Batch mean of the Chamfer term over frames that have one.
    pub chamfer: Option<f64>,
}

pub const TRACE_HEADER: &str = "iteration,learning_rate,total,depth,chamfer";

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in trace {
        let chamfer = r.chamfer.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{chamfer}",
            r.iteration, r.learning_rate, r.total, r.depth
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GetUp,
    pub store: ParameterStore,
    pub trace: Vec<TraceRow>,
}

/// Deterministic epoch-shuffled batches of scene indices.
pub fn batch_schedule(scenes: usize, batch: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch {
            if order.is_empty() {
                order = (0..scenes).collect();
                order.shuffle(rng);
                order.reverse();
            }
            b.push(order.pop().expect("refilled above"));
        }
        out.push(b);
    }
    out
}

/// Adam on the mean batch loss with polynomial learning-rate decay.
/// `progress` is called after every iteration.
pub fn train(
    config: &RunConfig,
    scenes: &[Scene],
    mut progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Data("training needs at least one scene".into()));
    }
    let mut store = ParameterStore::new();
    let model = GetUp::new(config, &mut store)?;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_BA7C);
    let schedule = batch_schedule(scenes.len(), config.batch_size, config.iterations, &mut rng);
    let [ch, cw] = config.crop;
    let mut trace = Vec::with_capacity(config.iterations);
    for (t, batch) in schedule.iter().enumerate() {
        store.zero_grads();
        let inv = 1.0 / batch.len() as f64;
        let (mut total, mut depth) = (0.0, 0.0);
        let mut chamfer = (0.0, 0usize);
        for &i in batch {
            let aug = Augmentation::random(&scenes[i], ch, cw, config.horizontal_flip, &mut rng)?;
            let frame = prepare_frame(&augment(&scenes[i], &aug)?, config)?;
            let mut g = Graph::new();
            let out = model.loss(&mut g, &store, &frame)?;
            let l = g.value(out.total).data()[0];
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss {l} at iteration {t}, scene {i}")));
            }
            total += l * inv;
            depth += g.value(out.depth).data()[0] * inv;
            if let Some(c) = out.chamfer {
                chamfer.0 += g.value(c).data()[0];
                chamfer.1 += 1;
            }
            let grads = g.gradients(out.total)?;
            g.accumulate_into(&grads, &mut store, inv)?;
        }
        let lr = learning_rate(config.learning_rate, t, config.iterations, config.decay_power);
        adam.update(&mut store, lr)?;
        let row = TraceRow {
            iteration: t,
            learning_rate: lr,
            total,
            depth,
            chamfer: (chamfer.1 > 0).then(|| chamfer.0 / chamfer.1 as f64),
        };
        progress(&row);
        trace.push(row);
    }
    Ok(TrainOutcome { model, store, trace })
}

/// Centre-cropped model inputs for evaluation.
pub fn eval_frames(config: &RunConfig, scenes: &[Scene]) -> Result<Vec<(Scene, FrameInput)>> {
    let [h, w] = config.crop;
    scenes
        .iter()
        .map(|s| {
            let cropped = augment(s, &Augmentation::centre(s, h, w)?)?;
            let frame = prepare_frame(&cropped, config)?;
            Ok((cropped, frame))
        })
        .collect()
}

/// Predictions and ground truths of every scene, in scene order.
pub fn predict_all(model: &GetUp, store: &ParameterStore, scenes: &[Scene]) -> Result<Vec<(Tensor, Tensor)>> {
    eval_frames(&model.config, scenes)?
        .into_iter()
        .map(|(scene, frame)| Ok((model.predict(store, &frame)?, scene.depth)))
        .collect()
}

pub fn report_caps(pairs: &[(Tensor, Tensor)], caps: &[f64]) -> Result<Vec<MetricReport>> {
    caps.iter().map(|&c| evaluate_frames(pairs, c)).collect()
}

pub fn metrics_csv(reports: &[MetricReport], split: &str, alpha: f64, tag: &str) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row(split, alpha, tag));
        out.push('\n');
    }
    out
}

/// Mean Chamfer distance between upsampled and ground-truth points over the
/// frames that have both.
pub fn mean_chamfer(model: &GetUp, store: &ParameterStore, scenes: &[Scene]) -> Result<Option<f64>> {
    let mut sum = (0.0, 0usize);
    for (_, frame) in eval_frames(&model.config, scenes)? {
        let mut g = Graph::new();
        if let Some(c) = model.loss(&mut g, store, &frame)?.chamfer {
            sum.0 += g.value(c).data()[0];
            sum.1 += 1;
        }
    }
    Ok((sum.1 > 0).then(|| sum.0 / sum.1 as f64))
}

/// Binary graymap (`P5`), 8-bit, `0` at depth 0 and `255` at `cap` or beyond.
pub fn depth_pgm(depth: &Tensor, cap: f64) -> Result<Vec<u8>> {
    let &[h, w] = depth.shape() else {
        return Err(Error::Dimension(format!("depth image must be H×W, got {:?}", depth.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        depth
            .data()
            .iter()
            .map(|&d| ((d / cap).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
