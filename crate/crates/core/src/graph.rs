//! Reverse-mode differentiation over a recorded forward graph.
//!
//! Every operation appends a node holding its value and a backward closure
//! that maps the output gradient to gradients for each parent. Nodes that do
//! not depend on a parameter or a differentiable input carry no closure and
//! are skipped during the backward sweep.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::geometry;
use crate::kernels::{self, Conv2dShape, Padding, PointDeconvShape};
use crate::params::ParameterStore;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.value(name)?.clone(), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward on a variable that no forward pass recorded".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = back(&g, &needs);
            for ((p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p.0] = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Zeroes every gradient slot of `store`, then writes the gradient of
    /// `loss` for each parameter bound into this graph.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        self.accumulate_into(&grads, store, 1.0)
    }

    /// Adds `scale ·` the recorded parameter gradients into `store`.
    pub fn accumulate_into(
        &self,
        grads: &Gradients,
        store: &mut ParameterStore,
        scale: f64,
    ) -> Result<()> {
        for (name, &v) in &self.params {
            let slot = store
                .grad_mut(name)
                .ok_or_else(|| Error::State(format!("parameter {name} missing from store")))?;
            if let Some(g) = grads.grads[v.0].as_ref() {
                for (s, d) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += scale * d;
                }
            }
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, vec![a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, vec![a, b], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let value = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(value, vec![a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |x, y| x * y).unwrap()),
                needs[1].then(|| g.zip_map(&av, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, vec![a], move |g, _| vec![Some(g.scale(s))])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(value, vec![a], move |g, _| {
            vec![Some(g.zip_map(&c, |x, y| x * y).unwrap())]
        }))
    }

    /// Multiplies every row of the `rows×C` view by a constant factor.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != factors.len() {
            return Err(dim_err!("{} row factors for {} rows", factors.len(), x.rows()));
        }
        let value = scale_rows_raw(x, &factors);
        Ok(self.push(value, vec![a], move |g, _| {
            vec![Some(scale_rows_raw(g, &factors))]
        }))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let x = self.rc(a);
        let value = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, vec![a], move |g, _| {
            vec![Some(
                g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { slope * gv })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = Rc::new(self.value(a).map(sigmoid));
        let out = Rc::clone(&y);
        self.push((*y).clone(), vec![a], move |g, _| {
            vec![Some(g.zip_map(&out, |gv, s| gv * s * (1.0 - s)).unwrap())]
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.rc(a);
        let value = x.map(softplus);
        self.push(value, vec![a], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| gv * sigmoid(xv)).unwrap())]
        })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, vec![a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- shape and indexing ----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, vec![a], move |g, _| {
            vec![Some(g.reshape(&old).unwrap())]
        }))
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err!("concat leading axes {:?} vs {:?}", s, lead));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.push(value, parts.to_vec(), move |g, needs| {
            let mut out = Vec::with_capacity(widths.len());
            let mut off = 0;
            for ((w, shape), &need) in widths.iter().zip(&part_shapes).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    out.push(Some(Tensor::from_parts(shape.clone(), d)));
                } else {
                    out.push(None);
                }
                off += w;
            }
            out
        }))
    }

    /// Rows `index[j]` of the `rows×C` view, as an `len(index)×C` matrix.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("gather row {bad} of {rows}"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::from_parts(vec![index.len(), c], data);
        let shape = x.shape().to_vec();
        Ok(self.push(value, vec![a], move |g, _| {
            let mut d = Tensor::zeros(&shape);
            scatter_rows_raw(d.data_mut(), g.data(), &index, c);
            vec![Some(d)]
        }))
    }

    /// `base` with `src` row `j` added onto row `index[j]`; collisions sum.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, index: Vec<usize>) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if b.cols() != s.cols() || s.rows() != index.len() {
            return Err(dim_err!(
                "scatter of {:?} into {:?} with {} indices",
                s.shape(),
                b.shape(),
                index.len()
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= b.rows()) {
            return Err(dim_err!("scatter row {bad} of {}", b.rows()));
        }
        let c = b.cols();
        let mut value = b.clone();
        scatter_rows_raw(value.data_mut(), s.data(), &index, c);
        let src_shape = s.shape().to_vec();
        Ok(self.push(value, vec![base, src], move |g, needs| {
            let gs = needs[1].then(|| {
                let mut d = Vec::with_capacity(index.len() * c);
                for &i in &index {
                    d.extend_from_slice(g.row(i));
                }
                Tensor::from_parts(src_shape.clone(), d)
            });
            vec![needs[0].then(|| g.clone()), gs]
        }))
    }

    /// Repeats each row `times` times contiguously (block order).
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        let index: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::from_parts(vec![index.len(), c], data);
        let shape = x.shape().to_vec();
        self.push(value, vec![a], move |g, _| {
            let mut d = Tensor::zeros(&shape);
            scatter_rows_raw(d.data_mut(), g.data(), &index, c);
            vec![Some(d)]
        })
    }

    /// Max over contiguous groups of `group` rows: `(G·group)×C → G×C`.
    /// Ties resolve to the first row of the group.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        if group == 0 || rows % group != 0 {
            return Err(dim_err!("{rows} rows not divisible into groups of {group}"));
        }
        let groups = rows / group;
        let mut data = vec![f64::NEG_INFINITY; groups * c];
        let mut arg = vec![0usize; groups * c];
        for gi in 0..groups {
            for m in 0..group {
                let r = gi * group + m;
                for (ch, &v) in x.row(r).iter().enumerate() {
                    if v > data[gi * c + ch] {
                        data[gi * c + ch] = v;
                        arg[gi * c + ch] = r;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![groups, c], data);
        let shape = x.shape().to_vec();
        Ok(self.push(value, vec![a], move |g, _| {
            let mut d = Tensor::zeros(&shape);
            let dd = d.data_mut();
            for (i, (&r, &gv)) in arg.iter().zip(g.data()).enumerate() {
                dd[r * c + i % c] += gv;
            }
            vec![Some(d)]
        }))
    }

    /// Nearest-neighbour 2× upsampling of an `H×W×C` map.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let [h, w, c] = *self.shape(a) else {
            return Err(dim_err!("upsample2 needs H×W×C"));
        };
        let (ho, wo) = (2 * h, 2 * w);
        let index: Vec<usize> = (0..ho)
            .flat_map(|y| (0..wo).map(move |x| (y / 2) * w + x / 2))
            .collect();
        let g = self.gather_rows(a, index)?;
        self.reshape(g, &[ho, wo, c])
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let ([n, k], [k2, m]) = (av.shape(), bv.shape()) else {
            return Err(dim_err!("matmul needs matrices, got {:?} and {:?}", av.shape(), bv.shape()));
        };
        let (n, k, m) = (*n, *k, *m);
        if k != *k2 {
            return Err(dim_err!("matmul inner extents {k} vs {k2}"));
        }
        let value = Tensor::from_parts(vec![n, m], matmul_raw(av.data(), bv.data(), n, k, m));
        Ok(self.push(value, vec![a, b], move |g, needs| {
            vec![
                needs[0].then(|| {
                    Tensor::from_parts(vec![n, k], matmul_nt_raw(g.data(), bv.data(), n, m, k))
                }),
                needs[1].then(|| {
                    Tensor::from_parts(vec![k, m], matmul_tn_raw(av.data(), g.data(), n, k, m))
                }),
            ]
        }))
    }

    /// `x·W + b` with `x` of shape `N×C_in`, `W` `C_in×C_out`, `b` `C_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let m = self.shape(xw)[1];
        if self.shape(b) != [m] {
            return Err(dim_err!("bias shape {:?} for width {m}", self.shape(b)));
        }
        let rows = self.shape(xw)[0];
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(xw).clone();
        for row in value.data_mut().chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(value, vec![xw, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut s = vec![0.0; m];
                for r in 0..rows {
                    for (acc, v) in s.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                Tensor::from_parts(vec![m], s)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qv, kv, vv) = (self.rc(q), self.rc(k), self.rc(v));
        let (&[n, d], &[m, d2], &[m2, dv]) = (qv.shape(), kv.shape(), vv.shape()) else {
            return Err(dim_err!("attention needs matrices"));
        };
        if d == 0 || n == 0 {
            return Err(Error::Precondition("attention needs d ≥ 1 and N ≥ 1".into()));
        }
        if m == 0 {
            return Err(Error::Precondition("attention over an empty key set".into()));
        }
        if d != d2 || m != m2 {
            return Err(dim_err!(
                "attention shapes q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut p = matmul_nt_raw(qv.data(), kv.data(), n, d, m);
        for row in p.chunks_mut(m) {
            softmax_in_place(row, scale);
        }
        let value = Tensor::from_parts(vec![n, dv], weighted_rows_sum(&p, vv.data(), n, m, dv));
        Ok(self.push(value, vec![q, k, v], move |g, needs| {
            let dvv = needs[2].then(|| {
                Tensor::from_parts(vec![m, dv], matmul_tn_raw(&p, g.data(), n, m, dv))
            });
            let mut ds = matmul_nt_raw(g.data(), vv.data(), n, dv, m);
            for (srow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
                let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (s, &pv) in srow.iter_mut().zip(prow) {
                    *s = pv * (*s - dot) * scale;
                }
            }
            let dq = needs[0]
                .then(|| Tensor::from_parts(vec![n, d], matmul_raw(&ds, kv.data(), n, m, d)));
            let dk = needs[1]
                .then(|| Tensor::from_parts(vec![m, d], matmul_tn_raw(&ds, qv.data(), n, m, d)));
            vec![dq, dk, dvv]
        }))
    }

    // ---- convolutions ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xv, kv) = (self.rc(x), self.rc(kernel));
        let s = Conv2dShape::new(xv.shape(), kv.shape(), stride, padding)?;
        let bv = match bias {
            Some(b) => {
                if self.shape(b) != [s.out_channels] {
                    return Err(dim_err!("conv bias shape {:?}", self.shape(b)));
                }
                Some(self.rc(b))
            }
            None => None,
        };
        let out = kernels::conv2d_forward(xv.data(), kv.data(), bv.as_ref().map(|b| b.data()), &s);
        let value = Tensor::from_parts(vec![s.out_height, s.out_width, s.out_channels], out);
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push(value, parents, move |g, needs| {
            let (dx, dk, db) =
                kernels::conv2d_backward(xv.data(), kv.data(), g.data(), &s, needs[0], needs[1]);
            let mut out = vec![
                dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                dk.map(|d| Tensor::from_parts(kv.shape().to_vec(), d)),
            ];
            if needs.len() > 2 {
                out.push(Some(Tensor::from_parts(vec![s.out_channels], db)));
            }
            out
        }))
    }

    /// Transposed convolution along the point axis; `n×C → (rate·n)×C′`.
    pub fn point_deconv(&mut self, x: Var, kernel: Var, bias: Var, rate: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.rc(x), self.rc(kernel), self.rc(bias));
        if rate < 2 {
            return Err(Error::Config(format!("upsampling rate must be ≥ 2, got {rate}")));
        }
        let (&[n, cin], &[taps, kin, cout]) = (xv.shape(), kv.shape()) else {
            return Err(dim_err!("point deconv shapes {:?} {:?}", xv.shape(), kv.shape()));
        };
        if n == 0 {
            return Err(Error::Precondition("point deconv over zero points".into()));
        }
        if kin != cin || bv.shape() != [cout] {
            return Err(dim_err!("point deconv channel mismatch"));
        }
        if taps < rate || !(taps - rate).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel length {taps} must be rate {rate} plus an even margin"
            )));
        }
        let s = PointDeconvShape {
            points: n,
            in_channels: cin,
            out_channels: cout,
            taps,
            rate,
            pad: (taps - rate) / 2,
        };
        let out = kernels::point_deconv_forward(xv.data(), kv.data(), Some(bv.data()), &s);
        let value = Tensor::from_parts(vec![s.out_points(), cout], out);
        Ok(self.push(value, vec![x, kernel, bias], move |g, _| {
            let (dx, dk, db) = kernels::point_deconv_backward(xv.data(), kv.data(), g.data(), &s);
            vec![
                Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(kv.shape().to_vec(), dk)),
                Some(Tensor::from_parts(vec![cout], db)),
            ]
        }))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean absolute error between `pred` and a constant `target` over the
    /// entries where `mask` is set.
    pub fn masked_mae(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != p.len() {
            return Err(dim_err!(
                "masked mae shapes {:?}, {:?}, mask {}",
                p.shape(),
                target.shape(),
                mask.len()
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("masked mae over an empty mask".into()));
        }
        let mut sum = 0.0;
        let mut sign = vec![0.0; p.len()];
        for (i, ((&pv, &tv), &m)) in p.data().iter().zip(target.data()).zip(mask).enumerate() {
            if m {
                let d = pv - tv;
                sum += d.abs();
                sign[i] = d.signum() * f64::from(u8::from(d != 0.0));
            }
        }
        let inv = 1.0 / count as f64;
        let shape = p.shape().to_vec();
        Ok(self.push(Tensor::scalar(sum * inv), vec![pred], move |g, _| {
            let s = g.data()[0] * inv;
            vec![Some(Tensor::from_parts(
                shape.clone(),
                sign.iter().map(|v| v * s).collect(),
            ))]
        }))
    }

    /// Symmetric Chamfer distance with squared Euclidean point distances.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let (na, nb) = (av.rows(), bv.rows());
        let ab = geometry::nearest_in(av.data(), bv.data())?;
        let ba = geometry::nearest_in(bv.data(), av.data())?;
        let loss = ab.iter().map(|&(_, d)| d).sum::<f64>() / na as f64
            + ba.iter().map(|&(_, d)| d).sum::<f64>() / nb as f64;
        Ok(self.push(Tensor::scalar(loss), vec![a, b], move |g, _| {
            let s = g.data()[0];
            let mut da = vec![0.0; na * 3];
            let mut db = vec![0.0; nb * 3];
            let mut pair = |i: usize, j: usize, w: f64| {
                for c in 0..3 {
                    let diff = av.data()[i * 3 + c] - bv.data()[j * 3 + c];
                    da[i * 3 + c] += w * diff;
                    db[j * 3 + c] -= w * diff;
                }
            };
            for (i, &(j, _)) in ab.iter().enumerate() {
                pair(i, j, 2.0 * s / na as f64);
            }
            for (j, &(i, _)) in ba.iter().enumerate() {
                pair(i, j, 2.0 * s / nb as f64);
            }
            vec![
                Some(Tensor::from_parts(vec![na, 3], da)),
                Some(Tensor::from_parts(vec![nb, 3], db)),
            ]
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable softmax of `scale · row`, in place.
pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
    }
    let total = ordered_sum(&mut row.to_vec());
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Sum that does not depend on the order of `terms` (they are sorted
/// first), so reductions over a point set commute with permutations.
pub(crate) fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `w·v` for `w: n×m`, `v: m×c`, each output entry summed with
/// [`ordered_sum`] over the `m` axis.
fn weighted_rows_sum(w: &[f64], v: &[f64], n: usize, m: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    let mut terms = vec![0.0; m];
    for i in 0..n {
        let wr = &w[i * m..(i + 1) * m];
        for col in 0..c {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = wr[j] * v[j * c + col];
            }
            out[i * c + col] = ordered_sum(&mut terms);
        }
    }
    out
}

fn scale_rows_raw(x: &Tensor, factors: &[f64]) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for (row, &f) in out.data_mut().chunks_mut(c).zip(factors) {
        for v in row {
            *v *= f;
        }
    }
    out
}

fn scatter_rows_raw(dst: &mut [f64], src: &[f64], index: &[usize], c: usize) {
    for (j, &i) in index.iter().enumerate() {
        for (d, s) in dst[i * c..(i + 1) * c].iter_mut().zip(&src[j * c..(j + 1) * c]) {
            *d += s;
        }
    }
}
