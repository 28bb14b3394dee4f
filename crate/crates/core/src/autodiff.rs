//! Minimal reverse-mode autodiff over f64 tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape once and accumulates vector-Jacobian products into per-parameter
//! gradients. Everything is computed at 64-bit precision so analytic
//! gradients can be checked against central finite differences tightly.

use std::collections::BTreeMap;
use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const COSINE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    LeakyRelu { x: NodeId, alpha: f64 },
    UpsampleNearest { x: NodeId, factor: usize },
    ConcatChannels { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddN { xs: Vec<NodeId> },
    /// out = add + mul * x, elementwise
    ScalarAffine { x: NodeId, add: f64, mul: f64 },
    /// out = x * s where s is a 0-dim node
    ScaleBy { x: NodeId, s: NodeId },
    GlobalAvgPool { x: NodeId },
    Cosine { u: NodeId, v: NodeId },
    Sigmoid { x: NodeId },
    SoftmaxCrossEntropyMean { x: NodeId, labels: Array2<usize> },
    PromptRaster { tokens: Vec<NodeId>, positions: Vec<(usize, usize)>, shape: (usize, usize, usize) },
    EmbedRow { m: NodeId, row: usize },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

pub fn scalar_of(a: &ArrayD<f64>) -> f64 {
    *a.first().expect("scalar tensor")
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        scalar_of(self.value(id))
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(scalar(v))
    }

    /// Registers a named leaf. Repeated registration of the same name returns
    /// the original node, so shared parameters accumulate gradients from all
    /// of their uses.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    /// 2D convolution with same-padding (`pad = k/2`).
    ///
    /// `x` is `(Ci, H, W)`, `w` is `(Co, Ci, kh, kw)`, `b` is `(Co)`; spatial
    /// dims must be divisible by `stride`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (ci, h, wd) = dims3(xv)?;
        let ws = wv.shape();
        if ws.len() != 4 || ws[1] != ci {
            return Err(Error::shape(format!("conv weight {ws:?} does not accept {ci} input channels")));
        }
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if bv.shape() != [co] {
            return Err(Error::shape("conv bias shape mismatch"));
        }
        if h % stride != 0 || wd % stride != 0 {
            return Err(Error::shape(format!(
                "spatial dims {h}x{wd} not divisible by stride {stride}; pad the input to a multiple of {stride}"
            )));
        }
        let value = conv2d_forward(xv, wv, bv, stride, (co, ci, kh, kw));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| if v >= 0.0 { v } else { alpha * v });
        self.push(value, Op::LeakyRelu { x, alpha })
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv)?;
        let mut out = ArrayD::zeros(IxDyn(&[c, h * factor, w * factor]));
        for ci in 0..c {
            for y in 0..h * factor {
                for xx in 0..w * factor {
                    out[[ci, y, xx]] = xv[[ci, y / factor, xx / factor]];
                }
            }
        }
        Ok(self.push(out, Op::UpsampleNearest { x, factor }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ca, h, w) = dims3(av)?;
        let (cb, hb, wb) = dims3(bv)?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape("concat spatial dims differ"));
        }
        let mut out = ArrayD::zeros(IxDyn(&[ca + cb, h, w]));
        for y in 0..h {
            for xx in 0..w {
                for c in 0..ca {
                    out[[c, y, xx]] = av[[c, y, xx]];
                }
                for c in 0..cb {
                    out[[ca + c, y, xx]] = bv[[c, y, xx]];
                }
            }
        }
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut value = self.nodes[xs[0].0].value.clone();
        for x in &xs[1..] {
            value = binary_elementwise(&value, &self.nodes[x.0].value, |a, b| a + b)?;
        }
        Ok(self.push(value, Op::AddN { xs: xs.to_vec() }))
    }

    pub fn scalar_affine(&mut self, x: NodeId, add: f64, mul: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| add + mul * v);
        self.push(value, Op::ScalarAffine { x, add, mul })
    }

    /// Broadcast-multiplies tensor `x` by the 0-dim node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = scalar_of(&self.nodes[s.0].value);
        let value = self.nodes[x.0].value.mapv(|v| v * sv);
        self.push(value, Op::ScaleBy { x, s })
    }

    /// Mean over the spatial extent of every channel: `(C, H, W) -> (C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv)?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global average pool over empty spatial extent"));
        }
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += xv[[ci, y, xx]];
                }
            }
            out[[ci]] = acc / (h * w) as f64;
        }
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    /// Cosine similarity of two vectors, clamped to `[-1, 1]`. Either vector
    /// with norm below 1e-12 makes the similarity 0 (maximal uncertainty) and
    /// blocks the gradient.
    pub fn cosine(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let uv = &self.nodes[u.0].value;
        let vv = &self.nodes[v.0].value;
        if uv.shape() != vv.shape() || uv.ndim() != 1 {
            return Err(Error::shape("cosine expects two equal-length vectors"));
        }
        let value = cosine_value(uv, vv);
        Ok(self.push(scalar(value), Op::Cosine { u, v }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    /// Mean cross-entropy of `(K, H, W)` logits against `(H, W)` integer
    /// labels, averaged over all pixels.
    pub fn softmax_ce_mean(&mut self, x: NodeId, labels: Array2<usize>) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (k, h, w) = dims3(xv)?;
        if labels.dim() != (h, w) {
            return Err(Error::shape("label map does not match logit spatial dims"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {l} >= num_classes {k}")));
        }
        let mut acc = 0.0;
        for y in 0..h {
            for xx in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(xv[[c, y, xx]]);
                }
                let mut z = 0.0;
                for c in 0..k {
                    z += (xv[[c, y, xx]] - mx).exp();
                }
                acc += mx + z.ln() - xv[[labels[[y, xx]], y, xx]];
            }
        }
        let value = acc / (h * w) as f64;
        Ok(self.push(scalar(value), Op::SoftmaxCrossEntropyMean { x, labels }))
    }

    /// Rasterizes prompt token vectors into an additive bias map: token `i`
    /// is added at `positions[i]` of a zero `(C, H, W)` map.
    pub fn prompt_raster(
        &mut self,
        tokens: &[NodeId],
        positions: &[(usize, usize)],
        shape: (usize, usize, usize),
    ) -> Result<NodeId> {
        if tokens.len() != positions.len() {
            return Err(Error::shape("one position per prompt token required"));
        }
        let (c, h, w) = shape;
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for (t, &(y, x)) in tokens.iter().zip(positions) {
            if y >= h || x >= w {
                return Err(Error::invalid(format!("prompt position ({y},{x}) outside {h}x{w}")));
            }
            let tv = &self.nodes[t.0].value;
            if tv.shape() != [c] {
                return Err(Error::shape("prompt token dimension mismatch"));
            }
            for ci in 0..c {
                out[[ci, y, x]] += tv[[ci]];
            }
        }
        Ok(self.push(out, Op::PromptRaster { tokens: tokens.to_vec(), positions: positions.to_vec(), shape }))
    }

    /// Selects one row of a 2D parameter matrix.
    pub fn embed_row(&mut self, m: NodeId, row: usize) -> Result<NodeId> {
        let mv = &self.nodes[m.0].value;
        if mv.ndim() != 2 || row >= mv.shape()[0] {
            return Err(Error::shape(format!("embed row {row} out of range for {:?}", mv.shape())));
        }
        let cols = mv.shape()[1];
        let mut out = ArrayD::zeros(IxDyn(&[cols]));
        for c in 0..cols {
            out[[c]] = mv[[row, c]];
        }
        Ok(self.push(out, Op::EmbedRow { m, row }))
    }

    /// Reverse pass from a scalar output node. Returns gradients for every
    /// registered parameter that the output depends on.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if self.nodes[output.0].value.ndim() != 0 {
            return Err(Error::invalid("backward requires a scalar output node"));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (dx, dw, db) = conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        stride,
                    );
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, w.0, dw);
                    accumulate(&mut grads, b.0, db);
                }
                Op::LeakyRelu { x, alpha } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &v| {
                        if v < 0.0 {
                            *d *= alpha;
                        }
                    });
                    accumulate(&mut grads, x.0, dx);
                }
                Op::UpsampleNearest { x, factor } => {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    for ci in 0..c {
                        for y in 0..h * factor {
                            for xx in 0..w * factor {
                                dx[[ci, y / factor, xx / factor]] += g[[ci, y, xx]];
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::ConcatChannels { a, b } => {
                    let ca = self.nodes[a.0].value.shape()[0];
                    let gs = g.shape().to_vec();
                    let (h, w) = (gs[1], gs[2]);
                    let cb = gs[0] - ca;
                    let mut da = ArrayD::zeros(IxDyn(&[ca, h, w]));
                    let mut db = ArrayD::zeros(IxDyn(&[cb, h, w]));
                    for y in 0..h {
                        for xx in 0..w {
                            for c in 0..ca {
                                da[[c, y, xx]] = g[[c, y, xx]];
                            }
                            for c in 0..cb {
                                db[[c, y, xx]] = g[[ca + c, y, xx]];
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g.mapv(|v| -v));
                }
                Op::Mul { a, b } => {
                    let da = binary_elementwise(&g, &self.nodes[b.0].value, |x, y| x * y)?;
                    let db = binary_elementwise(&g, &self.nodes[a.0].value, |x, y| x * y)?;
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::AddN { xs } => {
                    for x in xs {
                        accumulate(&mut grads, x.0, g.clone());
                    }
                }
                Op::ScalarAffine { x, mul, .. } => {
                    accumulate(&mut grads, x.0, g.mapv(|v| v * mul));
                }
                Op::ScaleBy { x, s } => {
                    let sv = scalar_of(&self.nodes[s.0].value);
                    accumulate(&mut grads, x.0, g.mapv(|v| v * sv));
                    let ds: f64 = g
                        .iter()
                        .zip(self.nodes[x.0].value.iter())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    accumulate(&mut grads, s.0, scalar(ds));
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    for ci in 0..c {
                        let gc = g[[ci]] * inv;
                        for y in 0..h {
                            for xx in 0..w {
                                dx[[ci, y, xx]] = gc;
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Cosine { u, v } => {
                    let uv = &self.nodes[u.0].value;
                    let vv = &self.nodes[v.0].value;
                    let nu = norm(uv);
                    let nv = norm(vv);
                    if nu >= COSINE_NORM_EPS && nv >= COSINE_NORM_EPS {
                        let gs = scalar_of(&g);
                        let cos = cosine_value(uv, vv);
                        let du = uv
                            .iter()
                            .zip(vv.iter())
                            .map(|(&ui, &vi)| gs * (vi / (nu * nv) - cos * ui / (nu * nu)))
                            .collect::<Vec<_>>();
                        let dv = uv
                            .iter()
                            .zip(vv.iter())
                            .map(|(&ui, &vi)| gs * (ui / (nu * nv) - cos * vi / (nv * nv)))
                            .collect::<Vec<_>>();
                        accumulate(&mut grads, u.0, Array1::from(du).into_dyn());
                        accumulate(&mut grads, v.0, Array1::from(dv).into_dyn());
                    }
                }
                Op::Sigmoid { x } => {
                    let out = &self.nodes[idx].value;
                    let dx = binary_elementwise(&g, out, |gv, s| gv * s * (1.0 - s))?;
                    accumulate(&mut grads, x.0, dx);
                }
                Op::SoftmaxCrossEntropyMean { x, labels } => {
                    let xv = &self.nodes[x.0].value;
                    let xs = xv.shape().to_vec();
                    let (k, h, w) = (xs[0], xs[1], xs[2]);
                    let gs = scalar_of(&g) / (h * w) as f64;
                    let mut dx = ArrayD::zeros(IxDyn(&[k, h, w]));
                    for y in 0..h {
                        for xx in 0..w {
                            let mut mx = f64::NEG_INFINITY;
                            for c in 0..k {
                                mx = mx.max(xv[[c, y, xx]]);
                            }
                            let mut z = 0.0;
                            for c in 0..k {
                                z += (xv[[c, y, xx]] - mx).exp();
                            }
                            for c in 0..k {
                                let p = (xv[[c, y, xx]] - mx).exp() / z;
                                let t = if labels[[y, xx]] == c { 1.0 } else { 0.0 };
                                dx[[c, y, xx]] = gs * (p - t);
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::PromptRaster { tokens, positions, shape } => {
                    let c = shape.0;
                    for (t, &(y, x)) in tokens.iter().zip(&positions) {
                        let mut dt = ArrayD::zeros(IxDyn(&[c]));
                        for ci in 0..c {
                            dt[[ci]] = g[[ci, y, x]];
                        }
                        accumulate(&mut grads, t.0, dt);
                    }
                }
                Op::EmbedRow { m, row } => {
                    let ms = self.nodes[m.0].value.shape().to_vec();
                    let mut dm = ArrayD::zeros(IxDyn(&ms));
                    for c in 0..ms[1] {
                        dm[[row, c]] = g[[c]];
                    }
                    accumulate(&mut grads, m.0, dm);
                }
            }
        }

        let mut out = Gradients::default();
        for (name, id) in &self.params {
            if let Some(g) = grads[id.0].take() {
                out.by_param.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn dims3(a: &ArrayD<f64>) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected a (C, H, W) tensor, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn norm(a: &ArrayD<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn cosine_value(u: &ArrayD<f64>, v: &ArrayD<f64>) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < COSINE_NORM_EPS || nv < COSINE_NORM_EPS {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

fn binary_elementwise(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<ArrayD<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("elementwise op on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    ndarray::Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
    Ok(out)
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            ndarray::Zip::from(existing).and(&g).for_each(|e, &v| *e += v);
        }
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: &ArrayD<f64>, kh: usize, kw: usize, stride: usize) -> Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = (kh / 2, kw / 2);
    let (ho, wo) = (h / stride, w / stride);
    let mut col = Array2::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    wdims: (usize, usize, usize, usize),
) -> ArrayD<f64> {
    let (co, ci, kh, kw) = wdims;
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h / stride, wd / stride);
    let col = im2col(x, kh, kw, stride);
    let mut w2 = Array2::zeros((co, ci * kh * kw));
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    w2[[o, (c * kh + ky) * kw + kx]] = w[[o, c, ky, kx]];
                }
            }
        }
    }
    let out2 = w2.dot(&col);
    let mut out = ArrayD::zeros(IxDyn(&[co, ho, wo]));
    for o in 0..co {
        let bias = b[[o]];
        for oy in 0..ho {
            for ox in 0..wo {
                out[[o, oy, ox]] = out2[[o, oy * wo + ox]] + bias;
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let ws = w.shape();
    let (co, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h / stride, wd / stride);
    let (ph, pw) = (kh / 2, kw / 2);

    let mut g2 = Array2::zeros((co, ho * wo));
    let mut db = ArrayD::zeros(IxDyn(&[co]));
    for o in 0..co {
        let mut acc = 0.0;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gout[[o, oy, ox]];
                g2[[o, oy * wo + ox]] = g;
                acc += g;
            }
        }
        db[[o]] = acc;
    }

    let col = im2col(x, kh, kw, stride);
    let dw2 = g2.dot(&col.t());
    let mut dw = ArrayD::zeros(IxDyn(&[co, ci, kh, kw]));
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    dw[[o, c, ky, kx]] = dw2[[o, (c * kh + ky) * kw + kx]];
                }
            }
        }
    }

    let mut w2 = Array2::zeros((co, ci * kh * kw));
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    w2[[o, (c * kh + ky) * kw + kx]] = w[[o, c, ky, kx]];
                }
            }
        }
    }
    let dcol = w2.t().dot(&g2);
    let mut dx = ArrayD::zeros(IxDyn(&[ci, h, wd]));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar graph function w.r.t. one
    /// named parameter entry.
    fn fd_grad(
        build: &dyn Fn(&mut Graph, &BTreeMap<String, ArrayD<f64>>) -> NodeId,
        params: &BTreeMap<String, ArrayD<f64>>,
        name: &str,
        flat_idx: usize,
    ) -> f64 {
        let eval = |delta: f64| {
            let mut p = params.clone();
            let t = p.get_mut(name).unwrap();
            t.as_slice_mut().unwrap()[flat_idx] += delta;
            let mut g = Graph::new();
            let out = build(&mut g, &p);
            g.scalar_value(out)
        };
        let h = 1e-6;
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    fn check_all_grads(
        build: &dyn Fn(&mut Graph, &BTreeMap<String, ArrayD<f64>>) -> NodeId,
        params: &BTreeMap<String, ArrayD<f64>>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let out = build(&mut g, params);
        let grads = g.backward(out).unwrap();
        for (name, tensor) in params {
            let an = grads.by_param.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            for idx in 0..tensor.len() {
                let fd = fd_grad(build, params, name, idx);
                let a = an.as_slice().unwrap()[idx];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    ((a - fd) / denom).abs() < tol,
                    "{name}[{idx}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_relu_gap_cosine_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), randn(&mut rng, &[3, 2, 3, 3]));
        params.insert("b".to_string(), randn(&mut rng, &[3]));
        params.insert("w2".to_string(), randn(&mut rng, &[3, 2, 3, 3]));
        let x1 = randn(&mut rng, &[2, 4, 4]);
        let x2 = randn(&mut rng, &[2, 4, 4]);

        let build = move |g: &mut Graph, p: &BTreeMap<String, ArrayD<f64>>| {
            let w = g.param("w", p["w"].clone());
            let b = g.param("b", p["b"].clone());
            let w2 = g.param("w2", p["w2"].clone());
            let c1 = g.constant(x1.clone());
            let c2 = g.constant(x2.clone());
            let y1 = g.conv2d(c1, w, b, 1).unwrap();
            let y1 = g.leaky_relu(y1, 0.1);
            let y2 = g.conv2d(c2, w2, b, 2).unwrap();
            let y2 = g.upsample_nearest(y2, 2).unwrap();
            let p1 = g.global_avg_pool(y1).unwrap();
            let p2 = g.global_avg_pool(y2).unwrap();
            let cos = g.cosine(p1, p2).unwrap();
            let w_sig = g.sigmoid(cos);
            let d = g.sub(y1, y2).unwrap();
            let scaled = g.scale_by(d, w_sig);
            let pooled = g.global_avg_pool(scaled).unwrap();
            let cc = g.concat_channels(y1, scaled).unwrap();
            let pooled2 = g.global_avg_pool(cc).unwrap();
            let s = g.cosine(pooled, pooled2).unwrap();
            g.scalar_affine(s, 0.3, 1.7)
        };
        check_all_grads(&build, &params, 1e-5);
    }

    #[test]
    fn softmax_ce_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), randn(&mut rng, &[3, 1, 3, 3]));
        params.insert("b".to_string(), randn(&mut rng, &[3]));
        let x = randn(&mut rng, &[1, 4, 4]);
        let labels = Array2::from_shape_fn((4, 4), |_| rng.random_range(0..3usize));

        let build = move |g: &mut Graph, p: &BTreeMap<String, ArrayD<f64>>| {
            let w = g.param("w", p["w"].clone());
            let b = g.param("b", p["b"].clone());
            let c = g.constant(x.clone());
            let y = g.conv2d(c, w, b, 1).unwrap();
            g.softmax_ce_mean(y, labels.clone()).unwrap()
        };
        check_all_grads(&build, &params, 1e-5);
    }

    #[test]
    fn prompt_raster_and_embed_row_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = BTreeMap::new();
        params.insert("emb".to_string(), randn(&mut rng, &[3, 4]));
        let x = randn(&mut rng, &[4, 2, 2]);

        let build = move |g: &mut Graph, p: &BTreeMap<String, ArrayD<f64>>| {
            let m = g.param("emb", p["emb"].clone());
            let t0 = g.embed_row(m, 0).unwrap();
            let t2 = g.embed_row(m, 2).unwrap();
            let bias = g.prompt_raster(&[t0, t2, t0], &[(0, 1), (1, 1), (0, 1)], (4, 2, 2)).unwrap();
            let c = g.constant(x.clone());
            let y = g.add(c, bias).unwrap();
            let y = g.leaky_relu(y, 0.05);
            let pool = g.global_avg_pool(y).unwrap();
            let s = g.cosine(pool, t2).unwrap();
            g.sigmoid(s)
        };
        check_all_grads(&build, &params, 1e-5);
    }

    #[test]
    fn shared_param_accumulates_gradients_from_all_uses() {
        let v = scalar(2.0);
        let mut g = Graph::new();
        let p = g.param("p", v.clone());
        let p_again = g.param("p", v);
        assert_eq!(p, p_again);
        let prod = g.mul(p, p_again).unwrap(); // p^2
        let grads = g.backward(prod).unwrap();
        let got = scalar_of(&grads.by_param["p"]);
        assert!((got - 4.0).abs() < 1e-12, "d(p^2)/dp at 2 should be 4, got {got}");
    }

    #[test]
    fn indivisible_dims_rejected_with_padding_hint() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 5, 5])));
        let w = g.constant(ArrayD::zeros(IxDyn(&[2, 1, 3, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[2])));
        let err = g.conv2d(x, w, b, 2).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        let mut g = Graph::new();
        let u = g.constant(ArrayD::zeros(IxDyn(&[4])));
        let v = g.constant(ArrayD::from_elem(IxDyn(&[4]), 1.0));
        let c = g.cosine(u, v).unwrap();
        assert_eq!(g.scalar_value(c), 0.0);
    }
}
