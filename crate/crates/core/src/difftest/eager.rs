//! Reference interpreter: one kernel call per node, computing in f32 for
//! f32 and half-precision nodes and in f64 for double nodes, rounding every
//! node output to its storage format.

use std::collections::{BTreeMap, BTreeSet};

use crate::dtype::Storage;
use crate::graph::{conv_geometry, materialize_weights, LayerNode, ModelGraph, NodeId, Source};
use crate::tensor::{TensorSpec, ValueTensor};

use super::scalar::Scalar;
use super::{Backend, Execution, Failure, Handle};

struct Plan {
    graph: ModelGraph,
    order: Vec<NodeId>,
    weights: BTreeMap<NodeId, Vec<ValueTensor>>,
}

#[derive(Default)]
pub struct EagerBackend {
    next: u64,
    plans: BTreeMap<u64, Plan>,
}

impl EagerBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for EagerBackend {
    fn id(&self) -> String {
        "eager".to_string()
    }

    fn build(&mut self, graph: &ModelGraph) -> Result<Handle, Failure> {
        let order = graph
            .topo_order()
            .ok_or_else(|| Failure::build("eager::build: graph has a cycle"))?;
        let mut weights = BTreeMap::new();
        for id in &order {
            let node = &graph.nodes[id];
            if node.output_spec.is_none() {
                return Err(Failure::build(format!(
                    "eager::build: node {id} ({}) has no inferred output spec",
                    node.kind
                )));
            }
            weights.insert(*id, materialize_weights(graph, *id));
        }
        self.next += 1;
        self.plans.insert(
            self.next,
            Plan {
                graph: graph.clone(),
                order,
                weights,
            },
        );
        Ok(Handle(self.next))
    }

    fn execute(&mut self, handle: Handle, inputs: &[ValueTensor]) -> Result<Execution, Failure> {
        let plan = self
            .plans
            .get(&handle.0)
            .ok_or_else(|| Failure::run(format!("eager::execute: unknown handle {}", handle.0)))?;
        let g = &plan.graph;
        if inputs.len() != g.inputs.len()
            || inputs.iter().zip(&g.inputs).any(|(t, s)| t.spec != *s)
        {
            return Err(Failure::run("eager::execute: input payloads do not match graph inputs"));
        }
        let mut values: BTreeMap<NodeId, ValueTensor> = BTreeMap::new();
        let mut paths = BTreeSet::new();
        let mut work = 0u64;
        for id in &plan.order {
            let node = &g.nodes[id];
            let mut ins: Vec<ValueTensor> = node
                .inputs
                .iter()
                .map(|s| fetch(*s, inputs, &values))
                .collect::<Option<_>>()
                .ok_or_else(|| {
                    Failure::run(format!("eager::execute: dangling input of {id}"))
                })?;
            if let Some(sv) = node.input_override {
                for t in &mut ins {
                    *t = ValueTensor::filled(t.spec.clone(), sv.value());
                }
                paths.insert(format!("eager:{}:override_{sv:?}", node.kind));
            }
            let out = node.output_spec().clone();
            work += (out.numel() as u64) * taps(node, &ins);
            let data = match node.dtype.storage() {
                Storage::F64 => run_node::<f64>(node, &ins, &plan.weights[id], &out, &mut paths),
                _ => run_node::<f32>(node, &ins, &plan.weights[id], &out, &mut paths),
            }
            .map_err(|e| {
                Failure::run(format!(
                    "eager::kernel error: {e}\n  at eager::{} (node {id})",
                    node.kind
                ))
            })?;
            values.insert(*id, ValueTensor::new(out, data));
        }
        let outputs = g
            .outputs
            .iter()
            .map(|s| fetch(*s, inputs, &values))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Failure::run("eager::execute: dangling graph output"))?;
        Ok(Execution {
            outputs,
            behavior: paths,
            work,
        })
    }

    fn release(&mut self, handle: Handle) {
        self.plans.remove(&handle.0);
    }
}

fn fetch(s: Source, inputs: &[ValueTensor], values: &BTreeMap<NodeId, ValueTensor>) -> Option<ValueTensor> {
    match s {
        Source::GraphInput { graph_input } => inputs.get(graph_input).cloned(),
        Source::Node { node, .. } => values.get(&node).cloned(),
    }
}

/// Multiply-adds per output element, for cost accounting.
fn taps(node: &LayerNode, ins: &[ValueTensor]) -> u64 {
    let c = ins
        .first()
        .and_then(|t| t.shape().last().copied())
        .unwrap_or(1) as u64;
    let k = node.int_param("kernel_size").unwrap_or(1).max(1) as u64;
    match node.kind.as_str() {
        "Dense" => c,
        "Conv1D" => k * c,
        "Conv2D" => k * k * c,
        "SeparableConv2D" => k * k + c * node.int_param("depth_multiplier").unwrap_or(1) as u64,
        _ => 1,
    }
}

fn to_t<T: Scalar>(t: &ValueTensor) -> Vec<T> {
    t.data.iter().map(|v| T::of(*v)).collect()
}

fn back<T: Scalar>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(T::get).collect()
}

fn activation<T: Scalar>(name: &str, x: T) -> T {
    match name {
        "relu" => {
            if x > T::ZERO || x.is_nan() {
                x
            } else {
                T::ZERO
            }
        }
        "sigmoid" => T::ONE / (T::ONE + (-x).exp()),
        "tanh" => x.tanh(),
        _ => x,
    }
}

fn keras_relu<T: Scalar>(x: T, max_value: Option<T>, slope: T, threshold: T) -> T {
    if x.is_nan() {
        return x;
    }
    if let Some(m) = max_value {
        if x >= m {
            return m;
        }
    }
    if x >= threshold {
        x
    } else {
        slope * (x - threshold)
    }
}

struct Window {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    pt: usize,
    pl: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    /// Valid input coordinates for output (oy, ox) and tap (ky, kx).
    #[inline]
    fn at(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.sh + ky * self.dh) as isize - self.pt as isize;
        let ix = (ox * self.sw + kx * self.dw) as isize - self.pl as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

/// Builds the window for a 4-D input; 3-D inputs are treated as height 1.
fn window(node: &LayerNode, in_shape: &[usize], kernel: usize, stride: usize, dilation: usize) -> Result<Window, String> {
    let same = node.str_param("padding") == Some("same");
    let (h, w, c, kh) = match in_shape.len() {
        3 => (1, in_shape[1], in_shape[2], 1),
        4 => (in_shape[1], in_shape[2], in_shape[3], kernel),
        r => return Err(format!("window over rank {r}")),
    };
    let gh = if in_shape.len() == 3 {
        conv_geometry(1, 1, 1, 1, false)
    } else {
        conv_geometry(h, kernel, stride, dilation, same)
    }
    .ok_or("window does not fit the input height")?;
    let gw = conv_geometry(w, kernel, stride, dilation, same).ok_or("window does not fit the input width")?;
    Ok(Window {
        h,
        w,
        c,
        kh,
        kw: kernel,
        sh: if in_shape.len() == 3 { 1 } else { stride },
        sw: stride,
        dh: if in_shape.len() == 3 { 1 } else { dilation },
        dw: dilation,
        pt: gh.pad_before,
        pl: gw.pad_before,
        oh: gh.out,
        ow: gw.out,
    })
}

fn param_usize(node: &LayerNode, name: &str) -> usize {
    node.int_param(name).unwrap_or(1).max(0) as usize
}

fn run_node<T: Scalar>(
    node: &LayerNode,
    ins: &[ValueTensor],
    w: &[ValueTensor],
    out: &TensorSpec,
    paths: &mut BTreeSet<String>,
) -> Result<Vec<f64>, String> {
    let kind = node.kind.as_str();
    let mut hit = |branch: &str| {
        paths.insert(format!("eager:{kind}:{branch}"));
    };
    hit(node.dtype.storage().as_str());
    hit(&format!("rank{}", ins.first().map(|t| t.spec.rank()).unwrap_or(0)));
    if ins.iter().any(|t| !t.all_finite()) {
        hit("nonfinite_input");
    }
    let x0 = ins.first().ok_or("node without inputs")?;
    let act = node.str_param("activation").unwrap_or("linear");
    let bias = node.bool_param("use_bias").unwrap_or(false);
    match kind {
        "Dense" => {
            hit(&format!("act_{act}"));
            hit(if bias { "bias" } else { "no_bias" });
            let x: Vec<T> = to_t(x0);
            let cin = *x0.shape().last().unwrap_or(&1);
            let units = *out.shape.last().unwrap_or(&0);
            if units == 0 {
                hit("units0");
            }
            let k: Vec<T> = to_t(&w[0]);
            let b: Option<Vec<T>> = if bias { Some(to_t(&w[1])) } else { None };
            let rows = if cin == 0 { 0 } else { x.len() / cin };
            let mut y = Vec::with_capacity(rows * units);
            for r in 0..rows {
                for u in 0..units {
                    let mut acc = T::ZERO;
                    for i in 0..cin {
                        acc = acc + x[r * cin + i] * k[i * units + u];
                    }
                    if let Some(b) = &b {
                        acc = acc + b[u];
                    }
                    y.push(activation(act, acc));
                }
            }
            Ok(back(y))
        }
        "Conv1D" | "Conv2D" => {
            let k = param_usize(node, "kernel_size");
            let s = param_usize(node, "strides");
            let d = param_usize(node, "dilation_rate");
            hit(&format!("act_{act}"));
            hit(if bias { "bias" } else { "no_bias" });
            hit(node.str_param("padding").unwrap_or("valid"));
            if s > 1 {
                hit("strided");
            }
            if d > 1 {
                hit("dilated");
            }
            let win = window(node, x0.shape(), k, s, d)?;
            let f = *out.shape.last().unwrap_or(&0);
            let x: Vec<T> = to_t(x0);
            let kern: Vec<T> = to_t(&w[0]);
            let b: Option<Vec<T>> = if bias { Some(to_t(&w[1])) } else { None };
            let batch = x0.shape()[0];
            let mut y = Vec::with_capacity(batch * win.oh * win.ow * f);
            for bi in 0..batch {
                for oy in 0..win.oh {
                    for ox in 0..win.ow {
                        for fi in 0..f {
                            let mut acc = T::ZERO;
                            for ky in 0..win.kh {
                                for kx in 0..win.kw {
                                    let Some((iy, ix)) = win.at(oy, ox, ky, kx) else {
                                        continue;
                                    };
                                    let base = ((bi * win.h + iy) * win.w + ix) * win.c;
                                    let kbase = (ky * win.kw + kx) * win.c * f;
                                    for ci in 0..win.c {
                                        acc = acc + x[base + ci] * kern[kbase + ci * f + fi];
                                    }
                                }
                            }
                            if let Some(b) = &b {
                                acc = acc + b[fi];
                            }
                            y.push(activation(act, acc));
                        }
                    }
                }
            }
            Ok(back(y))
        }
        "SeparableConv2D" => {
            let k = param_usize(node, "kernel_size");
            let s = param_usize(node, "strides");
            let dm = param_usize(node, "depth_multiplier");
            hit(&format!("act_{act}"));
            hit(&format!("depth_multiplier{dm}"));
            hit(node.str_param("padding").unwrap_or("valid"));
            let win = window(node, x0.shape(), k, s, 1)?;
            let f = *out.shape.last().unwrap_or(&0);
            let x: Vec<T> = to_t(x0);
            let wd: Vec<T> = to_t(&w[0]);
            let wp: Vec<T> = to_t(&w[1]);
            let b: Option<Vec<T>> = if bias { Some(to_t(&w[2])) } else { None };
            let batch = x0.shape()[0];
            let mid_c = win.c * dm;
            let mut mid = vec![T::ZERO; mid_c];
            let mut y = Vec::with_capacity(batch * win.oh * win.ow * f);
            for bi in 0..batch {
                for oy in 0..win.oh {
                    for ox in 0..win.ow {
                        for ci in 0..win.c {
                            for m in 0..dm {
                                let mut acc = T::ZERO;
                                for ky in 0..win.kh {
                                    for kx in 0..win.kw {
                                        if let Some((iy, ix)) = win.at(oy, ox, ky, kx) {
                                            let xv = x[((bi * win.h + iy) * win.w + ix) * win.c + ci];
                                            acc = acc + xv * wd[((ky * win.kw + kx) * win.c + ci) * dm + m];
                                        }
                                    }
                                }
                                mid[ci * dm + m] = acc;
                            }
                        }
                        for fi in 0..f {
                            let mut acc = T::ZERO;
                            for j in 0..mid_c {
                                acc = acc + mid[j] * wp[j * f + fi];
                            }
                            if let Some(b) = &b {
                                acc = acc + b[fi];
                            }
                            y.push(activation(act, acc));
                        }
                    }
                }
            }
            Ok(back(y))
        }
        "MaxPooling2D" | "AveragePooling2D" => {
            let p = param_usize(node, "pool_size");
            let s = param_usize(node, "strides");
            hit(node.str_param("padding").unwrap_or("valid"));
            let win = window(node, x0.shape(), p, s, 1)?;
            let x: Vec<T> = to_t(x0);
            let batch = x0.shape()[0];
            let max = kind == "MaxPooling2D";
            let mut y = Vec::with_capacity(batch * win.oh * win.ow * win.c);
            for bi in 0..batch {
                for oy in 0..win.oh {
                    for ox in 0..win.ow {
                        for ci in 0..win.c {
                            let mut acc: Option<T> = None;
                            let mut count = 0usize;
                            for ky in 0..win.kh {
                                for kx in 0..win.kw {
                                    let Some((iy, ix)) = win.at(oy, ox, ky, kx) else {
                                        continue;
                                    };
                                    let v = x[((bi * win.h + iy) * win.w + ix) * win.c + ci];
                                    count += 1;
                                    acc = Some(match acc {
                                        None => v,
                                        Some(a) if max => {
                                            if a.is_nan() || !(v.is_nan() || v > a) {
                                                a
                                            } else {
                                                v
                                            }
                                        }
                                        Some(a) => a + v,
                                    });
                                }
                            }
                            let a = acc.ok_or("empty pooling window")?;
                            y.push(if max { a } else { a / T::of(count as f64) });
                        }
                    }
                }
            }
            Ok(back(y))
        }
        "GlobalAveragePooling2D" => {
            let sh = x0.shape();
            let (b, h, wd, c) = (sh[0], sh[1], sh[2], sh[3]);
            hit(if node.bool_param("keepdims").unwrap_or(false) { "keepdims" } else { "flat" });
            let x: Vec<T> = to_t(x0);
            let n = T::of((h * wd) as f64);
            let mut y = Vec::with_capacity(b * c);
            for bi in 0..b {
                for ci in 0..c {
                    let mut acc = T::ZERO;
                    for p in 0..h * wd {
                        acc = acc + x[(bi * h * wd + p) * c + ci];
                    }
                    y.push(acc / n);
                }
            }
            Ok(back(y))
        }
        "BatchNormalization" => {
            let eps = T::of(node.real_param("epsilon").unwrap_or(1e-3));
            hit(&format!(
                "center_{}_scale_{}",
                node.bool_param("center").unwrap_or(true),
                node.bool_param("scale").unwrap_or(true)
            ));
            let c = *x0.shape().last().unwrap_or(&1);
            let [gamma, beta, mean, var] = [0, 1, 2, 3].map(|i| to_t::<T>(&w[i]));
            let x: Vec<T> = to_t(x0);
            let y = x
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let ch = i % c;
                    (*v - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch]
                })
                .collect();
            Ok(back(y))
        }
        "LayerNormalization" => {
            let eps = T::of(node.real_param("epsilon").unwrap_or(1e-3));
            hit(&format!(
                "center_{}_scale_{}",
                node.bool_param("center").unwrap_or(true),
                node.bool_param("scale").unwrap_or(true)
            ));
            let n = *x0.shape().last().unwrap_or(&1);
            let gamma: Vec<T> = to_t(&w[0]);
            let beta: Vec<T> = to_t(&w[1]);
            let x: Vec<T> = to_t(x0);
            let nt = T::of(n as f64);
            let mut y = Vec::with_capacity(x.len());
            for row in x.chunks(n) {
                let mut sum = T::ZERO;
                for v in row {
                    sum = sum + *v;
                }
                let mean = sum / nt;
                let mut sq = T::ZERO;
                for v in row {
                    let d = *v - mean;
                    sq = sq + d * d;
                }
                let denom = (sq / nt + eps).sqrt();
                for (i, v) in row.iter().enumerate() {
                    y.push((*v - mean) / denom * gamma[i] + beta[i]);
                }
            }
            Ok(back(y))
        }
        "ReLU" => {
            let max_value = node.real_param("max_value").map(T::of);
            let slope = T::of(node.real_param("negative_slope").unwrap_or(0.0));
            let threshold = T::of(node.real_param("threshold").unwrap_or(0.0));
            if max_value.is_some() {
                hit("max_value");
            }
            if slope != T::ZERO {
                hit("negative_slope");
            }
            if threshold != T::ZERO {
                hit("threshold");
            }
            let x: Vec<T> = to_t(x0);
            Ok(back(x.into_iter().map(|v| keras_relu(v, max_value, slope, threshold)).collect()))
        }
        "LeakyReLU" => {
            let alpha = T::of(node.real_param("alpha").unwrap_or(0.3));
            let x: Vec<T> = to_t(x0);
            Ok(back(x.into_iter().map(|v| if v > T::ZERO { v } else { alpha * v }).collect()))
        }
        "ELU" => {
            let alpha = T::of(node.real_param("alpha").unwrap_or(1.0));
            let x: Vec<T> = to_t(x0);
            Ok(back(
                x.into_iter()
                    .map(|v| if v > T::ZERO { v } else { alpha * (v.exp() - T::ONE) })
                    .collect(),
            ))
        }
        "Softmax" => {
            let rank = x0.spec.rank();
            let a = node.int_param("axis").unwrap_or(-1);
            let axis = if a < 0 { (rank as i64 + a) as usize } else { a as usize };
            hit(&format!("axis{a}"));
            let sh = x0.shape();
            let outer: usize = sh[..axis].iter().product();
            let n = sh[axis];
            let inner: usize = sh[axis + 1..].iter().product();
            let x: Vec<T> = to_t(x0);
            let mut y = vec![T::ZERO; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut m = x[at(0)];
                    for j in 1..n {
                        let v = x[at(j)];
                        if !m.is_nan() && (v.is_nan() || v > m) {
                            m = v;
                        }
                    }
                    let mut sum = T::ZERO;
                    for j in 0..n {
                        let e = (x[at(j)] - m).exp();
                        y[at(j)] = e;
                        sum = sum + e;
                    }
                    for j in 0..n {
                        y[at(j)] = y[at(j)] / sum;
                    }
                }
            }
            Ok(back(y))
        }
        "Dropout" | "Flatten" | "Reshape" => Ok(x0.data.clone()),
        "Add" | "Multiply" => {
            hit(&format!("arity{}", ins.len()));
            let mut acc: Vec<T> = to_t(x0);
            for t in &ins[1..] {
                let other: Vec<T> = to_t(t);
                for (a, b) in acc.iter_mut().zip(other) {
                    *a = if kind == "Add" { *a + b } else { *a * b };
                }
            }
            Ok(back(acc))
        }
        "Concatenate" => {
            let rank = x0.spec.rank();
            let a = node.int_param("axis").unwrap_or(-1);
            let axis = if a < 0 { (rank as i64 + a) as usize } else { a as usize };
            hit(&format!("axis{a}"));
            let outer: usize = x0.shape()[..axis].iter().product();
            let mut y = Vec::with_capacity(out.numel());
            for o in 0..outer {
                for t in ins {
                    let block: usize = t.shape()[axis..].iter().product();
                    y.extend_from_slice(&t.data[o * block..(o + 1) * block]);
                }
            }
            Ok(y)
        }
        "Cast" => {
            hit(&format!("to_{}", out.storage().as_str()));
            Ok(x0.data.clone())
        }
        "Pad" | "Crop" => Ok(copy_corner(&x0.data, x0.shape(), &out.shape)),
        other => Err(format!("no kernel for kind {other}")),
    }
}

/// Copies the overlapping leading corner of `src` into a zero tensor of
/// shape `dst`.
fn copy_corner(src: &[f64], src_shape: &[usize], dst: &[usize]) -> Vec<f64> {
    let n: usize = dst.iter().product();
    let mut out = vec![0.0; n];
    if src.is_empty() || n == 0 {
        return out;
    }
    let ss = crate::tensor::strides(src_shape);
    let ds = crate::tensor::strides(dst);
    let common: Vec<usize> = src_shape.iter().zip(dst).map(|(a, b)| *a.min(b)).collect();
    let total: usize = common.iter().product();
    let mut idx = vec![0usize; common.len()];
    for _ in 0..total {
        let s: usize = idx.iter().zip(&ss).map(|(i, st)| i * st).sum();
        let d: usize = idx.iter().zip(&ds).map(|(i, st)| i * st).sum();
        out[d] = src[s];
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < common[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
