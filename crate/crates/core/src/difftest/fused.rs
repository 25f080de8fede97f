//! Optimizing interpreter. Computes everything in f64, lowers convolutions
//! to im2col matrix products and applies three rewrites at build time:
//! bias folding into the accumulator, BatchNormalization folding into a
//! preceding convolution, and fusing a following ReLU into the convolution
//! epilogue. Node outputs are rounded to their storage format.
//!
//! The same interpreter hosts the injected faults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::graph::{conv_geometry, materialize_weights, LayerNode, ModelGraph, NodeId, Source};
use crate::tensor::{TensorSpec, ValueTensor};

use super::{Backend, Execution, Failure, Handle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fault {
    /// Same-padding offset is one too large for strided, dilated Conv2D.
    PadOffByOne,
    /// ReLU with `max_value` yields NaN above the cap.
    ReluNan,
    /// Reading the empty output of a zero-unit Dense aborts.
    DenseZeroCrash,
}

/// `(id, description, verdict kind it should raise, responsible kind)`.
pub const FAULTS: [(Fault, &str, &str, &str, &str); 3] = [
    (
        Fault::PadOffByOne,
        "pad_off_by_one",
        "same-padding offset off by one when strides > 1 and dilation_rate > 1",
        "inconsistency",
        "Conv2D",
    ),
    (
        Fault::ReluNan,
        "relu_nan",
        "ReLU with max_value returns NaN for inputs above max_value",
        "nan",
        "ReLU",
    ),
    (
        Fault::DenseZeroCrash,
        "dense_zero_crash",
        "consuming the empty output of a Dense layer with units = 0 aborts",
        "crash",
        "Dense",
    ),
];

impl Fault {
    pub fn as_str(self) -> &'static str {
        FAULTS.iter().find(|f| f.0 == self).map(|f| f.1).expect("listed")
    }

    pub fn description(self) -> &'static str {
        FAULTS.iter().find(|f| f.0 == self).map(|f| f.2).expect("listed")
    }

    /// Verdict kind the fault manifests as.
    pub fn expected_verdict(self) -> &'static str {
        FAULTS.iter().find(|f| f.0 == self).map(|f| f.3).expect("listed")
    }

    /// Operator kind a correct localization should blame.
    pub fn responsible_kind(self) -> &'static str {
        FAULTS.iter().find(|f| f.0 == self).map(|f| f.4).expect("listed")
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FAULTS
            .iter()
            .find(|f| f.1 == s)
            .map(|f| f.0)
            .ok_or_else(|| format!("unknown fault `{s}`"))
    }
}

#[derive(Debug, Clone, Copy)]
struct ReluParams {
    max_value: Option<f64>,
    slope: f64,
    threshold: f64,
}

impl ReluParams {
    fn of(node: &LayerNode) -> Self {
        ReluParams {
            max_value: node.real_param("max_value"),
            slope: node.real_param("negative_slope").unwrap_or(0.0),
            threshold: node.real_param("threshold").unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvStep {
    src: Source,
    /// Kernel as a `[taps, filters]` matrix, taps ordered (ky, kx, c).
    kernel: Vec<f64>,
    bias: Option<Vec<f64>>,
    activation: String,
    epilogue: Option<ReluParams>,
    node: NodeId,
}

#[derive(Debug, Clone)]
enum Step {
    Conv(ConvStep),
    Node,
}

struct Plan {
    graph: ModelGraph,
    /// (node whose value the step produces, step).
    steps: Vec<(NodeId, Step)>,
    weights: BTreeMap<NodeId, Vec<ValueTensor>>,
    rewrites: BTreeSet<String>,
}

pub struct FusedBackend {
    fault: Option<Fault>,
    next: u64,
    plans: BTreeMap<u64, Plan>,
}

impl FusedBackend {
    pub fn new(fault: Option<Fault>) -> Self {
        FusedBackend {
            fault,
            next: 0,
            plans: BTreeMap::new(),
        }
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    fn ns(&self) -> String {
        self.id()
    }
}

/// The sole consumer of `id` if it is a single-input node of `kind` that can
/// be absorbed: no override, same dtype, and `id` is not a graph output.
fn absorbable<'g>(g: &'g ModelGraph, consumers: &BTreeMap<NodeId, Vec<NodeId>>, id: NodeId, kind: &str) -> Option<&'g LayerNode> {
    if g.outputs.iter().any(|s| s.node_id() == Some(id)) {
        return None;
    }
    let cs = consumers.get(&id)?;
    if cs.len() != 1 {
        return None;
    }
    let c = &g.nodes[&cs[0]];
    let producer = &g.nodes[&id];
    (c.kind == kind && c.inputs.len() == 1 && c.input_override.is_none() && c.dtype == producer.dtype)
        .then_some(c)
}

impl Backend for FusedBackend {
    fn id(&self) -> String {
        match self.fault {
            None => "fused".to_string(),
            Some(f) => format!("faulty:{f}"),
        }
    }

    fn build(&mut self, graph: &ModelGraph) -> Result<Handle, Failure> {
        let order = graph
            .topo_order()
            .ok_or_else(|| Failure::build("fused::build: graph has a cycle"))?;
        let consumers = graph.consumer_map();
        let mut weights = BTreeMap::new();
        let mut absorbed = BTreeSet::new();
        let mut steps = Vec::new();
        let mut rewrites = BTreeSet::new();
        let ns = self.ns();
        for id in &order {
            let node = &graph.nodes[id];
            if node.output_spec.is_none() {
                return Err(Failure::build(format!("fused::build: node {id} has no inferred output spec")));
            }
            weights.insert(*id, materialize_weights(graph, *id));
        }
        for id in &order {
            if absorbed.contains(id) {
                continue;
            }
            let node = &graph.nodes[id];
            if !matches!(node.kind.as_str(), "Conv1D" | "Conv2D") {
                steps.push((*id, Step::Node));
                continue;
            }
            let w = &weights[id];
            let mut kernel = w[0].data.clone();
            let filters = *node.output_spec().shape.last().unwrap_or(&0);
            let mut bias = if node.bool_param("use_bias").unwrap_or(false) {
                rewrites.insert(format!("{ns}:fold:bias"));
                Some(w[1].data.clone())
            } else {
                None
            };
            let activation = node.str_param("activation").unwrap_or("linear").to_string();
            let mut tail = *id;
            let mut epilogue = None;
            if activation == "linear" {
                if let Some(bn) = absorbable(graph, &consumers, tail, "BatchNormalization") {
                    let bw = &weights[&bn.id];
                    let eps = bn.real_param("epsilon").unwrap_or(1e-3);
                    let scale: Vec<f64> = (0..filters)
                        .map(|f| bw[0].data[f] / (bw[3].data[f] + eps).sqrt())
                        .collect();
                    for (j, v) in kernel.iter_mut().enumerate() {
                        *v *= scale[j % filters];
                    }
                    let b0 = bias.take().unwrap_or_else(|| vec![0.0; filters]);
                    bias = Some(
                        (0..filters)
                            .map(|f| (b0[f] - bw[2].data[f]) * scale[f] + bw[1].data[f])
                            .collect(),
                    );
                    rewrites.insert(format!("{ns}:fold:batchnorm"));
                    absorbed.insert(bn.id);
                    tail = bn.id;
                }
                if let Some(relu) = absorbable(graph, &consumers, tail, "ReLU") {
                    epilogue = Some(ReluParams::of(relu));
                    rewrites.insert(format!("{ns}:fuse:conv_relu"));
                    absorbed.insert(relu.id);
                    tail = relu.id;
                }
            }
            steps.push((
                tail,
                Step::Conv(ConvStep {
                    src: node.inputs[0],
                    kernel,
                    bias,
                    activation,
                    epilogue,
                    node: *id,
                }),
            ));
        }
        self.next += 1;
        self.plans.insert(
            self.next,
            Plan {
                graph: graph.clone(),
                steps,
                weights,
                rewrites,
            },
        );
        Ok(Handle(self.next))
    }

    fn execute(&mut self, handle: Handle, inputs: &[ValueTensor]) -> Result<Execution, Failure> {
        let ns = self.ns();
        let fault = self.fault;
        let plan = self
            .plans
            .get(&handle.0)
            .ok_or_else(|| Failure::run(format!("fused::execute: unknown handle {}", handle.0)))?;
        let g = &plan.graph;
        if inputs.len() != g.inputs.len() || inputs.iter().zip(&g.inputs).any(|(t, s)| t.spec != *s) {
            return Err(Failure::run("fused::execute: input payloads do not match graph inputs"));
        }
        let mut env = Env {
            inputs,
            values: BTreeMap::new(),
        };
        let mut paths = plan.rewrites.clone();
        let mut work = 0u64;
        for (writes, step) in &plan.steps {
            let out_spec = g.nodes[writes].output_spec().clone();
            let data = match step {
                Step::Conv(c) => {
                    let node = &g.nodes[&c.node];
                    let x = env.get(c.src, g, fault, node)?;
                    let x = match node.input_override {
                        Some(sv) => ValueTensor::filled(x.spec.clone(), sv.value()),
                        None => x,
                    };
                    paths.insert(format!("{ns}:{}:im2col", node.kind));
                    paths.insert(format!("{ns}:{}:{}", node.kind, node.dtype.storage()));
                    let (data, taps) = conv_im2col(node, c, &x, &out_spec, fault, &ns, &mut paths)
                        .map_err(|e| Failure::run(format!("{e}\n  at fused::kernels::conv (node {})", c.node)))?;
                    work += out_spec.numel() as u64 * taps;
                    data
                }
                Step::Node => {
                    let node = &g.nodes[writes];
                    let mut ins = node
                        .inputs
                        .iter()
                        .map(|s| env.get(*s, g, fault, node))
                        .collect::<Result<Vec<_>, _>>()?;
                    if let Some(sv) = node.input_override {
                        for t in &mut ins {
                            *t = ValueTensor::filled(t.spec.clone(), sv.value());
                        }
                    }
                    paths.insert(format!("{ns}:{}:{}", node.kind, node.dtype.storage()));
                    work += out_spec.numel() as u64
                        * ins.first().and_then(|t| t.shape().last().copied()).unwrap_or(1).max(1) as u64;
                    kernel(node, &ins, &plan.weights[writes], &out_spec, fault, &ns, &mut paths)
                        .map_err(|e| Failure::run(format!("{e}\n  at fused::kernels::{} (node {writes})", node.kind)))?
                }
            };
            env.values.insert(*writes, ValueTensor::new(out_spec, data));
        }
        let outputs = g
            .outputs
            .iter()
            .map(|s| match s {
                Source::GraphInput { graph_input } => inputs.get(*graph_input).cloned(),
                Source::Node { node, .. } => env.values.get(node).cloned(),
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Failure::run("fused::execute: graph output was fused away"))?;
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

struct Env<'a> {
    inputs: &'a [ValueTensor],
    values: BTreeMap<NodeId, ValueTensor>,
}

impl Env<'_> {
    fn get(&self, s: Source, g: &ModelGraph, fault: Option<Fault>, reader: &LayerNode) -> Result<ValueTensor, Failure> {
        match s {
            Source::GraphInput { graph_input } => self
                .inputs
                .get(graph_input)
                .cloned()
                .ok_or_else(|| Failure::run("fused::execute: missing graph input")),
            Source::Node { node, .. } => {
                let v = self
                    .values
                    .get(&node)
                    .ok_or_else(|| Failure::run(format!("fused::execute: value of {node} not computed")))?;
                if fault == Some(Fault::DenseZeroCrash)
                    && g.nodes[&node].kind == "Dense"
                    && v.spec.has_empty_extent()
                {
                    return Err(Failure::run(format!(
                        "fused::buffer: read of zero-sized allocation {:?}\n  at fused::kernels::{} (node {})\n  at fused::kernels::Dense (node {node})",
                        v.shape(),
                        reader.kind,
                        reader.id
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

fn relu(x: f64, p: ReluParams, fault: Option<Fault>) -> f64 {
    if x.is_nan() {
        return x;
    }
    if let Some(m) = p.max_value {
        if fault == Some(Fault::ReluNan) && x > m {
            return f64::NAN;
        }
        if x >= m {
            return m;
        }
    }
    if x >= p.threshold {
        x
    } else {
        p.slope * (x - p.threshold)
    }
}

fn apply_activation(name: &str, x: f64) -> f64 {
    match name {
        "relu" if x > 0.0 || x.is_nan() => x,
        "relu" => 0.0,
        "sigmoid" => 1.0 / (1.0 + (-x).exp()),
        "tanh" => x.tanh(),
        _ => x,
    }
}

/// Spatial geometry along one axis: (input, kernel, stride, dilation, pad_before, out).
type Axis = (usize, usize, usize, usize, usize, usize);

fn axis(input: usize, k: usize, s: usize, d: usize, same: bool) -> Result<Axis, String> {
    let geo = conv_geometry(input, k, s, d, same).ok_or("fused: window larger than input")?;
    Ok((input, k, s, d, geo.pad_before, geo.out))
}

/// Gathers the (ky, kx, c) patch for every output position; padding reads 0.
fn im2col(x: &[f64], batch: usize, c: usize, ah: Axis, aw: Axis) -> Vec<f64> {
    let (h, kh, sh, dh, pt, oh) = ah;
    let (w, kw, sw, dw, pl, ow) = aw;
    let row = kh * kw * c;
    let mut cols = vec![0.0; batch * oh * ow * row];
    let mut r = 0;
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = r * row;
                for ky in 0..kh {
                    let iy = (oy * sh + ky * dh) as isize - pt as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx * dw) as isize - pl as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = base + (ky * kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn conv_im2col(
    node: &LayerNode,
    step: &ConvStep,
    x: &ValueTensor,
    out: &TensorSpec,
    fault: Option<Fault>,
    ns: &str,
    paths: &mut BTreeSet<String>,
) -> Result<(Vec<f64>, u64), String> {
    let k = node.int_param("kernel_size").unwrap_or(1) as usize;
    let s = node.int_param("strides").unwrap_or(1) as usize;
    let d = node.int_param("dilation_rate").unwrap_or(1) as usize;
    let same = node.str_param("padding") == Some("same");
    let sh = x.shape();
    let (ah, mut aw, c) = if sh.len() == 3 {
        ((1, 1, 1, 1, 0, 1), axis(sh[1], k, s, d, same)?, sh[2])
    } else {
        (axis(sh[1], k, s, d, same)?, axis(sh[2], k, s, d, same)?, sh[3])
    };
    let mut ah = ah;
    if fault == Some(Fault::PadOffByOne) && node.kind == "Conv2D" && same && s > 1 && d > 1 {
        ah.4 += 1;
        aw.4 += 1;
        paths.insert(format!("{ns}:Conv2D:pad_shifted"));
    }
    let filters = *out.shape.last().unwrap_or(&0);
    let cols = im2col(&x.data, sh[0], c, ah, aw);
    let row = ah.1 * aw.1 * c;
    let mut y = Vec::with_capacity(out.numel());
    for patch in cols.chunks(row.max(1)) {
        for f in 0..filters {
            let mut acc = step.bias.as_ref().map_or(0.0, |b| b[f]);
            for (j, v) in patch.iter().enumerate() {
                acc += v * step.kernel[j * filters + f];
            }
            let mut v = apply_activation(&step.activation, acc);
            if let Some(p) = step.epilogue {
                v = relu(v, p, fault);
            }
            y.push(v);
        }
    }
    Ok((y, row as u64))
}

fn resolve_axis(rank: usize, a: i64) -> usize {
    if a < 0 {
        (rank as i64 + a) as usize
    } else {
        a as usize
    }
}

fn kernel(
    node: &LayerNode,
    ins: &[ValueTensor],
    w: &[ValueTensor],
    out: &TensorSpec,
    fault: Option<Fault>,
    ns: &str,
    paths: &mut BTreeSet<String>,
) -> Result<Vec<f64>, String> {
    let x = ins.first().ok_or("node without inputs")?;
    let data = &x.data;
    let mut mark = |b: String| {
        paths.insert(format!("{ns}:{}:{b}", node.kind));
    };
    let y = match node.kind.as_str() {
        "Dense" => {
            let cin = *x.shape().last().unwrap_or(&1);
            let units = *out.shape.last().unwrap_or(&0);
            let act = node.str_param("activation").unwrap_or("linear");
            mark(format!("gemm_{act}"));
            // Transposed kernel so each output reads one contiguous row.
            let kt: Vec<Vec<f64>> = (0..units)
                .map(|u| (0..cin).map(|i| w[0].data[i * units + u]).collect())
                .collect();
            let bias = node.bool_param("use_bias").unwrap_or(false).then(|| &w[1].data);
            data.chunks(cin.max(1))
                .flat_map(|row| {
                    kt.iter().enumerate().map(move |(u, col)| {
                        let dot = row.iter().zip(col).fold(0.0, |a, (p, q)| a + p * q);
                        let v = match bias {
                            Some(b) => dot + b[u],
                            None => dot,
                        };
                        apply_activation(act, v)
                    })
                })
                .collect()
        }
        "SeparableConv2D" => {
            let k = node.int_param("kernel_size").unwrap_or(1) as usize;
            let s = node.int_param("strides").unwrap_or(1) as usize;
            let dm = node.int_param("depth_multiplier").unwrap_or(1) as usize;
            let same = node.str_param("padding") == Some("same");
            let sh = x.shape();
            let (b, c) = (sh[0], sh[3]);
            let ah = axis(sh[1], k, s, 1, same)?;
            let aw = axis(sh[2], k, s, 1, same)?;
            mark("depthwise_im2col".to_string());
            let filters = *out.shape.last().unwrap_or(&0);
            let cols = im2col(data, b, c, ah, aw);
            let taps = k * k;
            let act = node.str_param("activation").unwrap_or("linear");
            let bias = node.bool_param("use_bias").unwrap_or(false).then(|| &w[2].data);
            let mut y = Vec::with_capacity(out.numel());
            for patch in cols.chunks((taps * c).max(1)) {
                let mid: Vec<f64> = (0..c * dm)
                    .map(|j| {
                        let (ci, m) = (j / dm, j % dm);
                        (0..taps).fold(0.0, |a, t| a + patch[t * c + ci] * w[0].data[(t * c + ci) * dm + m])
                    })
                    .collect();
                for f in 0..filters {
                    let dot = mid.iter().enumerate().fold(0.0, |a, (j, v)| a + v * w[1].data[j * filters + f]);
                    let v = bias.map_or(dot, |b| dot + b[f]);
                    y.push(apply_activation(act, v));
                }
            }
            y
        }
        "MaxPooling2D" | "AveragePooling2D" => {
            let p = node.int_param("pool_size").unwrap_or(2) as usize;
            let s = node.int_param("strides").unwrap_or(2) as usize;
            let same = node.str_param("padding") == Some("same");
            let sh = x.shape();
            let (b, h, wd, c) = (sh[0], sh[1], sh[2], sh[3]);
            let (_, _, _, _, pt, oh) = axis(h, p, s, 1, same)?;
            let (_, _, _, _, pl, ow) = axis(wd, p, s, 1, same)?;
            let max = node.kind == "MaxPooling2D";
            mark(if max { "reduce_max" } else { "reduce_mean" }.to_string());
            let mut y = Vec::with_capacity(out.numel());
            for bi in 0..b {
                for oy in 0..oh {
                    let rows: Vec<usize> = (0..p)
                        .filter_map(|ky| (oy * s + ky).checked_sub(pt))
                        .filter(|iy| *iy < h)
                        .collect();
                    for ox in 0..ow {
                        let cols: Vec<usize> = (0..p)
                            .filter_map(|kx| (ox * s + kx).checked_sub(pl))
                            .filter(|ix| *ix < wd)
                            .collect();
                        for ci in 0..c {
                            let mut vals = rows
                                .iter()
                                .flat_map(|iy| cols.iter().map(move |ix| (iy, ix)))
                                .map(|(iy, ix)| data[((bi * h + iy) * wd + ix) * c + ci]);
                            let first = vals.next().ok_or("pooling window without valid taps")?;
                            let v = if max {
                                vals.fold(first, |m, v| if m.is_nan() || !(v.is_nan() || v > m) { m } else { v })
                            } else {
                                let (sum, n) = vals.fold((first, 1usize), |(a, n), v| (a + v, n + 1));
                                sum / n as f64
                            };
                            y.push(v);
                        }
                    }
                }
            }
            y
        }
        "GlobalAveragePooling2D" => {
            let sh = x.shape();
            let (b, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
            mark("reduce_spatial".to_string());
            (0..b * c)
                .map(|i| {
                    let (bi, ci) = (i / c, i % c);
                    (0..hw).fold(0.0, |a, p| a + data[(bi * hw + p) * c + ci]) / hw as f64
                })
                .collect()
        }
        "BatchNormalization" => {
            let eps = node.real_param("epsilon").unwrap_or(1e-3);
            let c = *x.shape().last().unwrap_or(&1);
            mark("affine".to_string());
            let inv: Vec<f64> = (0..c).map(|i| (w[3].data[i] + eps).sqrt()).collect();
            data.iter()
                .enumerate()
                .map(|(i, v)| {
                    let ch = i % c;
                    (v - w[2].data[ch]) / inv[ch] * w[0].data[ch] + w[1].data[ch]
                })
                .collect()
        }
        "LayerNormalization" => {
            let eps = node.real_param("epsilon").unwrap_or(1e-3);
            let n = *x.shape().last().unwrap_or(&1);
            mark("row_moments".to_string());
            data.chunks(n)
                .flat_map(|row| {
                    let mean = row.iter().fold(0.0, |a, v| a + v) / n as f64;
                    let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n as f64;
                    let denom = (var + eps).sqrt();
                    row.iter()
                        .enumerate()
                        .map(move |(i, v)| (v - mean) / denom * w[0].data[i] + w[1].data[i])
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        "ReLU" => {
            let p = ReluParams::of(node);
            mark(format!("clamp_{}", p.max_value.is_some()));
            data.iter().map(|v| relu(*v, p, fault)).collect()
        }
        "LeakyReLU" => {
            let alpha = node.real_param("alpha").unwrap_or(0.3);
            data.iter().map(|v| if *v > 0.0 { *v } else { alpha * v }).collect()
        }
        "ELU" => {
            let alpha = node.real_param("alpha").unwrap_or(1.0);
            data.iter()
                .map(|v| if *v > 0.0 { *v } else { alpha * (v.exp() - 1.0) })
                .collect()
        }
        "Softmax" => {
            let sh = x.shape();
            let ax = resolve_axis(sh.len(), node.int_param("axis").unwrap_or(-1));
            let n = sh[ax];
            let inner: usize = sh[ax + 1..].iter().product();
            mark(format!("axis_inner{}", inner.min(2)));
            let mut y = data.clone();
            for start in 0..data.len() / n.max(1) {
                let (o, i) = (start / inner, start % inner);
                let idx: Vec<usize> = (0..n).map(|j| (o * n + j) * inner + i).collect();
                let m = idx.iter().skip(1).fold(data[idx[0]], |m, &k| {
                    let v = data[k];
                    if !m.is_nan() && (v.is_nan() || v > m) {
                        v
                    } else {
                        m
                    }
                });
                let mut sum = 0.0;
                for &k in &idx {
                    y[k] = (data[k] - m).exp();
                    sum += y[k];
                }
                for &k in &idx {
                    y[k] /= sum;
                }
            }
            y
        }
        "Dropout" | "Flatten" | "Reshape" | "Cast" => data.clone(),
        "Add" => ins[1..].iter().fold(data.clone(), |acc, t| acc.iter().zip(&t.data).map(|(a, b)| a + b).collect()),
        "Multiply" => ins[1..].iter().fold(data.clone(), |acc, t| acc.iter().zip(&t.data).map(|(a, b)| a * b).collect()),
        "Concatenate" => {
            let ax = resolve_axis(x.spec.rank(), node.int_param("axis").unwrap_or(-1));
            let outer: usize = x.shape()[..ax].iter().product();
            let blocks: Vec<usize> = ins.iter().map(|t| t.shape()[ax..].iter().product()).collect();
            (0..outer)
                .flat_map(|o| {
                    ins.iter()
                        .zip(&blocks)
                        .flat_map(move |(t, blk)| t.data[o * blk..(o + 1) * blk].iter().copied())
                })
                .collect()
        }
        "Pad" | "Crop" => {
            // Walk destination indices, reading the source where in range.
            let src_shape = x.shape();
            let src_strides = crate::tensor::strides(src_shape);
            let dst_strides = crate::tensor::strides(&out.shape);
            (0..out.numel())
                .map(|flat| {
                    let mut rem = flat;
                    let mut offset = 0;
                    for (ax, st) in dst_strides.iter().enumerate() {
                        let i = rem / st;
                        rem %= st;
                        if i >= src_shape[ax] {
                            return 0.0;
                        }
                        offset += i * src_strides[ax];
                    }
                    data[offset]
                })
                .collect()
        }
        other => return Err(format!("fused: no kernel for {other}")),
    };
    Ok(y)
}
