use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::coverage::{DiversityItem, DiversitySnapshot};
use crate::dtype::DTypeLabel;
use crate::graph::{ModelGraph, NodeId, Source, SpecialValue};
use crate::registry::{ParamKind, ParamValue, ParamSpec};
use crate::tensor::{shape_key, TensorSpec};

use super::repair::{add_inferred, adapt, change_rank, crop_pad, cast, reinfer, reshape, restore_output};
use super::{prefer_uncovered, Choice, MutationError, MutationKind, MutationOutcome, Mutator};

enum Step {
    Applied(Vec<Choice>, Vec<NodeId>),
    /// Nothing to do for this target; do not retry.
    Skip,
    /// The attempt produced an un-inferable graph; retry or give up.
    Failed(String),
}

fn covered_params(snap: &DiversitySnapshot, kind: &str, param: &str) -> BTreeSet<String> {
    snap.kind(kind)
        .and_then(|k| k.params.get(param))
        .cloned()
        .unwrap_or_default()
}

/// Smallest spatial extent a windowed kind can consume with these params.
fn min_spatial_extent(kind: &str, params: &BTreeMap<String, ParamValue>) -> usize {
    let int = |n: &str| params.get(n).and_then(ParamValue::as_i64).unwrap_or(1).max(1) as usize;
    match kind {
        "Conv1D" | "Conv2D" => int("dilation_rate") * (int("kernel_size") - 1) + 1,
        "SeparableConv2D" => int("kernel_size"),
        "MaxPooling2D" | "AveragePooling2D" => int("pool_size"),
        _ => 1,
    }
}

fn spatial_axes(kind: &str, rank: usize) -> std::ops::Range<usize> {
    match kind {
        "Conv1D" | "Conv2D" | "SeparableConv2D" | "MaxPooling2D" | "AveragePooling2D" => {
            1..rank.saturating_sub(1)
        }
        _ => 0..0,
    }
}

impl Mutator<'_> {
    /// Runs `step` on each target against a scratch copy, keeping the copy
    /// on success and retrying failures up to `attempts` times.
    fn per_target<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        targets: &[NodeId],
        kind: MutationKind,
        rng: &mut R,
        mut step: impl FnMut(&mut ModelGraph, NodeId, usize, &mut R) -> Step,
    ) -> Result<MutationOutcome, MutationError> {
        let mut g = graph.clone();
        let mut touched = Vec::new();
        let mut choices = Vec::new();
        let mut applied = 0;
        let mut last_failure = None;
        for &t in targets {
            for attempt in 0..self.config.attempts {
                let mut scratch = g.clone();
                match step(&mut scratch, t, attempt, rng) {
                    Step::Applied(c, extra) => {
                        g = scratch;
                        choices.extend(c);
                        touched.push(t);
                        touched.extend(extra);
                        applied += 1;
                        break;
                    }
                    Step::Skip => break,
                    Step::Failed(e) => last_failure = Some(e),
                }
            }
        }
        if applied == 0 {
            return Err(match last_failure {
                Some(e) => MutationError::InvalidMutant(e),
                None => MutationError::NotApplicable(format!("{kind} has no option for the chosen targets")),
            });
        }
        self.finish(g, kind, touched, choices)
    }

    pub fn mdtype<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        targets: &[NodeId],
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let registry = self.registry;
        self.per_target(graph, targets, MutationKind::MDtype, rng, |g, t, _, rng| {
            let node = g.nodes[&t].clone();
            let Ok(schema) = registry.schema(&node.kind) else {
                return Step::Skip;
            };
            let original = node.output_spec().clone();
            let options: Vec<DTypeLabel> = schema
                .accepted_dtypes
                .iter()
                .copied()
                .filter(|d| *d != node.dtype)
                .collect();
            let covered = |d: &DTypeLabel| {
                snapshot.contains(&DiversityItem::Dtype {
                    kind: node.kind.clone(),
                    dtype: *d,
                })
            };
            let available = options.iter().any(|d| !covered(d));
            let Some((&dtype, fresh)) = prefer_uncovered(&options, covered, rng) else {
                return Step::Skip;
            };
            let mut inserted = Vec::new();
            let run = |g: &mut ModelGraph, inserted: &mut Vec<NodeId>| -> Result<(), String> {
                let mut inputs = Vec::new();
                for src in &node.inputs {
                    let from = g.spec_of(*src).ok_or("no spec")?.dtype;
                    inputs.push(cast(g, *src, from, dtype, inserted)?);
                }
                let n = g.nodes.get_mut(&t).expect("target");
                n.inputs = inputs;
                n.dtype = dtype;
                reinfer(g, t)?;
                restore_output(g, t, &original, inserted)?;
                Ok(())
            };
            match run(g, &mut inserted) {
                Ok(()) => Step::Applied(
                    vec![Choice {
                        item: DiversityItem::Dtype {
                            kind: node.kind.clone(),
                            dtype,
                        },
                        uncovered: fresh,
                        uncovered_available: available,
                    }],
                    Vec::new(),
                ),
                Err(e) => Step::Failed(e),
            }
        })
    }

    pub fn mdims<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        targets: &[NodeId],
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let registry = self.registry;
        self.per_target(graph, targets, MutationKind::MDims, rng, |g, t, _, rng| {
            let node = g.nodes[&t].clone();
            let Ok(schema) = registry.schema(&node.kind) else {
                return Step::Skip;
            };
            let Some(in_spec) = node.inputs.first().and_then(|s| g.spec_of(*s)).cloned() else {
                return Step::Skip;
            };
            let r0 = in_spec.rank();
            let options: Vec<usize> = schema
                .accepted_input_ranks
                .iter()
                .copied()
                .filter(|r| *r != r0 && *r >= 2)
                .collect();
            let covered = |r: &usize| {
                snapshot.contains(&DiversityItem::Rank {
                    kind: node.kind.clone(),
                    rank: *r,
                })
            };
            let available = options.iter().any(|r| !covered(r));
            let Some((&rank, fresh)) = prefer_uncovered(&options, covered, rng) else {
                return Step::Skip;
            };
            // Plan one shape change and apply it to every input.
            let shape = &in_spec.shape;
            let (crop_to, reshape_to) = if rank > r0 {
                let mut s = shape.clone();
                for _ in 0..rank - r0 {
                    let pos = rng.gen_range(1..=s.len());
                    s.insert(pos, 1);
                }
                (None, s)
            } else {
                let mut axes: Vec<usize> = (1..r0).collect();
                axes.shuffle(rng);
                let drop: BTreeSet<usize> = axes.into_iter().take(r0 - rank).collect();
                let crop: Vec<usize> = shape
                    .iter()
                    .enumerate()
                    .map(|(i, d)| if drop.contains(&i) { 1 } else { *d })
                    .collect();
                let kept: Vec<usize> = shape
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !drop.contains(i))
                    .map(|(_, d)| *d)
                    .collect();
                ((crop != *shape).then_some(crop), kept)
            };
            let original = node.output_spec().clone();
            let mut inserted = Vec::new();
            let run = |g: &mut ModelGraph, inserted: &mut Vec<NodeId>| -> Result<(), String> {
                let mut inputs = Vec::new();
                for src in &node.inputs {
                    let mut cur = *src;
                    if let Some(c) = &crop_to {
                        cur = crop_pad(g, cur, c, inserted)?;
                    }
                    inputs.push(reshape(g, cur, &reshape_to, inserted)?);
                }
                g.nodes.get_mut(&t).expect("target").inputs = inputs;
                reinfer(g, t)?;
                restore_output(g, t, &original, inserted)?;
                Ok(())
            };
            match run(g, &mut inserted) {
                Ok(()) => Step::Applied(
                    vec![Choice {
                        item: DiversityItem::Rank {
                            kind: node.kind.clone(),
                            rank,
                        },
                        uncovered: fresh,
                        uncovered_available: available,
                    }],
                    Vec::new(),
                ),
                Err(e) => Step::Failed(e),
            }
        })
    }

    pub fn mshape<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        targets: &[NodeId],
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let n_shape = self.config.n_shape;
        let max_elements = self.config.max_elements;
        self.per_target(graph, targets, MutationKind::MShape, rng, |g, t, _, rng| {
            let node = g.nodes[&t].clone();
            let Some(in_spec) = node.inputs.first().and_then(|s| g.spec_of(*s)).cloned() else {
                return Step::Skip;
            };
            let covered: BTreeSet<String> = snapshot
                .kind(&node.kind)
                .map(|k| k.shapes.clone())
                .unwrap_or_default();
            let want_fresh = covered.len() < n_shape;
            let shape0 = &in_spec.shape;
            if shape0[1..].iter().all(|d| *d == 0) {
                return Step::Skip;
            }
            let mut picked = None;
            for _ in 0..16 {
                let mut s = vec![shape0[0]];
                s.extend(shape0[1..].iter().map(|d| rng.gen_range(1..=(2 * d).max(1))));
                if s == *shape0 || s.iter().product::<usize>() > max_elements {
                    continue;
                }
                let key = shape_key(&s);
                let fresh = !covered.contains(&key);
                picked = Some((s, fresh));
                if fresh || !want_fresh {
                    break;
                }
            }
            let Some((new_shape, fresh)) = picked else {
                return Step::Failed("no admissible shape".into());
            };
            let original = node.output_spec().clone();
            let mut inserted = Vec::new();
            let run = |g: &mut ModelGraph, inserted: &mut Vec<NodeId>| -> Result<(), String> {
                let mut inputs = Vec::new();
                for src in &node.inputs {
                    inputs.push(crop_pad(g, *src, &new_shape, inserted)?);
                }
                g.nodes.get_mut(&t).expect("target").inputs = inputs;
                reinfer(g, t)?;
                restore_output(g, t, &original, inserted)?;
                Ok(())
            };
            match run(g, &mut inserted) {
                Ok(()) => Step::Applied(
                    vec![Choice {
                        item: DiversityItem::Shape {
                            kind: node.kind.clone(),
                            shape: shape_key(&new_shape),
                        },
                        uncovered: fresh,
                        uncovered_available: want_fresh,
                    }],
                    Vec::new(),
                ),
                Err(e) => Step::Failed(e),
            }
        })
    }

    pub fn mparam<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        targets: &[NodeId],
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let registry = self.registry;
        self.per_target(graph, targets, MutationKind::MParam, rng, |g, t, _, rng| {
            let node = g.nodes[&t].clone();
            let Ok(schema) = registry.schema(&node.kind) else {
                return Step::Skip;
            };
            let params: Vec<&ParamSpec> = schema
                .mutable_params()
                .filter(|p| p.domain().len() >= 2)
                .collect();
            if params.is_empty() {
                return Step::Skip;
            }
            let current = |p: &ParamSpec| node.params.get(&p.name).map(ParamValue::canonical);
            let has_fresh = |p: &ParamSpec| {
                let cov = covered_params(snapshot, &node.kind, &p.name);
                let cur = current(p);
                p.domain()
                    .iter()
                    .any(|v| !cov.contains(&v.canonical()) && Some(v.canonical()) != cur)
            };
            let (mut fresh, mut stale): (Vec<&ParamSpec>, Vec<&ParamSpec>) =
                params.iter().partition(|p| has_fresh(p));
            fresh.shuffle(rng);
            stale.shuffle(rng);
            let k = rng.gen_range(1..=params.len().min(3));
            let chosen: Vec<&ParamSpec> = fresh.into_iter().chain(stale).take(k).collect();
            let mut choices = Vec::new();
            let mut new_params = node.params.clone();
            for p in chosen {
                let cov = covered_params(snapshot, &node.kind, &p.name);
                let cur = current(p);
                let domain = p.domain();
                let unseen: Vec<&ParamValue> = domain
                    .iter()
                    .filter(|v| !cov.contains(&v.canonical()) && Some(v.canonical()) != cur)
                    .collect();
                let others: Vec<&ParamValue> = domain
                    .iter()
                    .filter(|v| Some(v.canonical()) != cur)
                    .collect();
                let available = !unseen.is_empty();
                let Some(v) = unseen.choose(rng).or_else(|| others.choose(rng)) else {
                    continue;
                };
                choices.push(Choice {
                    item: DiversityItem::Param {
                        kind: node.kind.clone(),
                        param: p.name.clone(),
                        value: v.canonical(),
                    },
                    uncovered: !cov.contains(&v.canonical()),
                    uncovered_available: available,
                });
                new_params.insert(p.name.clone(), (*v).clone());
            }
            if choices.is_empty() {
                return Step::Skip;
            }
            let original = node.output_spec().clone();
            g.nodes.get_mut(&t).expect("target").params = new_params;
            let mut inserted = Vec::new();
            let run = |g: &mut ModelGraph, inserted: &mut Vec<NodeId>| -> Result<(), String> {
                reinfer(g, t)?;
                restore_output(g, t, &original, inserted)?;
                Ok(())
            };
            match run(g, &mut inserted) {
                Ok(()) => Step::Applied(choices, Vec::new()),
                Err(e) => Step::Failed(e),
            }
        })
    }

    /// Feeds `src` into a fresh `kind` node, lifting the rank and growing
    /// spatial extents as far as the kind needs. Returns the new node.
    pub(crate) fn attach(
        &self,
        g: &mut ModelGraph,
        kind: &str,
        params: BTreeMap<String, ParamValue>,
        src: Source,
        inserted: &mut Vec<NodeId>,
    ) -> Result<NodeId, String> {
        let schema = self.registry.schema(kind).map_err(|e| e.to_string())?;
        let spec = g.spec_of(src).ok_or("no spec")?.clone();
        let mut cur = src;
        if !schema.accepted_input_ranks.contains(&spec.rank()) {
            let target = *schema
                .accepted_input_ranks
                .iter()
                .min_by_key(|r| (r.abs_diff(spec.rank()), **r))
                .expect("non-empty rank set");
            cur = change_rank(g, cur, target, inserted)?;
        }
        let shape = g.spec_of(cur).ok_or("no spec")?.shape.clone();
        let need = min_spatial_extent(kind, &params);
        let mut grown = shape.clone();
        for axis in spatial_axes(kind, shape.len()) {
            grown[axis] = grown[axis].max(need);
        }
        if grown != shape {
            cur = crop_pad(g, cur, &grown, inserted)?;
        }
        let arity = schema.input_arity.min;
        add_inferred(g, kind, params, vec![cur; arity], spec.dtype)
    }

    fn sampled_params<R: Rng + ?Sized>(
        &self,
        kind: &str,
        snapshot: &DiversitySnapshot,
        defaults: bool,
        rng: &mut R,
    ) -> BTreeMap<String, ParamValue> {
        let schema = self.registry.schema(kind).expect("known kind");
        let mut params = schema.default_params();
        if defaults {
            return params;
        }
        for p in schema.params.iter().filter(|p| p.kind != ParamKind::Shape) {
            let avoid = covered_params(snapshot, kind, &p.name);
            if let Ok(v) = self.registry.sample_param_value(schema, &p.name, &avoid, rng) {
                params.insert(p.name.clone(), v);
            }
        }
        params
    }

    pub fn insert_layers<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        count: usize,
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let registry = self.registry;
        let mut g = graph.clone();
        let mut touched = Vec::new();
        let mut choices = Vec::new();
        let mut last_failure = None;
        let kinds: Vec<String> = registry.compute_kinds().map(|s| s.kind.clone()).collect();
        for _ in 0..count.max(1) {
            let preds: Vec<Source> = {
                let nodes: Vec<Source> = g
                    .compute_nodes(registry)
                    .filter(|n| !n.output_spec().has_empty_extent())
                    .map(|n| Source::node(n.id))
                    .collect();
                if nodes.is_empty() {
                    (0..g.inputs.len()).map(Source::input).collect()
                } else {
                    nodes
                }
            };
            if preds.is_empty() {
                break;
            }
            let kind_of = |g: &ModelGraph, s: &Source| s.node_id().map(|id| g.nodes[&id].kind.clone());
            let valid = |a: &Option<String>, b: &str| {
                a.as_deref()
                    .is_some_and(|a| registry.valid_sequence(a, b).unwrap_or(false))
            };
            let seq_covered = |a: &str, b: &str| snapshot.sequences.contains(&(a.to_string(), b.to_string()));

            let fresh_kinds: Vec<&String> = kinds.iter().filter(|k| snapshot.kind(k).is_none()).collect();
            let (pred, kind, pair_fresh, pair_available) = if let Some(k) = fresh_kinds.choose(rng) {
                let ok: Vec<&Source> = preds.iter().filter(|p| valid(&kind_of(&g, p), k)).collect();
                let p = ok.choose(rng).copied().or_else(|| preds.choose(rng)).copied().expect("preds");
                (p, (*k).clone(), true, true)
            } else {
                let mut pairs = Vec::new();
                let mut fresh_pairs = Vec::new();
                for p in &preds {
                    let pk = kind_of(&g, p);
                    for k in &kinds {
                        if valid(&pk, k) {
                            pairs.push((*p, k.clone()));
                            if !seq_covered(pk.as_deref().unwrap_or(""), k) {
                                fresh_pairs.push((*p, k.clone()));
                            }
                        }
                    }
                }
                if let Some((p, k)) = fresh_pairs.choose(rng) {
                    (*p, k.clone(), true, true)
                } else if let Some((p, k)) = pairs.choose(rng) {
                    (*p, k.clone(), false, false)
                } else {
                    let p = *preds.choose(rng).expect("preds");
                    (p, kinds.choose(rng).expect("kinds").clone(), false, false)
                }
            };
            let pred_kind = kind_of(&g, &pred);
            let pred_spec = g.spec_of(pred).expect("inferred").clone();

            let mut done = false;
            for attempt in 0..self.config.attempts {
                let params = self.sampled_params(&kind, snapshot, attempt + 1 == self.config.attempts, rng);
                let mut scratch = g.clone();
                let mut inserted = Vec::new();
                let attempt_result = (|| -> Result<NodeId, String> {
                    let id = self.attach(&mut scratch, &kind, params.clone(), pred, &mut inserted)?;
                    let front: Vec<NodeId> = inserted.iter().copied().chain([id]).collect();
                    let before = inserted.len();
                    let repaired = adapt(&mut scratch, Source::node(id), &pred_spec, &mut inserted)?;
                    let mut keep = front;
                    keep.extend(&inserted[before..]);
                    scratch.redirect_uses(pred, repaired, &keep);
                    Ok(id)
                })();
                match attempt_result {
                    Ok(id) => {
                        g = scratch;
                        touched.push(id);
                        if valid(&pred_kind, &kind) {
                            choices.push(Choice {
                                item: DiversityItem::Sequence {
                                    from: pred_kind.clone().unwrap_or_default(),
                                    to: kind.clone(),
                                },
                                uncovered: pair_fresh,
                                uncovered_available: pair_available,
                            });
                        }
                        done = true;
                        break;
                    }
                    Err(e) => last_failure = Some(e),
                }
            }
            if !done {
                continue;
            }
        }
        if touched.is_empty() {
            return Err(match last_failure {
                Some(e) => MutationError::InvalidMutant(e),
                None => MutationError::NotApplicable("nothing to insert after".into()),
            });
        }
        self.finish(g, MutationKind::IL, touched, choices)
    }

    pub fn merge_layers<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let registry = self.registry;
        let mut by_spec: BTreeMap<TensorSpec, Vec<NodeId>> = BTreeMap::new();
        for n in graph.nodes.values() {
            let s = n.output_spec();
            if !s.has_empty_extent() {
                by_spec.entry(s.clone()).or_default().push(n.id);
            }
        }
        let mut pairs = Vec::new();
        for ids in by_spec.values() {
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    pairs.push((*a, *b));
                }
            }
        }
        if pairs.is_empty() {
            return Err(MutationError::NoMergeCandidates);
        }
        let (mut x, mut y) = *pairs.choose(rng).expect("non-empty");
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut x, &mut y);
        }
        // Route into one former use of y.
        let mut uses: Vec<Option<NodeId>> = graph
            .consumers(y)
            .into_iter()
            .filter(|c| !graph.reaches(*c, x))
            .map(Some)
            .collect();
        if graph.outputs.contains(&Source::node(y)) {
            uses.push(None);
        }
        let Some(&route) = uses.choose(rng) else {
            return Err(MutationError::NotApplicable("no acyclic route for the merge".into()));
        };

        let producers = |id: NodeId| -> Vec<String> {
            crate::coverage::compute_producers(graph, registry, Source::node(id))
                .into_iter()
                .map(|p| graph.nodes[&p].kind.clone())
                .collect()
        };
        let feeding: Vec<String> = producers(x).into_iter().chain(producers(y)).collect();
        let merging: Vec<String> = registry.merging_kinds().map(|s| s.kind.clone()).collect();
        let is_fresh = |m: &String| {
            snapshot.kind(m).is_none()
                || feeding
                    .iter()
                    .any(|a| registry.valid_sequence(a, m).unwrap_or(false) && !snapshot.sequences.contains(&(a.clone(), m.clone())))
        };
        let available = merging.iter().any(is_fresh);
        let Some((m, fresh)) = prefer_uncovered(&merging, |m| !is_fresh(m), rng) else {
            return Err(MutationError::NotApplicable("registry has no merging kind".into()));
        };

        let mut g = graph.clone();
        let spec = graph.nodes[&y].output_spec().clone();
        let mut inserted = Vec::new();
        let schema = registry.schema(m).expect("merging kind");
        let merged = add_inferred(
            &mut g,
            m,
            schema.default_params(),
            vec![Source::node(x), Source::node(y)],
            spec.dtype,
        )
        .map_err(MutationError::InvalidMutant)?;
        let out = adapt(&mut g, Source::node(merged), &spec, &mut inserted)
            .map_err(MutationError::InvalidMutant)?;
        match route {
            Some(c) => {
                for s in g.nodes.get_mut(&c).expect("consumer").inputs.iter_mut() {
                    if *s == Source::node(y) {
                        *s = out;
                    }
                }
            }
            None => {
                for s in g.outputs.iter_mut() {
                    if *s == Source::node(y) {
                        *s = out;
                        break;
                    }
                }
            }
        }
        let choices = feeding
            .iter()
            .filter(|a| registry.valid_sequence(a, m).unwrap_or(false))
            .map(|a| Choice {
                item: DiversityItem::Sequence {
                    from: a.clone(),
                    to: m.clone(),
                },
                uncovered: fresh,
                uncovered_available: available,
            })
            .collect();
        self.finish(g, MutationKind::ML, vec![merged], choices)
    }

    pub fn connect_layers<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        count: usize,
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let registry = self.registry;
        let compute: Vec<&crate::graph::LayerNode> = graph
            .compute_nodes(registry)
            .filter(|n| !n.output_spec().has_empty_extent())
            .collect();
        let mut pairs = Vec::new();
        for a in &compute {
            for b in &compute {
                if registry.valid_sequence(&a.kind, &b.kind).unwrap_or(false) {
                    pairs.push((a.id, b.id));
                }
            }
        }
        if pairs.is_empty() {
            return Err(MutationError::NotApplicable("no valid pair to connect".into()));
        }
        let kinds = |p: &(NodeId, NodeId)| (graph.nodes[&p.0].kind.clone(), graph.nodes[&p.1].kind.clone());
        let mut g = graph.clone();
        let mut touched = Vec::new();
        let mut choices = Vec::new();
        let mut last_failure = None;
        for _ in 0..count.max(1) {
            let available = pairs.iter().any(|p| !snapshot.sequences.contains(&kinds(p)));
            let Some((&(a, b), fresh)) =
                prefer_uncovered(&pairs, |p| snapshot.sequences.contains(&kinds(p)), rng)
            else {
                break;
            };
            let bnode = graph.nodes[&b].clone();
            let Some(b_in) = graph.input_specs(b).and_then(|v| v.into_iter().next()) else {
                continue;
            };
            let mut scratch = g.clone();
            let mut inserted = Vec::new();
            let result = (|| -> Result<NodeId, String> {
                let src = adapt(&mut scratch, Source::node(a), &b_in, &mut inserted)?;
                let copy = add_inferred(
                    &mut scratch,
                    &bnode.kind,
                    bnode.params.clone(),
                    vec![src; bnode.inputs.len()],
                    bnode.dtype,
                )?;
                scratch.outputs.push(Source::node(copy));
                Ok(copy)
            })();
            match result {
                Ok(copy) => {
                    g = scratch;
                    touched.push(copy);
                    let (ka, kb) = kinds(&(a, b));
                    choices.push(Choice {
                        item: DiversityItem::Sequence { from: ka, to: kb },
                        uncovered: fresh,
                        uncovered_available: available,
                    });
                }
                Err(e) => last_failure = Some(e),
            }
        }
        if touched.is_empty() {
            return Err(MutationError::InvalidMutant(
                last_failure.unwrap_or_else(|| "no connection made".into()),
            ));
        }
        self.finish(g, MutationKind::CL, touched, choices)
    }

    pub fn special_input<R: Rng + ?Sized>(
        &self,
        graph: &ModelGraph,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        let ids: Vec<NodeId> = graph.compute_nodes(self.registry).map(|n| n.id).collect();
        let Some(&t) = ids.choose(rng) else {
            return Err(MutationError::NotApplicable("graph has no compute nodes".into()));
        };
        let mut g = graph.clone();
        let node = g.nodes.get_mut(&t).expect("target");
        let values: Vec<SpecialValue> = [SpecialValue::Nan, SpecialValue::Inf, SpecialValue::NegInf]
            .into_iter()
            .filter(|v| Some(*v) != node.input_override)
            .collect();
        node.input_override = Some(*values.choose(rng).expect("non-empty"));
        self.finish(g, MutationKind::SpecialI, vec![t], Vec::new())
    }
}
