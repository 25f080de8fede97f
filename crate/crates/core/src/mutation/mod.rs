//! The eight mutation operators.
//!
//! Every operator works on a clone of the seed, prefers options that the
//! cumulative [`DiversitySnapshot`] has not seen, and repairs the graph so
//! that everything downstream of a mutated node keeps its original specs.
//! The result is re-inferred and validated; a mutant that fails is returned
//! as [`MutationError::InvalidMutant`].

mod ops;
pub(crate) mod repair;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{DiversityItem, DiversitySnapshot};
use crate::graph::{infer_specs, validate, ModelGraph, NodeId};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MutationKind {
    MDtype,
    MDims,
    MShape,
    MParam,
    IL,
    ML,
    CL,
    SpecialI,
}

impl MutationKind {
    /// Fixed order, also the tie-break order for fitness sorting.
    pub const ALL: [MutationKind; 8] = [
        MutationKind::MDtype,
        MutationKind::MDims,
        MutationKind::MShape,
        MutationKind::MParam,
        MutationKind::IL,
        MutationKind::ML,
        MutationKind::CL,
        MutationKind::SpecialI,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationKind::MDtype => "MDtype",
            MutationKind::MDims => "MDims",
            MutationKind::MShape => "MShape",
            MutationKind::MParam => "MParam",
            MutationKind::IL => "IL",
            MutationKind::ML => "ML",
            MutationKind::CL => "CL",
            MutationKind::SpecialI => "SpecialI",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).expect("listed")
    }

    /// Operators that rewrite a node's input or parameters and must
    /// restore its output spec.
    pub fn is_node_level(self) -> bool {
        matches!(
            self,
            MutationKind::MDtype | MutationKind::MDims | MutationKind::MShape | MutationKind::MParam
        )
    }
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MutationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mutation kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MutationError {
    /// A mutant was produced but does not infer or validate.
    #[error("invalid mutant: {0}")]
    InvalidMutant(String),
    #[error("no two tensors share an output spec")]
    NoMergeCandidates,
    /// The operator has nothing to act on in this graph.
    #[error("not applicable: {0}")]
    NotApplicable(String),
}

#[derive(Debug, Clone)]
pub struct MutationOutcome {
    pub mutant: ModelGraph,
    pub kind: MutationKind,
    /// Mutated targets and newly inserted compute nodes.
    pub touched: Vec<NodeId>,
    /// Options the operator chose, as diversity items.
    pub chosen: Vec<DiversityItem>,
    /// Whether each chosen option was uncovered when it was picked.
    pub chosen_uncovered: Vec<bool>,
    /// Whether an uncovered option existed for each choice.
    pub uncovered_available: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    pub n_shape: usize,
    /// Mutants with more nodes are discarded as too large to build.
    pub max_nodes: usize,
    /// Largest element count allowed for any tensor.
    pub max_elements: usize,
    /// Tries per target before it is left unchanged.
    pub attempts: usize,
    /// Upper bound on insertions/connections made by one IL or CL call.
    pub max_structural: usize,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            n_shape: 5,
            max_nodes: 120,
            max_elements: 16_384,
            attempts: 6,
            max_structural: 3,
        }
    }
}

/// Draws n uniformly from [1, 10] and picks that many distinct compute
/// nodes (all of them when fewer exist), in id order.
pub fn pick_targets<R: Rng + ?Sized>(graph: &ModelGraph, registry: &Registry, rng: &mut R) -> Vec<NodeId> {
    let n = rng.gen_range(1..=10usize);
    let compute: Vec<NodeId> = graph.compute_nodes(registry).map(|n| n.id).collect();
    let mut picked: Vec<NodeId> = compute.choose_multiple(rng, n).copied().collect();
    picked.sort();
    picked
}

/// Stateless mutation front-end bound to a registry.
#[derive(Debug, Clone, Copy)]
pub struct Mutator<'a> {
    pub registry: &'a Registry,
    pub config: MutationConfig,
}

impl<'a> Mutator<'a> {
    pub fn new(registry: &'a Registry) -> Self {
        Mutator {
            registry,
            config: MutationConfig::default(),
        }
    }

    pub fn with_config(registry: &'a Registry, config: MutationConfig) -> Self {
        Mutator { registry, config }
    }

    /// Applies `kind` with targets/counts drawn from `rng`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        kind: MutationKind,
        graph: &ModelGraph,
        snapshot: &DiversitySnapshot,
        rng: &mut R,
    ) -> Result<MutationOutcome, MutationError> {
        match kind {
            MutationKind::MDtype
            | MutationKind::MDims
            | MutationKind::MShape
            | MutationKind::MParam => {
                let targets = pick_targets(graph, self.registry, rng);
                if targets.is_empty() {
                    return Err(MutationError::NotApplicable("graph has no compute nodes".into()));
                }
                match kind {
                    MutationKind::MDtype => self.mdtype(graph, &targets, snapshot, rng),
                    MutationKind::MDims => self.mdims(graph, &targets, snapshot, rng),
                    MutationKind::MShape => self.mshape(graph, &targets, snapshot, rng),
                    _ => self.mparam(graph, &targets, snapshot, rng),
                }
            }
            MutationKind::IL => {
                let count = rng.gen_range(1..=self.config.max_structural);
                self.insert_layers(graph, count, snapshot, rng)
            }
            MutationKind::ML => self.merge_layers(graph, snapshot, rng),
            MutationKind::CL => {
                let count = rng.gen_range(1..=self.config.max_structural);
                self.connect_layers(graph, count, snapshot, rng)
            }
            MutationKind::SpecialI => self.special_input(graph, rng),
        }
    }

    /// Re-infers, validates and size-checks a finished mutant.
    fn finish(
        &self,
        mut mutant: ModelGraph,
        kind: MutationKind,
        touched: Vec<NodeId>,
        choices: Vec<Choice>,
    ) -> Result<MutationOutcome, MutationError> {
        mutant.prune_unreachable();
        infer_specs(&mut mutant, self.registry)
            .map_err(|e| MutationError::InvalidMutant(e.to_string()))?;
        if let Err(v) = validate(&mutant, self.registry) {
            return Err(MutationError::InvalidMutant(v[0].to_string()));
        }
        if mutant.nodes.len() > self.config.max_nodes {
            return Err(MutationError::InvalidMutant(format!(
                "{} nodes exceeds the size limit",
                mutant.nodes.len()
            )));
        }
        let largest = mutant
            .nodes
            .values()
            .map(|n| n.output_spec().numel())
            .chain(mutant.inputs.iter().map(|s| s.numel()))
            .max()
            .unwrap_or(0);
        if largest > self.config.max_elements {
            return Err(MutationError::InvalidMutant(format!(
                "tensor of {largest} elements exceeds the size limit"
            )));
        }
        let touched = touched
            .into_iter()
            .filter(|id| mutant.nodes.contains_key(id))
            .collect();
        Ok(MutationOutcome {
            mutant,
            kind,
            touched,
            chosen: choices.iter().map(|c| c.item.clone()).collect(),
            chosen_uncovered: choices.iter().map(|c| c.uncovered).collect(),
            uncovered_available: choices.iter().map(|c| c.uncovered_available).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Choice {
    pub item: DiversityItem,
    pub uncovered: bool,
    pub uncovered_available: bool,
}

/// Picks uniformly among `options` not in `covered`, falling back to all
/// options. Returns the pick and whether an uncovered option existed.
pub(crate) fn prefer_uncovered<'t, T, R: Rng + ?Sized>(
    options: &'t [T],
    covered: impl Fn(&T) -> bool,
    rng: &mut R,
) -> Option<(&'t T, bool)> {
    let fresh: Vec<&T> = options.iter().filter(|o| !covered(o)).collect();
    if let Some(o) = fresh.choose(rng) {
        return Some((o, true));
    }
    options.choose(rng).map(|o| (o, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kind_names_round_trip() {
        for k in MutationKind::ALL {
            assert_eq!(k.as_str().parse::<MutationKind>().unwrap(), k);
        }
    }

    #[test]
    fn prefer_uncovered_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = [1, 2, 3];
        let (v, fresh) = prefer_uncovered(&opts, |x| *x != 2, &mut rng).unwrap();
        assert_eq!((*v, fresh), (2, true));
        let (_, fresh) = prefer_uncovered(&opts, |_| true, &mut rng).unwrap();
        assert!(!fresh);
        assert!(prefer_uncovered(&[] as &[i32], |_| true, &mut rng).is_none());
    }
}
