//! Operator scheduling: mutant scores, per-operator fitness, Metropolis-Hastings
//! operator selection and the bounded model pool.

mod campaign;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::ModelGraph;
use crate::mutation::MutationKind;

pub use campaign::{
    fuzz_to_dir, load_seed, run_campaign, CampaignConfig, CampaignError, CampaignResult, Clock,
    ConfigError, RunOptions, Selection,
};

/// Fitness assumed for an operator that has produced no mutant yet.
pub const COLD_START_FITNESS: f64 = 1.0;

/// `λ·diverse + (1−λ)·branch`.
///
/// ```
/// use layerfuzz::scheduler::score;
/// assert_eq!(score(true, false, 0.5), 0.5);
/// assert_eq!(score(true, true, 0.5), 1.0);
/// ```
pub fn score(diverse: bool, branch: bool, lambda: f64) -> f64 {
    lambda * f64::from(u8::from(diverse)) + (1.0 - lambda) * f64::from(u8::from(branch))
}

/// Scores of the mutants one operator produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub scores: Vec<f64>,
}

impl OperatorStats {
    pub fn count(&self) -> usize {
        self.scores.len()
    }

    /// Mean score, or [`COLD_START_FITNESS`] with no history.
    pub fn fitness(&self) -> f64 {
        if self.scores.is_empty() {
            COLD_START_FITNESS
        } else {
            self.scores.iter().sum::<f64>() / self.scores.len() as f64
        }
    }

    pub fn push(&mut self, score: f64) {
        self.scores.push(score);
    }
}

/// Stats for all eight operators, indexed by [`MutationKind::index`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub ops: [OperatorStats; 8],
}

impl SchedulerStats {
    pub fn get(&self, kind: MutationKind) -> &OperatorStats {
        &self.ops[kind.index()]
    }

    pub fn record(&mut self, kind: MutationKind, score: f64) {
        self.ops[kind.index()].push(score);
    }

    /// Kinds by descending fitness; ties keep [`MutationKind::ALL`] order.
    pub fn sorted(&self) -> Vec<MutationKind> {
        sort_by_fitness(&MutationKind::ALL.map(|k| self.get(k).fitness()))
    }
}

/// Kinds ordered by descending `fitness[kind.index()]`, ties in fixed order.
pub fn sort_by_fitness(fitness: &[f64; 8]) -> Vec<MutationKind> {
    let mut kinds = MutationKind::ALL.to_vec();
    kinds.sort_by(|a, b| fitness[b.index()].total_cmp(&fitness[a.index()]));
    kinds
}

/// Probability of moving from sorted index `k1` to `k2` (both 1-based):
/// `min(1, (1−p)^(k2−k1))`.
///
/// ```
/// use layerfuzz::scheduler::acceptance;
/// assert_eq!(acceptance(3, 2, 0.4), 1.0);
/// assert!((acceptance(3, 4, 0.4) - 0.6).abs() < 1e-12);
/// ```
pub fn acceptance(k1: usize, k2: usize, p: f64) -> f64 {
    if k2 <= k1 {
        return 1.0;
    }
    (1.0 - p).powi((k2 - k1) as i32).min(1.0)
}

/// 1-based rank of each kind by descending fitness. Tied kinds share the
/// better rank, so equal fitness means equal acceptance.
pub fn fitness_ranks(fitness: &[f64; 8]) -> [usize; 8] {
    fitness.map(|f| 1 + fitness.iter().filter(|g| **g > f).count())
}

/// Metropolis-Hastings operator choice: propose a kind uniformly, accept it
/// with [`acceptance`] between the current rank `k1` and its rank. Returns
/// the accepted kind and its rank, which becomes the next `k1`.
pub fn select_operator<R: Rng + ?Sized>(
    stats: &SchedulerStats,
    k1: usize,
    p: f64,
    rng: &mut R,
) -> (MutationKind, usize) {
    let sorted = stats.sorted();
    let ranks = fitness_ranks(&MutationKind::ALL.map(|k| stats.get(k).fitness()));
    loop {
        let kind = sorted[rng.gen_range(0..sorted.len())];
        let k2 = ranks[kind.index()];
        if rng.gen::<f64>() < acceptance(k1, k2, p) {
            return (kind, k2);
        }
    }
}

/// Seed models mutants are drawn from. Capacity is never exceeded.
#[derive(Debug, Clone)]
pub struct ModelPool {
    members: Vec<ModelGraph>,
    capacity: usize,
}

impl ModelPool {
    pub fn new(capacity: usize) -> Self {
        ModelPool {
            members: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ModelGraph] {
        &self.members
    }

    /// Evicts a uniformly random member when full, then appends.
    pub fn insert<R: Rng + ?Sized>(&mut self, model: ModelGraph, rng: &mut R) {
        if self.members.len() >= self.capacity {
            let idx = rng.gen_range(0..self.members.len());
            self.members.remove(idx);
        }
        self.members.push(model);
    }

    /// Offers a scored mutant; only positive scores are admitted.
    pub fn offer<R: Rng + ?Sized>(&mut self, model: ModelGraph, score: f64, rng: &mut R) -> bool {
        if score > 0.0 {
            self.insert(model, rng);
            true
        } else {
            false
        }
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&ModelGraph> {
        self.members.choose(rng)
    }
}
