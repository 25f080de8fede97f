//! Cross-backend comparison.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{default_inputs, ModelGraph};
use crate::rng::derive_u64;
use crate::tensor::ValueTensor;

use super::{run_once, Backend, Failure};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DmadError {
    #[error("output lengths differ: {0}, {1} and label {2}")]
    LengthMismatch(usize, usize, usize),
}

/// Relative change of the mean absolute deviation from `o`:
/// `|dY - dY'| / (dY + dY')` with `dY = mean |Y - O|`, and 0 when both
/// deviations are 0.
///
/// ```
/// use layerfuzz::difftest::d_mad;
/// let o = [0.0, 1.0];
/// assert_eq!(d_mad(&[0.0, 1.0], &[0.0, 1.0], &o).unwrap(), 0.0);
/// let v = d_mad(&[0.5, 1.0], &[1.0, 1.0], &o).unwrap();
/// assert!((v - 1.0 / 3.0).abs() < 1e-12);
/// ```
pub fn d_mad(y: &[f64], y2: &[f64], o: &[f64]) -> Result<f64, DmadError> {
    if y.len() != y2.len() || y.len() != o.len() {
        return Err(DmadError::LengthMismatch(y.len(), y2.len(), o.len()));
    }
    let n = y.len().max(1) as f64;
    let dev = |v: &[f64]| v.iter().zip(o).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (a, b) = (dev(y), dev(y2));
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok((a - b).abs() / (a + b))
}

/// Flattens every output, zero-pads to the longest and sums elementwise.
pub fn collapse_outputs(outputs: &[ValueTensor]) -> Vec<f64> {
    let len = outputs.iter().map(|t| t.data.len()).max().unwrap_or(0);
    let mut acc = vec![0.0; len];
    for t in outputs {
        for (a, v) in acc.iter_mut().zip(&t.data) {
            *a += v;
        }
    }
    acc
}

/// One-hot label of length `len` at a position derived from `seed`.
pub fn pseudo_label(seed: u64, len: usize) -> Vec<f64> {
    let mut o = vec![0.0; len];
    if len > 0 {
        o[(derive_u64(seed, "label") % len as u64) as usize] = 1.0;
    }
    o
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Pass,
    /// Some backends fail while others succeed.
    Crash,
    /// Some backends produce NaN while others do not.
    Nan,
    /// All finite but outputs disagree beyond the threshold.
    Inconsistency,
    /// Every backend fails; counted, not reported.
    Invalid,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Pass => "pass",
            VerdictKind::Crash => "crash",
            VerdictKind::Nan => "nan",
            VerdictKind::Inconsistency => "inconsistency",
            VerdictKind::Invalid => "invalid",
        }
    }

    pub fn is_bug(self) -> bool {
        matches!(self, VerdictKind::Crash | VerdictKind::Nan | VerdictKind::Inconsistency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BackendOutcome {
    Ok {
        backend: String,
        has_nan: bool,
        all_finite: bool,
    },
    Failed {
        backend: String,
        failure: Failure,
    },
}

impl BackendOutcome {
    pub fn backend(&self) -> &str {
        match self {
            BackendOutcome::Ok { backend, .. } | BackendOutcome::Failed { backend, .. } => backend,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub outcomes: Vec<BackendOutcome>,
    /// Largest pairwise D_MAD, when every backend finished finitely.
    pub d_mad: Option<f64>,
    /// Union of behavior paths over all backends.
    pub behavior: BTreeSet<String>,
    pub work: u64,
    /// Outputs per backend, `None` where it failed.
    pub outputs: Vec<Option<Vec<ValueTensor>>>,
}

impl Verdict {
    pub fn failures(&self) -> impl Iterator<Item = (&str, &Failure)> {
        self.outcomes.iter().filter_map(|o| match o {
            BackendOutcome::Failed { backend, failure } => Some((backend.as_str(), failure)),
            _ => None,
        })
    }
}

/// Whether NaNs sit at different positions in two output lists. Lists that
/// differ in shape are compared by whether they contain any NaN.
fn nan_mismatch(a: &[ValueTensor], b: &[ValueTensor]) -> bool {
    let any = |o: &[ValueTensor]| o.iter().any(ValueTensor::has_nan);
    let same_shapes = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
    if !same_shapes {
        return any(a) != any(b);
    }
    a.iter()
        .zip(b)
        .any(|(x, y)| x.data.iter().zip(&y.data).any(|(u, v)| u.is_nan() != v.is_nan()))
}

/// Runs `graph` on every backend with its default inputs and classifies
/// the result.
pub fn run_differential(graph: &ModelGraph, backends: &mut [Box<dyn Backend>], threshold: f64) -> Verdict {
    let inputs = default_inputs(graph);
    let mut outcomes = Vec::new();
    let mut outputs = Vec::new();
    let mut behavior = BTreeSet::new();
    let mut work = 0;
    for b in backends.iter_mut() {
        let id = b.id();
        match run_once(b.as_mut(), graph, &inputs) {
            Ok(exec) => {
                behavior.extend(exec.behavior);
                work += exec.work;
                outcomes.push(BackendOutcome::Ok {
                    backend: id,
                    has_nan: exec.outputs.iter().any(ValueTensor::has_nan),
                    all_finite: exec.outputs.iter().all(ValueTensor::all_finite),
                });
                outputs.push(Some(exec.outputs));
            }
            Err(failure) => {
                outcomes.push(BackendOutcome::Failed { backend: id, failure });
                outputs.push(None);
            }
        }
    }
    let mut verdict = Verdict {
        kind: VerdictKind::Pass,
        outcomes,
        d_mad: None,
        behavior,
        work,
        outputs,
    };
    let ok: Vec<usize> = (0..verdict.outputs.len()).filter(|i| verdict.outputs[*i].is_some()).collect();
    if ok.is_empty() {
        verdict.kind = VerdictKind::Invalid;
        return verdict;
    }
    if ok.len() < verdict.outputs.len() {
        verdict.kind = VerdictKind::Crash;
        return verdict;
    }
    let outs: Vec<&[ValueTensor]> = verdict.outputs.iter().map(|o| o.as_deref().unwrap_or(&[])).collect();
    let nan = (0..outs.len()).any(|i| (i + 1..outs.len()).any(|j| nan_mismatch(outs[i], outs[j])));
    if nan {
        verdict.kind = VerdictKind::Nan;
        return verdict;
    }
    let finite = verdict
        .outcomes
        .iter()
        .all(|o| matches!(o, BackendOutcome::Ok { all_finite: true, .. }));
    if !finite {
        return verdict;
    }
    let collapsed: Vec<Vec<f64>> = verdict
        .outputs
        .iter()
        .map(|o| collapse_outputs(o.as_deref().unwrap_or(&[])))
        .collect();
    let o = pseudo_label(graph.weight_seed, collapsed[0].len());
    let mut worst: f64 = 0.0;
    for i in 0..collapsed.len() {
        for j in i + 1..collapsed.len() {
            // Differing output lengths are maximal disagreement.
            let d = d_mad(&collapsed[i], &collapsed[j], &o).unwrap_or(1.0);
            worst = worst.max(d);
        }
    }
    verdict.d_mad = Some(worst);
    if worst > threshold {
        verdict.kind = VerdictKind::Inconsistency;
    }
    verdict
}
