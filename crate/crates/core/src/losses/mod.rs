//! Training criteria: AAM-softmax, the teacher-student PIT loss and the
//! AAM+PIT baseline.
//!
//! Permutation `π` maps target `k` to output slot `π[k]`. A cost matrix
//! `M[k][j]` is the cost of explaining target `k` with slot `j`, and the cost
//! of `π` is `Σ_k M[k][π[k]]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AamHead;
use crate::tensorcore::{Real, Tape, Tensor, Var};

/// Largest speaker count handled by the exhaustive assignment search.
pub const MAX_PIT_SPEAKERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Permutation((0..k).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Permutation> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Permutation>) {
        if prefix.len() == used.len() {
            out.push(Permutation(prefix.clone()));
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("PIT needs at least one speaker".into()));
    }
    if k > MAX_PIT_SPEAKERS {
        return Err(Error::Unsupported(format!(
            "exhaustive PIT supports K <= {MAX_PIT_SPEAKERS}, got K = {k}"
        )));
    }
    Ok(())
}

/// Minimum-cost assignment by exhaustive search. Ties go to the
/// lexicographically smallest permutation.
pub fn pit_assign(cost: &[Vec<f64>]) -> Result<(Permutation, f64)> {
    let k = cost.len();
    check_k(k)?;
    if cost.iter().any(|r| r.len() != k) {
        return Err(Error::shape("pit_assign", "cost matrix is not square"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pit_assign" });
    }
    let mut best: Option<(Permutation, f64)> = None;
    for p in permutations(k) {
        let c: f64 = p.0.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().map_or(true, |(_, b)| c < *b) {
            best = Some((p, c));
        }
    }
    Ok(best.expect("k >= 1 yields at least one permutation"))
}

/// Whether the permutation is chosen per frame (tPIT) or once per utterance (uPIT).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitScope {
    Frame,
    Utterance,
}

/// A differentiable loss together with the assignments that produced it.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub var: Var,
    /// Normalized loss, `total / (K·N)`.
    pub value: f64,
    /// Sum of the selected costs before normalization.
    pub total: f64,
    /// One permutation per frame for tPIT, a single one for uPIT.
    pub assignments: Vec<Permutation>,
}

/// Selects per-frame (or per-utterance) assignments on an `N×K×K` cost
/// tensor and returns the normalized sum of the selected entries.
fn select<T: Real>(tape: &mut Tape<T>, costs: Var, n: usize, k: usize, scope: PitScope) -> Result<LossValue> {
    let c: Vec<f64> = tape.value(costs).data().iter().map(|v| v.as_f64()).collect();
    let matrix = |rows: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..k).map(|i| (0..k).map(|j| rows(i, j)).collect()).collect()
    };
    let mut index = Vec::with_capacity(n * k);
    let mut assignments = Vec::new();
    match scope {
        PitScope::Frame => {
            for t in 0..n {
                let (p, _) = pit_assign(&matrix(&|i, j| c[(t * k + i) * k + j]))?;
                index.extend(p.0.iter().enumerate().map(|(i, &j)| (t * k + i) * k + j));
                assignments.push(p);
            }
        }
        PitScope::Utterance => {
            let summed = matrix(&|i, j| (0..n).map(|t| c[(t * k + i) * k + j]).sum());
            let (p, _) = pit_assign(&summed)?;
            for t in 0..n {
                index.extend(p.0.iter().enumerate().map(|(i, &j)| (t * k + i) * k + j));
            }
            assignments.push(p);
        }
    }
    let total: f64 = index.iter().map(|&i| c[i]).sum();
    let picked = tape.gather(costs, index)?;
    let s = tape.sum(picked)?;
    let norm = 1.0 / (k * n) as f64;
    let var = tape.scale(s, T::of(norm))?;
    Ok(LossValue {
        var,
        value: tape.value(var).item()?.as_f64(),
        total,
        assignments,
    })
}

fn dims<T: Real>(tape: &Tape<T>, targets: Var, frames: Var) -> Result<(usize, usize, usize)> {
    let (k, e) = match tape.value(targets).shape() {
        [k, e] => (*k, *e),
        s => return Err(Error::shape("ts_loss", format!("targets {s:?} are not K x E"))),
    };
    let (n, ke) = match tape.value(frames).shape() {
        [n, ke] => (*n, *ke),
        s => return Err(Error::shape("ts_loss", format!("student output {s:?} is not T x KE"))),
    };
    if ke != k * e {
        return Err(Error::shape(
            "ts_loss",
            format!("{k} targets of dimension {e} vs student output width {ke}"),
        ));
    }
    check_k(k)?;
    Ok((n, k, e))
}

/// Teacher-student loss `1/(KT) Σ_t min_π Σ_k ‖d_k − d̂_{π_k}(t)‖²` (frame
/// scope) or its utterance-permutation variant.
///
/// `targets` is `K×E`, `frames` is `T×(K·E)`. Passing pooled student
/// embeddings as a single frame gives the utterance-level loss.
pub fn ts_loss_on<T: Real>(tape: &mut Tape<T>, targets: Var, frames: Var, scope: PitScope) -> Result<LossValue> {
    let (n, k, _) = dims(tape, targets, frames)?;
    let d = tape.pairwise_sq_dist(frames, targets)?;
    select(tape, d, n, k, scope)
}

/// [`ts_loss_on`] on plain tensors, returning the normalized value and assignments.
pub fn ts_loss<T: Real>(targets: &Tensor<T>, frames: &Tensor<T>, scope: PitScope) -> Result<(f64, Vec<Permutation>)> {
    let mut tape = Tape::new();
    let t = tape.constant(targets.clone())?;
    let f = tape.constant(frames.clone())?;
    let l = ts_loss_on(&mut tape, t, f, scope)?;
    Ok((l.value, l.assignments))
}

/// Per-row AAM-softmax cross-entropy of `emb` (`N×E`) against prototype rows
/// of `weights` (`C×E`), as an `N` vector.
pub fn aam_loss_on<T: Real>(
    tape: &mut Tape<T>,
    emb: Var,
    weights: Var,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<Var> {
    let n = match tape.value(emb).shape() {
        [n, _] => *n,
        [_] => 1,
        s => return Err(Error::shape("aam_loss", format!("embeddings {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape("aam_loss", format!("{} labels for {n} embeddings", labels.len())));
    }
    let cos = AamHead::cosines_on(tape, emb, weights)?;
    let pairs = labels.iter().enumerate().map(|(i, &c)| (i, c)).collect();
    tape.aam_ce(cos, pairs, T::of(scale), T::of(margin))
}

/// AAM-softmax loss of one embedding with label `c`.
pub fn aam_loss<T: Real>(d: &[T], label: usize, head: &AamHead<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::new(vec![1, d.len()], d.to_vec())?)?;
    let w = tape.constant(head.weights.clone())?;
    let l = aam_loss_on(&mut tape, e, w, &[label], head.scale, head.margin)?;
    Ok(tape.value(l).data()[0].as_f64())
}

/// AAM-softmax with PIT: the cost of target `k` on slot `j` is the AAM loss
/// of slot `j`'s embedding for label `labels[k]`.
///
/// `outputs` is `N×(K·E)`: student frames (`N = T`) or pooled embeddings
/// (`N = 1`). The selected costs are normalized by `K·N`.
pub fn aam_pit_loss_on<T: Real>(
    tape: &mut Tape<T>,
    outputs: Var,
    weights: Var,
    labels: &[usize],
    scale: f64,
    margin: f64,
    scope: PitScope,
) -> Result<LossValue> {
    let k = labels.len();
    check_k(k)?;
    let (n, ke) = match tape.value(outputs).shape() {
        [n, ke] => (*n, *ke),
        s => return Err(Error::shape("aam_pit_loss", format!("outputs {s:?} are not N x KE"))),
    };
    if ke % k != 0 {
        return Err(Error::shape("aam_pit_loss", format!("width {ke} is not a multiple of K = {k}")));
    }
    let e = ke / k;
    let rows = tape.reshape(outputs, &[n * k, e])?;
    let cos = AamHead::cosines_on(tape, rows, weights)?;
    let classes = tape.value(cos).shape()[1];
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of {classes} classes")));
    }
    let mut pairs = Vec::with_capacity(n * k * k);
    for t in 0..n {
        for &label in labels {
            for j in 0..k {
                pairs.push((t * k + j, label));
            }
        }
    }
    let costs = tape.aam_ce(cos, pairs, T::of(scale), T::of(margin))?;
    select(tape, costs, n, k, scope)
}
