//! Trial scoring on embedding lists.

use crate::error::{Error, Result};
use crate::tensorcore::cosine;

fn cos(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine(&a, &b)
}

/// `|a|×|b|` cosine similarity matrix.
pub fn cosine_matrix(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("both trial sides need at least one embedding".into()));
    }
    a.iter().map(|x| b.iter().map(|y| cos(x, y)).collect()).collect()
}

/// Maximum pairwise cosine between the two sides.
pub fn score_any_spk(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    Ok(cosine_matrix(a, b)?
        .into_iter()
        .flatten()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Greedy disjoint pairing on a square similarity matrix: repeatedly takes
/// the largest remaining entry (ties to the smallest `(row, col)`) and removes
/// its row and column. The first `n_shared` picks are labelled targets.
pub fn greedy_pairs(m: &[Vec<f64>], n_shared: usize) -> Result<Vec<(f64, bool)>> {
    let k = m.len();
    if m.iter().any(|r| r.len() != k) {
        return Err(Error::shape("score_per_spk", "sides have different embedding counts"));
    }
    if n_shared > k {
        return Err(Error::InvalidArgument(format!("n_shared {n_shared} exceeds K = {k}")));
    }
    let mut row_used = vec![false; k];
    let mut col_used = vec![false; k];
    let mut out = Vec::with_capacity(k);
    for pick in 0..k {
        let mut best: Option<(usize, usize)> = None;
        for r in (0..k).filter(|&r| !row_used[r]) {
            for c in (0..k).filter(|&c| !col_used[c]) {
                if best.map_or(true, |(br, bc)| m[r][c] > m[br][bc]) {
                    best = Some((r, c));
                }
            }
        }
        let (r, c) = best.expect("one free row and column remain");
        row_used[r] = true;
        col_used[c] = true;
        out.push((m[r][c], pick < n_shared));
    }
    Ok(out)
}

/// K scored decisions for a mixture-vs-mixture trial.
pub fn score_per_spk(a: &[Vec<f32>], b: &[Vec<f32>], n_shared: usize) -> Result<Vec<(f64, bool)>> {
    if a.len() != b.len() {
        return Err(Error::shape("score_per_spk", format!("{} vs {} embeddings", a.len(), b.len())));
    }
    greedy_pairs(&cosine_matrix(a, b)?, n_shared)
}
