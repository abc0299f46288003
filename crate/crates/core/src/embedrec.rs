//! Decoding without the embedding table when the LM head is tied.
//!
//! The server holds the permuted head `pi_d W^T pi_V` and sees permuted
//! input rows `e pi`. Matching sorted input rows against sorted head
//! columns identifies the relative permutation between `pi_d` and `pi`,
//! which turns the head into the server's own permuted embedding table.
//! The attack then runs on the transformed model with that table, and
//! yields tokens relabeled by `pi_V`.

use serde::{Deserialize, Serialize};

use crate::attack::{decode, AttackConfig, DecodeResult, ProposalSource};
use crate::capture::HiddenCapture;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::numerics::{l1_unchecked, sorted_copy, Matrix};
use crate::permutation::Permutation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredVocab {
    /// `r` with `apply(r, column) == observed row`.
    pub relative: Permutation,
    /// Recovered table, `V x d`: row `u` is head column `u` gathered by `r`.
    pub table: Matrix,
    /// Head column matched by each observation.
    pub matched_columns: Vec<usize>,
}

impl RecoveredVocab {
    /// The recovered table laid out like the head, `d x V`.
    pub fn permuted_head(&self) -> Matrix {
        self.table.transpose()
    }
}

fn sorted_match(
    columns: &[Vec<f32>],
    sorted_cols: &[Vec<f32>],
    e: &[f32],
    tol: f32,
    index: usize,
) -> Result<usize> {
    let target = sorted_copy(e);
    let hits: Vec<usize> = sorted_cols
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            if tol == 0.0 {
                c.iter()
                    .zip(&target)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            } else {
                l1_unchecked(c, &target) <= tol
            }
        })
        .map(|(u, _)| u)
        .collect();
    match hits.len() {
        0 => Err(Error::NoSortedMatch { index }),
        1 => Ok(hits[0]),
        count => {
            // equal sorted columns are only harmless if they are equal columns
            if hits.iter().all(|&u| columns[u] == columns[hits[0]]) {
                Ok(hits[0])
            } else {
                Err(Error::AmbiguousMatch { index, count })
            }
        }
    }
}

/// Index permutation sending `column` onto `observed` by value rank.
fn align(column: &[f32], observed: &[f32]) -> Vec<usize> {
    let mut by_col: Vec<usize> = (0..column.len()).collect();
    by_col.sort_by(|&a, &b| column[a].total_cmp(&column[b]).then(a.cmp(&b)));
    let mut by_obs: Vec<usize> = (0..observed.len()).collect();
    by_obs.sort_by(|&a, &b| observed[a].total_cmp(&observed[b]).then(a.cmp(&b)));
    let mut r = vec![0usize; column.len()];
    for (&i, &j) in by_obs.iter().zip(&by_col) {
        r[i] = j;
    }
    r
}

/// Recovers `r = pi_d^-1 . pi` from the `d x V` permuted head and observed
/// permuted input rows. `tol = 0` demands exact sorted matches.
pub fn recover_relative_perm(
    head: &Matrix,
    observed: &[Vec<f32>],
    tol: f32,
) -> Result<RecoveredVocab> {
    if observed.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (d, v) = head.shape();
    if let Some(bad) = observed.iter().find(|e| e.len() != d) {
        return Err(Error::Dimension(format!(
            "observed row of width {}, head has {d}",
            bad.len()
        )));
    }
    let table_cols = head.transpose();
    let columns: Vec<Vec<f32>> = table_cols.iter_rows().map(<[f32]>::to_vec).collect();
    let sorted_cols: Vec<Vec<f32>> = columns.iter().map(|c| sorted_copy(c)).collect();

    let mut relative: Option<Vec<usize>> = None;
    let mut matched = Vec::with_capacity(observed.len());
    for (index, e) in observed.iter().enumerate() {
        let u = sorted_match(&columns, &sorted_cols, e, tol, index)?;
        let r = align(&columns[u], e);
        match &relative {
            None => relative = Some(r),
            Some(prev) if *prev == r => {}
            Some(_) => return Err(Error::InconsistentRecovery),
        }
        matched.push(u);
    }
    let relative = Permutation::new(relative.expect("at least one observation"))?;
    for (e, &u) in observed.iter().zip(&matched) {
        let rebuilt = relative.apply(&columns[u]);
        let ok = if tol == 0.0 {
            rebuilt == *e
        } else {
            l1_unchecked(&rebuilt, e) <= tol
        };
        if !ok {
            return Err(Error::InconsistentRecovery);
        }
    }
    let mut table = Matrix::zeros(v, d);
    for (u, col) in columns.iter().enumerate() {
        relative.apply_into(col, table.row_mut(u));
    }
    Ok(RecoveredVocab {
        relative,
        table,
        matched_columns: matched,
    })
}

/// Runs the attack on the transformed model with only the recovered table
/// standing in for its embedding. Output ids are `pi_V`-relabeled.
pub fn attack_without_embedding_table(
    transformed: &ModelWeights,
    recovered: &RecoveredVocab,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<DecodeResult> {
    let attacker = transformed.with_embedding(recovered.table.clone())?;
    decode(&attacker, capture, cfg, proposal)
}

/// Maps relabeled ids `u` back to true tokens `pi_V[u]`.
pub fn unmap_tokens(tokens: &[TokenId], pi_v: &Permutation) -> Vec<TokenId> {
    tokens
        .iter()
        .map(|&u| pi_v.at(u as usize) as TokenId)
        .collect()
}
