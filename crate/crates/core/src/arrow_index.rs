//! First stage: score every adapter on a layer by `|arrow · x|` and keep the
//! top k.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{dot, LayerLibrary, Matrix, TieBreak, TokenVector};

/// Library indices surviving the arrow filter, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub indices: Vec<usize>,
    pub arrow_scores: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    /// Every index of a library of `len` adapters, unscored.
    pub fn all(len: usize) -> Self {
        CandidateSet {
            indices: (0..len).collect(),
            arrow_scores: Vec::new(),
        }
    }
}

/// `|arrowᵢ · x|` for every row of the packed arrow matrix.
pub fn arrow_scores(x: &TokenVector, arrows: &Matrix) -> Result<Vec<f64>> {
    if x.len() != arrows.cols() {
        return Err(Error::Shape(format!(
            "token of length {} against arrows of length {}",
            x.len(),
            arrows.cols()
        )));
    }
    let x = x.as_slice();
    Ok((0..arrows.rows()).map(|i| dot(arrows.row(i), x).abs()).collect())
}

/// Scores a batch of tokens against one layer. Row `t` equals
/// `arrow_scores(&xs[t], arrows)` exactly.
pub fn arrow_scores_batch(xs: &[TokenVector], arrows: &Matrix, exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.try_map(xs, |x| arrow_scores(x, arrows))
}

fn rank_order(scores: &[f64], tie: TieBreak) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&i, &j| {
        let by_score = scores[j].total_cmp(&scores[i]);
        match tie {
            TieBreak::LowestIndex => by_score.then(i.cmp(&j)),
        }
    }
}

/// The `min(k, len)` highest scores, descending; exact ties go to the lower
/// index.
pub fn topk(scores: &[f64], k: usize, tie: TieBreak) -> CandidateSet {
    let k = k.min(scores.len());
    if k == 0 {
        return CandidateSet::default();
    }
    let order = rank_order(scores, tie);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if scores.len() > 4 * k {
        idx.select_nth_unstable_by(k - 1, &order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&order);
    idx.truncate(k);
    CandidateSet {
        arrow_scores: idx.iter().map(|&i| scores[i]).collect(),
        indices: idx,
    }
}

/// Parameters held by a layer's arrow index: `n_adapters · n`.
pub fn arrow_storage_params(layer: &LayerLibrary) -> usize {
    layer.arrows().rows() * layer.arrows().cols()
}
