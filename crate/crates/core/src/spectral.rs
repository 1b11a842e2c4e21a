//! Second stage: rerank candidates by `‖A* x‖₂` and keep the projection for
//! adapter application.

use crate::arrow_index::CandidateSet;
use crate::error::{Error, Result};
use crate::types::{AlignedAdapter, LayerLibrary, TieBreak, TokenVector};

/// The winning adapter on one layer for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub adapter_index: usize,
    pub spectr_score: f64,
    /// `A* x` of the winner, reused when the adapter is applied.
    pub projected: Vec<f64>,
}

/// `(‖A* x‖₂, A* x)`.
pub fn spectr_score(adapter: &AlignedAdapter, x: &TokenVector) -> Result<(f64, Vec<f64>)> {
    if x.len() != adapter.n() {
        return Err(Error::Shape(format!(
            "token of length {} against adapter `{}` with input dimension {}",
            x.len(),
            adapter.id,
            adapter.n()
        )));
    }
    let projected = adapter.a_star.matvec(x.as_slice())?;
    let score = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((score, projected))
}

/// Picks the candidate with the largest spectral score. Also returns the
/// scores in candidate order.
pub fn rerank_scored(
    candidates: &CandidateSet,
    layer: &LayerLibrary,
    x: &TokenVector,
    tie: TieBreak,
) -> Result<(Selection, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Routing("empty candidate set".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<Selection> = None;
    for &idx in &candidates.indices {
        let adapter = layer.adapters().get(idx).ok_or_else(|| {
            Error::Routing(format!("candidate index {idx} outside a layer of {}", layer.len()))
        })?;
        let (score, projected) = spectr_score(adapter, x)?;
        scores.push(score);
        let wins = match &best {
            None => true,
            Some(b) => match tie {
                TieBreak::LowestIndex => {
                    score > b.spectr_score || (score == b.spectr_score && idx < b.adapter_index)
                }
            },
        };
        if wins {
            best = Some(Selection {
                adapter_index: idx,
                spectr_score: score,
                projected,
            });
        }
    }
    Ok((best.expect("non-empty candidates"), scores))
}

pub fn rerank(
    candidates: &CandidateSet,
    layer: &LayerLibrary,
    x: &TokenVector,
    tie: TieBreak,
) -> Result<Selection> {
    rerank_scored(candidates, layer, x, tie).map(|(s, _)| s)
}
