//! Contrastive objectives and their gradients.
//!
//! Everything here is expressed over similarity entries `S(i, j)` between
//! anchor unit `i` and clip `j`. The sequence score of a candidate is the
//! summed (optionally length-normalized) similarity along its minimum-cost
//! alignment path; gradients hold that path fixed, which is exact wherever
//! the optimal path is unique.

use std::ops::Range;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::align::{align_similarity, AlignmentResult, Measure};
use crate::error::{Error, Result};
use crate::negatives::NegativePermutation;
use crate::seqcore::{normalize_rows, similarity_of_units, EmbeddingSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub w_unit: f64,
    pub w_seq: f64,
    pub normalize_score: bool,
    pub measure: Measure,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            w_unit: 0.3,
            w_seq: 0.7,
            normalize_score: true,
            measure: Measure::Dtw,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.w_unit >= 0.0 && self.w_seq >= 0.0 && self.w_unit + self.w_seq > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative with a positive sum, got ({}, {})",
                self.w_unit, self.w_seq
            )));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )))
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// InfoNCE value plus `dL/dscore` for the positive and each negative.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

/// `-log(exp(pos/τ) / (exp(pos/τ) + Σ exp(neg/τ)))` with its score gradient.
pub fn infonce(pos: f64, negs: &[f64], tau: f64) -> Result<InfoNce> {
    check_tau(tau)?;
    if !pos.is_finite() || negs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("InfoNCE scores".into()));
    }
    let logits = std::iter::once(pos)
        .chain(negs.iter().copied())
        .map(|s| s / tau);
    let lse = log_sum_exp(logits.clone());
    let loss = (lse - pos / tau).max(0.0);
    let d_pos = ((pos / tau - lse).exp() - 1.0) / tau;
    let d_negs = negs.iter().map(|&n| (n / tau - lse).exp() / tau).collect();
    Ok(InfoNce {
        loss,
        d_pos,
        d_negs,
    })
}

pub fn unit_infonce(pos_score: f64, neg_scores: &[f64], tau: f64) -> Result<f64> {
    Ok(infonce(pos_score, neg_scores, tau)?.loss)
}

/// One scored sequence: rows and columns of a similarity source, reordered.
/// `rows: None` keeps the anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub source: usize,
    pub rows: Option<Vec<usize>>,
    pub cols: Vec<usize>,
}

impl Candidate {
    pub fn identity(source: usize, n_cols: usize) -> Self {
        Self {
            source,
            rows: None,
            cols: (0..n_cols).collect(),
        }
    }

    fn view(&self, sims: &[Array2<f64>]) -> Result<Array2<f64>> {
        let s = sims.get(self.source).ok_or_else(|| {
            Error::InvalidArgument(format!("candidate source {} out of range", self.source))
        })?;
        let (rows, cols) = s.dim();
        if self.cols.iter().any(|&j| j >= cols)
            || self
                .rows
                .as_ref()
                .is_some_and(|r| r.iter().any(|&i| i >= rows))
        {
            return Err(Error::InvalidArgument(
                "candidate index out of range".into(),
            ));
        }
        let by_cols = s.select(Axis(1), &self.cols);
        Ok(match &self.rows {
            Some(r) => by_cols.select(Axis(0), r),
            None => by_cols,
        })
    }

    fn source_cell(&self, i: usize, j: usize) -> (usize, usize) {
        let row = self.rows.as_ref().map_or(i, |r| r[i]);
        (row, self.cols[j])
    }
}

#[derive(Clone, Debug)]
pub struct SeqOutcome {
    pub loss: f64,
    /// Positive first, then negatives in input order.
    pub scores: Vec<f64>,
    pub alignments: Vec<AlignmentResult>,
}

/// Sequence InfoNCE over precomputed similarity sources. `candidates[0]` is
/// the positive; with no negatives the loss is 0.
pub fn seq_infonce_sims(
    sims: &[Array2<f64>],
    candidates: &[Candidate],
    cfg: &LossConfig,
) -> Result<SeqOutcome> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::Empty("no positive candidate".into()));
    }
    let alignments = candidates
        .iter()
        .map(|c| align_similarity(&c.view(sims)?, cfg.measure, cfg.normalize_score))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = alignments.iter().map(|a| a.score).collect();
    let loss = unit_infonce(scores[0], &scores[1..], cfg.tau)?;
    Ok(SeqOutcome {
        loss,
        scores,
        alignments,
    })
}

#[derive(Clone, Debug)]
pub struct SeqGradient {
    pub loss: f64,
    pub scores: Vec<f64>,
    /// `(i, j, dL/dS)` per candidate, in that candidate's own coordinates.
    pub entries: Vec<Vec<(usize, usize, f64)>>,
    /// Gradients accumulated back onto each similarity source.
    pub by_source: Vec<Array2<f64>>,
}

/// Fixed-path gradient of [`seq_infonce_sims`] with respect to every
/// similarity entry.
pub fn seq_infonce_grad_sims(
    sims: &[Array2<f64>],
    candidates: &[Candidate],
    cfg: &LossConfig,
) -> Result<SeqGradient> {
    let outcome = seq_infonce_sims(sims, candidates, cfg)?;
    let nce = infonce(outcome.scores[0], &outcome.scores[1..], cfg.tau)?;
    let mut by_source: Vec<Array2<f64>> = sims.iter().map(|s| Array2::zeros(s.dim())).collect();
    let mut entries = Vec::with_capacity(candidates.len());
    for (k, (cand, result)) in candidates.iter().zip(&outcome.alignments).enumerate() {
        let d_score = if k == 0 { nce.d_pos } else { nce.d_negs[k - 1] };
        let per_cell = if cfg.normalize_score {
            d_score / result.path.len() as f64
        } else {
            d_score
        };
        let mut cells = Vec::with_capacity(result.path.len());
        for &(i, j) in &result.path {
            cells.push((i, j, per_cell));
            by_source[cand.source][cand.source_cell(i, j)] += per_cell;
        }
        entries.push(cells);
    }
    Ok(SeqGradient {
        loss: outcome.loss,
        scores: outcome.scores,
        entries,
        by_source,
    })
}

/// Source sequences and candidates for a positive and its negatives.
/// Source 0 is `positive`; borrowed videos follow in first-use order.
pub fn build_candidates<'a>(
    positive: &'a EmbeddingSequence,
    negs: &[NegativePermutation],
    others: &[(&str, &'a EmbeddingSequence)],
) -> Result<(Vec<&'a EmbeddingSequence>, Vec<Candidate>)> {
    let mut sources = vec![positive];
    let mut source_ids: Vec<&str> = vec![];
    let mut candidates = vec![Candidate::identity(0, positive.len())];
    for neg in negs {
        let cand = if neg.permutes_anchor() {
            Candidate {
                source: 0,
                rows: Some(neg.perm.clone()),
                cols: (0..positive.len()).collect(),
            }
        } else if neg.strategy == crate::negatives::Strategy::Unpaired {
            let idx = match source_ids.iter().position(|&s| s == neg.source_id) {
                Some(p) => p + 1,
                None => {
                    let &(id, seq) = others
                        .iter()
                        .find(|(id, _)| *id == neg.source_id)
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "unpaired source `{}` not provided",
                                neg.source_id
                            ))
                        })?;
                    sources.push(seq);
                    source_ids.push(id);
                    sources.len() - 1
                }
            };
            Candidate {
                source: idx,
                rows: None,
                cols: neg.perm.clone(),
            }
        } else {
            Candidate {
                source: 0,
                rows: None,
                cols: neg.perm.clone(),
            }
        };
        candidates.push(cand);
    }
    Ok((sources, candidates))
}

fn source_sims(
    anchor: &EmbeddingSequence,
    sources: &[&EmbeddingSequence],
) -> Result<Vec<Array2<f64>>> {
    sources
        .iter()
        .map(|s| crate::seqcore::similarity_matrix(anchor, s))
        .collect()
}

/// Sequence InfoNCE for `anchor` against `positive` (segment-covered clips)
/// and materialized negatives. `others` supplies borrowed videos by id.
pub fn seq_infonce(
    anchor: &EmbeddingSequence,
    positive: &EmbeddingSequence,
    negs: &[NegativePermutation],
    others: &[(&str, &EmbeddingSequence)],
    cfg: &LossConfig,
) -> Result<SeqOutcome> {
    let (sources, candidates) = build_candidates(positive, negs, others)?;
    seq_infonce_sims(&source_sims(anchor, &sources)?, &candidates, cfg)
}

pub fn seq_infonce_grad(
    anchor: &EmbeddingSequence,
    positive: &EmbeddingSequence,
    negs: &[NegativePermutation],
    others: &[(&str, &EmbeddingSequence)],
    cfg: &LossConfig,
) -> Result<SeqGradient> {
    let (sources, candidates) = build_candidates(positive, negs, others)?;
    seq_infonce_grad_sims(&source_sims(anchor, &sources)?, &candidates, cfg)
}

/// Per-caption InfoNCE inside one video: caption `i` scores its own segment
/// (mean similarity over the segment's clips) against every other segment.
/// Returns the per-caption losses and the gradient of their mean.
pub fn unit_objective(
    sims: &Array2<f64>,
    blocks: &[Range<usize>],
    tau: f64,
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_tau(tau)?;
    let (rows, cols) = sims.dim();
    if blocks.len() != rows || blocks.iter().any(|b| b.is_empty() || b.end > cols) {
        return Err(Error::InvalidArgument(
            "unit objective needs one nonempty block per caption".into(),
        ));
    }
    let mut grad = Array2::zeros((rows, cols));
    let mut losses = Vec::with_capacity(rows);
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let block_means: Vec<f64> = blocks
            .iter()
            .map(|b| {
                sims.row(i)
                    .slice(ndarray::s![b.clone()])
                    .mean()
                    .unwrap_or(0.0)
            })
            .collect();
        let negs: Vec<f64> = block_means
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &m)| m)
            .collect();
        let nce = infonce(block_means[i], &negs, tau)?;
        losses.push(nce.loss);
        let mut neg_iter = nce.d_negs.iter();
        for (k, b) in blocks.iter().enumerate() {
            let d = if k == i {
                nce.d_pos
            } else {
                *neg_iter.next().unwrap()
            };
            let per = scale * d / b.len() as f64;
            for j in b.clone() {
                grad[[i, j]] += per;
            }
        }
    }
    Ok((losses, grad))
}

/// `w_unit · mean(unit) + w_seq · mean(seq)`; an empty side contributes 0.
pub fn joint_loss(unit_terms: &[f64], seq_terms: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if unit_terms.is_empty() && seq_terms.is_empty() {
        return Err(Error::Empty("no loss terms".into()));
    }
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(cfg.w_unit * mean(unit_terms) + cfg.w_seq * mean(seq_terms))
}

/// Chain rule through `S = cos(a_i, b_j)`: returns `dL/da` and `dL/db` given
/// `dL/dS`. Zero vectors receive zero gradient.
pub fn similarity_backward(
    a: &Array2<f64>,
    b: &Array2<f64>,
    grad_s: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (an, a_norm) = normalize_rows(a);
    let (bn, b_norm) = normalize_rows(b);
    let s = similarity_of_units(a, b);
    // d cos / d a_i = (b̂_j - s_ij â_i) / |a_i|
    let mut ga = grad_s.dot(&bn);
    let row_weight = (grad_s * &s).sum_axis(Axis(1));
    for i in 0..a.nrows() {
        if a_norm[i] == 0.0 {
            ga.row_mut(i).fill(0.0);
            continue;
        }
        let corr = &an.row(i) * row_weight[i];
        let mut r = ga.row_mut(i);
        r -= &corr;
        r /= a_norm[i];
    }
    let mut gb = grad_s.t().dot(&an);
    let col_weight = (grad_s * &s).sum_axis(Axis(0));
    for j in 0..b.nrows() {
        if b_norm[j] == 0.0 {
            gb.row_mut(j).fill(0.0);
            continue;
        }
        let corr = &bn.row(j) * col_weight[j];
        let mut r = gb.row_mut(j);
        r -= &corr;
        r /= b_norm[j];
    }
    (ga, gb)
}
