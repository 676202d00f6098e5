//! Trains a projection head on the joint unit/sequence contrastive objective
//! with Adam. Works on video-paragraph pairs and, self-supervised, on
//! unlabeled frame sequences.

pub mod adam;
pub mod checkpoint;
pub mod model;

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{
    joint_loss, seq_infonce_grad_sims, similarity_backward, unit_objective, Candidate, LossConfig,
};
use crate::negatives::{generate_negatives_with, NegativePermutation, Strategy};
use crate::rng::derived;
use crate::seqcore::{similarity_of_units, LabeledVideo, SegmentedPair};

pub use adam::{adam_step, AdamState, DEFAULT_BETAS, DEFAULT_EPS};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
pub use model::{Activation, ProjectionModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub epochs: usize,
    pub batch_pairs: usize,
    pub neg_strategy: Strategy,
    pub neg_count: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam_betas: DEFAULT_BETAS,
            epochs: 10,
            batch_pairs: 8,
            neg_strategy: Strategy::SegUnit,
            neg_count: crate::negatives::DEFAULT_NEGATIVE_COUNT,
            loss: LossConfig::default(),
            seed: 0,
            eval_every: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_pairs == 0 || self.neg_count == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and negative count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Training data in either regime.
#[derive(Clone, Debug)]
pub enum TrainCorpus {
    Pairs(Vec<SegmentedPair>),
    Videos(Vec<LabeledVideo>),
}

impl TrainCorpus {
    /// Pairs plus whether borrowed videos must be frame-shuffled.
    fn to_pairs(&self) -> Result<(Vec<SegmentedPair>, bool)> {
        match self {
            TrainCorpus::Pairs(p) => Ok((p.clone(), false)),
            TrainCorpus::Videos(v) => Ok((
                v.iter()
                    .map(LabeledVideo::as_self_pair)
                    .collect::<Result<_>>()?,
                true,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub evals: Vec<EvalSnapshot>,
    pub seed: u64,
    pub trained_pairs: usize,
    pub skipped_pairs: usize,
    pub steps: u64,
    #[serde(skip)]
    pub model: Option<ProjectionModel>,
}

impl TrainReport {
    pub fn final_model(&self) -> &ProjectionModel {
        self.model.as_ref().expect("report carries its model")
    }
}

/// Loss of one pair against its negatives, the optimal paths of every
/// candidate, and (optionally) the parameter gradient.
#[derive(Clone, Debug)]
pub struct PairObjective {
    pub loss: f64,
    pub unit_loss: f64,
    pub seq_loss: f64,
    pub paths: Vec<Vec<(usize, usize)>>,
    pub grad: Option<ProjectionModel>,
}

/// Joint objective for `pair` with the given negatives. Borrowed videos are
/// looked up in `others` by pair id.
pub fn pair_objective(
    model: &ProjectionModel,
    pair: &SegmentedPair,
    negs: &[NegativePermutation],
    others: &[SegmentedPair],
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<PairObjective> {
    cfg.validate()?;
    if pair.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: pair.dim(),
        });
    }
    let act = model.activation;
    let pos_head = model.positive_head();
    let xa = pair.anchor.units();
    let xp = pair.covered_positive()?.units().clone();
    let (a, cache_a) = model.anchor_head().forward(xa, act);
    let (p, cache_p) = pos_head.forward(&xp, act);

    // borrowed videos, in first-use order
    let mut borrowed: Vec<(&str, Array2<f64>)> = Vec::new();
    let mut candidates = vec![Candidate::identity(0, xp.nrows())];
    for neg in negs {
        let cand = match neg.strategy {
            Strategy::VisualAnchor => Candidate {
                source: 0,
                rows: Some(neg.perm.clone()),
                cols: (0..xp.nrows()).collect(),
            },
            Strategy::Unpaired => {
                let idx = match borrowed.iter().position(|(id, _)| *id == neg.source_id) {
                    Some(k) => k,
                    None => {
                        let other =
                            others
                                .iter()
                                .find(|o| o.id == neg.source_id)
                                .ok_or_else(|| {
                                    Error::InvalidArgument(format!(
                                        "unknown source `{}`",
                                        neg.source_id
                                    ))
                                })?;
                        borrowed
                            .push((other.id.as_str(), other.covered_positive()?.units().clone()));
                        borrowed.len() - 1
                    }
                };
                Candidate {
                    source: idx + 1,
                    rows: None,
                    cols: neg.perm.clone(),
                }
            }
            _ => Candidate {
                source: 0,
                rows: None,
                cols: neg.perm.clone(),
            },
        };
        candidates.push(cand);
    }
    let borrowed_fwd: Vec<_> = borrowed
        .iter()
        .map(|(_, x)| pos_head.forward(x, act))
        .collect();

    let mut sims = vec![similarity_of_units(&a, &p)];
    sims.extend(borrowed_fwd.iter().map(|(o, _)| similarity_of_units(&a, o)));

    let seq = seq_infonce_grad_sims(&sims, &candidates, cfg)?;
    let (unit_losses, unit_grad) = unit_objective(&sims[0], &pair.compact_blocks(), cfg.tau)?;
    let unit_loss = unit_losses.iter().sum::<f64>() / unit_losses.len() as f64;
    let loss = joint_loss(&unit_losses, &[seq.loss], cfg)?;
    let paths = seq
        .entries
        .iter()
        .map(|cells| cells.iter().map(|&(i, j, _)| (i, j)).collect())
        .collect();

    let grad = if with_grad {
        let mut g = model.zeros_like();
        let g_pos = &unit_grad * cfg.w_unit + &seq.by_source[0] * cfg.w_seq;
        let (mut da, dp) = similarity_backward(&a, &p, &g_pos);
        let pos_idx = model.positive_head_index();
        for (k, (o, cache_o)) in borrowed_fwd.iter().enumerate() {
            let g_src = &seq.by_source[k + 1] * cfg.w_seq;
            let (da_k, do_k) = similarity_backward(&a, o, &g_src);
            da += &da_k;
            pos_head.backward(&borrowed[k].1, cache_o, &do_k, act, &mut g.heads[pos_idx]);
        }
        model
            .anchor_head()
            .backward(xa, &cache_a, &da, act, &mut g.heads[0]);
        pos_head.backward(&xp, &cache_p, &dp, act, &mut g.heads[pos_idx]);
        Some(g)
    } else {
        None
    };

    Ok(PairObjective {
        loss,
        unit_loss,
        seq_loss: seq.loss,
        paths,
        grad,
    })
}

fn learning_rate(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let frac = step as f64 / total.max(1) as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Trains `model` on `corpus`; deterministic given `cfg.seed`.
pub fn fit(corpus: &TrainCorpus, model: ProjectionModel, cfg: &TrainConfig) -> Result<TrainReport> {
    fit_with_eval(corpus, model, cfg, |_| Ok(BTreeMap::new()))
}

/// As [`fit`], calling `eval` every `cfg.eval_every` epochs.
pub fn fit_with_eval<F>(
    corpus: &TrainCorpus,
    mut model: ProjectionModel,
    cfg: &TrainConfig,
    eval: F,
) -> Result<TrainReport>
where
    F: Fn(&ProjectionModel) -> Result<BTreeMap<String, f64>>,
{
    cfg.validate()?;
    let (pairs, video_only) = corpus.to_pairs()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if let Some(bad) = pairs.iter().find(|p| p.dim() != model.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: bad.dim(),
        });
    }
    let negatives_for = |idx: usize, stream: &[u64]| {
        let mut rng = derived(cfg.seed, stream);
        generate_negatives_with(
            &pairs[idx],
            &pairs,
            cfg.neg_strategy,
            cfg.neg_count,
            video_only,
            &mut rng,
        )
    };
    let mut trainable = Vec::new();
    for idx in 0..pairs.len() {
        if !negatives_for(idx, &[u64::MAX, idx as u64])?.is_empty() {
            trainable.push(idx);
        }
    }
    if trainable.is_empty() {
        return Err(Error::NoTrainablePairs);
    }

    let mut params = model.to_flat();
    let mut state = AdamState::new(params.len());
    let batches_per_epoch = trainable.len().div_ceil(cfg.batch_pairs) as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order = trainable.clone();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut derived(cfg.seed, &[0, epoch as u64]));
        }
        let mut epoch_losses = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_pairs) {
            // per pair: None when it drew no negatives, else (loss, flat grad)
            type PairStep = Result<Option<(f64, Vec<f64>)>>;
            let results: Vec<PairStep> = batch
                .par_iter()
                .map(|&idx| {
                    let negs = negatives_for(idx, &[1, epoch as u64, idx as u64])?;
                    if negs.is_empty() {
                        return Ok(None);
                    }
                    let obj = pair_objective(&model, &pairs[idx], &negs, &pairs, &cfg.loss, true)?;
                    Ok(Some((obj.loss, obj.grad.expect("requested").to_flat())))
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            let mut count = 0usize;
            for r in results {
                if let Some((loss, g)) = r? {
                    epoch_losses.push(loss);
                    grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= count as f64);
            let lr = learning_rate(cfg, state.t, total_steps);
            adam_step(
                &mut params,
                &grad,
                &mut state,
                lr,
                cfg.adam_betas,
                DEFAULT_EPS,
            )?;
            model.set_flat(&params)?;
        }
        if epoch_losses.is_empty() {
            return Err(Error::NoTrainablePairs);
        }
        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {}",
                epoch + 1
            )));
        }
        loss_curve.push(mean);
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            evals.push(EvalSnapshot {
                epoch: epoch + 1,
                metrics: eval(&model)?,
            });
        }
    }

    Ok(TrainReport {
        loss_curve,
        evals,
        seed: cfg.seed,
        trained_pairs: trainable.len(),
        skipped_pairs: pairs.len() - trainable.len(),
        steps: state.t,
        model: Some(model),
    })
}
