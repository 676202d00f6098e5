//! Negative sequences built by shuffling the positive at segment or unit
//! granularity, or by borrowing other pairs' videos.
//!
//! Permutations index the segment-covered clips of a pair (background clips
//! never enter a negative): negative unit `k` is covered clip `perm[k]`. For
//! [`Strategy::VisualAnchor`] the permutation applies to the captions
//! instead.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::SegmentedPair;

/// Default number of negatives per anchor.
pub const DEFAULT_NEGATIVE_COUNT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SegOnly,
    SegUnit,
    WithinSeg,
    AllUnit,
    Unpaired,
    Joint,
    VisualAnchor,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::SegOnly,
        Strategy::SegUnit,
        Strategy::WithinSeg,
        Strategy::AllUnit,
        Strategy::Unpaired,
        Strategy::Joint,
        Strategy::VisualAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SegOnly => "seg-only",
            Strategy::SegUnit => "seg-unit",
            Strategy::WithinSeg => "within-seg",
            Strategy::AllUnit => "all-unit",
            Strategy::Unpaired => "unpaired",
            Strategy::Joint => "joint",
            Strategy::VisualAnchor => "visual-anchor",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativePermutation {
    pub strategy: Strategy,
    pub perm: Vec<usize>,
    /// Pair whose clips (or, for visual-anchor, captions) are permuted.
    pub source_id: String,
}

impl NegativePermutation {
    /// Whether `perm` reorders the anchor's captions rather than clips.
    pub fn permutes_anchor(&self) -> bool {
        self.strategy == Strategy::VisualAnchor
    }
}

pub fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

pub fn is_bijection(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn shuffled_non_identity<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(n >= 2);
    let mut order: Vec<usize> = (0..n).collect();
    loop {
        order.shuffle(rng);
        if !is_identity(&order) {
            return order;
        }
    }
}

fn block_permutation<R: Rng + ?Sized>(
    blocks: &[Range<usize>],
    shuffle_within: bool,
    rng: &mut R,
) -> Vec<usize> {
    let order = shuffled_non_identity(blocks.len(), rng);
    let mut perm = Vec::with_capacity(blocks.last().map_or(0, |b| b.end));
    for b in order {
        let start = perm.len();
        perm.extend(blocks[b].clone());
        if shuffle_within {
            perm[start..].shuffle(rng);
        }
    }
    perm
}

/// Reorders whole segments (never the identity order), optionally shuffling
/// the clips inside each segment as well.
pub fn permute_segments<R: Rng + ?Sized>(
    pair: &SegmentedPair,
    shuffle_within: bool,
    rng: &mut R,
) -> Result<NegativePermutation> {
    let blocks = pair.compact_blocks();
    if blocks.len() < 2 {
        return Err(Error::DegeneratePair(format!(
            "pair `{}` has {} segment(s); segment shuffling needs 2",
            pair.id,
            blocks.len()
        )));
    }
    Ok(NegativePermutation {
        strategy: if shuffle_within {
            Strategy::SegUnit
        } else {
            Strategy::SegOnly
        },
        perm: block_permutation(&blocks, shuffle_within, rng),
        source_id: pair.id.clone(),
    })
}

/// Shuffles clips inside their own segments; segment positions are kept.
pub fn permute_within_segments<R: Rng + ?Sized>(
    pair: &SegmentedPair,
    rng: &mut R,
) -> Result<NegativePermutation> {
    let blocks = pair.compact_blocks();
    if blocks.iter().all(|b| b.len() < 2) {
        return Err(Error::DegeneratePair(format!(
            "pair `{}` has only single-clip segments",
            pair.id
        )));
    }
    let n = blocks.last().map_or(0, |b| b.end);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        for b in &blocks {
            perm[b.clone()].shuffle(rng);
        }
        if !is_identity(&perm) {
            break;
        }
    }
    Ok(NegativePermutation {
        strategy: Strategy::WithinSeg,
        perm,
        source_id: pair.id.clone(),
    })
}

/// Uniform non-identity permutation of every covered clip.
pub fn permute_all_units<R: Rng + ?Sized>(
    pair: &SegmentedPair,
    rng: &mut R,
) -> Result<NegativePermutation> {
    let n = pair.covered_indices().len();
    if n < 2 {
        return Err(Error::DegeneratePair(format!(
            "pair `{}` has {n} covered clip(s)",
            pair.id
        )));
    }
    Ok(NegativePermutation {
        strategy: Strategy::AllUnit,
        perm: shuffled_non_identity(n, rng),
        source_id: pair.id.clone(),
    })
}

/// Another pair's video, in its own order.
pub fn sample_unpaired<R: Rng + ?Sized>(
    corpus: &[SegmentedPair],
    anchor_id: &str,
    rng: &mut R,
) -> Result<NegativePermutation> {
    let others: Vec<&SegmentedPair> = corpus.iter().filter(|p| p.id != anchor_id).collect();
    if others.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no unpaired video available for `{anchor_id}` in a corpus of {}",
            corpus.len()
        )));
    }
    let other = others[rng.random_range(0..others.len())];
    Ok(NegativePermutation {
        strategy: Strategy::Unpaired,
        perm: (0..other.covered_indices().len()).collect(),
        source_id: other.id.clone(),
    })
}

/// Caption-block reordering of the anchor; each caption is one block.
pub fn permute_anchor<R: Rng + ?Sized>(
    pair: &SegmentedPair,
    rng: &mut R,
) -> Result<NegativePermutation> {
    let n = pair.anchor.len();
    if n < 2 {
        return Err(Error::DegeneratePair(format!(
            "pair `{}` has a single caption",
            pair.id
        )));
    }
    Ok(NegativePermutation {
        strategy: Strategy::VisualAnchor,
        perm: shuffled_non_identity(n, rng),
        source_id: pair.id.clone(),
    })
}

/// `count` negatives for `pair` under `strategy`.
///
/// Segment-level strategies fall back to all-unit shuffling on pairs with too
/// few segments; when that is impossible too the result is empty and the pair
/// should be skipped. `joint` gives the odd extra negative to seg-unit.
/// Duplicates are possible when a pair admits few distinct permutations.
pub fn generate_negatives<R: Rng + ?Sized>(
    pair: &SegmentedPair,
    corpus: &[SegmentedPair],
    strategy: Strategy,
    count: usize,
    rng: &mut R,
) -> Result<Vec<NegativePermutation>> {
    generate_negatives_with(pair, corpus, strategy, count, false, rng)
}

/// As [`generate_negatives`]; with `shuffle_unpaired` every borrowed video is
/// additionally all-unit shuffled (the video-only regime).
pub fn generate_negatives_with<R: Rng + ?Sized>(
    pair: &SegmentedPair,
    corpus: &[SegmentedPair],
    strategy: Strategy,
    count: usize,
    shuffle_unpaired: bool,
    rng: &mut R,
) -> Result<Vec<NegativePermutation>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "negative count must be at least 1".into(),
        ));
    }
    if strategy == Strategy::Joint {
        let shuffled = count.div_ceil(2);
        let mut out = generate_negatives_with(
            pair,
            corpus,
            Strategy::SegUnit,
            shuffled,
            shuffle_unpaired,
            rng,
        )?;
        if count > shuffled {
            out.extend(generate_negatives_with(
                pair,
                corpus,
                Strategy::Unpaired,
                count - shuffled,
                shuffle_unpaired,
                rng,
            )?);
        }
        return Ok(out);
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let drawn = match strategy {
            Strategy::SegOnly => permute_segments(pair, false, rng),
            Strategy::SegUnit => permute_segments(pair, true, rng),
            Strategy::WithinSeg => permute_within_segments(pair, rng),
            Strategy::AllUnit => permute_all_units(pair, rng),
            Strategy::VisualAnchor => permute_anchor(pair, rng),
            Strategy::Unpaired => sample_unpaired(corpus, &pair.id, rng).map(|mut neg| {
                if shuffle_unpaired && neg.perm.len() >= 2 {
                    neg.perm = shuffled_non_identity(neg.perm.len(), rng);
                }
                neg
            }),
            Strategy::Joint => unreachable!("handled above"),
        };
        let neg = match drawn {
            Ok(neg) => neg,
            Err(Error::DegeneratePair(_))
                if matches!(
                    strategy,
                    Strategy::SegOnly | Strategy::SegUnit | Strategy::WithinSeg
                ) =>
            {
                match permute_all_units(pair, rng) {
                    Ok(neg) => neg,
                    Err(Error::DegeneratePair(_)) => return Ok(Vec::new()),
                    Err(e) => return Err(e),
                }
            }
            Err(Error::DegeneratePair(_)) => return Ok(Vec::new()),
            Err(Error::InvalidArgument(_)) if strategy == Strategy::Unpaired => {
                return Ok(Vec::new())
            }
            Err(e) => return Err(e),
        };
        out.push(neg);
    }
    Ok(out)
}
