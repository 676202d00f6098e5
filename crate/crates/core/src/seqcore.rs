//! Domain types shared by every other module: embedding sequences, segment
//! maps linking captions to clip ranges, and the cosine kernels that turn two
//! sequences into a similarity or cost matrix.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered list of `dim`-dimensional units (captions, clips or frames).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub id: String,
    units: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn new(id: impl Into<String>, units: Array2<f64>) -> Result<Self> {
        let id = id.into();
        if units.nrows() == 0 {
            return Err(Error::Empty(format!("sequence `{id}` has no units")));
        }
        if units.ncols() == 0 {
            return Err(Error::Empty(format!("sequence `{id}` has zero dimension")));
        }
        if units.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("sequence `{id}`")));
        }
        Ok(Self { id, units })
    }

    pub fn from_rows(id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let id = id.into();
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Empty(format!("sequence `{id}` has no units")))?;
        let mut units = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            units.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Self::new(id, units)
    }

    pub fn dim(&self) -> usize {
        self.units.ncols()
    }

    pub fn len(&self) -> usize {
        self.units.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.units.nrows() == 0
    }

    pub fn units(&self) -> &Array2<f64> {
        &self.units
    }

    pub fn unit(&self, i: usize) -> ArrayView1<'_, f64> {
        self.units.row(i)
    }

    /// Sequence whose k-th unit is `self.unit(order[k])`.
    pub fn reorder(&self, id: impl Into<String>, order: &[usize]) -> Result<Self> {
        if let Some(&bad) = order.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for sequence of length {}",
                self.len()
            )));
        }
        Self::new(id, self.units.select(Axis(0), order))
    }

    /// Same sequence with every unit multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.id.clone(), &self.units * alpha)
    }
}

/// One caption-to-clip-range link; `end` is exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub caption_index: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(caption_index: usize, start: usize, end: usize) -> Self {
        Self {
            caption_index,
            start,
            end,
        }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn overlaps(&self, other: &Segment) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentMap {
    pub entries: Vec<Segment>,
}

impl SegmentMap {
    pub fn new(entries: Vec<Segment>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.entries.iter()
    }

    /// Pairwise disjoint ranges, sorted by start, caption indices increasing.
    pub fn is_disjoint_sorted(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[0].end <= w[1].start && w[0].caption_index < w[1].caption_index)
    }
}

/// A paragraph (anchor) paired with its video (positive) and the segment map
/// linking every caption to a range of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedPair {
    pub id: String,
    pub anchor: EmbeddingSequence,
    pub positive: EmbeddingSequence,
    pub caption_ids: Vec<String>,
    pub segments: SegmentMap,
    pub background_mask: Vec<bool>,
}

impl SegmentedPair {
    /// Builds a pair whose segments are individually valid. Ranges may still
    /// overlap; see [`canonicalize_pair`].
    pub fn new(
        id: impl Into<String>,
        anchor: EmbeddingSequence,
        positive: EmbeddingSequence,
        caption_ids: Option<Vec<String>>,
        segments: Vec<Segment>,
    ) -> Result<Self> {
        let id = id.into();
        if anchor.dim() != positive.dim() {
            return Err(Error::DimensionMismatch {
                expected: anchor.dim(),
                found: positive.dim(),
            });
        }
        let caption_ids = match caption_ids {
            Some(ids) if ids.len() != anchor.len() => {
                return Err(Error::InvalidArgument(format!(
                    "pair `{id}`: {} caption ids for {} captions",
                    ids.len(),
                    anchor.len()
                )))
            }
            Some(ids) => ids,
            None => (0..anchor.len()).map(|i| format!("{id}/c{i}")).collect(),
        };
        let mut seen = vec![false; anchor.len()];
        for seg in &segments {
            if seg.caption_index >= anchor.len() {
                return Err(Error::InvalidArgument(format!(
                    "pair `{id}`: caption index {} out of range ({} captions)",
                    seg.caption_index,
                    anchor.len()
                )));
            }
            if seen[seg.caption_index] {
                return Err(Error::InvalidArgument(format!(
                    "pair `{id}`: caption {} has more than one segment",
                    seg.caption_index
                )));
            }
            seen[seg.caption_index] = true;
            if seg.start >= seg.end || seg.end > positive.len() {
                return Err(Error::InvalidArgument(format!(
                    "pair `{id}`: segment [{}, {}) invalid for {} clips",
                    seg.start,
                    seg.end,
                    positive.len()
                )));
            }
        }
        let mut segments = segments;
        segments.sort_by_key(|s| (s.start, s.caption_index));
        let background_mask = background_mask(positive.len(), &segments);
        Ok(Self {
            id,
            anchor,
            positive,
            caption_ids,
            segments: SegmentMap::new(segments),
            background_mask,
        })
    }

    /// Canonical form: disjoint ranges and exactly one segment per caption,
    /// in caption order.
    pub fn is_canonical(&self) -> bool {
        self.segments.is_disjoint_sorted()
            && self.segments.len() == self.anchor.len()
            && self
                .segments
                .iter()
                .enumerate()
                .all(|(i, s)| s.caption_index == i)
    }

    pub fn dim(&self) -> usize {
        self.anchor.dim()
    }

    /// Clip indices covered by some segment, in segment order.
    pub fn covered_indices(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| s.range()).collect()
    }

    /// Segment ranges re-expressed in the coordinates of
    /// [`Self::covered_positive`].
    pub fn compact_blocks(&self) -> Vec<Range<usize>> {
        let mut offset = 0;
        self.segments
            .iter()
            .map(|s| {
                let r = offset..offset + s.len();
                offset += s.len();
                r
            })
            .collect()
    }

    /// The positive restricted to segment-covered clips: the sequence the
    /// training objective and background-removed evaluation operate on.
    pub fn covered_positive(&self) -> Result<EmbeddingSequence> {
        self.positive
            .reorder(self.positive.id.clone(), &self.covered_indices())
    }

    pub fn background_count(&self) -> usize {
        self.background_mask.iter().filter(|&&b| b).count()
    }
}

fn background_mask(n_clips: usize, segments: &[Segment]) -> Vec<bool> {
    let mut mask = vec![true; n_clips];
    for seg in segments {
        for m in &mut mask[seg.range()] {
            *m = false;
        }
    }
    mask
}

/// A trimmed action video used by the video-only regime and few-shot
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    pub label: String,
    pub frames: EmbeddingSequence,
}

impl LabeledVideo {
    pub fn new(id: impl Into<String>, label: impl Into<String>, frames: EmbeddingSequence) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            frames,
        }
    }

    /// The video as a self-paired sequence: every frame is its own one-unit
    /// segment, so segment shuffles become frame shuffles.
    pub fn as_self_pair(&self) -> Result<SegmentedPair> {
        let n = self.frames.len();
        let segments = (0..n).map(|i| Segment::new(i, i, i + 1)).collect();
        SegmentedPair::new(
            self.id.clone(),
            self.frames.clone(),
            self.frames.clone(),
            None,
            segments,
        )
    }
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cosine_similarity input".into()));
    }
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

/// Rows scaled to unit norm; zero rows stay zero.
pub(crate) fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    (out, norms)
}

/// `S(i, j) = cos(a_i, b_j)` for every unit pair.
pub fn similarity_matrix(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(similarity_of_units(a.units(), b.units()))
}

pub(crate) fn similarity_of_units(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (an, _) = normalize_rows(a);
    let (bn, _) = normalize_rows(b);
    an.dot(&bn.t()).mapv(|s| s.clamp(-1.0, 1.0))
}

/// `D(i, j) = 1 - cos(a_i, b_j)`, entries in `[0, 2]`.
pub fn cost_matrix(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<Array2<f64>> {
    Ok(similarity_matrix(a, b)?.mapv(|s| 1.0 - s))
}

/// Resolves overlapping segments greedily in temporal order: a segment is
/// kept unless it intersects one already kept. Captions whose segment is
/// dropped (or that never had one) are removed from the anchor and the
/// survivors are renumbered.
pub fn canonicalize_pair(raw: &SegmentedPair) -> Result<SegmentedPair> {
    let mut ordered = raw.segments.entries.clone();
    ordered.sort_by_key(|s| (s.start, s.caption_index));
    let mut kept: Vec<Segment> = Vec::with_capacity(ordered.len());
    for seg in ordered {
        if kept.iter().all(|k| !k.overlaps(&seg)) {
            kept.push(seg);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyPair(format!(
            "pair `{}` has no segments left",
            raw.id
        )));
    }
    // Disjoint and start-sorted; caption order must follow clip order for
    // the temporal correspondence to hold.
    let mut last: Option<usize> = None;
    kept.retain(|s| {
        let ok = last.is_none_or(|l| s.caption_index > l);
        if ok {
            last = Some(s.caption_index);
        }
        ok
    });
    let caption_order: Vec<usize> = kept.iter().map(|s| s.caption_index).collect();
    let anchor = raw.anchor.reorder(raw.anchor.id.clone(), &caption_order)?;
    let caption_ids = caption_order
        .iter()
        .map(|&i| raw.caption_ids[i].clone())
        .collect();
    let segments = kept
        .iter()
        .enumerate()
        .map(|(i, s)| Segment::new(i, s.start, s.end))
        .collect();
    SegmentedPair::new(
        raw.id.clone(),
        anchor,
        raw.positive.clone(),
        Some(caption_ids),
        segments,
    )
}
