//! Evaluation protocols: full-video and caption-clip retrieval, metric
//! ensembles, step localization, pair-match percentage and episodic few-shot
//! recognition.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_similarity, Measure};
use crate::error::{Error, Result};
use crate::rng::derived;
use crate::seqcore::{similarity_of_units, LabeledVideo, SegmentedPair};
use crate::train::ProjectionModel;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Score used to rank candidate videos for a paragraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RetrievalMeasure {
    Dtw,
    Otam,
    CapAvg,
    DtwCapAvg,
    OtamCapAvg,
}

impl RetrievalMeasure {
    pub const ALL: [RetrievalMeasure; 5] = [
        RetrievalMeasure::Dtw,
        RetrievalMeasure::Otam,
        RetrievalMeasure::CapAvg,
        RetrievalMeasure::DtwCapAvg,
        RetrievalMeasure::OtamCapAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrievalMeasure::Dtw => "dtw",
            RetrievalMeasure::Otam => "otam",
            RetrievalMeasure::CapAvg => "capavg",
            RetrievalMeasure::DtwCapAvg => "dtw+capavg",
            RetrievalMeasure::OtamCapAvg => "otam+capavg",
        }
    }

    fn alignment(self) -> Option<Measure> {
        match self {
            RetrievalMeasure::Dtw | RetrievalMeasure::DtwCapAvg => Some(Measure::Dtw),
            RetrievalMeasure::Otam | RetrievalMeasure::OtamCapAvg => Some(Measure::Otam),
            RetrievalMeasure::CapAvg => None,
        }
    }

    fn uses_votes(self) -> bool {
        matches!(
            self,
            RetrievalMeasure::CapAvg | RetrievalMeasure::DtwCapAvg | RetrievalMeasure::OtamCapAvg
        )
    }
}

impl fmt::Display for RetrievalMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RetrievalMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown retrieval measure `{s}`")))
    }
}

/// Whether background clips take part in full-video retrieval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Background {
    #[default]
    Keep,
    Remove,
}

impl FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep" => Ok(Background::Keep),
            "remove" => Ok(Background::Remove),
            _ => Err(Error::InvalidArgument(format!(
                "unknown background mode `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub target: String,
    /// Zero-based rank of the best ground-truth candidate.
    pub rank: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub measure: String,
    pub recalls: BTreeMap<usize, f64>,
    pub aux: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_query: Vec<QueryRecord>,
}

impl EvalReport {
    fn new(task: &str, measure: &str) -> Self {
        Self {
            task: task.into(),
            measure: measure.into(),
            ..Self::default()
        }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.get(&k).copied()
    }

    /// Rows `task,measure,k,value`; auxiliary scalars use their name in the
    /// `k` column.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .recalls
            .iter()
            .map(|(k, v)| format!("{},{},{},{:.6}", self.task, self.measure, k, v))
            .collect();
        rows.extend(
            self.aux
                .iter()
                .map(|(name, v)| format!("{},{},{},{:.6}", self.task, self.measure, name, v)),
        );
        rows
    }

    pub fn per_query_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.per_query {
            out.push_str(&serde_json::to_string(q).expect("query records serialize"));
            out.push('\n');
        }
        out
    }
}

pub const CSV_HEADER: &str = "task,measure,k,value";

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .flat_map(|r| {
            let recalls = r.recalls.iter().map(|(k, v)| (format!("R@{k}"), *v));
            let aux = r.aux.iter().map(|(n, v)| (n.clone(), *v));
            recalls
                .chain(aux)
                .map(|(k, v)| [r.task.clone(), r.measure.clone(), k, format!("{v:.4}")])
                .collect::<Vec<_>>()
        })
        .collect();
    let header = ["task", "measure", "metric", "value"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 4]| {
        format!(
            "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        )
    };
    let mut out = line(header);
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}

/// Zero-based rank of `target` when sorting by descending score; equal
/// scores keep input order.
pub fn stable_rank(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < target))
        .count()
}

fn check_ks(ks: &[usize], n_candidates: usize) -> Result<Vec<usize>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    match ks.last() {
        None => Err(Error::InvalidArgument("no recall cut-offs given".into())),
        Some(_) if ks[0] == 0 => Err(Error::InvalidArgument("K must be at least 1".into())),
        Some(&max) if max > n_candidates => Err(Error::InvalidArgument(format!(
            "K={max} exceeds the {n_candidates} available candidates"
        ))),
        _ => Ok(ks),
    }
}

fn recalls_from_ranks(ranks: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect()
}

fn check_canonical(corpus: &[SegmentedPair]) -> Result<()> {
    match corpus.iter().find(|p| !p.is_canonical()) {
        Some(p) => Err(Error::InvalidArgument(format!(
            "pair `{}` is not canonical",
            p.id
        ))),
        None => Ok(()),
    }
}

fn check_dims(corpus: &[SegmentedPair], model: &ProjectionModel) -> Result<()> {
    match corpus.iter().find(|p| p.dim() != model.input_dim()) {
        Some(p) => Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: p.dim(),
        }),
        None => Ok(()),
    }
}

struct Projected {
    anchors: Vec<Array2<f64>>,
    videos: Vec<Array2<f64>>,
}

fn project_corpus(
    corpus: &[SegmentedPair],
    model: &ProjectionModel,
    background: Background,
) -> Result<Projected> {
    check_dims(corpus, model)?;
    let act = model.activation;
    let parts: Vec<Result<(Array2<f64>, Array2<f64>)>> = corpus
        .par_iter()
        .map(|p| {
            let clips = match background {
                Background::Keep => p.positive.units().clone(),
                Background::Remove => p.covered_positive()?.units().clone(),
            };
            let (a, _) = model.anchor_head().forward(p.anchor.units(), act);
            let (v, _) = model.positive_head().forward(&clips, act);
            Ok((a, v))
        })
        .collect();
    let (anchors, videos) = parts
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Projected { anchors, videos })
}

fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; scores.len()]
    }
}

/// Caption-vote scores of one paragraph against every video. Each caption
/// votes for the owner of its globally most similar clip (first in corpus
/// order on ties). The fractional part ranks equal vote counts by the summed
/// best-clip similarity of all captions to each video.
fn vote_scores(sims: &[Array2<f64>]) -> Vec<f64> {
    let n_captions = sims[0].nrows();
    let mut votes = vec![0usize; sims.len()];
    for i in 0..n_captions {
        let mut best = (f64::NEG_INFINITY, 0);
        for (v, s) in sims.iter().enumerate() {
            let m = s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m > best.0 {
                best = (m, v);
            }
        }
        votes[best.1] += 1;
    }
    let n = n_captions as f64;
    sims.iter()
        .zip(&votes)
        .map(|(s, &count)| {
            let summed: f64 = s
                .axis_iter(Axis(0))
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum();
            count as f64 + (summed + n) / (2.0 * n + 1.0)
        })
        .collect()
}

fn retrieval_scores(sims: &[Array2<f64>], measure: RetrievalMeasure) -> Result<Vec<f64>> {
    let aligned = match measure.alignment() {
        Some(m) => Some(
            sims.iter()
                .map(|s| align_similarity(s, m, true).map(|r| r.score))
                .collect::<Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    let votes = measure.uses_votes().then(|| vote_scores(sims));
    Ok(match (aligned, votes) {
        (Some(a), None) => a,
        (None, Some(v)) => v,
        (Some(a), Some(v)) => min_max(&a)
            .iter()
            .zip(min_max(&v))
            .map(|(x, y)| 0.5 * (x + y))
            .collect(),
        (None, None) => unreachable!("every measure scores somehow"),
    })
}

/// Paragraph-to-video retrieval: each paragraph ranks every video in the
/// corpus and counts a hit at K when its own video is in the top K.
pub fn retrieval_full(
    corpus: &[SegmentedPair],
    model: &ProjectionModel,
    measure: RetrievalMeasure,
    background: Background,
    ks: &[usize],
) -> Result<EvalReport> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "retrieval needs at least two videos".into(),
        ));
    }
    let ks = check_ks(ks, corpus.len())?;
    check_canonical(corpus)?;
    let proj = project_corpus(corpus, model, background)?;
    let records: Vec<Result<QueryRecord>> = (0..corpus.len())
        .into_par_iter()
        .map(|q| {
            let sims: Vec<Array2<f64>> = proj
                .videos
                .iter()
                .map(|v| similarity_of_units(&proj.anchors[q], v))
                .collect();
            let scores = retrieval_scores(&sims, measure)?;
            Ok(QueryRecord {
                query: corpus[q].id.clone(),
                target: corpus[q].id.clone(),
                rank: stable_rank(&scores, q),
                scores,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
    let mut report = EvalReport::new("retrieval-full", measure.name());
    report.recalls = recalls_from_ranks(&ranks, &ks);
    report.per_query = records;
    Ok(report)
}

/// Caption-to-clip retrieval over every clip of every video; a caption hits
/// at K when any clip of its own segment is in the top K.
pub fn retrieval_clip(
    corpus: &[SegmentedPair],
    model: &ProjectionModel,
    ks: &[usize],
) -> Result<EvalReport> {
    check_canonical(corpus)?;
    let total_clips: usize = corpus.iter().map(|p| p.positive.len()).sum();
    let ks = check_ks(ks, total_clips)?;
    let proj = project_corpus(corpus, model, Background::Keep)?;
    let clip_views: Vec<_> = proj.videos.iter().map(|v| v.view()).collect();
    let all_clips =
        ndarray::concatenate(Axis(0), &clip_views).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut offsets = Vec::with_capacity(corpus.len());
    let mut acc = 0;
    for p in corpus {
        offsets.push(acc);
        acc += p.positive.len();
    }
    let per_pair: Vec<Vec<QueryRecord>> = corpus
        .par_iter()
        .enumerate()
        .map(|(v, pair)| {
            let sims = similarity_of_units(&proj.anchors[v], &all_clips);
            pair.segments
                .iter()
                .map(|seg| {
                    let row: Vec<f64> = sims.row(seg.caption_index).to_vec();
                    let rank = seg
                        .range()
                        .map(|j| stable_rank(&row, offsets[v] + j))
                        .min()
                        .expect("segments are non-empty");
                    QueryRecord {
                        query: pair.caption_ids[seg.caption_index].clone(),
                        target: pair.id.clone(),
                        rank,
                        scores: Vec::new(),
                    }
                })
                .collect()
        })
        .collect();
    let records: Vec<QueryRecord> = per_pair.into_iter().flatten().collect();
    if records.is_empty() {
        return Err(Error::Empty("caption queries".into()));
    }
    let ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
    let mut report = EvalReport::new("retrieval-clip", "cosine");
    report.recalls = recalls_from_ranks(&ranks, &ks);
    report.per_query = records;
    Ok(report)
}

/// Fraction of steps whose most similar clip (background included, first
/// index on ties) falls inside the step's ground-truth range.
pub fn localization_recall(pair: &SegmentedPair, model: &ProjectionModel) -> Result<f64> {
    if pair.segments.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "pair `{}` has no segments",
            pair.id
        )));
    }
    check_dims(std::slice::from_ref(pair), model)?;
    let a = model.project_anchor(&pair.anchor)?;
    let v = model.project_positive(&pair.positive)?;
    let sims = similarity_of_units(a.units(), v.units());
    let hits = pair
        .segments
        .iter()
        .filter(|seg| {
            let row = sims.row(seg.caption_index);
            let best = argmax_first(row.iter().copied());
            seg.range().contains(&best)
        })
        .count();
    Ok(hits as f64 / pair.segments.len() as f64)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, x) in values.enumerate() {
        if x > best.0 {
            best = (x, i);
        }
    }
    best.1
}

/// Mean localization recall over a corpus.
pub fn localization_report(
    corpus: &[SegmentedPair],
    model: &ProjectionModel,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("localization corpus".into()));
    }
    let values = corpus
        .par_iter()
        .map(|p| localization_recall(p, model))
        .collect::<Result<Vec<f64>>>()?;
    let mut report = EvalReport::new("localize", "argmax");
    report.aux.insert(
        "recall".into(),
        values.iter().sum::<f64>() / values.len() as f64,
    );
    Ok(report)
}

/// Share of alignment-path entries whose clip lies inside the matched
/// caption's ground-truth segment. Background clips are excluded.
pub fn pair_match_percentage(
    pair: &SegmentedPair,
    model: &ProjectionModel,
    measure: Measure,
) -> Result<f64> {
    check_dims(std::slice::from_ref(pair), model)?;
    let a = model.project_anchor(&pair.anchor)?;
    let v = model.project_positive(&pair.covered_positive()?)?;
    let sims = similarity_of_units(a.units(), v.units());
    let result = align_similarity(&sims, measure, true)?;
    let mut owner = vec![usize::MAX; v.len()];
    for (block, seg) in pair.compact_blocks().into_iter().zip(pair.segments.iter()) {
        for j in block {
            owner[j] = seg.caption_index;
        }
    }
    let correct = result.path.iter().filter(|&&(i, j)| owner[j] == i).count();
    Ok(correct as f64 / result.path.len() as f64)
}

/// Pair-match percentage averaged over videos.
pub fn mean_pair_match(
    corpus: &[SegmentedPair],
    model: &ProjectionModel,
    measure: Measure,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("pair-match corpus".into()));
    }
    let values = corpus
        .par_iter()
        .map(|p| pair_match_percentage(p, model, measure))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn pair_match_report(
    corpus: &[SegmentedPair],
    model: &ProjectionModel,
    measure: Measure,
) -> Result<EvalReport> {
    let mut report = EvalReport::new("pair-match", &measure.to_string());
    report.aux.insert(
        "percentage".into(),
        mean_pair_match(corpus, model, measure)?,
    );
    Ok(report)
}

/// How a query is compared with a support video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FewshotMeasure {
    Align(Measure),
    /// Cosine similarity of time-averaged frames: ignores order entirely.
    MeanVector,
}

impl FewshotMeasure {
    pub fn name(self) -> String {
        match self {
            FewshotMeasure::Align(m) => m.to_string(),
            FewshotMeasure::MeanVector => "mean-vector".into(),
        }
    }
}

impl FromStr for FewshotMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-vector" => Ok(FewshotMeasure::MeanVector),
            other => other.parse().map(FewshotMeasure::Align),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FewshotConfig {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub measure: FewshotMeasure,
    pub seed: u64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries_per_class: 15,
            episodes: 1000,
            measure: FewshotMeasure::Align(Measure::Dtw),
            seed: 0,
        }
    }
}

/// Mean accuracy over seeded N-way K-shot episodes with a 95% normal
/// interval. Queries go through the anchor head, supports through the
/// positive head; classes are predicted by the mean score over their
/// supports, lowest class index on ties.
pub fn fewshot_eval(
    model: &ProjectionModel,
    novel: &[LabeledVideo],
    cfg: &FewshotConfig,
) -> Result<EvalReport> {
    if cfg.way == 0 || cfg.shot == 0 || cfg.queries_per_class == 0 || cfg.episodes == 0 {
        return Err(Error::InvalidArgument(
            "way, shot, queries and episodes must be at least 1".into(),
        ));
    }
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, v) in novel.iter().enumerate() {
        if v.frames.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: v.frames.dim(),
            });
        }
        classes.entry(v.label.as_str()).or_default().push(i);
    }
    let need = cfg.shot + cfg.queries_per_class;
    let eligible: Vec<&Vec<usize>> = classes.values().filter(|m| m.len() >= need).collect();
    if eligible.len() < cfg.way {
        return Err(Error::InvalidArgument(format!(
            "{} classes have {need} videos, {}-way episodes need {}",
            eligible.len(),
            cfg.way,
            cfg.way
        )));
    }

    let act = model.activation;
    let as_query: Vec<Array2<f64>> = novel
        .par_iter()
        .map(|v| model.anchor_head().forward(v.frames.units(), act).0)
        .collect();
    let as_support: Vec<Array2<f64>> = novel
        .par_iter()
        .map(|v| model.positive_head().forward(v.frames.units(), act).0)
        .collect();
    let means = |xs: &[Array2<f64>]| -> Vec<Array1<f64>> {
        xs.iter()
            .map(|x| x.mean_axis(Axis(0)).expect("videos have frames"))
            .collect()
    };
    let (query_means, support_means) = match cfg.measure {
        FewshotMeasure::MeanVector => (means(&as_query), means(&as_support)),
        FewshotMeasure::Align(_) => (Vec::new(), Vec::new()),
    };

    let score = |q: usize, s: usize| -> Result<f64> {
        match cfg.measure {
            FewshotMeasure::Align(m) => {
                let sims = similarity_of_units(&as_query[q], &as_support[s]);
                Ok(align_similarity(&sims, m, true)?.score)
            }
            FewshotMeasure::MeanVector => {
                let (a, b) = (&query_means[q], &support_means[s]);
                let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
                Ok(if na > 0.0 && nb > 0.0 {
                    a.dot(b) / (na * nb)
                } else {
                    0.0
                })
            }
        }
    };

    let accuracies: Vec<Result<f64>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|episode| {
            let mut rng = derived(cfg.seed, &[episode as u64]);
            let mut picked = index::sample(&mut rng, eligible.len(), cfg.way).into_vec();
            picked.sort_unstable();
            let mut supports = Vec::with_capacity(cfg.way);
            let mut queries = Vec::with_capacity(cfg.way * cfg.queries_per_class);
            for (c, &class) in picked.iter().enumerate() {
                let members = eligible[class];
                let chosen = index::sample(&mut rng, members.len(), need).into_vec();
                supports.push(
                    chosen[..cfg.shot]
                        .iter()
                        .map(|&k| members[k])
                        .collect::<Vec<_>>(),
                );
                queries.extend(chosen[cfg.shot..].iter().map(|&k| (members[k], c)));
            }
            let mut correct = 0usize;
            for &(q, truth) in &queries {
                let mut best = (f64::NEG_INFINITY, 0);
                for (c, sup) in supports.iter().enumerate() {
                    let mut total = 0.0;
                    for &s in sup {
                        total += score(q, s)?;
                    }
                    let mean = total / sup.len() as f64;
                    if mean > best.0 {
                        best = (mean, c);
                    }
                }
                correct += usize::from(best.1 == truth);
            }
            Ok(correct as f64 / queries.len() as f64)
        })
        .collect();
    let accuracies = accuracies.into_iter().collect::<Result<Vec<f64>>>()?;
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ci = if accuracies.len() > 1 {
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    } else {
        0.0
    };
    let mut report = EvalReport::new(
        &format!("fewshot-{}way-{}shot", cfg.way, cfg.shot),
        &cfg.measure.name(),
    );
    report.aux.insert("accuracy".into(), mean);
    report.aux.insert("ci95".into(), ci);
    report.aux.insert("episodes".into(), n);
    Ok(report)
}
