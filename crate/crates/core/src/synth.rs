//! Seeded synthetic corpora where clips of different steps look alike and
//! only temporal order tells them apart.
//!
//! Embedding layout: leading coordinates carry the main step prototypes, an
//! optional signal block carries a weaker component that always names a
//! clip's true step, and the trailing `appearance_dims` coordinates carry
//! appearance offsets that only clips (never captions) receive. A learned
//! projection can discard the appearance block and amplify the signal block;
//! the identity can do neither.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived;
use crate::seqcore::{EmbeddingSequence, LabeledVideo, Segment, SegmentedPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub videos_per_task: usize,
    pub segments_per_video: usize,
    /// Inclusive range.
    pub clips_per_segment: (usize, usize),
    pub dim: usize,
    pub caption_noise: f64,
    pub clip_noise: f64,
    pub confuser_prob: f64,
    /// Inclusive range.
    pub background_per_video: (usize, usize),
    pub progress_drift: f64,
    pub seed: u64,
    /// Steps available to a task; each video uses `segments_per_video` of
    /// them. 0 means exactly `segments_per_video`.
    pub step_pool: usize,
    /// Give every video its own step order instead of the task's.
    pub shuffle_steps: bool,
    pub appearance_dims: usize,
    /// Mean norm of the per-video appearance offset on clips.
    pub appearance_strength: f64,
    /// Per-coordinate standard deviation of clip-specific appearance noise.
    pub appearance_jitter: f64,
    /// Scale of caption-specific noise in the appearance block; each caption
    /// draws its own magnitude uniformly in `[0, 2 * caption_jitter)`.
    pub caption_jitter: f64,
    /// Weight of a secondary component that always encodes a clip's true
    /// step, even for confusers. Captions carry it at full weight.
    pub step_signal: f64,
    /// Coordinates reserved for the secondary step component, placed just
    /// before the appearance block.
    pub signal_dims: usize,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 10,
            videos_per_task: 10,
            segments_per_video: 5,
            clips_per_segment: (2, 4),
            dim: 32,
            caption_noise: 0.05,
            clip_noise: 0.05,
            confuser_prob: 0.3,
            background_per_video: (0, 2),
            progress_drift: 0.1,
            seed: 0,
            step_pool: 0,
            shuffle_steps: false,
            appearance_dims: 0,
            appearance_strength: 0.0,
            appearance_jitter: 0.0,
            caption_jitter: 0.0,
            step_signal: 0.0,
            signal_dims: 0,
            test_fraction: 0.2,
        }
    }
}

fn check_range(name: &str, (lo, hi): (usize, usize), min: usize) -> Result<()> {
    if lo < min || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi"
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn step_pool_size(&self) -> usize {
        if self.step_pool == 0 {
            self.segments_per_video
        } else {
            self.step_pool
        }
    }

    fn has_signal(&self) -> bool {
        self.step_signal > 0.0
    }

    /// Coordinates holding the main step prototypes.
    fn content_dims(&self) -> usize {
        self.dim
            .saturating_sub(self.appearance_dims)
            .saturating_sub(if self.has_signal() {
                self.signal_dims
            } else {
                0
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.videos_per_task == 0 || self.segments_per_video == 0 {
            return Err(Error::InvalidArgument(
                "all counts must be at least 1".into(),
            ));
        }
        check_range("clips_per_segment", self.clips_per_segment, 1)?;
        check_range("background_per_video", self.background_per_video, 0)?;
        if !(0.0..1.0).contains(&self.confuser_prob) {
            return Err(Error::InvalidArgument(
                "confuser_prob must lie in [0, 1)".into(),
            ));
        }
        for (name, v) in [
            ("caption_noise", self.caption_noise),
            ("clip_noise", self.clip_noise),
            ("progress_drift", self.progress_drift),
            ("appearance_strength", self.appearance_strength),
            ("step_signal", self.step_signal),
            ("appearance_jitter", self.appearance_jitter),
            ("caption_jitter", self.caption_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidArgument(
                "test_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.step_pool != 0 && self.step_pool < self.segments_per_video {
            return Err(Error::InvalidArgument(
                "step_pool must be at least segments_per_video".into(),
            ));
        }
        if self.appearance_dims + self.signal_dims > self.dim {
            return Err(Error::InvalidArgument(
                "appearance and signal blocks exceed dim".into(),
            ));
        }
        if self.content_dims() < self.step_pool_size() {
            return Err(Error::InvalidArgument(format!(
                "{} content dimensions cannot hold {} orthogonal step prototypes",
                self.content_dims(),
                self.step_pool_size()
            )));
        }
        if self.has_signal() && self.signal_dims < self.step_pool_size() {
            return Err(Error::InvalidArgument(format!(
                "{} signal dimensions cannot hold {} orthogonal step signals",
                self.signal_dims,
                self.step_pool_size()
            )));
        }
        Ok(())
    }
}

/// What generated a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClipOrigin {
    Step {
        segment: usize,
    },
    /// Inside `segment` but drawn from the prototype of another step.
    Confuser {
        segment: usize,
        source_step: usize,
    },
    Background,
}

impl ClipOrigin {
    pub fn segment(self) -> Option<usize> {
        match self {
            ClipOrigin::Step { segment } | ClipOrigin::Confuser { segment, .. } => Some(segment),
            ClipOrigin::Background => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub pair_id: String,
    pub task: usize,
    /// Task-level step index described by each caption.
    pub steps: Vec<usize>,
    pub clips: Vec<ClipOrigin>,
}

impl PairTruth {
    /// Segment ranges implied by the clip labels.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for (j, origin) in self.clips.iter().enumerate() {
            if let Some(seg) = origin.segment() {
                match out.last_mut() {
                    Some(last) if last.caption_index == seg && last.end == j => last.end = j + 1,
                    _ => out.push(Segment::new(seg, j, j + 1)),
                }
            }
        }
        out
    }

    pub fn confuser_count(&self) -> usize {
        self.clips
            .iter()
            .filter(|c| matches!(c, ClipOrigin::Confuser { .. }))
            .count()
    }

    pub fn segment_clip_count(&self) -> usize {
        self.clips.iter().filter(|c| c.segment().is_some()).count()
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<SegmentedPair>,
    pub test: Vec<SegmentedPair>,
    /// Indexed like `train` followed by `test`.
    pub truth: Vec<PairTruth>,
}

impl SynthCorpus {
    /// Fraction of segment clips drawn from another step's prototype.
    pub fn confuser_rate(&self) -> f64 {
        let confusers: usize = self.truth.iter().map(PairTruth::confuser_count).sum();
        let total: usize = self.truth.iter().map(PairTruth::segment_clip_count).sum();
        confusers as f64 / total.max(1) as f64
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    loop {
        let v = gaussian(rng, n, 1.0);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// `k` orthonormal vectors in `R^n` from a Gaussian matrix (Gram-Schmidt
/// orthogonalization of its columns, i.e. the Q factor of a QR decomposition).
pub fn orthonormal_prototypes(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
) -> Result<Vec<Array1<f64>>> {
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {k} orthonormal vectors in {n} dimensions"
        )));
    }
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian(rng, n, 1.0);
        for _ in 0..2 {
            for b in &basis {
                let proj = v.dot(b);
                v.scaled_add(-proj, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    Ok(basis)
}

/// Places a content-block vector in full coordinates.
fn embed(content: &Array1<f64>, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    out.slice_mut(s![..content.len()]).assign(content);
    out
}

fn appearance(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Array1<f64> {
    let mut out = Array1::zeros(cfg.dim);
    if cfg.appearance_dims > 0 && cfg.appearance_strength > 0.0 {
        let strength = cfg.appearance_strength * rng.random_range(0.5..1.5);
        let dir = unit(rng, cfg.appearance_dims);
        out.slice_mut(s![cfg.dim - cfg.appearance_dims..])
            .assign(&(dir * strength));
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, dim: usize, appearance_dims: usize, sigma: f64) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    if appearance_dims > 0 && sigma > 0.0 {
        out.slice_mut(s![dim - appearance_dims..])
            .assign(&gaussian(rng, appearance_dims, sigma));
    }
    out
}

fn rows_to_array(rows: &[Array1<f64>]) -> Array2<f64> {
    let dim = rows[0].len();
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

const BACKGROUND_POOL: usize = 8;

/// Generates a paired corpus and splits it by video into train and test.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let content = cfg.content_dims();
    let k = cfg.segments_per_video;
    let pool = cfg.step_pool_size();

    let mut bg_rng = derived(cfg.seed, &[0]);
    let background: Vec<Array1<f64>> = (0..BACKGROUND_POOL)
        .map(|_| embed(&unit(&mut bg_rng, content), cfg.dim))
        .collect();

    let mut pairs = Vec::new();
    let mut truth = Vec::new();
    for task in 0..cfg.n_tasks {
        let mut task_rng = derived(cfg.seed, &[1, task as u64]);
        let protos: Vec<Array1<f64>> = orthonormal_prototypes(&mut task_rng, content, pool)?
            .iter()
            .map(|p| embed(p, cfg.dim))
            .collect();
        let signals: Vec<Array1<f64>> = if cfg.has_signal() {
            orthonormal_prototypes(&mut task_rng, cfg.signal_dims, pool)?
                .iter()
                .map(|q| {
                    let mut out = Array1::zeros(cfg.dim);
                    out.slice_mut(s![content..content + cfg.signal_dims])
                        .assign(q);
                    out
                })
                .collect()
        } else {
            Vec::new()
        };
        let caption_protos: Vec<Array1<f64>> = if cfg.has_signal() {
            protos
                .iter()
                .zip(&signals)
                .map(|(p, q)| (p + q) / std::f64::consts::SQRT_2)
                .collect()
        } else {
            protos.to_vec()
        };
        let mut script: Vec<usize> = (0..pool).collect();
        script.shuffle(&mut task_rng);
        script.truncate(k);

        for v in 0..cfg.videos_per_task {
            let mut rng = derived(cfg.seed, &[2, task as u64, v as u64]);
            let steps = if cfg.shuffle_steps {
                let mut s: Vec<usize> = (0..pool).collect();
                s.shuffle(&mut rng);
                s.truncate(k);
                s
            } else {
                script.clone()
            };
            let captions: Vec<Array1<f64>> = steps
                .iter()
                .map(|&st| {
                    let sigma = rng.random_range(0.0..2.0) * cfg.caption_jitter;
                    &caption_protos[st]
                        + &jitter(&mut rng, cfg.dim, cfg.appearance_dims, sigma)
                        + &gaussian(&mut rng, cfg.dim, cfg.caption_noise)
                })
                .collect();
            let look = appearance(&mut rng, cfg);

            let n_bg = rng.random_range(cfg.background_per_video.0..=cfg.background_per_video.1);
            // background clips go into the gaps before, between and after segments
            let mut gaps = vec![0usize; k + 1];
            for _ in 0..n_bg {
                gaps[rng.random_range(0..=k)] += 1;
            }

            let mut clips = Vec::new();
            let mut origins = Vec::new();
            let mut segments = Vec::with_capacity(k);
            let background_clip = |rng: &mut ChaCha8Rng, clips: &mut Vec<Array1<f64>>| {
                let b = &background[rng.random_range(0..BACKGROUND_POOL)];
                clips.push(
                    b + &look
                        + &jitter(rng, cfg.dim, cfg.appearance_dims, cfg.appearance_jitter)
                        + &gaussian(rng, cfg.dim, cfg.clip_noise),
                );
            };
            for (seg, &step) in steps.iter().enumerate() {
                for _ in 0..gaps[seg] {
                    background_clip(&mut rng, &mut clips);
                    origins.push(ClipOrigin::Background);
                }
                let n = rng.random_range(cfg.clips_per_segment.0..=cfg.clips_per_segment.1);
                let drift_dir = embed(&unit(&mut rng, content), cfg.dim);
                let start = clips.len();
                for c in 0..n {
                    let confuse = k > 1 && rng.random_bool(cfg.confuser_prob);
                    let (proto, origin) = if confuse {
                        let mut other = rng.random_range(0..k - 1);
                        if other >= seg {
                            other += 1;
                        }
                        (
                            &protos[steps[other]],
                            ClipOrigin::Confuser {
                                segment: seg,
                                source_step: steps[other],
                            },
                        )
                    } else {
                        (&protos[step], ClipOrigin::Step { segment: seg })
                    };
                    let progress = (c as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    let mut clip = proto
                        + &(&drift_dir * (cfg.progress_drift * progress))
                        + &look
                        + &jitter(
                            &mut rng,
                            cfg.dim,
                            cfg.appearance_dims,
                            cfg.appearance_jitter,
                        )
                        + &gaussian(&mut rng, cfg.dim, cfg.clip_noise);
                    if cfg.has_signal() {
                        clip.scaled_add(cfg.step_signal, &signals[step]);
                    }
                    clips.push(clip);
                    origins.push(origin);
                }
                segments.push(Segment::new(seg, start, start + n));
            }
            for _ in 0..gaps[k] {
                background_clip(&mut rng, &mut clips);
                origins.push(ClipOrigin::Background);
            }

            let id = format!("t{task:03}v{v:03}");
            let pair = SegmentedPair::new(
                id.clone(),
                EmbeddingSequence::new(format!("{id}/text"), rows_to_array(&captions))?,
                EmbeddingSequence::new(format!("{id}/video"), rows_to_array(&clips))?,
                None,
                segments,
            )?;
            pairs.push(pair);
            truth.push(PairTruth {
                pair_id: id,
                task,
                steps,
                clips: origins,
            });
        }
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut derived(cfg.seed, &[3]));
    let n_test = (pairs.len() as f64 * cfg.test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let truth = train_idx
        .iter()
        .chain(&test_idx)
        .map(|&i| truth[i].clone())
        .collect();
    Ok(SynthCorpus {
        train: pick(&train_idx),
        test: pick(&test_idx),
        truth,
    })
}

/// Order-only action classes: every class shows the same prototypes, each in
/// its own temporal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotSynthConfig {
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub n_prototypes: usize,
    /// Inclusive range of frames per prototype occurrence.
    pub frames_per_step: (usize, usize),
    pub dim: usize,
    pub frame_noise: f64,
    pub progress_drift: f64,
    pub appearance_dims: usize,
    pub appearance_strength: f64,
    pub seed: u64,
}

impl Default for FewshotSynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            videos_per_class: 20,
            n_prototypes: 4,
            frames_per_step: (1, 3),
            dim: 16,
            frame_noise: 0.05,
            progress_drift: 0.1,
            appearance_dims: 0,
            appearance_strength: 0.0,
            seed: 0,
        }
    }
}

impl FewshotSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.videos_per_class == 0 || self.n_prototypes == 0 {
            return Err(Error::InvalidArgument(
                "all counts must be at least 1".into(),
            ));
        }
        check_range("frames_per_step", self.frames_per_step, 1)?;
        let orders: f64 = (1..=self.n_prototypes).map(|x| x as f64).product();
        if self.n_classes as f64 > orders {
            return Err(Error::InvalidArgument(format!(
                "{} prototypes admit only {orders} distinct orders",
                self.n_prototypes
            )));
        }
        if self.dim.saturating_sub(self.appearance_dims) < self.n_prototypes {
            return Err(Error::InvalidArgument(format!(
                "{} content dimensions cannot hold {} orthogonal prototypes",
                self.dim.saturating_sub(self.appearance_dims),
                self.n_prototypes
            )));
        }
        for v in [
            self.frame_noise,
            self.progress_drift,
            self.appearance_strength,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "noise levels must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    fn as_paired(&self) -> SynthConfig {
        SynthConfig {
            dim: self.dim,
            appearance_dims: self.appearance_dims,
            appearance_strength: self.appearance_strength,
            ..SynthConfig::default()
        }
    }
}

/// Labeled videos whose classes differ only in the order of shared
/// prototypes. Class labels are `class000`, `class001`, ...
pub fn gen_fewshot_corpus(cfg: &FewshotSynthConfig) -> Result<Vec<LabeledVideo>> {
    cfg.validate()?;
    let content = cfg.dim - cfg.appearance_dims;
    let mut rng = derived(cfg.seed, &[0]);
    let protos: Vec<Array1<f64>> = orthonormal_prototypes(&mut rng, content, cfg.n_prototypes)?
        .iter()
        .map(|p| embed(p, cfg.dim))
        .collect();
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_classes);
    while orders.len() < cfg.n_classes {
        let mut o: Vec<usize> = (0..cfg.n_prototypes).collect();
        o.shuffle(&mut rng);
        if !orders.contains(&o) {
            orders.push(o);
        }
    }

    let paired = cfg.as_paired();
    let mut videos = Vec::with_capacity(cfg.n_classes * cfg.videos_per_class);
    for (c, order) in orders.iter().enumerate() {
        for v in 0..cfg.videos_per_class {
            let mut rng = derived(cfg.seed, &[1, c as u64, v as u64]);
            let look = appearance(&mut rng, &paired);
            let mut frames = Vec::new();
            for &p in order {
                let n = rng.random_range(cfg.frames_per_step.0..=cfg.frames_per_step.1);
                let drift_dir = embed(&unit(&mut rng, content), cfg.dim);
                for f in 0..n {
                    let progress = (f as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    frames.push(
                        &protos[p]
                            + &(&drift_dir * (cfg.progress_drift * progress))
                            + &look
                            + &gaussian(&mut rng, cfg.dim, cfg.frame_noise),
                    );
                }
            }
            let id = format!("class{c:03}/v{v:03}");
            videos.push(LabeledVideo::new(
                id.clone(),
                format!("class{c:03}"),
                EmbeddingSequence::new(id, rows_to_array(&frames))?,
            ));
        }
    }
    Ok(videos)
}

/// Splits labeled videos into (base, novel) by class: the first `n_base`
/// labels in sorted order are base classes.
pub fn split_classes(
    videos: &[LabeledVideo],
    n_base: usize,
) -> (Vec<LabeledVideo>, Vec<LabeledVideo>) {
    let mut labels: Vec<&str> = videos.iter().map(|v| v.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let base: std::collections::BTreeSet<&str> = labels.into_iter().take(n_base).collect();
    videos
        .iter()
        .cloned()
        .partition(|v| base.contains(v.label.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::Measure;
    use crate::eval::{
        fewshot_eval, retrieval_full, Background, FewshotConfig, FewshotMeasure, RetrievalMeasure,
    };
    use crate::train::ProjectionModel;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn prototypes_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = orthonormal_prototypes(&mut rng, 8, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(p[i].dot(&p[j]), expected, epsilon = 1e-12);
            }
        }
        assert!(orthonormal_prototypes(&mut rng, 3, 4).is_err());
    }

    #[test]
    fn dim_below_step_count_is_rejected() {
        let cfg = SynthConfig {
            dim: 4,
            segments_per_video: 5,
            ..SynthConfig::default()
        };
        assert!(gen_corpus(&cfg).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let cfg = SynthConfig::default();
        let a = gen_corpus(&cfg).unwrap();
        let b = gen_corpus(&cfg).unwrap();
        assert_eq!(a.train.len(), 80);
        assert_eq!(a.test.len(), 20);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.truth, b.truth);
        assert!(a
            .train
            .iter()
            .chain(&a.test)
            .all(SegmentedPair::is_canonical));
    }

    #[test]
    fn truth_recovers_segments() {
        let corpus = gen_corpus(&SynthConfig {
            background_per_video: (1, 3),
            ..SynthConfig::default()
        })
        .unwrap();
        for (pair, truth) in corpus.train.iter().chain(&corpus.test).zip(&corpus.truth) {
            assert_eq!(pair.id, truth.pair_id);
            let segs: Vec<Segment> = pair.segments.iter().cloned().collect();
            assert_eq!(truth.segments(), segs);
            let bg = truth
                .clips
                .iter()
                .filter(|c| **c == ClipOrigin::Background)
                .count();
            assert_eq!(bg, pair.background_count());
        }
    }

    #[test]
    fn confuser_rate_matches_probability() {
        let cfg = SynthConfig {
            n_tasks: 40,
            videos_per_task: 25,
            confuser_prob: 0.3,
            seed: 7,
            ..SynthConfig::default()
        };
        let rate = gen_corpus(&cfg).unwrap().confuser_rate();
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn noiseless_corpus_self_retrieves() {
        let cfg = SynthConfig {
            confuser_prob: 0.0,
            caption_noise: 0.0,
            clip_noise: 0.0,
            progress_drift: 0.0,
            background_per_video: (0, 0),
            n_tasks: 5,
            videos_per_task: 4,
            shuffle_steps: true,
            step_pool: 8,
            ..SynthConfig::default()
        };
        let corpus = gen_corpus(&cfg).unwrap();
        let all: Vec<_> = corpus.train.iter().chain(&corpus.test).cloned().collect();
        // videos sharing a step script would tie; keep one per script
        let mut seen = Vec::new();
        let distinct: Vec<_> = all
            .into_iter()
            .zip(&corpus.truth)
            .filter(|(_, t)| {
                let key = (t.task, t.steps.clone());
                let fresh = !seen.contains(&key);
                seen.push(key);
                fresh
            })
            .map(|(p, _)| p)
            .collect();
        let model = ProjectionModel::identity(cfg.dim);
        for m in [RetrievalMeasure::Dtw, RetrievalMeasure::Otam] {
            let r = retrieval_full(&distinct, &model, m, Background::Keep, &[1]).unwrap();
            assert_eq!(r.recall(1), Some(1.0), "{m}");
        }
    }

    #[test]
    fn confusers_hurt_caption_votes_more_than_order() {
        let cfg = SynthConfig {
            confuser_prob: 0.5,
            clip_noise: 0.02,
            caption_noise: 0.02,
            shuffle_steps: true,
            step_pool: 8,
            n_tasks: 5,
            videos_per_task: 10,
            ..SynthConfig::default()
        };
        let corpus = gen_corpus(&cfg).unwrap();
        let all: Vec<_> = corpus.train.iter().chain(&corpus.test).cloned().collect();
        let model = ProjectionModel::identity(cfg.dim);
        let cap = retrieval_full(
            &all,
            &model,
            RetrievalMeasure::CapAvg,
            Background::Keep,
            &[1],
        )
        .unwrap();
        let dtw =
            retrieval_full(&all, &model, RetrievalMeasure::Dtw, Background::Keep, &[1]).unwrap();
        assert!(cap.recall(1).unwrap() < dtw.recall(1).unwrap());
    }

    #[test]
    fn reversed_classes_need_order() {
        let cfg = FewshotSynthConfig {
            n_classes: 2,
            videos_per_class: 10,
            n_prototypes: 3,
            frame_noise: 0.0,
            progress_drift: 0.0,
            frames_per_step: (1, 1),
            dim: 6,
            seed: 1,
            ..FewshotSynthConfig::default()
        };
        let videos = gen_fewshot_corpus(&cfg).unwrap();
        let fs = |measure| FewshotConfig {
            way: 2,
            shot: 1,
            queries_per_class: 5,
            episodes: 200,
            measure,
            seed: 0,
        };
        let model = ProjectionModel::identity(6);
        let dtw = fewshot_eval(&model, &videos, &fs(FewshotMeasure::Align(Measure::Dtw))).unwrap();
        let bag = fewshot_eval(&model, &videos, &fs(FewshotMeasure::MeanVector)).unwrap();
        assert_eq!(dtw.aux["accuracy"], 1.0);
        // identical mean vectors tie, and ties go to the first class
        assert_abs_diff_eq!(bag.aux["accuracy"], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_class_is_trivial() {
        let cfg = FewshotSynthConfig {
            n_classes: 1,
            videos_per_class: 6,
            ..FewshotSynthConfig::default()
        };
        let videos = gen_fewshot_corpus(&cfg).unwrap();
        let r = fewshot_eval(
            &ProjectionModel::identity(cfg.dim),
            &videos,
            &FewshotConfig {
                way: 1,
                shot: 1,
                queries_per_class: 5,
                episodes: 20,
                ..FewshotConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.aux["accuracy"], 1.0);
    }

    #[test]
    fn fewshot_corpus_is_reproducible_and_splits() {
        let cfg = FewshotSynthConfig::default();
        let a = gen_fewshot_corpus(&cfg).unwrap();
        assert_eq!(a, gen_fewshot_corpus(&cfg).unwrap());
        let (base, novel) = split_classes(&a, 15);
        assert_eq!(base.len(), 15 * cfg.videos_per_class);
        assert_eq!(novel.len(), 5 * cfg.videos_per_class);
        assert!(base.iter().all(|v| v.label.as_str() < "class015"));
    }
}
