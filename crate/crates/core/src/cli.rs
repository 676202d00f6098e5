//! Command-line surface: argument definitions and the commands behind them.
//!
//! Commands write their primary output to the given writer so they can be
//! driven from tests; `main` only parses arguments and maps errors to exit
//! codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::align::{alignment_score, Measure};
use crate::error::{Error, Result};
use crate::eval::{
    fewshot_eval, localization_report, pair_match_report, reports_to_csv, reports_to_table,
    retrieval_clip, retrieval_full, Background, EvalReport, FewshotConfig, FewshotMeasure,
    RetrievalMeasure,
};
use crate::io::{load_dataset, read_record, write_dataset, Dataset, DatasetMode, Record};
use crate::loss::LossConfig;
use crate::negatives::Strategy;
use crate::synth::{
    gen_corpus, gen_fewshot_corpus, split_classes, FewshotSynthConfig, SynthConfig,
};
use crate::train::{
    checkpoint_bytes, fit, load_checkpoint, Activation, ProjectionModel, Schedule, TrainConfig,
    TrainCorpus, TrainReport,
};

pub const DATA_ENV: &str = "SEQCON_DATA";

#[derive(Debug, Parser)]
#[command(
    name = "seqcon",
    version,
    about = "Sequence-level contrastive learning on embedding sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align one pair file and print its score, distance and path.
    Align(AlignArgs),
    /// Train a projection head and write a checkpoint plus a JSON report.
    Train(TrainArgs),
    /// Run an evaluation protocol.
    Eval(EvalArgs),
    /// Generate a synthetic dataset from a TOML config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Pair record (`.json` or `.bin`).
    #[arg(long)]
    pub pair: PathBuf,
    #[arg(long, default_value = "dtw")]
    pub measure: Measure,
    /// Divide the score by the path length.
    #[arg(long)]
    pub normalize: bool,
    /// Include the warping path in the output.
    #[arg(long)]
    pub emit_path: bool,
    /// Project through this checkpoint first.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Defaults to the dataset's own mode.
    #[arg(long)]
    pub mode: Option<DatasetMode>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Negative strategy; defaults to seg-unit for video-text and unpaired
    /// (shuffled frames of other videos) for video-only.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, default_value_t = crate::negatives::DEFAULT_NEGATIVE_COUNT)]
    pub negatives: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.3)]
    pub w_unit: f64,
    #[arg(long, default_value_t = 0.7)]
    pub w_seq: f64,
    /// Alignment used inside the sequence loss.
    #[arg(long, default_value = "dtw")]
    pub measure: Measure,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Learning-rate schedule: constant or cosine.
    #[arg(long, default_value = "constant")]
    pub schedule: String,
    /// Hidden width of a one-layer ReLU head; the default is a linear head
    /// initialized to the identity.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Output width when `--hidden` is set (defaults to the input width).
    #[arg(long)]
    pub out_dim: Option<usize>,
    /// Separate heads for anchors and positives.
    #[arg(long)]
    pub twin: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; defaults to the checkpoint path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub task: EvalTask,
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Checkpoint; the identity (raw embeddings) when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Write the `task,measure,k,value` CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalTask {
    /// Paragraph-to-video retrieval.
    RetrievalFull {
        #[command(flatten)]
        common: EvalCommon,
        /// Repeatable; all measures when omitted.
        #[arg(long = "measure")]
        measures: Vec<RetrievalMeasure>,
        #[arg(long, default_value = "keep")]
        background: Background,
        #[arg(long, value_delimiter = ',', default_values_t = crate::eval::DEFAULT_KS)]
        ks: Vec<usize>,
        /// Write per-query ranks and scores as JSON lines.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Caption-to-clip retrieval.
    RetrievalClip {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, value_delimiter = ',', default_values_t = crate::eval::DEFAULT_KS)]
        ks: Vec<usize>,
    },
    /// Step localization recall.
    Localize {
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Share of correctly matched caption-clip path entries.
    PairMatch {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, default_value = "dtw")]
        measure: Measure,
    },
    /// N-way K-shot episodes over labeled videos.
    Fewshot {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 1)]
        shot: usize,
        #[arg(long, default_value_t = 15)]
        queries: usize,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Repeatable: dtw, otam or mean-vector. Defaults to dtw.
        #[arg(long = "measure")]
        measures: Vec<FewshotMeasure>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Synth config file: exactly one of `[paired]` or `[fewshot]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    /// Write packed `.bin` records instead of JSON.
    #[serde(default)]
    pub binary: bool,
    /// Classes assigned to the `train` split of a few-shot corpus; the rest
    /// form `test`. Defaults to half, rounded up.
    #[serde(default)]
    pub base_classes: Option<usize>,
    pub paired: Option<SynthConfig>,
    pub fewshot: Option<FewshotSynthConfig>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Align(a) => cmd_align(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(a.task, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn load_model(path: Option<&Path>, dim: usize) -> Result<ProjectionModel> {
    match path {
        Some(p) => {
            let model = load_checkpoint(p)?;
            if model.input_dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: model.input_dim(),
                });
            }
            Ok(model)
        }
        None => Ok(ProjectionModel::identity(dim)),
    }
}

#[derive(Serialize)]
struct AlignOutput {
    measure: Measure,
    score: f64,
    distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<Vec<(usize, usize)>>,
}

pub fn cmd_align(args: &AlignArgs, out: &mut dyn Write) -> Result<()> {
    let pair = match read_record(&args.pair, DatasetMode::VideoText)? {
        Record::Pair(p) => p,
        Record::Video(_) => unreachable!("read_record checks the kind"),
    };
    let model = load_model(args.model.as_deref(), pair.dim())?;
    let anchor = model.project_anchor(&pair.anchor)?;
    let positive = model.project_positive(&pair.positive)?;
    let (score, result) = alignment_score(&anchor, &positive, args.measure, args.normalize)?;
    let record = AlignOutput {
        measure: args.measure,
        score,
        distance: result.distance,
        path: args.emit_path.then_some(result.path),
    };
    let mut line = serde_json::to_string(&record).expect("alignment output serializes");
    line.push('\n');
    emit(out, &line)
}

fn resolve_mode(dataset: &Dataset, requested: Option<DatasetMode>) -> Result<DatasetMode> {
    match (dataset.manifest.mode, requested) {
        (m, None) => Ok(m),
        (DatasetMode::VideoOnly, Some(DatasetMode::VideoText)) => Err(Error::InvalidArgument(
            "a video-only dataset cannot be trained in video-text mode".into(),
        )),
        (_, Some(m)) => Ok(m),
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let schedule = match args.schedule.as_str() {
        "constant" => Schedule::Constant,
        "cosine" => Schedule::Cosine,
        s => return Err(Error::InvalidArgument(format!("unknown schedule `{s}`"))),
    };
    let dataset = load_dataset(&args.data)?;
    let mode = resolve_mode(&dataset, args.mode)?;
    let corpus = match mode {
        DatasetMode::VideoText => TrainCorpus::Pairs(dataset.pairs(Some(&args.split))),
        DatasetMode::VideoOnly => TrainCorpus::Videos(dataset.videos(Some(&args.split))),
    };
    let strategy = args.strategy.unwrap_or(match mode {
        DatasetMode::VideoText => Strategy::SegUnit,
        DatasetMode::VideoOnly => Strategy::Unpaired,
    });
    let cfg = TrainConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_pairs: args.batch,
        neg_strategy: strategy,
        neg_count: args.negatives,
        loss: LossConfig {
            tau: args.tau,
            w_unit: args.w_unit,
            w_seq: args.w_seq,
            measure: args.measure,
            ..LossConfig::default()
        },
        seed: args.seed,
        schedule,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let dim = dataset.manifest.dim;
    let mut model = match args.hidden {
        Some(h) => ProjectionModel::with_hidden(
            dim,
            h,
            args.out_dim.unwrap_or(dim),
            Activation::Relu,
            args.seed,
        )?,
        None if args.out_dim.is_some() => {
            return Err(Error::InvalidArgument("--out-dim requires --hidden".into()))
        }
        None => ProjectionModel::identity(dim),
    };
    if args.twin {
        model = model.into_twin();
    }
    let report = fit(&corpus, model, &cfg)?;
    let model = report.final_model();
    let ckpt = checkpoint_bytes(model);
    fs::write(&args.out, &ckpt).map_err(|e| Error::io(&args.out, e))?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_train_report(&report_path, &report, &cfg)?;
    let first = report.loss_curve.first().copied().unwrap_or(f64::NAN);
    let last = report.loss_curve.last().copied().unwrap_or(f64::NAN);
    emit(
        out,
        &format!(
            "trained {} pairs ({} skipped), {} steps, strategy {}, loss {:.6} -> {:.6}\ncheckpoint {}\nreport {}\n",
            report.trained_pairs,
            report.skipped_pairs,
            report.steps,
            strategy,
            first,
            last,
            args.out.display(),
            report_path.display()
        ),
    )
}

#[derive(Serialize)]
struct TrainReportFile<'a> {
    config: &'a TrainConfig,
    #[serde(flatten)]
    report: &'a TrainReport,
}

fn write_train_report(path: &Path, report: &TrainReport, cfg: &TrainConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&TrainReportFile {
        config: cfg,
        report,
    })
    .expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv(path: Option<&Path>, reports: &[EvalReport]) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, reports_to_csv(reports)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

struct Loaded {
    dataset: Dataset,
    model: ProjectionModel,
}

fn load_for_eval(common: &EvalCommon) -> Result<Loaded> {
    let dataset = load_dataset(&common.data)?;
    let model = load_model(common.model.as_deref(), dataset.manifest.dim)?;
    Ok(Loaded { dataset, model })
}

fn paired_split(loaded: &Loaded, split: &str) -> Result<Vec<crate::seqcore::SegmentedPair>> {
    if loaded.dataset.manifest.mode != DatasetMode::VideoText {
        return Err(Error::InvalidArgument(
            "this protocol needs a video-text dataset".into(),
        ));
    }
    let pairs = loaded.dataset.pairs(Some(split));
    if pairs.is_empty() {
        return Err(Error::Empty(format!("split `{split}`")));
    }
    Ok(pairs)
}

pub fn cmd_eval(task: EvalTask, out: &mut dyn Write) -> Result<()> {
    let (reports, common) = match task {
        EvalTask::RetrievalFull {
            common,
            measures,
            background,
            ks,
            per_query,
        } => {
            let loaded = load_for_eval(&common)?;
            let pairs = paired_split(&loaded, &common.split)?;
            let measures = if measures.is_empty() {
                RetrievalMeasure::ALL.to_vec()
            } else {
                measures
            };
            let mut reports = Vec::with_capacity(measures.len());
            for m in measures {
                reports.push(retrieval_full(&pairs, &loaded.model, m, background, &ks)?);
            }
            if let Some(p) = per_query {
                let text: String = reports.iter().map(EvalReport::per_query_jsonl).collect();
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            (reports, common)
        }
        EvalTask::RetrievalClip { common, ks } => {
            let loaded = load_for_eval(&common)?;
            let pairs = paired_split(&loaded, &common.split)?;
            (vec![retrieval_clip(&pairs, &loaded.model, &ks)?], common)
        }
        EvalTask::Localize { common } => {
            let loaded = load_for_eval(&common)?;
            let pairs = paired_split(&loaded, &common.split)?;
            (vec![localization_report(&pairs, &loaded.model)?], common)
        }
        EvalTask::PairMatch { common, measure } => {
            let loaded = load_for_eval(&common)?;
            let pairs = paired_split(&loaded, &common.split)?;
            (
                vec![pair_match_report(&pairs, &loaded.model, measure)?],
                common,
            )
        }
        EvalTask::Fewshot {
            common,
            way,
            shot,
            queries,
            episodes,
            measures,
            seed,
        } => {
            let loaded = load_for_eval(&common)?;
            let videos = loaded.dataset.videos(Some(&common.split));
            let measures = if measures.is_empty() {
                vec![FewshotMeasure::Align(Measure::Dtw)]
            } else {
                measures
            };
            let mut reports = Vec::with_capacity(measures.len());
            for measure in measures {
                let cfg = FewshotConfig {
                    way,
                    shot,
                    queries_per_class: queries,
                    episodes,
                    measure,
                    seed,
                };
                reports.push(fewshot_eval(&loaded.model, &videos, &cfg)?);
            }
            (reports, common)
        }
    };
    write_csv(common.csv.as_deref(), &reports)?;
    emit(out, &reports_to_table(&reports))
}

pub fn read_synth_file(path: &Path) -> Result<SynthFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SynthFile = toml::from_str(&text).map_err(|e| {
        let field = e
            .message()
            .split('`')
            .nth(1)
            .unwrap_or("config")
            .to_string();
        Error::format(path, field, e.message().to_string())
    })?;
    match (&file.paired, &file.fewshot) {
        (Some(_), None) | (None, Some(_)) => Ok(file),
        _ => Err(Error::format(
            path,
            "paired/fewshot",
            "exactly one of [paired] or [fewshot] is required",
        )),
    }
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let file = read_synth_file(&args.config)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    if let Some(cfg) = &file.paired {
        if file.base_classes.is_some() {
            return Err(Error::InvalidArgument(
                "base_classes only applies to [fewshot]".into(),
            ));
        }
        let corpus = gen_corpus(cfg)?;
        let records: Vec<(String, Record)> = corpus
            .train
            .iter()
            .map(|p| ("train".to_string(), Record::Pair(p.clone())))
            .chain(
                corpus
                    .test
                    .iter()
                    .map(|p| ("test".to_string(), Record::Pair(p.clone()))),
            )
            .collect();
        write_dataset(&args.out, DatasetMode::VideoText, &records, file.binary)?;
        let truth_path = args.out.join("truth.json");
        let mut truth = serde_json::to_string_pretty(&corpus.truth).expect("truth serializes");
        truth.push('\n');
        fs::write(&truth_path, truth).map_err(|e| Error::io(&truth_path, e))?;
        emit(
            out,
            &format!(
                "wrote {} train and {} test pairs to {} (confuser rate {:.4})\n",
                corpus.train.len(),
                corpus.test.len(),
                args.out.display(),
                corpus.confuser_rate()
            ),
        )
    } else {
        let cfg = file.fewshot.as_ref().expect("checked by read_synth_file");
        let base = file.base_classes.unwrap_or(cfg.n_classes.div_ceil(2));
        if base >= cfg.n_classes {
            return Err(Error::InvalidArgument(format!(
                "base_classes {base} leaves no novel classes out of {}",
                cfg.n_classes
            )));
        }
        let videos = gen_fewshot_corpus(cfg)?;
        let (train, test) = split_classes(&videos, base);
        let records: Vec<(String, Record)> = train
            .iter()
            .map(|v| ("train".to_string(), Record::Video(v.clone())))
            .chain(
                test.iter()
                    .map(|v| ("test".to_string(), Record::Video(v.clone()))),
            )
            .collect();
        write_dataset(&args.out, DatasetMode::VideoOnly, &records, file.binary)?;
        emit(
            out,
            &format!(
                "wrote {} base-class and {} novel-class videos ({} + {} classes) to {}\n",
                train.len(),
                test.len(),
                base,
                cfg.n_classes - base,
                args.out.display()
            ),
        )
    }
}
