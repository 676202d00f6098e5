//! On-disk dataset format: a JSON manifest listing one record file per pair
//! (or per labeled video), stored either as JSON text or packed binary.
//!
//! Text records are single-line JSON with floats rounded to 9 significant
//! digits. Binary records (`.bin`) hold the same fields with little-endian
//! `f32` payloads:
//!
//! ```text
//! magic "SEQREC\0\0"   8 bytes
//! version u32, kind u32 (0 = pair, 1 = labeled video), dim u32
//! id: len u32 + utf-8      label: len u32 + utf-8 (empty for pairs)
//! n_captions u32, per caption: id len u32 + utf-8
//! n_clips u32, n_segments u32, per segment: caption_index, start, end (u32)
//! captions then clips, row-major f32
//! ```
//! Labeled videos store their frames as clips and no captions or segments.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{EmbeddingSequence, LabeledVideo, Segment, SegmentedPair};
use crate::train::checkpoint::Cursor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const RECORD_MAGIC: &[u8; 8] = b"SEQREC\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    VideoText,
    VideoOnly,
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video-text" => Ok(DatasetMode::VideoText),
            "video-only" => Ok(DatasetMode::VideoOnly),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pair_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dim: usize,
    pub mode: DatasetMode,
    pub entries: Vec<ManifestEntry>,
}

/// One loaded record.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Pair(SegmentedPair),
    Video(LabeledVideo),
}

impl Record {
    pub fn id(&self) -> &str {
        match self {
            Record::Pair(p) => &p.id,
            Record::Video(v) => &v.id,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Record::Pair(p) => p.dim(),
            Record::Video(v) => v.frames.dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `(split, record)` in manifest order.
    pub records: Vec<(String, Record)>,
}

impl Dataset {
    pub fn pairs(&self, split: Option<&str>) -> Vec<SegmentedPair> {
        self.select(split)
            .filter_map(|r| match r {
                Record::Pair(p) => Some(p.clone()),
                Record::Video(_) => None,
            })
            .collect()
    }

    /// Labeled videos; in a video-text dataset every pair's clip sequence
    /// becomes an unlabeled video.
    pub fn videos(&self, split: Option<&str>) -> Vec<LabeledVideo> {
        self.select(split)
            .map(|r| match r {
                Record::Video(v) => v.clone(),
                Record::Pair(p) => LabeledVideo::new(p.id.clone(), "", p.positive.clone()),
            })
            .collect()
    }

    fn select<'a>(&'a self, split: Option<&'a str>) -> impl Iterator<Item = &'a Record> + 'a {
        self.records
            .iter()
            .filter(move |(s, _)| split.is_none_or(|want| s == want))
            .map(|(_, r)| r)
    }
}

/// Rounds to 9 significant digits; rounding twice is a no-op, so rewriting a
/// loaded file reproduces it byte for byte.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionRecord {
    id: String,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitRecord {
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    id: String,
    dim: usize,
    captions: Vec<CaptionRecord>,
    clips: Vec<UnitRecord>,
    segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoRecord {
    id: String,
    dim: usize,
    label: String,
    frames: Vec<UnitRecord>,
}

fn rounded_rows(units: &Array2<f64>) -> Vec<UnitRecord> {
    units
        .rows()
        .into_iter()
        .map(|r| UnitRecord {
            embedding: r.iter().map(|&x| round_sig9(x)).collect(),
        })
        .collect()
}

fn rows_from_records(
    rows: &[UnitRecord],
    dim: usize,
    field: &str,
    path: &Path,
) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for (i, r) in rows.iter().enumerate() {
        if r.embedding.len() != dim {
            return Err(Error::format(
                path,
                format!("{field}[{i}].embedding"),
                format!("expected {dim} values, found {}", r.embedding.len()),
            ));
        }
        flat.extend_from_slice(&r.embedding);
    }
    Array2::from_shape_vec((rows.len(), dim), flat)
        .map_err(|e| Error::format(path, field, e.to_string()))
}

fn sequence(id: String, units: Array2<f64>, field: &str, path: &Path) -> Result<EmbeddingSequence> {
    EmbeddingSequence::new(id, units).map_err(|e| Error::format(path, field, e.to_string()))
}

pub fn record_to_json(record: &Record) -> String {
    let mut out = match record {
        Record::Pair(p) => serde_json::to_string(&PairRecord {
            id: p.id.clone(),
            dim: p.dim(),
            captions: p
                .caption_ids
                .iter()
                .zip(rounded_rows(p.anchor.units()))
                .map(|(id, u)| CaptionRecord {
                    id: id.clone(),
                    embedding: u.embedding,
                })
                .collect(),
            clips: rounded_rows(p.positive.units()),
            segments: p.segments.iter().cloned().collect(),
        }),
        Record::Video(v) => serde_json::to_string(&VideoRecord {
            id: v.id.clone(),
            dim: v.frames.dim(),
            label: v.label.clone(),
            frames: rounded_rows(v.frames.units()),
        }),
    }
    .expect("records serialize");
    out.push('\n');
    out
}

pub fn record_from_json(text: &str, path: &Path, mode: DatasetMode) -> Result<Record> {
    let bad = |e: serde_json::Error| Error::format(path, json_field(&e), e.to_string());
    match mode {
        DatasetMode::VideoText => {
            let r: PairRecord = serde_json::from_str(text).map_err(bad)?;
            let captions: Vec<UnitRecord> = r
                .captions
                .iter()
                .map(|c| UnitRecord {
                    embedding: c.embedding.clone(),
                })
                .collect();
            let anchor = rows_from_records(&captions, r.dim, "captions", path)?;
            let positive = rows_from_records(&r.clips, r.dim, "clips", path)?;
            let ids = r.captions.into_iter().map(|c| c.id).collect();
            let pair = SegmentedPair::new(
                r.id.clone(),
                sequence(format!("{}/text", r.id), anchor, "captions", path)?,
                sequence(format!("{}/video", r.id), positive, "clips", path)?,
                Some(ids),
                r.segments,
            )
            .map_err(|e| Error::format(path, "segments", e.to_string()))?;
            Ok(Record::Pair(pair))
        }
        DatasetMode::VideoOnly => {
            let r: VideoRecord = serde_json::from_str(text).map_err(bad)?;
            let frames = rows_from_records(&r.frames, r.dim, "frames", path)?;
            Ok(Record::Video(LabeledVideo::new(
                r.id.clone(),
                r.label,
                sequence(r.id, frames, "frames", path)?,
            )))
        }
    }
}

/// Best-effort name of the offending field from a serde message such as
/// "missing field `segments`" or "unknown field `foo`".
fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".into())
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_rows(out: &mut Vec<u8>, units: &Array2<f64>) {
    for &x in units.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn record_to_bytes(record: &Record) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORD_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    match record {
        Record::Pair(p) => {
            put_u32(&mut out, 0);
            put_u32(&mut out, p.dim());
            put_str(&mut out, &p.id);
            put_str(&mut out, "");
            put_u32(&mut out, p.anchor.len());
            for id in &p.caption_ids {
                put_str(&mut out, id);
            }
            put_u32(&mut out, p.positive.len());
            put_u32(&mut out, p.segments.len());
            for s in p.segments.iter() {
                put_u32(&mut out, s.caption_index);
                put_u32(&mut out, s.start);
                put_u32(&mut out, s.end);
            }
            put_rows(&mut out, p.anchor.units());
            put_rows(&mut out, p.positive.units());
        }
        Record::Video(v) => {
            put_u32(&mut out, 1);
            put_u32(&mut out, v.frames.dim());
            put_str(&mut out, &v.id);
            put_str(&mut out, &v.label);
            put_u32(&mut out, 0);
            put_u32(&mut out, v.frames.len());
            put_u32(&mut out, 0);
            put_rows(&mut out, v.frames.units());
        }
    }
    out
}

fn read_str(cur: &mut Cursor<'_>, field: &str, path: &Path) -> Result<String> {
    let n = cur.u32(field)? as usize;
    String::from_utf8(cur.take(n, field)?.to_vec())
        .map_err(|_| Error::format(path, field, "invalid utf-8"))
}

fn read_rows(
    cur: &mut Cursor<'_>,
    rows: usize,
    dim: usize,
    field: &str,
    path: &Path,
) -> Result<Array2<f64>> {
    let raw = cur.take(rows * dim * 4, field)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, dim), data).map_err(|e| Error::format(path, field, e.to_string()))
}

pub fn record_from_bytes(bytes: &[u8], path: &Path) -> Result<Record> {
    let mut cur = Cursor::new(bytes, path);
    if cur.take(8, "magic")? != RECORD_MAGIC {
        return Err(Error::format(path, "magic", "not a record file"));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let kind = cur.u32("kind")?;
    let dim = cur.u32("dim")? as usize;
    let id = read_str(&mut cur, "id", path)?;
    let label = read_str(&mut cur, "label", path)?;
    let n_captions = cur.u32("n_captions")? as usize;
    let mut caption_ids = Vec::with_capacity(n_captions);
    for _ in 0..n_captions {
        caption_ids.push(read_str(&mut cur, "caption_id", path)?);
    }
    let n_clips = cur.u32("n_clips")? as usize;
    let n_segments = cur.u32("n_segments")? as usize;
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let c = cur.u32("segments.caption_index")? as usize;
        let s = cur.u32("segments.start")? as usize;
        let e = cur.u32("segments.end")? as usize;
        segments.push(Segment::new(c, s, e));
    }
    let captions = read_rows(&mut cur, n_captions, dim, "captions", path)?;
    let clips = read_rows(&mut cur, n_clips, dim, "clips", path)?;
    if !cur.is_at_end() {
        return Err(Error::format(path, "clips", "trailing bytes after payload"));
    }
    match kind {
        0 => {
            let pair = SegmentedPair::new(
                id.clone(),
                sequence(format!("{id}/text"), captions, "captions", path)?,
                sequence(format!("{id}/video"), clips, "clips", path)?,
                Some(caption_ids),
                segments,
            )
            .map_err(|e| Error::format(path, "segments", e.to_string()))?;
            Ok(Record::Pair(pair))
        }
        1 => Ok(Record::Video(LabeledVideo::new(
            id.clone(),
            label,
            sequence(id, clips, "frames", path)?,
        ))),
        k => Err(Error::format(
            path,
            "kind",
            format!("unknown record kind {k}"),
        )),
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub fn read_record(path: &Path, mode: DatasetMode) -> Result<Record> {
    let record = if is_binary(path) {
        record_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, path)?
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        record_from_json(&text, path, mode)?
    };
    let kind_ok = matches!(
        (&record, mode),
        (Record::Pair(_), DatasetMode::VideoText) | (Record::Video(_), DatasetMode::VideoOnly)
    );
    if !kind_ok {
        return Err(Error::format(
            path,
            "kind",
            "record kind does not match dataset mode",
        ));
    }
    Ok(record)
}

pub fn write_record(path: &Path, record: &Record) -> Result<()> {
    let bytes = if is_binary(path) {
        record_to_bytes(record)
    } else {
        record_to_json(record).into_bytes()
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path, json_field(&e), e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Loads a dataset directory, checking ids, dimensions and labels against
/// the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut records = Vec::with_capacity(manifest.entries.len());
    for (i, entry) in manifest.entries.iter().enumerate() {
        let path = dir.join(&entry.path);
        if !path.exists() {
            return Err(Error::format(
                &manifest_path,
                format!("entries[{i}].path"),
                format!("{} does not exist", entry.path),
            ));
        }
        let record = read_record(&path, manifest.mode)?;
        if record.id() != entry.pair_id {
            return Err(Error::format(
                &path,
                "id",
                format!(
                    "`{}` differs from manifest id `{}`",
                    record.id(),
                    entry.pair_id
                ),
            ));
        }
        if record.dim() != manifest.dim {
            return Err(Error::format(
                &path,
                "dim",
                format!(
                    "{} differs from manifest dim {}",
                    record.dim(),
                    manifest.dim
                ),
            ));
        }
        if let (Record::Video(v), Some(label)) = (&record, &entry.label) {
            if &v.label != label {
                return Err(Error::format(&path, "label", "differs from manifest label"));
            }
        }
        records.push((entry.split.clone(), record));
    }
    Ok(Dataset { manifest, records })
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `records` as a dataset under `dir` (created if needed) and returns
/// the manifest. Record files go to `records/<id>.json` or `.bin`.
pub fn write_dataset(
    dir: &Path,
    mode: DatasetMode,
    records: &[(String, Record)],
    binary: bool,
) -> Result<DatasetManifest> {
    let dim = match records.first() {
        Some((_, r)) => r.dim(),
        None => return Err(Error::Empty("dataset records".into())),
    };
    let sub = dir.join("records");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let ext = if binary { "bin" } else { "json" };
    let mut entries = Vec::with_capacity(records.len());
    let mut used = std::collections::BTreeSet::new();
    for (split, record) in records {
        if record.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: record.dim(),
            });
        }
        let stem = file_stem(record.id());
        if !used.insert(stem.clone()) {
            return Err(Error::InvalidArgument(format!(
                "record ids collide on file name `{stem}`"
            )));
        }
        let rel = format!("records/{stem}.{ext}");
        write_record(&dir.join(&rel), record)?;
        entries.push(ManifestEntry {
            pair_id: record.id().to_string(),
            path: rel,
            split: split.clone(),
            label: match record {
                Record::Video(v) => Some(v.label.clone()),
                Record::Pair(_) => None,
            },
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dim,
        mode,
        entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pair() -> SegmentedPair {
        SegmentedPair::new(
            "vid/01",
            EmbeddingSequence::from_rows("a", &[vec![0.1, 0.2], vec![1.0 / 3.0, -2.5e-7]]).unwrap(),
            EmbeddingSequence::from_rows("v", &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]])
                .unwrap(),
            None,
            vec![Segment::new(0, 0, 1), Segment::new(1, 2, 3)],
        )
        .unwrap()
    }

    #[test]
    fn sig9_rounding_is_idempotent() {
        for x in [1.0 / 3.0, -2.0 / 7.0, 1e-12 / 3.0, 123456789.123] {
            let r = round_sig9(x);
            assert_eq!(round_sig9(r), r);
            assert!((r - x).abs() <= x.abs() * 1e-8);
        }
        assert_eq!(format!("{}", round_sig9(1.0 / 3.0)), "0.333333333");
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let rec = Record::Pair(sample_pair());
        let text = record_to_json(&rec);
        let back = record_from_json(&text, Path::new("x.json"), DatasetMode::VideoText).unwrap();
        assert_eq!(record_to_json(&back), text);
        match back {
            Record::Pair(p) => {
                assert_eq!(p.caption_ids, vec!["vid/01/c0", "vid/01/c1"]);
                assert_eq!(p.background_count(), 1);
            }
            _ => panic!("expected a pair"),
        }
    }

    #[test]
    fn binary_round_trip() {
        for rec in [
            Record::Pair(sample_pair()),
            Record::Video(LabeledVideo::new(
                "v",
                "open-door",
                EmbeddingSequence::from_rows("v", &[vec![0.25, -1.0, 2.0]]).unwrap(),
            )),
        ] {
            let bytes = record_to_bytes(&rec);
            let back = record_from_bytes(&bytes, Path::new("x.bin")).unwrap();
            assert_eq!(record_to_bytes(&back), bytes);
            assert_eq!(back.id(), rec.id());
        }
        let bytes = record_to_bytes(&Record::Pair(sample_pair()));
        let err = record_from_bytes(&bytes[..bytes.len() - 3], Path::new("x.bin")).unwrap_err();
        assert!(err.to_string().contains("clips"), "{err}");
    }

    #[test]
    fn malformed_json_names_the_field() {
        let path = Path::new("p.json");
        let missing = r#"{"id":"a","dim":2,"captions":[],"clips":[]}"#;
        let err = record_from_json(missing, path, DatasetMode::VideoText).unwrap_err();
        assert!(err.to_string().contains("`segments`"), "{err}");

        let short = r#"{"id":"a","dim":2,"captions":[{"id":"c","embedding":[1.0]}],"clips":[{"embedding":[1.0,0.0]}],"segments":[{"caption_index":0,"start":0,"end":1}]}"#;
        let err = record_from_json(short, path, DatasetMode::VideoText).unwrap_err();
        assert!(err.to_string().contains("captions[0].embedding"), "{err}");
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut other = sample_pair();
        other.id = "second".into();
        let records = vec![
            ("train".to_string(), Record::Pair(sample_pair())),
            ("test".to_string(), Record::Pair(other)),
        ];
        write_dataset(a.path(), DatasetMode::VideoText, &records, false).unwrap();
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.pairs(Some("test")).len(), 1);
        write_dataset(b.path(), DatasetMode::VideoText, &loaded.records, false).unwrap();
        for rel in [
            "manifest.json",
            "records/vid_01.json",
            "records/second.json",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![("train".to_string(), Record::Pair(sample_pair()))];
        let mut manifest =
            write_dataset(dir.path(), DatasetMode::VideoText, &records, true).unwrap();
        assert!(load_dataset(dir.path()).is_ok());

        manifest.dim = 3;
        write_manifest(dir.path(), &manifest).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("`dim`"), "{err}");

        manifest.dim = 2;
        manifest.entries[0].path = "records/missing.bin".into();
        write_manifest(dir.path(), &manifest).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("entries[0].path"), "{err}");
    }
}
