//! Commit datasets: the canonical line-delimited record format, the 80/20
//! split, validation carving, and the balanced few-shot sampler.
//!
//! A canonical corpus file holds one JSON object per line:
//!
//! ```text
//! {"id":"c1","label":1,"msg":["fix","leak"],"patches":[["added: free ( p ) ;","removed: return ;"]]}
//! ```
//!
//! Patches are ordered oldest first. Every changed line starts with the
//! marker token `added:` or `removed:`.

pub mod legacy;
pub mod synthetic;

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ADDED_MARKER: &str = "added:";
pub const REMOVED_MARKER: &str = "removed:";

/// Default share of a corpus used for training.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
/// Default share of the training split carved off for validation.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

// keeps floor(fraction * n) from landing one below an exact integer product
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: no records", path.display())]
    NoRecords { path: PathBuf },
    #[error("{}:{line}: malformed record: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: label {value} is not 0 or 1", path.display())]
    BadLabel { path: PathBuf, line: usize, value: i64 },
    #[error("fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("corpus {0:?} has no records")]
    EmptyCorpus(String),
    #[error("insufficient class: scale {scale} needs {needed} {label} records, corpus has {available}")]
    InsufficientClass {
        scale: usize,
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("legacy input {}: {message}", path.display())]
    Legacy { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub enum Label {
    Clean,
    Defective,
}

impl Label {
    pub fn is_defective(self) -> bool {
        self == Label::Defective
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Clean => 0,
            Label::Defective => 1,
        }
    }

    /// 1.0 for defective, 0.0 for clean.
    pub fn target(self) -> f64 {
        f64::from(self.as_u8())
    }
}

impl TryFrom<i64> for Label {
    type Error = String;

    fn try_from(value: i64) -> std::result::Result<Self, Self::Error> {
        match value {
            0 => Ok(Label::Clean),
            1 => Ok(Label::Defective),
            other => Err(format!("label {other} is not 0 or 1")),
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_u8()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Clean => "clean",
            Label::Defective => "defective",
        })
    }
}

/// The changed lines of one file within a commit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Patch {
    pub lines: Vec<String>,
}

impl Patch {
    pub fn new(lines: Vec<String>) -> Self {
        Patch { lines }
    }

    /// The padding patch. Encodes to the zero vector.
    pub fn empty() -> Self {
        Patch { lines: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Builds a patch from added and removed lines, marking each one.
    pub fn from_changes<A, R>(added: A, removed: R) -> Self
    where
        A: IntoIterator,
        A::Item: AsRef<str>,
        R: IntoIterator,
        R::Item: AsRef<str>,
    {
        let mark = |marker: &str, line: &str| {
            let body = line.split_whitespace().collect::<Vec<_>>().join(" ");
            if body.is_empty() {
                marker.to_string()
            } else {
                format!("{marker} {body}")
            }
        };
        let mut lines: Vec<String> = added
            .into_iter()
            .map(|l| mark(ADDED_MARKER, l.as_ref()))
            .collect();
        lines.extend(removed.into_iter().map(|l| mark(REMOVED_MARKER, l.as_ref())));
        Patch { lines }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommitRecord {
    #[serde(rename = "id")]
    pub commit_id: String,
    pub label: Label,
    #[serde(rename = "msg")]
    pub message: Vec<String>,
    pub patches: Vec<Patch>,
}

impl CommitRecord {
    pub fn new(
        commit_id: impl Into<String>,
        label: Label,
        message: Vec<String>,
        patches: Vec<Patch>,
    ) -> Self {
        CommitRecord {
            commit_id: commit_id.into(),
            label,
            message,
            patches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub records: Vec<CommitRecord>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, records: Vec<CommitRecord>) -> Self {
        Corpus {
            name: name.into(),
            records,
        }
    }

    pub fn total_count(&self) -> usize {
        self.records.len()
    }

    pub fn defect_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.label.is_defective())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Canonical file bytes for this corpus.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_records(&mut out, &self.records).expect("writing to a Vec cannot fail");
        out
    }

    /// SHA-256 of the canonical bytes, hex encoded. Used to verify that
    /// every scenario evaluates on the same test split.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_bytes()))
    }

    fn derive(&self, suffix: &str, records: Vec<CommitRecord>) -> Corpus {
        Corpus::new(format!("{}/{}", self.name, suffix), records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// File order is commit order; the earliest records train.
    #[default]
    Chronological,
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 0,
            mode: SplitMode::Chronological,
        }
    }
}

// raw line shape: label kept as an integer so a bad value gets its own error
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    label: i64,
    msg: Vec<String>,
    patches: Vec<Vec<String>>,
}

fn validate_line(line: &str) -> std::result::Result<(), String> {
    let marker = line.split(' ').next().unwrap_or("");
    if marker == ADDED_MARKER || marker == REMOVED_MARKER {
        Ok(())
    } else {
        Err(format!(
            "changed line {line:?} does not start with `{ADDED_MARKER}` or `{REMOVED_MARKER}`"
        ))
    }
}

/// Parses one canonical record. `line_no` is 1-based and only used for errors.
pub fn parse_record(path: &Path, line_no: usize, text: &str) -> Result<CommitRecord> {
    let malformed = |message: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let label = Label::try_from(raw.label).map_err(|_| CorpusError::BadLabel {
        path: path.to_path_buf(),
        line: line_no,
        value: raw.label,
    })?;
    let mut patches = Vec::with_capacity(raw.patches.len());
    for lines in raw.patches {
        if lines.is_empty() {
            return Err(malformed("patch with no changed lines".into()));
        }
        for line in &lines {
            validate_line(line).map_err(malformed)?;
        }
        patches.push(Patch { lines });
    }
    Ok(CommitRecord {
        commit_id: raw.id,
        label,
        message: raw.msg,
        patches,
    })
}

/// Reads a canonical corpus file. Record order follows file order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(path, idx + 1, &line)?);
    }
    if records.is_empty() {
        return Err(CorpusError::NoRecords {
            path: path.to_path_buf(),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    Ok(Corpus::new(name, records))
}

pub fn write_records<W: Write>(mut out: W, records: &[CommitRecord]) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut writer = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    write_records(&mut writer, &corpus.records).map_err(io_err)?;
    writer.flush().map_err(io_err)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(CorpusError::Fraction(fraction))
    }
}

fn floor_share(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64) + FLOOR_SLACK).floor() as usize
}

fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices
}

fn pick(corpus: &Corpus, indices: &[usize]) -> Vec<CommitRecord> {
    indices.iter().map(|&i| corpus.records[i].clone()).collect()
}

/// Splits into train and test. The train half holds exactly
/// `floor(train_fraction * total)` records.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus)> {
    check_fraction(spec.train_fraction)?;
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus(corpus.name.clone()));
    }
    let n_train = floor_share(spec.train_fraction, corpus.len());
    let (train, test) = match spec.mode {
        SplitMode::Chronological => {
            let (a, b) = corpus.records.split_at(n_train);
            (a.to_vec(), b.to_vec())
        }
        SplitMode::Shuffled => {
            let mut order = shuffled_indices(corpus.len(), spec.seed);
            let test_idx = order.split_off(n_train);
            // keep file order inside each half
            order.sort_unstable();
            let mut test_idx = test_idx;
            test_idx.sort_unstable();
            (pick(corpus, &order), pick(corpus, &test_idx))
        }
    };
    Ok((corpus.derive("train", train), corpus.derive("test", test)))
}

/// Carves a validation set of `floor(fraction * |train|)` records out of a
/// training split, chosen by `seed`.
pub fn carve_validation(train: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    check_fraction(fraction)?;
    let n_val = floor_share(fraction, train.len());
    let order = shuffled_indices(train.len(), seed);
    let mut val_idx = order[..n_val].to_vec();
    let mut fit_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    fit_idx.sort_unstable();
    Ok((
        train.derive("fit", pick(train, &fit_idx)),
        train.derive("val", pick(train, &val_idx)),
    ))
}

/// Draws a balanced training sample of exactly `n` records without
/// replacement: `ceil(n/2)` defective and `floor(n/2)` clean. `n = 0`
/// yields an empty corpus.
pub fn few_shot_sample(train: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    let want_defective = n.div_ceil(2);
    let want_clean = n / 2;
    let (defective, clean): (Vec<usize>, Vec<usize>) =
        (0..train.len()).partition(|&i| train.records[i].label.is_defective());
    for (label, needed, pool) in [
        (Label::Defective, want_defective, &defective),
        (Label::Clean, want_clean, &clean),
    ] {
        if pool.len() < needed {
            return Err(CorpusError::InsufficientClass {
                scale: n,
                label,
                needed,
                available: pool.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = defective
        .choose_multiple(&mut rng, want_defective)
        .copied()
        .chain(clean.choose_multiple(&mut rng, want_clean).copied())
        .collect();
    chosen.sort_unstable();
    Ok(train.derive(&format!("{n}-shot"), pick(train, &chosen)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn synthetic(n: usize, defect_every: usize) -> Corpus {
        let records = (0..n)
            .map(|i| {
                let label = if i % defect_every == 0 {
                    Label::Defective
                } else {
                    Label::Clean
                };
                CommitRecord::new(
                    format!("c{i}"),
                    label,
                    vec!["msg".into(), i.to_string()],
                    vec![Patch::from_changes([format!("x = {i} ;")], Vec::<String>::new())],
                )
            })
            .collect();
        Corpus::new("synthetic", records)
    }

    #[test]
    fn ten_line_file_counts_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ten.jsonl");
        let labels = [1, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        let text: String = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                format!(r#"{{"id":"c{i}","label":{l},"msg":["m"],"patches":[["added: a"]]}}"#)
                    + "\n"
            })
            .collect();
        fs::write(&path, text).unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.total_count(), 10);
        assert_eq!(corpus.defect_count(), 3);
        assert_eq!(corpus.records[3].commit_id, "c3");
    }

    #[test]
    fn empty_file_has_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(matches!(err, CorpusError::NoRecords { .. }));
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus("/definitely/not/here.jsonl").unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"label\":0,\"msg\":[],\"patches\":[]}\n{not json\n",
        )
        .unwrap();
        match load_corpus(&path).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_outside_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("label.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"label\":2,\"msg\":[],\"patches\":[]}\n").unwrap();
        match load_corpus(&path).unwrap_err() {
            CorpusError::BadLabel { line, value, .. } => {
                assert_eq!((line, value), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unmarked_changed_line_is_rejected() {
        let path = Path::new("x.jsonl");
        let err = parse_record(
            path,
            7,
            r#"{"id":"a","label":0,"msg":[],"patches":[["int x ;"]]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 7, .. }));
    }

    #[test]
    fn empty_message_and_patch_list_are_allowed() {
        let rec = parse_record(
            Path::new("x"),
            1,
            r#"{"id":"a","label":1,"msg":[],"patches":[]}"#,
        )
        .unwrap();
        assert!(rec.message.is_empty() && rec.patches.is_empty());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let corpus = synthetic(10, 3);
        let (train, test) = split(&corpus, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(train.records[0].commit_id, "c0");
        assert_eq!(test.records[0].commit_id, "c8");

        let big = synthetic(25704, 14);
        let (train, test) = split(&big, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (20563, 5141));
    }

    #[test]
    fn split_rejects_boundary_fractions() {
        let corpus = synthetic(10, 3);
        for bad in [0.0, 1.0, -0.2, 1.5] {
            let spec = SplitSpec {
                train_fraction: bad,
                ..SplitSpec::default()
            };
            assert!(matches!(
                split(&corpus, &spec),
                Err(CorpusError::Fraction(_))
            ));
        }
    }

    #[test]
    fn shuffled_split_is_a_deterministic_partition() {
        let corpus = synthetic(101, 4);
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 9,
            mode: SplitMode::Shuffled,
        };
        let (a_train, a_test) = split(&corpus, &spec).unwrap();
        let (b_train, b_test) = split(&corpus, &spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let train_ids: HashSet<_> = a_train.records.iter().map(|r| &r.commit_id).collect();
        assert!(a_test.records.iter().all(|r| !train_ids.contains(&r.commit_id)));
        assert_eq!(a_train.len() + a_test.len(), 101);
        // differs from the chronological prefix
        let (chrono, _) = split(&corpus, &SplitSpec::default()).unwrap();
        assert_ne!(chrono, a_train);
    }

    #[test]
    fn validation_carve_sizes() {
        let (fit, val) = carve_validation(&synthetic(100, 5), 0.1, 3).unwrap();
        assert_eq!((fit.len(), val.len()), (90, 10));
        let (fit, val) = carve_validation(&synthetic(20563, 5), 0.1, 3).unwrap();
        assert_eq!((fit.len(), val.len()), (18507, 2056));
        assert!(carve_validation(&synthetic(10, 5), 0.0, 3).is_err());
        assert!(carve_validation(&synthetic(10, 5), 1.0, 3).is_err());
    }

    #[test]
    fn few_shot_zero_is_empty() {
        let sample = few_shot_sample(&synthetic(50, 2), 0, 1).unwrap();
        assert!(sample.is_empty());
    }

    #[test]
    fn few_shot_requires_both_classes() {
        // 4 defective records (ids 0, 10, 20, 30) cannot cover ceil(10/2) = 5
        let corpus = synthetic(40, 10);
        assert_eq!(corpus.defect_count(), 4);
        let err = few_shot_sample(&corpus, 10, 1).unwrap_err();
        assert!(err.to_string().contains("insufficient class"));
    }

    #[test]
    fn few_shot_balance_for_every_small_scale() {
        let corpus = synthetic(400, 2);
        for n in 2..=200 {
            let sample = few_shot_sample(&corpus, n, n as u64).unwrap();
            assert_eq!(sample.len(), n);
            assert_eq!(sample.defect_count(), n.div_ceil(2), "n = {n}");
            let ids: HashSet<_> = sample.records.iter().map(|r| &r.commit_id).collect();
            assert_eq!(ids.len(), n, "sampled with replacement at n = {n}");
        }
    }

    #[test]
    fn content_hash_tracks_records() {
        let a = synthetic(5, 2);
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.records[0].label = Label::Clean;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
