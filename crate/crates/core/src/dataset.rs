//! Labelled corpora: manifest files, seeded train/validation splits, the
//! accuracy/TPR harness, and a synthetic two-texture corpus for running the
//! pipeline without a real malware collection.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dbn::{self, DbnError, DbnModel};
use crate::imgcodec::{self, InputVector};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: unknown label {label:?}")]
    BadLabel { line: usize, label: String },
    #[error("line {line}: expected `<path>\\t<label>`")]
    BadLine { line: usize },
    #[error("duplicate path {0}")]
    DuplicatePath(PathBuf),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("no malicious samples evaluated; TPR is undefined")]
    NoPositives,
    #[error("no samples could be evaluated")]
    NothingEvaluated,
    #[error(transparent)]
    Model(#[from] DbnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malicious => dbn::MALICIOUS_CLASS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "benign" => Ok(Label::Benign),
            "malicious" => Ok(Label::Malicious),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tab-separated text, one `<path>\t<label>` line per entry.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.path.display(), e.label))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| DatasetError::Io { path: path.to_owned(), source })
    }
}

/// Parses manifest text. Relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Manifest, DatasetError> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (path, label) = raw.rsplit_once('\t').ok_or(DatasetError::BadLine { line })?;
        let label = label
            .trim()
            .parse::<Label>()
            .map_err(|_| DatasetError::BadLabel { line, label: label.trim().to_owned() })?;
        let path = PathBuf::from(path);
        let path = match base {
            Some(base) if path.is_relative() => base.join(path),
            _ => path,
        };
        entries.push(ManifestEntry { path, label });
    }
    Manifest::new(entries)
}

/// Loads a manifest file; relative entries resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
    parse_manifest(&text, path.parent())
}

/// Seeded shuffle, then the first `round(len · fraction)` entries go to training.
pub fn split(m: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let mut entries = m.entries.clone();
    entries.shuffle(&mut seed::rng(seed, &[]));
    let n_train = (entries.len() as f64 * train_fraction).round() as usize;
    let test = entries.split_off(n_train);
    Ok((Manifest { entries }, Manifest { entries: test }))
}

/// Confusion counts with malicious as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Malicious, Label::Malicious) => self.tp += 1,
            (Label::Benign, Label::Malicious) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Malicious, Label::Benign) => self.fn_ += 1,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (self.tp + self.tn) as f64 / total as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        let positives = self.tp + self.fn_;
        (positives > 0).then(|| self.tp as f64 / positives as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub tpr: f64,
    /// files that could not be read or converted, with the reason
    pub failures: Vec<(PathBuf, String)>,
}

impl EvalReport {
    pub fn from_counts(counts: ConfusionCounts, failures: Vec<(PathBuf, String)>) -> Result<Self, DatasetError> {
        let accuracy = counts.accuracy().ok_or(DatasetError::NothingEvaluated)?;
        let tpr = counts.tpr().ok_or(DatasetError::NoPositives)?;
        Ok(Self { counts, accuracy, tpr, failures })
    }

    /// Fixed-format report: total, tp, fp, tn, fn, accuracy, tpr.
    pub fn render(&self) -> String {
        let c = &self.counts;
        format!(
            "total\t{}\ntp\t{}\nfp\t{}\ntn\t{}\nfn\t{}\naccuracy\t{:.4}\ntpr\t{:.4}\n",
            c.total(),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            self.accuracy,
            self.tpr
        )
    }
}

pub fn classify_probability(p: f64, threshold: f64) -> Label {
    if p >= threshold {
        Label::Malicious
    } else {
        Label::Benign
    }
}

fn check_threshold(threshold: f64) -> Result<(), DatasetError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(DatasetError::InvalidThreshold(threshold))
    }
}

/// Side of the square input image a model expects, if its input size is a perfect square.
pub fn input_side(model: &DbnModel) -> Option<usize> {
    let n = model.input_size();
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

/// Scores every manifest file through byteplot → downscale → model.
/// Unreadable or unconvertible files are reported in `failures` and skipped.
pub fn evaluate(model: &DbnModel, m: &Manifest, threshold: f64) -> Result<EvalReport, DatasetError> {
    check_threshold(threshold)?;
    let side = input_side(model).ok_or_else(|| {
        DatasetError::Model(DbnError::InvalidArch(format!("input size {} is not a square image", model.input_size())))
    })?;
    let outcomes: Vec<Result<(Label, f64), (PathBuf, String)>> = m
        .entries
        .par_iter()
        .map(|e| {
            let fail = |msg: String| (e.path.clone(), msg);
            let bytes = fs::read(&e.path).map_err(|err| fail(err.to_string()))?;
            let x = imgcodec::file_to_input(&bytes, side).map_err(|err| fail(err.to_string()))?;
            let p = dbn::predict_malicious(model, &x).map_err(|err| fail(err.to_string()))?;
            Ok((e.label, p))
        })
        .collect();
    let mut counts = ConfusionCounts::default();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok((label, p)) => counts.record(label, classify_probability(p, threshold)),
            Err(f) => failures.push(f),
        }
    }
    EvalReport::from_counts(counts, failures)
}

/// Same harness over already-converted inputs.
pub fn evaluate_inputs(model: &DbnModel, data: &[(InputVector, Label)], threshold: f64) -> Result<EvalReport, DatasetError> {
    check_threshold(threshold)?;
    let counts = data
        .par_iter()
        .map(|(x, label)| {
            let p = dbn::predict_malicious(model, x)?;
            let mut c = ConfusionCounts::default();
            c.record(*label, classify_probability(p, threshold));
            Ok(c)
        })
        .try_reduce(ConfusionCounts::default, |a, b| Ok(a.merge(b)))
        .map_err(|e: DbnError| DatasetError::Model(e))?;
    EvalReport::from_counts(counts, Vec::new())
}

/// Reads and converts every manifest entry into a labelled input vector.
pub fn load_inputs(m: &Manifest, side: usize) -> Result<Vec<(InputVector, Label)>, DatasetError> {
    m.entries
        .par_iter()
        .map(|e| {
            let bytes = fs::read(&e.path).map_err(|source| DatasetError::Io { path: e.path.clone(), source })?;
            let x = imgcodec::file_to_input(&bytes, side).map_err(|err| DatasetError::Io {
                path: e.path.clone(),
                source: io::Error::new(io::ErrorKind::InvalidData, err),
            })?;
            Ok((x, e.label))
        })
        .collect()
}

// Synthetic corpus: a 32-pixel-wide byteplot striped either horizontally
// (benign) or vertically (malicious), with random band period, phase,
// levels and per-pixel noise.
const SYNTH_WIDTH: usize = 32;

/// Bytes of one synthetic sample. Deterministic in `(label, seed)`.
pub fn synthetic_file(label: Label, seed: u64) -> Vec<u8> {
    let mut rng = seed::rng(seed, &[label.class_index() as u64]);
    let rows = rng.gen_range(24..=40);
    let period = rng.gen_range(8..=16);
    let phase = rng.gen_range(0..period);
    let high: i32 = rng.gen_range(225..=255);
    let low: i32 = rng.gen_range(0..=30);
    let mut out = Vec::with_capacity(rows * SYNTH_WIDTH);
    for y in 0..rows {
        for x in 0..SYNTH_WIDTH {
            let coord = match label {
                Label::Benign => y,
                Label::Malicious => x,
            };
            let base = if (coord + phase) % period < period / 2 { high } else { low };
            let noisy = base + rng.gen_range(-20..=20);
            out.push(noisy.clamp(0, 255) as u8);
        }
    }
    out
}

/// `per_class` samples of each class with seeds derived from `seed`, benign first.
pub fn synthetic_samples(per_class: usize, seed: u64) -> Vec<(Vec<u8>, Label)> {
    [Label::Benign, Label::Malicious]
        .into_iter()
        .flat_map(|label| {
            (0..per_class).map(move |i| {
                let s = seed::derive(seed, &[label.class_index() as u64, i as u64]);
                (synthetic_file(label, s), label)
            })
        })
        .collect()
}

/// Converted synthetic samples at the given input side.
pub fn synthetic_inputs(per_class: usize, seed: u64, side: usize) -> Vec<(InputVector, Label)> {
    synthetic_samples(per_class, seed)
        .into_iter()
        .map(|(bytes, label)| (imgcodec::file_to_input(&bytes, side).expect("synthetic files are non-empty"), label))
        .collect()
}

/// Writes the synthetic corpus into `dir` plus a `manifest.tsv` with relative paths.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, per_class: usize, seed: u64) -> Result<Manifest, DatasetError> {
    let dir = dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    let mut counters = [0usize; 2];
    for (bytes, label) in synthetic_samples(per_class, seed) {
        let idx = &mut counters[label.class_index()];
        let name = format!("{}_{:05}.bin", label, idx);
        *idx += 1;
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        entries.push(ManifestEntry { path: PathBuf::from(name), label });
    }
    let manifest = Manifest::new(entries)?;
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| ManifestEntry {
                    path: PathBuf::from(format!("f{i}")),
                    label: if i % 2 == 0 { Label::Benign } else { Label::Malicious },
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_two_lines() {
        let m = parse_manifest("a.bin\tbenign\n\nb.bin\tmalicious\n", None).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].label, Label::Malicious);
    }

    #[test]
    fn parse_rejects_unknown_label() {
        assert!(matches!(
            parse_manifest("a.bin\tbenign\nb.bin\tspam\n", None),
            Err(DatasetError::BadLabel { line: 2, .. })
        ));
    }

    #[test]
    fn parse_rejects_duplicates_and_missing_tab() {
        assert!(matches!(
            parse_manifest("a\tbenign\na\tmalicious\n", None),
            Err(DatasetError::DuplicatePath(_))
        ));
        assert!(matches!(parse_manifest("a benign\n", None), Err(DatasetError::BadLine { line: 1 })));
    }

    #[test]
    fn empty_manifest_is_valid() {
        assert!(parse_manifest("", None).unwrap().is_empty());
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let m = parse_manifest("x.bin\tbenign\n/abs.bin\tbenign\n", Some(Path::new("/data"))).unwrap();
        assert_eq!(m.entries[0].path, PathBuf::from("/data/x.bin"));
        assert_eq!(m.entries[1].path, PathBuf::from("/abs.bin"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let m = manifest(10);
        let (a, b) = split(&m, 0.8, 4).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split(&m, 0.8, 4).unwrap(), (a, b));
        assert!(split(&m, 1.0, 4).is_err());
        assert!(split(&m, 0.0, 4).is_err());
    }

    #[test]
    fn metrics_arithmetic() {
        let c = ConfusionCounts { tp: 98, fn_: 2, tn: 90, fp: 10 };
        let r = EvalReport::from_counts(c, vec![]).unwrap();
        assert!((r.accuracy - 0.94).abs() < 1e-12);
        assert!((r.tpr - 0.98).abs() < 1e-12);
        assert_eq!(
            r.render(),
            "total\t200\ntp\t98\nfp\t10\ntn\t90\nfn\t2\naccuracy\t0.9400\ntpr\t0.9800\n"
        );
    }

    #[test]
    fn tpr_undefined_without_positives() {
        let c = ConfusionCounts { tn: 5, ..Default::default() };
        assert!(matches!(EvalReport::from_counts(c, vec![]), Err(DatasetError::NoPositives)));
    }

    #[test]
    fn perfect_predictor() {
        let mut c = ConfusionCounts::default();
        for label in [Label::Benign, Label::Malicious, Label::Malicious] {
            c.record(label, label);
        }
        assert_eq!(c.accuracy(), Some(1.0));
        assert_eq!(c.tpr(), Some(1.0));
    }

    #[test]
    fn threshold_boundary_is_malicious() {
        assert_eq!(classify_probability(0.5, 0.5), Label::Malicious);
        assert_eq!(classify_probability(0.4999, 0.5), Label::Benign);
    }

    #[test]
    fn synthetic_samples_are_deterministic_and_distinct() {
        assert_eq!(synthetic_file(Label::Benign, 3), synthetic_file(Label::Benign, 3));
        assert_ne!(synthetic_file(Label::Benign, 3), synthetic_file(Label::Benign, 4));
        let s = synthetic_samples(3, 9);
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|(b, _)| b.len() % SYNTH_WIDTH == 0 && b.len() < 10 * 1024));
    }

    #[test]
    fn synthetic_textures_differ_in_orientation() {
        // row means vary for horizontal stripes, column means for vertical ones
        let spread = |bytes: &[u8], by_row: bool| {
            let rows = bytes.len() / SYNTH_WIDTH;
            let means: Vec<f64> = if by_row {
                (0..rows)
                    .map(|y| bytes[y * SYNTH_WIDTH..(y + 1) * SYNTH_WIDTH].iter().map(|&b| b as f64).sum::<f64>() / SYNTH_WIDTH as f64)
                    .collect()
            } else {
                (0..SYNTH_WIDTH)
                    .map(|x| (0..rows).map(|y| bytes[y * SYNTH_WIDTH + x] as f64).sum::<f64>() / rows as f64)
                    .collect()
            };
            means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min)
        };
        let benign = synthetic_file(Label::Benign, 1);
        let malicious = synthetic_file(Label::Malicious, 1);
        assert!(spread(&benign, true) > 60.0 && spread(&benign, false) < 40.0);
        assert!(spread(&malicious, false) > 60.0 && spread(&malicious, true) < 40.0);
    }

    #[test]
    fn evaluate_reports_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_synthetic_corpus(dir.path(), 2, 5).unwrap();
        for e in &mut m.entries {
            e.path = dir.path().join(&e.path);
        }
        m.entries.push(ManifestEntry { path: dir.path().join("missing.bin"), label: Label::Benign });
        let model = DbnModel::zeros(crate::dbn::DbnArch {
            layer_sizes: vec![16, 4],
            ..Default::default()
        })
        .unwrap();
        let r = evaluate(&model, &m, 0.5).unwrap();
        assert_eq!(r.counts.total(), 4);
        assert_eq!(r.failures.len(), 1);
        // zero model scores 0.5 → everything flagged malicious
        assert_eq!((r.counts.tp, r.counts.fp), (2, 2));
    }

    #[test]
    fn corpus_manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic_corpus(dir.path(), 3, 1).unwrap();
        let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.len(), written.len());
        assert!(loaded.entries.iter().all(|e| e.path.exists()));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let m = manifest(n);
            let (a, b) = split(&m, frac, seed).unwrap();
            prop_assert_eq!(a.len() + b.len(), n);
            let mut all: Vec<_> = a.entries.iter().chain(&b.entries).map(|e| e.path.clone()).collect();
            all.sort();
            let mut orig: Vec<_> = m.entries.iter().map(|e| e.path.clone()).collect();
            orig.sort();
            prop_assert_eq!(all, orig);
        }

        #[test]
        fn raising_threshold_never_raises_tpr(probs in proptest::collection::vec(0.0f64..1.0, 1..50), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let tpr = |t: f64| {
                let mut c = ConfusionCounts::default();
                for &p in &probs {
                    c.record(Label::Malicious, classify_probability(p, t));
                }
                c.tpr().unwrap()
            };
            prop_assert!(tpr(hi) <= tpr(lo));
        }
    }
}
